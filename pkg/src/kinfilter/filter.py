"""Filtering engines for the partially observed kinetic system.

Forward: the unnormalized filtering density solves a Zakai-type SPDE driven
by the observation Brownian motion ``W~``.  Each step applies the adjoint
operators with fourth-order central differences in ``nu`` (zero padding)
and then transports every ``nu``-row exactly by ``dt * nu`` with a spectral
shift in ``xi``.

Backward: Kallianpur-Striebel Monte Carlo under the reference measure, an
independent particle oracle, and a semi-Lagrangian lattice scheme for the
backward filtering SPDE in ``(x, v, y)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import DegenerateDensityError, DomainError, StabilityError
from .io import write_csv
from .itow import DrivingData
from .kernels import langevin_covariance
from .model import CoefficientSet, tilde_h
from .sde import TimeGrid, simulate_under_Q

log = logging.getLogger(__name__)

CFL_MAX = 0.5
NOISE_CAP = 0.1
MASS_FLOOR = 1e-30
ESS_WARN = 10.0


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Trapezoid weights of a 1-D grid."""
    g = np.asarray(grid, dtype=float)
    if g.size == 1:
        return np.ones(1)
    w = np.zeros_like(g)
    d = np.diff(g)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative density values on an ``(xi, nu)`` lattice.

    ``clipped_mass`` accumulates the mass removed by clipping negative
    values; ``min_ratio`` is the most negative ``min/max`` seen before
    clipping.
    """

    time: float
    xi: np.ndarray
    nu: np.ndarray
    values: np.ndarray
    clipped_mass: float = 0.0
    min_ratio: float = 0.0
    meta: Dict[str, object] = field(default_factory=dict, compare=False)

    @property
    def weights(self) -> np.ndarray:
        return np.outer(trapezoid_weights(self.xi), trapezoid_weights(self.nu))

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights * self.values))

    def marginal(self, axis: str) -> np.ndarray:
        """Marginal density along ``xi`` or ``nu``."""
        if axis == "xi":
            return self.values @ trapezoid_weights(self.nu)
        if axis == "nu":
            return trapezoid_weights(self.xi) @ self.values
        raise DomainError(axis)

    def to_csv(self, path: str, manifest: dict) -> str:
        X, V = np.meshgrid(self.xi, self.nu, indexing="ij")
        rows = zip(X.ravel(), V.ravel(), self.values.ravel())
        return write_csv(path, ["xi", "nu", "value"], rows, dict(manifest, time=self.time))


def normalize(u: GridDensity) -> GridDensity:
    """Divide by the total mass (trapezoid quadrature over the lattice)."""
    m = u.total_mass
    if not np.isfinite(m) or m <= MASS_FLOOR:
        raise DegenerateDensityError(f"total mass {m!r} too small to normalize")
    return replace(u, values=u.values / m)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def _pad(f, axis, width=2):
    pad = [(0, 0)] * f.ndim
    pad[axis] = (width, width)
    return np.pad(f, pad)


def _take(f, start, n, axis):
    idx = [slice(None)] * f.ndim
    idx[axis] = slice(start, start + n)
    return f[tuple(idx)]


def d1_4(f, h, axis=-1):
    """Fourth-order central first derivative with zero padding."""
    n = f.shape[axis]
    p = _pad(f, axis)
    t = lambda k: _take(p, 2 + k, n, axis)  # noqa: E731
    return (-t(2) + 8.0 * t(1) - 8.0 * t(-1) + t(-2)) / (12.0 * h)


def d2_4(f, h, axis=-1):
    """Fourth-order central second derivative with zero padding."""
    n = f.shape[axis]
    p = _pad(f, axis)
    t = lambda k: _take(p, 2 + k, n, axis)  # noqa: E731
    return (-t(2) + 16.0 * t(1) - 30.0 * t(0) + 16.0 * t(-1) - t(-2)) / (12.0 * h * h)


def spectral_shift(values: np.ndarray, xi: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Translate each ``nu``-column by ``shifts[j]`` in ``xi`` (periodic, exact for band-limited data).

    Returns ``out[:, j](xi) = values[:, j](xi - shifts[j])``.
    """
    n = xi.size
    dx = xi[1] - xi[0]
    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=dx)
    spec = np.fft.rfft(values, axis=0)
    spec *= np.exp(-1j * np.outer(k, shifts))
    if n % 2 == 0:
        # the Nyquist mode of an even grid cannot carry a phase; keep it real
        spec[-1] = spec[-1].real
    return np.fft.irfft(spec, n=n, axis=0)


# ---------------------------------------------------------------------------
# forward SPDE
# ---------------------------------------------------------------------------

def _y_at(driving: Optional[DrivingData], k: int) -> float:
    if driving is None or driving.y is None:
        return 0.0
    return float(driving.y[min(k, len(driving.y) - 1)])


class ForwardStepper:
    """Forward SPDE steps on a fixed lattice with cached operators.

    Shift phases depend only on ``dt`` and the lattice; coefficient arrays
    are cached when the coefficient set is autonomous.
    """

    def __init__(self, c: CoefficientSet, xi: np.ndarray, nu: np.ndarray, dt: float, milstein: bool = True):
        if not dt > 0:
            raise DomainError("dt must be positive")
        self.milstein = bool(milstein)
        self.c, self.xi, self.nu, self.dt = c, np.asarray(xi, float), np.asarray(nu, float), float(dt)
        self.dnu = self.nu[1] - self.nu[0]
        self.X, self.V = np.meshgrid(self.xi, self.nu, indexing="ij")
        self.weights = np.outer(trapezoid_weights(self.xi), trapezoid_weights(self.nu))
        k = 2.0 * np.pi * np.fft.rfftfreq(self.xi.size, d=self.xi[1] - self.xi[0])
        self.phase = np.exp(-1j * np.outer(k, dt * self.nu))
        if self.xi.size % 2 == 0:
            self.phase[-1] = 1.0
        self._cache = None
        self._pad = np.zeros((self.xi.size, self.nu.size + 4))

    def coefficients(self, s: float, y: float):
        if self._cache is not None:
            return self._cache
        c, X, V = self.c, self.X, self.V
        sig2 = c.sigma_sq(s, X, V, y)
        out = (sig2, c.b(s, X, V, y), c.sigma1(s, X, V, y), np.asarray(tilde_h(c, s, X, V, y), dtype=float))
        cfl = float(np.max(sig2)) * self.dt / self.dnu ** 2
        if cfl > CFL_MAX:
            raise StabilityError(f"CFL number {cfl:.3g} exceeds {CFL_MAX}")
        cap = float(np.max(out[3] ** 2)) * self.dt
        if cap > NOISE_CAP:
            raise StabilityError(f"|h~|^2 dt = {cap:.3g} exceeds {NOISE_CAP}")
        if self.c.autonomous:
            self._cache = out
        return out

    def _d(self, f, order: int):
        p = self._pad
        n = f.shape[1]
        p[:, 2:2 + n] = f
        m2, m1, c0, p1, p2 = p[:, 0:n], p[:, 1:n + 1], p[:, 2:n + 2], p[:, 3:n + 3], p[:, 4:n + 4]
        if order == 1:
            return (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * self.dnu)
        return (-p2 + 16.0 * p1 - 30.0 * c0 + 16.0 * m1 - m2) / (12.0 * self.dnu ** 2)

    def step(self, u: GridDensity, dW: float, y: float = 0.0, clip: bool = True) -> GridDensity:
        if not np.isfinite(dW):
            raise DomainError("increment must be finite")
        sig2, bb, s1, ht = self.coefficients(u.time, y)
        vals = u.values
        g1 = ht * vals - self._d(s1 * vals, 1)
        if self.milstein:
            # Milstein correction 1/2 G*(G* u) (dW^2 - dt); first-order terms share one stencil pass
            noise = dW * vals + 0.5 * (dW * dW - self.dt) * g1
            w = (vals + 0.5 * self.dt * self._d(sig2 * vals, 2) + ht * noise
                 - self._d(self.dt * bb * vals + s1 * noise, 1))
        else:
            w = vals + 0.5 * self.dt * self._d(sig2 * vals, 2) - self.dt * self._d(bb * vals, 1) + dW * g1
        w = np.fft.irfft(np.fft.rfft(w, axis=0) * self.phase, n=self.xi.size, axis=0)
        clipped, ratio = u.clipped_mass, u.min_ratio
        if clip:
            mn = float(np.min(w))
            if mn < 0:
                mx = float(np.max(w))
                ratio = min(ratio, mn / mx if mx > 0 else -np.inf)
                neg = np.minimum(w, 0.0)
                clipped += float(-np.sum(self.weights * neg))
                w -= neg
        return replace(u, time=u.time + self.dt, values=w, clipped_mass=clipped, min_ratio=ratio)


def forward_spde_step(u: GridDensity, c: CoefficientSet, dW: float, dt: float, y: float = 0.0,
                      clip: bool = True, milstein: bool = False) -> GridDensity:
    """One step of the forward filtering SPDE.

    ``w = u + A* u dt + G* u dW`` (plus ``G*(G* u) (dW^2 - dt) / 2`` with
    ``milstein``) with ``A* u = (|sigma|^2 u)_nunu / 2 - (b u)_nu`` and
    ``G* u = -(sigma1 u)_nu + h~ u``, coefficients at the left endpoint and
    fourth-order central differences in ``nu``; then each row moves along
    the free transport characteristic, ``u+(xi + dt nu, nu) = w(xi, nu)``.

    Args:
        u: density at time ``s``.
        c: coefficients.
        dW: observation Brownian increment over ``[s, s + dt]``.
        dt: step.
        y: observation value at ``s``.
        clip: clip negative values (the removed mass is recorded).
        milstein: add the second-order noise correction.

    Returns:
        Density at ``s + dt``.
    """
    return ForwardStepper(c, u.xi, u.nu, dt, milstein).step(u, dW, y, clip)


@dataclass(frozen=True)
class ForwardLatticeSpec:
    """Lattice sizes and initial-datum knobs for forward solves."""

    n_xi: int = 129
    n_nu: int = 129
    n_std: float = 8.0
    width_factor: float = 2.0
    xi_resolution: float = 2.5


def _odd(n: int) -> int:
    return int(n) if int(n) % 2 else int(n) + 1


def forward_lattice(c: CoefficientSet, t: float, z, T: float, driving: DrivingData,
                    spec: ForwardLatticeSpec = ForwardLatticeSpec()) -> Tuple[np.ndarray, np.ndarray]:
    """Lattice covering ``n_std`` standard deviations of the frozen Gaussian envelope.

    The envelope uses the largest ``|sigma|^2`` and ``|b - h~ sigma1|`` seen on a
    coarse probe box around the start and the realized observation shifts.
    """
    x0, v0 = float(z[0]), float(z[1])
    tau = T - t
    y0 = _y_at(driving, 0)
    px, pv = np.meshgrid(np.linspace(x0 - 5, x0 + 5, 21), np.linspace(v0 - 8, v0 + 8, 33), indexing="ij")
    a_max = float(np.max(c.sigma_sq(t, px, pv, y0)))
    drift = np.abs(c.b(t, px, pv, y0) - tilde_h(c, t, px, pv, y0) * c.sigma1(t, px, pv, y0))
    b_max = float(np.max(drift))
    s1_max = float(np.max(np.abs(c.sigma1(t, px, pv, y0))))
    W = driving.W
    w_shift = s1_max * float(np.max(np.abs(W - W[0])))
    nu_half = spec.n_std * np.sqrt(a_max * tau) + b_max * tau + w_shift
    xi_half = spec.n_std * np.sqrt(a_max * tau ** 3 / 3.0) + (b_max * tau + w_shift) * tau
    xi_c = x0 + v0 * tau
    n_xi, n_nu = _odd(spec.n_xi), _odd(spec.n_nu)
    # ξ extent must also hold the spread of transport speeds across the ν-range
    xi_lo = min(xi_c - xi_half, x0 - xi_half)
    xi_hi = max(xi_c + xi_half, x0 + xi_half)
    return np.linspace(xi_lo, xi_hi, n_xi), np.linspace(v0 - nu_half, v0 + nu_half, n_nu)


def initial_datum(c: CoefficientSet, t: float, z, delta_steps: int, driving: DrivingData,
                  xi: np.ndarray, nu: np.ndarray, linearized: bool = True) -> GridDensity:
    """Gaussian approximation of the density at ``t + k0 dt`` started from a Dirac mass at ``(t, z)``.

    Under the reference dynamics the velocity drifts with ``b - h~ sigma1``,
    moves by ``sigma1 dW~`` and diffuses with ``sigma_hat``, while the mass is
    multiplied by ``exp(h~ dW~ - h~^2 dt / 2)``.  The linearized version
    propagates mean and covariance along the Euler steps with the Jacobians
    of drift and ``sigma1`` at the mean and tilts the Gaussian by the
    gradient of ``h~``; otherwise every coefficient is frozen at ``(t, z)``.
    """
    x0, v0 = float(z[0]), float(z[1])
    dt = driving.grid.dt
    k0 = int(delta_steps)
    delta = k0 * dt
    times = driving.grid.times
    th_of = lambda s, y: float(np.asarray(c.theta(s, y)))  # noqa: E731
    m = np.array([x0, v0])
    P = np.zeros((2, 2))
    logmass = 0.0
    for k in range(k0):
        s, y, dW = times[0] if not linearized else times[k], _y_at(driving, 0 if not linearized else k), \
            float(driving.dW[k])
        at = (x0, v0) if not linearized else (m[0], m[1])
        th = th_of(s, y)
        s1 = float(c.sigma1(s, *at, y))
        h = float(c.h(s, *at, y))
        ht = h / th
        sh2 = float(np.sum(np.square(c.sigma_hat(s, *at, y))))
        bq = float(c.b(s, *at, y)) - ht * s1
        F = np.array([[1.0, dt], [0.0, 1.0]])
        if linearized:
            grad = lambda name: np.array([float(c.partial(name, 1, 0)(s, *at, y)),  # noqa: E731
                                          float(c.partial(name, 0, 1)(s, *at, y))])
            g_s1, g_h = grad("sigma1"), grad("h") / th
            g_bq = grad("b") - g_h * s1 - ht * g_s1
            F[1] += dt * g_bq + dW * g_s1
        m = m + np.array([m[1] * dt, bq * dt + s1 * dW])
        # exact one-step kinetic covariance keeps the constant-coefficient case exact
        P = F @ P @ F.T + langevin_covariance(np.sqrt(sh2), dt)
        logmass += ht * dW - 0.5 * ht * ht * dt
        if linearized:
            e = dW - ht * dt
            Pg = P @ g_h
            m = m + Pg * e
            logmass += 0.5 * e * e * float(g_h @ Pg)
    if not linearized:
        sh2 = float(np.sum(np.square(c.sigma_hat(t, x0, v0, _y_at(driving, 0)))))
        P = langevin_covariance(np.sqrt(sh2), delta)
    X, V = np.meshgrid(xi, nu, indexing="ij")
    dx, dv = X - m[0], V - m[1]
    det = P[0, 0] * P[1, 1] - P[0, 1] ** 2
    if not det > 0:
        raise DegenerateDensityError("initial covariance is singular")
    q = (P[1, 1] * dx * dx - 2 * P[0, 1] * dx * dv + P[0, 0] * dv * dv) / det
    mass = float(np.exp(logmass))
    vals = mass * np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(det))
    return GridDensity(time=t + delta, xi=xi, nu=nu, values=vals,
                       meta={"delta": delta, "k0": k0, "initial_mass": mass, "initial_cov": P.copy()})


def _offset_steps(c, t, z, driving, xi, nu, spec: ForwardLatticeSpec, width: Optional[float] = None) -> int:
    """Steps until the frozen Gaussian is resolved by the lattice.

    Within a row the position width given the velocity is
    ``sqrt(sigma_hat^2 delta^3 / 12)`` and within a column the velocity width
    given the position is ``sqrt(sigma_hat^2 delta / 4)``.  They must reach
    ``xi_resolution * dxi`` and ``width_factor * dnu`` respectively, otherwise
    the spectral shift aliases and the difference stencil undershoots.  An
    explicit ``width`` (marginal velocity standard deviation) must satisfy
    both conditions.
    """
    y0 = _y_at(driving, 0)
    sh2 = float(np.sum(np.square(c.sigma_hat(t, z[0], z[1], y0))))
    dnu, dxi = nu[1] - nu[0], xi[1] - xi[0]
    delta_xi = (12.0 * (spec.xi_resolution * dxi) ** 2 / sh2) ** (1.0 / 3.0)
    delta_nu = 4.0 * (spec.width_factor * dnu) ** 2 / sh2
    if width is not None:
        delta = width ** 2 / sh2
        if delta < max(delta_xi, delta_nu) * (1 - 1e-9):
            raise DomainError(f"initial width {width:.3g} is not resolved by the lattice "
                              f"(needs width >= {np.sqrt(sh2 * max(delta_xi, delta_nu)):.3g})")
    else:
        delta = max(delta_nu, delta_xi)
    return max(1, int(np.rint(delta / driving.grid.dt)))


def forward_fundamental(c: CoefficientSet, t: float, z, T: float, driving: DrivingData,
                        spec: ForwardLatticeSpec = ForwardLatticeSpec(),
                        lattice: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                        initial_width: Optional[float] = None, milstein: bool = True) -> GridDensity:
    """Unnormalized forward filtering density started from a Dirac approximation at ``(t, z)``.

    Args:
        c: coefficients.
        t, z: start time and point ``(x, v)``.
        T: final time; ``driving.grid`` must run from ``t`` to ``T``.
        driving: observation increments (and ``Y`` values) on the step grid.
        spec: lattice sizes and initial-width knobs.
        lattice: optional explicit ``(xi, nu)`` grids (uniform).
        initial_width: optional velocity standard deviation of the initial Gaussian.
        milstein: second-order noise correction in every step.

    Returns:
        GridDensity at ``T`` (``meta`` holds ``delta`` and the clipping log).
    """
    if not T > t:
        raise DomainError("need t < T")
    g = driving.grid
    if abs(g.t0 - t) > 1e-12 or abs(g.t1 - T) > 1e-12:
        raise DomainError("driving grid must span [t, T]")
    xi, nu = lattice if lattice is not None else forward_lattice(c, t, z, T, driving, spec)
    k0 = _offset_steps(c, t, z, driving, xi, nu, spec, initial_width)
    if k0 >= g.n_steps:
        raise DomainError("initial offset exceeds the horizon; refine the lattice or the time grid")
    u = initial_datum(c, t, z, k0, driving, xi, nu)
    times = g.times
    stepper = ForwardStepper(c, xi, nu, g.dt, milstein)
    for k in range(k0, g.n_steps):
        u = replace(u, time=times[k])
        u = stepper.step(u, float(driving.dW[k]), y=_y_at(driving, k))
    total = u.total_mass
    if total > 0 and u.clipped_mass > 1e-4 * total:
        log.warning("clipped mass %.3g exceeds 1e-4 of the total %.3g", u.clipped_mass, total)
    return replace(u, time=float(T))


def coarse_spec(spec: ForwardLatticeSpec) -> ForwardLatticeSpec:
    """Half-resolution companion lattice (every other node)."""
    return replace(spec, n_xi=(spec.n_xi - 1) // 2 + 1, n_nu=(spec.n_nu - 1) // 2 + 1)


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterEstimate:
    """Conditional expectation estimate with an error bar.

    ``stderr`` is a Monte Carlo standard error or a grid discretization
    estimate; ``fingerprint`` identifies the scenario.
    """

    value: float
    method: str
    stderr: float
    fingerprint: Tuple[Tuple[str, object], ...] = ()
    warning: Optional[str] = None
    ess: Optional[float] = None

    def row(self):
        return (self.method, self.value, self.stderr, ";".join(f"{k}={v}" for k, v in self.fingerprint))


def write_estimates(path: str, estimates: Sequence[FilterEstimate], manifest: dict) -> str:
    return write_csv(path, ["method", "value", "stderr", "fingerprint"], [e.row() for e in estimates], manifest)


def _phi_on(u: GridDensity, phi: Callable, stride: int = 1):
    X, V = np.meshgrid(u.xi[::stride], u.nu[::stride], indexing="ij")
    vals = np.asarray(phi(X, V), dtype=float) * np.ones_like(X)
    if not np.all(np.isfinite(vals)):
        raise DomainError("observable is not finite on the lattice")
    return vals


def _ratio(u: GridDensity, phi, stride: int = 1) -> float:
    w = np.outer(trapezoid_weights(u.xi[::stride]), trapezoid_weights(u.nu[::stride]))
    vals = u.values[::stride, ::stride]
    return float(np.sum(w * vals * _phi_on(u, phi, stride)) / np.sum(w * vals))


def estimate_forward(u_hat: GridDensity, phi, companion: Optional[GridDensity] = None,
                     fingerprint: Tuple = ()) -> FilterEstimate:
    """``int Gamma^ phi`` by trapezoid quadrature, as a ratio so that ``phi = 1`` gives 1 exactly.

    The error bar is the larger of the half-resolution quadrature change and
    the difference to an optional coarse companion solve.
    """
    if abs(u_hat.total_mass - 1.0) > 1e-9:
        raise DomainError("estimate_forward expects a normalized density")
    val = _ratio(u_hat, phi)
    err = 0.0
    if (u_hat.xi.size - 1) % 2 == 0 and (u_hat.nu.size - 1) % 2 == 0 and u_hat.xi.size > 2:
        err = abs(val - _ratio(u_hat, phi, 2))
    if companion is not None:
        err = max(err, abs(val - _ratio(companion, phi)))
    return FilterEstimate(value=val, method="spde-forward", stderr=float(err), fingerprint=tuple(fingerprint))


def _ratio_estimate(vals: np.ndarray, weights: np.ndarray, method: str, fingerprint) -> FilterEstimate:
    wsum = float(np.sum(weights))
    if not wsum > 0:
        raise DegenerateDensityError("all weights vanish")
    num = float(np.sum(vals * weights))
    r = num / wsum
    if np.all(vals == vals.flat[0]):
        r = float(vals.flat[0])
    se = float(np.sqrt(np.sum((weights * (vals - r)) ** 2)) / wsum)
    ess = wsum ** 2 / float(np.sum(weights ** 2))
    warn = f"effective sample size {ess:.1f} below {ESS_WARN}" if ess < ESS_WARN else None
    return FilterEstimate(value=r, method=method, stderr=se, fingerprint=tuple(fingerprint), warning=warn, ess=ess)


def ks_backward_estimate(c: CoefficientSet, t: float, zy, T: float, phi, driving: DrivingData,
                         n_particles: int, seed: int, chunk: int = 20000) -> FilterEstimate:
    """Kallianpur-Striebel ratio ``sum phi(Z_T, Y_T) rho_T / sum rho_T`` under the reference measure.

    Args:
        c: coefficients.
        t: start time (must equal ``driving.grid.t0``).
        zy: start ``(x, v, y)``.
        T: final time.
        phi: observable ``phi(xi, nu, y)``.
        driving: shared observation increments.
        n_particles: number of reference paths (at least 2).
        seed: seed of the independent channels.
        chunk: particles per block.

    Returns:
        FilterEstimate with a delta-method standard error.
    """
    if n_particles < 2:
        raise DomainError("need at least two particles")
    _check_span(driving.grid, t, T)
    b = simulate_under_Q(c, (zy[0], zy[1], zy[2], 1.0), driving.dW, driving.grid, seed, n_paths=n_particles,
                         record="terminal", chunk=chunk)
    vals = np.asarray(phi(b.X[:, -1], b.V[:, -1], b.Y[:, -1]), dtype=float) * np.ones(n_particles)
    fp = (("preset", c.preset_id), ("seed", seed), ("n", n_particles), ("steps", driving.grid.n_steps))
    return _ratio_estimate(vals, b.rho[:, -1], "ks-backward", fp)


def _check_span(grid: TimeGrid, t: float, T: float):
    if abs(grid.t0 - t) > 1e-12 or abs(grid.t1 - T) > 1e-12:
        raise DomainError("driving grid must span [t, T]")


def particle_oracle(c: CoefficientSet, t: float, zy, T: float, phi, driving: DrivingData,
                    n_particles: int, seed: int, chunk: int = 25000, resample: bool = False,
                    ess_fraction: float = 0.5) -> FilterEstimate:
    """Independent weighted-particle estimate of the same conditional expectation.

    Uses numpy's PCG64 with one spawned SeedSequence per chunk, propagates
    with the observation increments ``dY`` directly and accumulates Gaussian
    likelihood ratios ``(h dY - h^2 dt / 2) / theta^2``.  With ``resample``
    the particles of each chunk are stratified-resampled whenever the chunk
    ESS drops below ``ess_fraction``.
    """
    if n_particles < 2:
        raise DomainError("need at least two particles")
    _check_span(driving.grid, t, T)
    g = driving.grid
    dt = g.dt
    ts = g.times
    y_obs = driving.y
    th0 = np.asarray(c.theta(ts[0], zy[2]), dtype=float)
    if y_obs is None:
        # reconstruct the observation from W~ under the start value
        y_obs = float(zy[2]) + float(th0) * driving.W
    dY = np.diff(y_obs)
    children = np.random.SeedSequence([int(seed), 0x5EED]).spawn((n_particles + chunk - 1) // chunk)
    vals_all, logw_all = [], []
    for ci, lo in enumerate(range(0, n_particles, chunk)):
        m = min(chunk, n_particles - lo)
        gen = np.random.Generator(np.random.PCG64(children[ci]))
        x = np.full(m, float(zy[0]))
        v = np.full(m, float(zy[1]))
        lw = np.zeros(m)
        for k in range(g.n_steps):
            s, yk = ts[k], y_obs[k]
            th = float(np.asarray(c.theta(s, yk)))
            h = c.h(s, x, v, yk)
            s1 = c.sigma1(s, x, v, yk)
            sh = np.asarray(c.sigma_hat(s, x, v, yk), dtype=float)
            b = c.b(s, x, v, yk)
            lw = lw + (h * dY[k] - 0.5 * h * h * dt) / th ** 2
            xi_noise = gen.standard_normal((m, sh.shape[-1]))
            dv = (b - h / th * s1) * dt + s1 * dY[k] / th + np.sqrt(dt) * np.sum(sh * xi_noise, axis=-1)
            x = x + v * dt
            v = v + dv
            if resample:
                w = np.exp(lw - lw.max())
                if w.sum() ** 2 / np.sum(w * w) < ess_fraction * m:
                    cdf = np.cumsum(w) / w.sum()
                    u = (np.arange(m) + gen.uniform(size=m)) / m
                    idx = np.minimum(np.searchsorted(cdf, u), m - 1)
                    x, v = x[idx], v[idx]
                    lw = np.full(m, lw.max() + np.log(w.mean()))
        vals_all.append(np.asarray(phi(x, v, np.full(m, y_obs[-1])), dtype=float) * np.ones(m))
        logw_all.append(lw)
    vals = np.concatenate(vals_all)
    lw = np.concatenate(logw_all)
    w = np.exp(lw - lw.max())
    fp = (("preset", c.preset_id), ("seed", seed), ("n", n_particles), ("resample", resample))
    return _ratio_estimate(vals, w, "particle-oracle", fp)


# ---------------------------------------------------------------------------
# backward lattice scheme
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackwardLattice:
    """Uniform ``(x, v, y)`` lattice; a single ``y`` node drops the ``y``-derivatives."""

    x: np.ndarray
    v: np.ndarray
    y: np.ndarray

    @property
    def shape(self):
        return (self.x.size, self.v.size, self.y.size)

    def mesh(self):
        return np.meshgrid(self.x, self.v, self.y, indexing="ij")


def _y_free(c: CoefficientSet, t: float, lat: BackwardLattice) -> bool:
    X, V = np.meshgrid(lat.x[::8], lat.v[::8], indexing="ij")
    y0 = float(lat.y[0])
    for y1 in (y0 - 1.0, y0 + 1.0):
        for f in (c.b, c.sigma_sq, c.sigma1, c.h):
            if not np.allclose(f(t, X, V, y0), f(t, X, V, y1), rtol=0, atol=1e-13):
                return False
        if not np.allclose(c.theta(t, y0), c.theta(t, y1), rtol=0, atol=1e-13):
            return False
    return True


def _central(f, h: float, axis: int, second: bool = True):
    """First and second central differences with linearly extrapolated ghost nodes."""
    axis = axis % f.ndim

    def sl(lo, hi):
        idx = [slice(None)] * f.ndim
        idx[axis] = slice(lo, hi)
        return tuple(idx)

    d1 = np.empty_like(f)
    d1[sl(1, -1)] = f[sl(2, None)] - f[sl(None, -2)]
    d1[sl(1, -1)] *= 0.5 / h
    d1[sl(0, 1)] = (f[sl(1, 2)] - f[sl(0, 1)]) / h
    d1[sl(-1, None)] = (f[sl(-1, None)] - f[sl(-2, -1)]) / h
    if not second:
        return d1, None
    d2 = np.zeros_like(f)
    d2[sl(1, -1)] = f[sl(2, None)] + f[sl(None, -2)]
    d2[sl(1, -1)] -= 2 * f[sl(1, -1)]
    d2[sl(1, -1)] *= 1.0 / h ** 2
    return d1, d2


class BackwardStepper:
    """Backward SPDE steps on a fixed ``(x, v, y)`` lattice.

    Values carry any number of leading batch axes (one per terminal datum).
    The transport step evaluates at ``x + v dt`` with four-point cubic
    Lagrange interpolation; indices beyond the lattice are clamped.
    """

    def __init__(self, c: CoefficientSet, lat: BackwardLattice, dt: float):
        if not dt > 0:
            raise DomainError("dt must be positive")
        self.c, self.lat, self.dt = c, lat, float(dt)
        if lat.x.size < 4 or lat.v.size < 3:
            raise DomainError("backward lattice needs at least 4 x-nodes and 3 v-nodes")
        if lat.y.size == 2:
            raise DomainError("use one y-node (y-free coefficients) or at least three")
        self.dx = lat.x[1] - lat.x[0]
        self.dv = lat.v[1] - lat.v[0]
        self.dy = lat.y[1] - lat.y[0] if lat.y.size > 1 else None
        self.X, self.V, self.Y = lat.mesh()
        pos = lat.v * self.dt / self.dx
        m = np.floor(pos).astype(int)
        f = pos - m
        # cubic Lagrange weights on nodes m-1, m, m+1, m+2 relative to each x-node
        self.w = np.stack([-f * (f - 1) * (f - 2) / 6, (f + 1) * (f - 1) * (f - 2) / 2,
                           -(f + 1) * f * (f - 2) / 2, (f + 1) * f * (f - 1) / 6])
        i = np.arange(lat.x.size)[:, None]
        self.idx = [np.clip(i + m[None, :] + o, 0, lat.x.size - 1) for o in (-1, 0, 1, 2)]
        self.jdx = np.broadcast_to(np.arange(lat.v.size)[None, :], (lat.x.size, lat.v.size))
        self._cache = None
        self._checked_y = False

    def coefficients(self, s: float):
        if self._cache is not None:
            return self._cache
        c, X, V, Y = self.c, self.X, self.V, self.Y
        if self.dy is None and not self._checked_y:
            if not _y_free(c, s, self.lat):
                raise DomainError("coefficients depend on y; use a y-lattice with at least three nodes")
            self._checked_y = True
        th = np.asarray(c.theta(s, Y), dtype=float) * np.ones_like(Y)
        out = dict(sig2=c.sigma_sq(s, X, V, Y), b=c.b(s, X, V, Y), s1=c.sigma1(s, X, V, Y),
                   h=c.h(s, X, V, Y) * np.ones_like(X), th=th)
        out["ht"] = out["h"] / th
        cfl = float(np.max(out["sig2"])) * self.dt / self.dv ** 2
        if self.dy is not None:
            cfl = max(cfl, float(np.max(th ** 2)) * self.dt / self.dy ** 2)
        if cfl > CFL_MAX:
            raise StabilityError(f"CFL number {cfl:.3g} exceeds {CFL_MAX}")
        cap = float(np.max(out["ht"] ** 2)) * self.dt
        if cap > NOISE_CAP:
            raise StabilityError(f"|h~|^2 dt = {cap:.3g} exceeds {NOISE_CAP}")
        if self.c.autonomous:
            self._cache = out
        return out

    def transport(self, w: np.ndarray) -> np.ndarray:
        """Evaluate ``w(x + v dt, v, y)`` on the lattice."""
        out = 0.0
        for k in range(4):
            out = out + self.w[k][None, :, None] * w[..., self.idx[k], self.jdx, :]
        return out

    def step(self, u: np.ndarray, dW: float, s: float) -> np.ndarray:
        """From ``u`` at ``s`` to the lattice values at ``s - dt``.

        Coefficients and the increment ``dW = W~_s - W~_{s-dt}`` enter at the
        right endpoint ``s``, as in a backward Ito sum.
        """
        if not np.isfinite(dW):
            raise DomainError("increment must be finite")
        k = self.coefficients(s)
        uv, uvv = _central(u, self.dv, -2)
        gen = 0.5 * k["sig2"] * uvv + k["b"] * uv
        noise = k["s1"] * uv + k["ht"] * u
        if self.dy is not None:
            uy, uyy = _central(u, self.dy, -1)
            uvy, _ = _central(uv, self.dy, -1, second=False)
            gen = gen + 0.5 * k["th"] ** 2 * uyy + k["th"] * k["s1"] * uvy + k["h"] * uy
            noise = noise + k["th"] * uy
        return self.transport(u + gen * self.dt + noise * dW)


def backward_spde_step(u: np.ndarray, c: CoefficientSet, lat: BackwardLattice, dW: float, dt: float,
                       s: float) -> np.ndarray:
    """One step of the backward filtering SPDE on an ``(x, v, y)`` lattice.

    ``u_{s-dt}(x, v, y) = w(x + v dt, v, y)`` with
    ``w = u_s + A~ u_s dt + G~ u_s dW``, where
    ``A~ = (|sigma|^2 d_vv + 2 theta sigma1 d_vy + theta^2 d_yy) / 2 + b d_v + h d_y``
    and ``G~ = sigma1 d_v + theta d_y + h~``, all at the right endpoint ``s``.

    Args:
        u: values at ``s``, shape ``(..., nx, nv, ny)``.
        c: coefficients.
        lat: lattice.
        dW: ``W~_s - W~_{s-dt}``.
        dt: step.
        s: right endpoint.

    Returns:
        Values at ``s - dt``.
    """
    return BackwardStepper(c, lat, dt).step(u, dW, s)


def backward_solve(c: CoefficientSet, lat: BackwardLattice, terminal: np.ndarray, driving: DrivingData,
                   t: float, T: float) -> np.ndarray:
    """Run the backward SPDE from terminal data at ``T`` down to ``t``.

    Args:
        c: coefficients.
        lat: lattice.
        terminal: values at ``T``, shape ``(..., nx, nv, ny)``.
        driving: ``W~`` increments on a grid spanning ``[t, T]``.
        t, T: time span.

    Returns:
        Values at ``t`` with the shape of ``terminal``.
    """
    g = driving.grid
    _check_span(g, t, T)
    stepper = BackwardStepper(c, lat, g.dt)
    u = np.array(terminal, dtype=float)
    if u.shape[-3:] != lat.shape:
        raise DomainError(f"terminal data shape {u.shape} does not end with {lat.shape}")
    times = g.times
    for k in range(g.n_steps - 1, -1, -1):
        u = stepper.step(u, float(driving.dW[k]), float(times[k + 1]))
    return u


def backward_lattice(c: CoefficientSet, t: float, zy, T: float, driving: DrivingData,
                     n_x: int = 65, n_v: int = 65, n_y: int = 1, n_std: float = 8.0) -> BackwardLattice:
    """Lattice around the start ``(z, y)`` covering the reachable region up to ``T``.

    The extents follow the same Gaussian envelope as the forward lattice, so
    the terminal data are resolved where the start point sends its mass.
    """
    xi, nu = forward_lattice(c, t, zy[:2], T, driving, ForwardLatticeSpec(n_xi=n_x, n_nu=n_v, n_std=n_std))
    y0 = float(zy[2])
    if n_y == 1:
        y = np.array([y0])
    else:
        th = float(np.max(np.abs(c.theta(t, y0 + np.linspace(-3, 3, 13)))))
        tau = T - t
        hb = float(np.max(np.abs(c.h(t, *np.meshgrid(xi[::8], nu[::8], indexing="ij"), y0))))
        half = n_std * th * np.sqrt(tau) + hb * tau + th * float(np.max(np.abs(driving.W - driving.W[0])))
        y = np.linspace(y0 - half, y0 + half, _odd(n_y))
    return BackwardLattice(x=xi, v=nu, y=y)


def _read_start(u: np.ndarray, lat: BackwardLattice, zy) -> np.ndarray:
    """Cubic interpolation of a batch ``(n, nx, nv, ny)`` of lattice values at the start point."""
    if lat.y.size > 1:
        pts, q, vals = (lat.x, lat.v, lat.y), [float(zy[0]), float(zy[1]), float(zy[2])], np.moveaxis(u, 0, -1)
    else:
        pts, q, vals = (lat.x, lat.v), [float(zy[0]), float(zy[1])], np.moveaxis(u[..., 0], 0, -1)
    return np.asarray(RegularGridInterpolator(pts, vals, method="cubic")(q)[0], dtype=float)


def backward_ratio_estimate(c: CoefficientSet, t: float, zy, T: float, phis: Sequence[Callable],
                            driving: DrivingData, lat: Optional[BackwardLattice] = None,
                            companion: Optional[BackwardLattice] = None) -> list:
    """Conditional expectations ``u^(phi)(t, z, y) / u^(1)(t, z, y)`` from the backward lattice.

    Each ``phi`` takes ``(x, v, y)``.  The error bar is the change against a
    companion lattice (default: half resolution in every direction).
    """
    if lat is None:
        lat = backward_lattice(c, t, zy, T, driving)
    if companion is None:
        companion = BackwardLattice(lat.x[::2], lat.v[::2], lat.y[::2] if lat.y.size > 1 else lat.y)

    def run(L: BackwardLattice):
        X, V, Y = L.mesh()
        data = np.stack([np.ones_like(X)] + [np.asarray(p(X, V, Y), dtype=float) * np.ones_like(X) for p in phis])
        return _read_start(backward_solve(c, L, data, driving, t, T), L, zy)

    fine, coarse = run(lat), run(companion)
    fp = (("preset", c.preset_id), ("lattice", "x".join(map(str, lat.shape))))
    out = []
    for j in range(1, fine.size):
        r = fine[j] / fine[0]
        out.append(FilterEstimate(value=float(r), method="spde-backward",
                                  stderr=float(abs(r - coarse[j] / coarse[0])), fingerprint=fp))
    return out


@dataclass(frozen=True)
class BackwardDensity:
    """Normalized backward filtering density on a grid of terminal points.

    ``values[i, j, k]`` is the density at ``(zeta_x[i], zeta_v[j], eta[k])``
    for the fixed start; ``weights`` are the matching trapezoid weights.
    """

    start: Tuple[float, float, float]
    time: float
    zeta_x: np.ndarray
    zeta_v: np.ndarray
    eta: np.ndarray
    values: np.ndarray
    raw_mass: float

    @property
    def weights(self) -> np.ndarray:
        w = np.einsum("i,j->ij", trapezoid_weights(self.zeta_x), trapezoid_weights(self.zeta_v))
        we = trapezoid_weights(self.eta) if self.eta.size > 1 else np.ones(1)
        return w[..., None] * we

    def integrate(self, phi) -> float:
        Z1, Z2, E = np.meshgrid(self.zeta_x, self.zeta_v, self.eta, indexing="ij")
        return float(np.sum(self.weights * self.values * (np.asarray(phi(Z1, Z2, E), dtype=float) * np.ones_like(Z1))))

    def marginal(self, keep: Sequence[int]) -> np.ndarray:
        drop = tuple(a for a in range(3) if a not in keep)
        grids = (self.zeta_x, self.zeta_v, self.eta)
        out = self.values
        for a in sorted(drop, reverse=True):
            w = trapezoid_weights(grids[a]) if grids[a].size > 1 else np.ones(1)
            out = np.tensordot(out, w, axes=([a], [0]))
        return out

    def to_csv(self, path: str, manifest: dict) -> str:
        Z1, Z2, E = np.meshgrid(self.zeta_x, self.zeta_v, self.eta, indexing="ij")
        rows = np.column_stack([Z1.ravel(), Z2.ravel(), E.ravel(), self.values.ravel()])
        return write_csv(path, ["xi", "nu", "y", "value"], rows, manifest)


def backward_filtering_density(c: CoefficientSet, t: float, zy, T: float, driving: DrivingData,
                               zeta_x: np.ndarray, zeta_v: np.ndarray, eta: Optional[np.ndarray] = None,
                               lat: Optional[BackwardLattice] = None, bump_width: float = 2.0,
                               batch: int = 64) -> BackwardDensity:
    """Backward filtering density at ``(t, z, y)`` from Dirac-approximating terminal data.

    Every terminal point ``(zeta, eta)`` of the grid carries a unit-mass
    Gaussian bump (standard deviation ``bump_width`` grid spacings per
    axis); the backward solution for that bump, read at the start, is the
    unnormalized kernel value.  Values are divided by their trapezoid
    integral over the terminal grid.

    Args:
        c: coefficients.
        t, zy: start time and ``(x, v, y)``.
        T: terminal time.
        driving: ``W~`` increments spanning ``[t, T]``.
        zeta_x, zeta_v: uniform terminal grids.
        eta: uniform terminal observation grid (``None`` for y-free problems).
        lat: backward lattice (default from ``backward_lattice``).
        bump_width: bump standard deviation in grid spacings.
        batch: bumps solved together.

    Returns:
        BackwardDensity.
    """
    y_free = eta is None
    if lat is None:
        lat = backward_lattice(c, t, zy, T, driving, n_y=1 if y_free else 33)
    if y_free and lat.y.size != 1:
        raise DomainError("y-free density needs a single-node y-lattice")
    eta_g = np.array([float(zy[2])]) if y_free else np.asarray(eta, dtype=float)
    X, V, Y = lat.mesh()
    sx = bump_width * (zeta_x[1] - zeta_x[0])
    sv = bump_width * (zeta_v[1] - zeta_v[0])
    sy = bump_width * (eta_g[1] - eta_g[0]) if not y_free else None
    centers = np.array(np.meshgrid(zeta_x, zeta_v, eta_g, indexing="ij")).reshape(3, -1).T
    raw = np.empty(len(centers))
    for lo in range(0, len(centers), batch):
        cb = centers[lo:lo + batch]
        bx = np.exp(-0.5 * ((X[None] - cb[:, 0, None, None, None]) / sx) ** 2) / (np.sqrt(2 * np.pi) * sx)
        bv = np.exp(-0.5 * ((V[None] - cb[:, 1, None, None, None]) / sv) ** 2) / (np.sqrt(2 * np.pi) * sv)
        data = bx * bv
        if not y_free:
            data = data * np.exp(-0.5 * ((Y[None] - cb[:, 2, None, None, None]) / sy) ** 2) / (np.sqrt(2 * np.pi) * sy)
        raw[lo:lo + len(cb)] = _read_start(backward_solve(c, lat, data, driving, t, T), lat, zy)
    raw = raw.reshape(zeta_x.size, zeta_v.size, eta_g.size)
    w = np.einsum("i,j->ij", trapezoid_weights(zeta_x), trapezoid_weights(zeta_v))[..., None]
    w = w * (trapezoid_weights(eta_g) if eta_g.size > 1 else np.ones(1))
    mass = float(np.sum(w * raw))
    if not (np.isfinite(mass) and mass > MASS_FLOOR):
        raise DegenerateDensityError(f"backward density mass {mass:.3g} is degenerate")
    return BackwardDensity(start=tuple(float(a) for a in zy), time=float(t), zeta_x=np.asarray(zeta_x, float),
                           zeta_v=np.asarray(zeta_v, float), eta=eta_g, values=raw / mass, raw_mass=mass)
