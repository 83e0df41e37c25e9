"""Ito-Wentzell flows and the transformed PDE coefficients.

Generic forward SPDE (in the velocity variable ``nu``, transport ``nu d_xi``):

    d_B u = (a u_nunu / 2 + b u_nu + c u) ds + (sigma u_nu + h u) dW

The flow ``d gamma = -sigma(s, xi, gamma) dW`` straightens the noise; along
it the density times the inverse likelihood solves a PDE with random
coefficients ``a*, b*, c*`` and transport field ``Y``.  Flow derivatives
are integrated from the variational equations alongside the flow.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .errors import DegenerateFlowError, DomainError, OutOfRangeError
from .io import write_csv
from .model import CoefficientSet, THETA_GUARD
from .sde import PathBundle, TimeGrid, as_increments

GENERIC_FIELDS = ("a", "b", "c", "sigma", "h")
DEGENERATE_TOL = 1e-12
INVERT_TOL = 1e-10
FD_STEP = 1e-3


# ---------------------------------------------------------------------------
# generic coefficients
# ---------------------------------------------------------------------------

def _fd(base: Callable, nx: int, nv: int, step: float = FD_STEP) -> Callable:
    if nx == 0 and nv == 0:
        return base
    if nx > 0:
        inner = _fd(base, nx - 1, nv, step)
        return lambda s, xi, nu: (inner(s, np.asarray(xi) + step, nu) - inner(s, np.asarray(xi) - step, nu)) / (2 * step)
    inner = _fd(base, 0, nv - 1, step)
    return lambda s, xi, nu: (inner(s, xi, np.asarray(nu) + step) - inner(s, xi, np.asarray(nu) - step)) / (2 * step)


@dataclass(frozen=True)
class GenericCoefficients:
    """Coefficient fields ``(s, xi, nu) -> value`` of the generic SPDE.

    ``funcs`` maps ``(name, nx, nv)`` to a partial derivative; missing
    partials fall back to central differences.
    """

    funcs: Mapping[Tuple[str, int, int], Callable] = field(repr=False)
    label: str = "generic"
    nu_free_h: bool = False

    def partial(self, name: str, nx: int = 0, nv: int = 0) -> Callable:
        if name not in GENERIC_FIELDS:
            raise KeyError(name)
        key = (name, nx, nv)
        if key in self.funcs:
            return self.funcs[key]
        return _fd(self.funcs[(name, 0, 0)], nx, nv)

    def __call__(self, name: str, s, xi, nu, nx: int = 0, nv: int = 0):
        out = self.partial(name, nx, nv)(s, xi, nu)
        return np.broadcast_to(out, np.broadcast(np.asarray(xi), np.asarray(nu)).shape)


def _const3(value: float) -> Callable:
    return lambda s, xi, nu: np.full(np.broadcast(np.asarray(xi), np.asarray(nu)).shape, float(value))


def constant_generic(a: float, b: float = 0.0, c: float = 0.0, sigma: float = 0.0,
                     h: float = 0.0) -> GenericCoefficients:
    """Generic coefficients that are constant in time and space."""
    funcs = {(n, 0, 0): _const3(v) for n, v in zip(GENERIC_FIELDS, (a, b, c, sigma, h))}
    zero = _const3(0.0)
    for n in GENERIC_FIELDS:
        for nx in range(4):
            for nv in range(4):
                if nx + nv:
                    funcs[(n, nx, nv)] = zero
    return GenericCoefficients(funcs=funcs, label="constant", nu_free_h=True)


def generic_coefficients(a: Callable, b: Callable, c: Callable, sigma: Callable, h: Callable,
                         partials: Optional[Mapping] = None, label: str = "generic",
                         nu_free_h: bool = False) -> GenericCoefficients:
    """Generic coefficients from callables ``(s, xi, nu)``."""
    funcs = {("a", 0, 0): a, ("b", 0, 0): b, ("c", 0, 0): c, ("sigma", 0, 0): sigma, ("h", 0, 0): h}
    if partials:
        funcs.update(partials)
    return GenericCoefficients(funcs=funcs, label=label, nu_free_h=nu_free_h)


def _y_lookup(times, y_values) -> Callable:
    if times is None or y_values is None:
        return lambda s: 0.0
    times = np.asarray(times, dtype=float)
    y_values = np.asarray(y_values, dtype=float)
    t0, dt = times[0], (times[-1] - times[0]) / max(len(times) - 1, 1)

    def y_of(s):
        k = int(np.clip(np.rint((float(s) - t0) / dt), 0, len(y_values) - 1)) if dt > 0 else 0
        return y_values[k]
    return y_of


def zakai_coefficients(c: CoefficientSet, times=None, y_values=None) -> GenericCoefficients:
    """Generic form of the forward filtering SPDE for the kinetic system.

    The adjoint operators expand to

        a = |sigma|^2, b = d_nu |sigma|^2 - b_model, c = d_nunu |sigma|^2 / 2 - d_nu b_model,
        sigma_g = -sigma1, h_g = h/theta - d_nu sigma1,

    driven by the observation Brownian motion ``W~``.  Coefficients that
    depend on the observation are frozen at the recorded ``Y`` values.
    """
    y_of = _y_lookup(times, y_values)
    P = c.partial

    def model(name, nx, nv):
        f = P(name, nx, nv)
        return lambda s, xi, nu: np.asarray(f(s, xi, nu, y_of(s)), dtype=float)

    def inv_theta(s):
        th = float(np.asarray(c.theta(s, y_of(s))))
        if abs(th) < THETA_GUARD:
            raise DomainError("observation noise theta vanishes")
        return 1.0 / th

    s1, s1v, s1vv = model("sigma1", 0, 0), model("sigma1", 0, 1), model("sigma1", 0, 2)
    shq = model("sigma_hat_sq", 0, 0)
    shq_v, shq_vv = model("sigma_hat_sq", 0, 1), model("sigma_hat_sq", 0, 2)
    bm, bm_v = model("b", 0, 0), model("b", 0, 1)

    funcs: Dict[Tuple[str, int, int], Callable] = {
        ("a", 0, 0): lambda s, xi, nu: s1(s, xi, nu) ** 2 + shq(s, xi, nu),
        ("b", 0, 0): lambda s, xi, nu: 2 * s1(s, xi, nu) * s1v(s, xi, nu) + shq_v(s, xi, nu) - bm(s, xi, nu),
        ("c", 0, 0): lambda s, xi, nu: (s1v(s, xi, nu) ** 2 + s1(s, xi, nu) * s1vv(s, xi, nu)
                                        + 0.5 * shq_vv(s, xi, nu) - bm_v(s, xi, nu)),
    }
    for nx in range(3):
        for nv in range(3):
            if nx + nv <= 2:
                f = model("sigma1", nx, nv)
                funcs[("sigma", nx, nv)] = (lambda f: lambda s, xi, nu: -f(s, xi, nu))(f)
    for nx, nv in ((0, 0), (1, 0), (0, 1), (0, 2), (2, 0), (1, 1)):
        hf = model("h", nx, nv)
        sf = model("sigma1", nx, nv + 1)
        funcs[("h", nx, nv)] = (lambda hf, sf: lambda s, xi, nu: hf(s, xi, nu) * inv_theta(s) - sf(s, xi, nu))(hf, sf)
    # nu-independence of h_g is what makes the transformed coefficients exact
    probe = np.linspace(-3, 3, 7)
    hv = funcs[("h", 0, 1)](0.0, probe[:, None], probe[None, :])
    return GenericCoefficients(funcs=funcs, label=f"zakai[{c.preset_id}]",
                               nu_free_h=bool(np.all(np.abs(hv) < 1e-12)))


# ---------------------------------------------------------------------------
# lattice, driving data, flows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """Rectangular ``(xi, nu)`` lattice."""

    xi: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        if np.asarray(self.xi).size == 0 or np.asarray(self.nu).size == 0:
            raise DomainError("lattice is empty")

    @property
    def shape(self):
        return (np.asarray(self.xi).size, np.asarray(self.nu).size)

    def mesh(self):
        return np.meshgrid(self.xi, self.nu, indexing="ij")


def make_lattice(xi_range=(-6.0, 6.0), nu_range=(-6.0, 6.0), n_xi: int = 129, n_nu: int = 129) -> Lattice:
    """Default lattice ``[-6, 6]^2`` with ``129 x 129`` nodes."""
    if n_xi < 1 or n_nu < 1:
        raise DomainError("lattice is empty")
    return Lattice(np.linspace(*xi_range, n_xi), np.linspace(*nu_range, n_nu))


@dataclass(frozen=True)
class DrivingData:
    """Realized observation-driven Brownian increments and observation values."""

    grid: TimeGrid
    dW: np.ndarray
    y: Optional[np.ndarray] = None

    @property
    def W(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dW)])


def driving_from_bundle(bundle: PathBundle, path_index: int = 0) -> DrivingData:
    """Driving data from a simulated system (requires all steps recorded)."""
    if bundle.Y.shape[1] != bundle.grid.n_steps + 1:
        raise DomainError("driving data needs every time step recorded")
    return DrivingData(bundle.grid, as_increments(bundle.tildeW[path_index], bundle.grid),
                       np.asarray(bundle.Y[path_index], dtype=float))


def _as_driving(driving, grid: Optional[TimeGrid]) -> DrivingData:
    if isinstance(driving, DrivingData):
        return driving
    if isinstance(driving, PathBundle):
        return driving_from_bundle(driving)
    if grid is None:
        raise DomainError("a time grid is required with raw increments")
    return DrivingData(grid, as_increments(driving, grid))


def _as_generic(coeffs, drv: DrivingData) -> GenericCoefficients:
    if isinstance(coeffs, GenericCoefficients):
        return coeffs
    if isinstance(coeffs, CoefficientSet):
        return zakai_coefficients(coeffs, drv.grid.times, drv.y)
    raise DomainError("coefficients must be a CoefficientSet or GenericCoefficients")


@dataclass(frozen=True)
class FlowSolution:
    """Flow values and derivatives on a lattice at saved times.

    Arrays have shape ``(n_saved, n_xi, n_nu)``; ``d2`` holds
    ``(d_nunu, d_nuxi, d_xixi)``.  For the forward flow ``times[k]`` is the
    running time ``s`` with anchor ``t``; for the backward flow it is the
    running time ``t`` with anchor ``s``.
    """

    direction: str
    anchor_time: float
    times: np.ndarray
    lattice: Lattice
    gamma: np.ndarray
    d_nu: np.ndarray
    d_xi: np.ndarray
    d2: Tuple[np.ndarray, np.ndarray, np.ndarray]
    driving_increments: np.ndarray
    saved_steps: np.ndarray
    _splines: dict = field(default_factory=dict, repr=False, compare=False)

    def elapsed(self, k: int) -> float:
        return abs(float(self.times[k]) - self.anchor_time)

    def spline(self, k: int, name: str = "gamma") -> RectBivariateSpline:
        """Interpolant of a saved field: linear in ``xi``, cubic in ``nu``."""
        key = (k, name)
        if key not in self._splines:
            arr = {"gamma": self.gamma, "d_nu": self.d_nu, "d_xi": self.d_xi,
                   "d_nunu": self.d2[0], "d_nuxi": self.d2[1], "d_xixi": self.d2[2]}[name][k]
            kx = 1 if self.lattice.shape[0] > 1 else 0
            ky = 3 if self.lattice.shape[1] > 3 else 1
            if kx == 0:
                raise DomainError("interpolation needs at least two xi nodes")
            self._splines[key] = RectBivariateSpline(self.lattice.xi, self.lattice.nu, arr, kx=kx, ky=ky, s=0)
        return self._splines[key]

    def evaluate(self, k: int, xi, nu, name: str = "gamma"):
        xi, nu = np.broadcast_arrays(np.asarray(xi, dtype=float), np.asarray(nu, dtype=float))
        return self.spline(k, name).ev(xi, nu)

    def rows(self):
        X, V = self.lattice.mesh()
        for k, t in enumerate(self.times):
            cols = [np.full(X.size, t), X.ravel(), V.ravel(), self.gamma[k].ravel(), self.d_nu[k].ravel(),
                    self.d_xi[k].ravel(), self.d2[0][k].ravel(), self.d2[1][k].ravel(), self.d2[2][k].ravel()]
            yield from zip(*cols)

    def to_csv(self, path: str, manifest: dict) -> str:
        header = ["time", "xi", "nu", "gamma", "d_nu", "d_xi", "d_nunu", "d_nuxi", "d_xixi"]
        return write_csv(path, header, self.rows(), dict(manifest, direction=self.direction,
                                                        anchor_time=self.anchor_time))


def _save_plan(n_steps: int, save_every: int) -> np.ndarray:
    if save_every < 1:
        raise DomainError("save_every must be positive")
    idx = list(range(0, n_steps + 1, save_every))
    if idx[-1] != n_steps:
        idx.append(n_steps)
    return np.asarray(idx)


def _variational_step(g: GenericCoefficients, s, X, state, dw, sign):
    """One pathwise step of the flow and its first/second variations."""
    gam, gv, gx, gvv, gvx, gxx = state
    sig = g("sigma", s, X, gam)
    sv = g("sigma", s, X, gam, 0, 1)
    sx = g("sigma", s, X, gam, 1, 0)
    svv = g("sigma", s, X, gam, 0, 2)
    svx = g("sigma", s, X, gam, 1, 1)
    sxx = g("sigma", s, X, gam, 2, 0)
    f = sign * dw
    return (gam + f * sig,
            gv + f * sv * gv,
            gx + f * (sx + sv * gx),
            gvv + f * (svv * gv * gv + sv * gvv),
            gvx + f * (svx * gv + svv * gv * gx + sv * gvx),
            gxx + f * (sxx + 2.0 * svx * gx + svv * gx * gx + sv * gxx))


def _identity_state(lattice: Lattice):
    X, V = lattice.mesh()
    z = np.zeros_like(X)
    return X, (V.copy(), np.ones_like(X), z.copy(), z.copy(), z.copy(), z.copy())


def _pack(direction, anchor, times, lattice, saved, dW, steps) -> FlowSolution:
    arr = [np.stack([s[i] for s in saved]) for i in range(6)]
    return FlowSolution(direction=direction, anchor_time=float(anchor), times=np.asarray(times, dtype=float),
                        lattice=lattice, gamma=arr[0], d_nu=arr[1], d_xi=arr[2], d2=(arr[3], arr[4], arr[5]),
                        driving_increments=np.asarray(dW, dtype=float).copy(), saved_steps=np.asarray(steps))


def solve_forward_flow(coeffs, driving, lattice: Lattice, grid: Optional[TimeGrid] = None,
                       save_every: int = 1) -> FlowSolution:
    """Forward flow ``gamma_{t,s}(xi, nu) = nu - int_t^s sigma(xi, gamma) dW``.

    Euler scheme per lattice node with left-endpoint coefficients; the
    derivatives solve the differentiated scheme, so they are the exact
    lattice-point derivatives of the discrete flow.

    Args:
        coeffs: CoefficientSet (mapped to generic form) or GenericCoefficients.
        driving: DrivingData, a PathBundle, or raw increments (then ``grid`` is needed).
        lattice: ``(xi, nu)`` nodes.
        grid: time grid ``t = t0 < ... < t1``.
        save_every: keep every k-th step (the last step is always kept).

    Returns:
        FlowSolution anchored at ``grid.t0``.
    """
    drv = _as_driving(driving, grid)
    g = _as_generic(coeffs, drv)
    if lattice.shape[0] == 0 or lattice.shape[1] == 0:
        raise DomainError("lattice is empty")
    steps = _save_plan(drv.grid.n_steps, save_every)
    times = drv.grid.times
    X, state = _identity_state(lattice)
    saved = [state] if steps[0] == 0 else []
    for k in range(drv.grid.n_steps):
        state = _variational_step(g, times[k], X, state, drv.dW[k], -1.0)
        if k + 1 in steps:
            saved.append(state)
    return _pack("forward", times[0], times[steps], lattice, saved, drv.dW, steps)


def solve_backward_flow(coeffs, driving, lattice: Lattice, grid: Optional[TimeGrid] = None,
                        save_every: int = 1) -> FlowSolution:
    """Backward flow ``gamma_{t,s}(xi, nu) = nu + int_t^s sigma(xi, gamma) * dW`` anchored at ``s``.

    Built from ``t = s`` downward with right-endpoint (backward Ito)
    increments.  ``times`` are returned in increasing order.
    """
    drv = _as_driving(driving, grid)
    g = _as_generic(coeffs, drv)
    n = drv.grid.n_steps
    steps = _save_plan(n, save_every)
    times = drv.grid.times
    X, state = _identity_state(lattice)
    saved = {n: state} if n in steps else {}
    for k in range(n, 0, -1):
        state = _variational_step(g, times[k], X, state, drv.dW[k - 1], 1.0)
        if k - 1 in steps:
            saved[k - 1] = state
    order = sorted(saved)
    return _pack("backward", times[-1], times[order], lattice, [saved[i] for i in order], drv.dW, order)


# ---------------------------------------------------------------------------
# inverse, transported field
# ---------------------------------------------------------------------------

def invert_flow(f: FlowSolution, k: int, xi, w, tol: float = INVERT_TOL) -> np.ndarray:
    """Solve ``gamma(xi, nu) = w`` for ``nu`` at saved index ``k``.

    Monotone bisection on the interpolated flow followed by Newton
    polishing.  Raises OutOfRangeError if ``w`` is outside the image of the
    lattice's velocity range.
    """
    xi, w = np.broadcast_arrays(np.asarray(xi, dtype=float), np.asarray(w, dtype=float))
    shape = xi.shape
    xi, w = xi.ravel().copy(), w.ravel().copy()
    spl = f.spline(k)
    lo = np.full(xi.shape, float(f.lattice.nu[0]))
    hi = np.full(xi.shape, float(f.lattice.nu[-1]))
    glo, ghi = spl.ev(xi, lo), spl.ev(xi, hi)
    if np.any(w < glo - tol) or np.any(w > ghi + tol):
        raise OutOfRangeError("target outside the image of the lattice under the flow")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = spl.ev(xi, mid) < w
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < 1e-13:
            break
    nu = 0.5 * (lo + hi)
    for _ in range(4):
        r = spl.ev(xi, nu) - w
        if np.max(np.abs(r)) < 0.1 * tol:
            break
        d = spl.ev(xi, nu, dy=1)
        if np.any(d <= 0):
            raise DegenerateFlowError("flow is not increasing in nu")
        nu = nu - r / d
    if np.max(np.abs(spl.ev(xi, nu) - w)) >= tol:
        raise DegenerateFlowError("inversion did not reach the tolerance")
    return nu.reshape(shape)


def transported_field(f: FlowSolution) -> np.ndarray:
    """``Y = (gamma, -gamma d_xi gamma / d_nu gamma)`` on the lattice, shape ``(..., 2)``."""
    if np.any(np.abs(f.d_nu) < DEGENERATE_TOL):
        raise DegenerateFlowError("d_nu gamma vanishes on the lattice")
    return np.stack([f.gamma, -f.gamma * f.d_xi / f.d_nu], axis=-1)


# ---------------------------------------------------------------------------
# likelihood along the lattice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LikelihoodLattice:
    """``L = -log rho`` and its derivatives at fixed lattice points over time.

    ``rho_{t,s}(z) = exp(-int_t^s h(z) dW - 1/2 int_t^s h(z)^2 ds)`` so
    ``L = int h dW + 1/2 int h^2 ds``.
    """

    times: np.ndarray
    lattice: Lattice
    L: np.ndarray
    L_nu: np.ndarray
    L_nunu: np.ndarray
    L_xi: np.ndarray

    def evaluate(self, k: int, xi, nu):
        """``(L, L_nu, L_nunu, L_xi)`` interpolated at ``(xi, nu)``."""
        out = []
        kx = 1
        ky = 3 if self.lattice.shape[1] > 3 else 1
        for arr in (self.L, self.L_nu, self.L_nunu, self.L_xi):
            spl = RectBivariateSpline(self.lattice.xi, self.lattice.nu, arr[k], kx=kx, ky=ky, s=0)
            out.append(spl.ev(xi, nu))
        return tuple(out)


def likelihood_lattice(coeffs, driving, lattice: Lattice, grid: Optional[TimeGrid] = None,
                       save_every: int = 1) -> LikelihoodLattice:
    """Accumulate ``L`` and its derivatives with analytic ``h`` partials (Ito sums)."""
    drv = _as_driving(driving, grid)
    g = _as_generic(coeffs, drv)
    steps = _save_plan(drv.grid.n_steps, save_every)
    X, V = lattice.mesh()
    acc = [np.zeros_like(X) for _ in range(4)]
    saved = [[a.copy() for a in acc]] if steps[0] == 0 else []
    times = drv.grid.times
    dt = drv.grid.dt
    for k in range(drv.grid.n_steps):
        s, dw = times[k], drv.dW[k]
        h = g("h", s, X, V)
        hv = g("h", s, X, V, 0, 1)
        hvv = g("h", s, X, V, 0, 2)
        hx = g("h", s, X, V, 1, 0)
        acc[0] = acc[0] + h * dw + 0.5 * h * h * dt
        acc[1] = acc[1] + hv * dw + h * hv * dt
        acc[2] = acc[2] + hvv * dw + (hv * hv + h * hvv) * dt
        acc[3] = acc[3] + hx * dw + h * hx * dt
        if k + 1 in steps:
            saved.append([a.copy() for a in acc])
    arr = [np.stack([s[i] for s in saved]) for i in range(4)]
    return LikelihoodLattice(times[steps], lattice, *arr)


# ---------------------------------------------------------------------------
# transformed coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransformedCoefficients:
    """``a*, b*, c*`` and the transported field on the lattice at saved times.

    ``m1``/``m2`` are the realized constants of the two-sided bounds on
    ``a*`` and ``d_nu Y_1``; ``bounds_ok`` is False (not an exception) when
    a lower bound is not positive.
    """

    times: np.ndarray
    lattice: Lattice
    a_star: np.ndarray
    b_star: np.ndarray
    c_star: np.ndarray
    Yfield: np.ndarray
    m1: float
    m2: float
    bounds_ok: bool
    exact: bool

    def rows(self):
        X, V = self.lattice.mesh()
        for k, t in enumerate(self.times):
            cols = [np.full(X.size, t), X.ravel(), V.ravel(), self.a_star[k].ravel(), self.b_star[k].ravel(),
                    self.c_star[k].ravel(), self.Yfield[k, ..., 0].ravel(), self.Yfield[k, ..., 1].ravel()]
            yield from zip(*cols)

    def to_csv(self, path: str, manifest: dict) -> str:
        header = ["time", "xi", "nu", "a_star", "b_star", "c_star", "Y1", "Y2"]
        return write_csv(path, header, self.rows(), manifest)


def _two_sided(arr) -> Tuple[float, bool]:
    lo, hi = float(np.min(arr)), float(np.max(arr))
    if lo <= 0:
        return float("inf"), False
    return max(hi, 1.0 / lo), True


def transformed_pointwise(g: GenericCoefficients, s, X, flow_vals, like_vals):
    """Assemble ``a*, b*, c*, Y`` from flow and log-likelihood values at points.

    Args:
        g: generic coefficients.
        s: time.
        X: position coordinates of the evaluation points.
        flow_vals: ``(gamma, d_nu, d_xi, d_nunu)`` at the points.
        like_vals: ``(L, L_nu, L_nunu, L_xi)`` of ``-log rho`` at ``(X, gamma)``.

    Returns:
        ``(a*, b*, c*, Y1, Y2)``.
    """
    gam, gv, gx, gvv = flow_vals
    Lh, Lv, Lvv, Lx = like_vals
    a_h = g("a", s, X, gam)
    b_h = g("b", s, X, gam)
    c_h = g("c", s, X, gam)
    sg_h = g("sigma", s, X, gam)
    h_h = g("h", s, X, gam)
    dsg = g("sigma", s, X, gam, 0, 1) * gv
    dh = g("h", s, X, gam, 0, 1) * gv
    inv = 1.0 / gv
    a_bar = 0.5 * inv ** 2 * (a_h - sg_h ** 2)
    b_bar = inv * (b_h - sg_h * h_h - inv * sg_h * dsg - a_bar * gvv)
    c_bar = c_h - inv * sg_h * dh
    # log of the inverse transformed likelihood and its derivatives (chain rule)
    l_v = Lv * gv
    l_vv = Lvv * gv ** 2 + Lv * gvv
    l_x = Lx + Lv * gx
    Y1 = gam
    Y2 = -gam * gx * inv
    a_star = a_bar
    b_star = b_bar + 2.0 * a_bar * l_v
    c_star = c_bar + b_bar * l_v + a_bar * (l_v ** 2 + l_vv) - (Y1 * l_x + Y2 * l_v) - h_h ** 2
    return a_star, b_star, c_star, Y1, Y2


def transformed_coefficients(coeffs, f: FlowSolution, rho_hat: Optional[LikelihoodLattice] = None,
                             driving=None) -> TransformedCoefficients:
    """Coefficients of the random PDE obtained along the forward flow.

    Args:
        coeffs: CoefficientSet or GenericCoefficients.
        f: forward FlowSolution.
        rho_hat: likelihood lattice on the same lattice and saved times
            (``None`` means ``h = 0`` so ``rho = 1``).
        driving: driving data (needed to map a CoefficientSet with its ``Y`` path).

    Returns:
        TransformedCoefficients with the realized bound constants.
    """
    if f.direction != "forward":
        raise DomainError("transformed coefficients are built on a forward flow")
    if isinstance(coeffs, CoefficientSet):
        if driving is None:
            g = zakai_coefficients(coeffs)
        else:
            drv = _as_driving(driving, None)
            g = zakai_coefficients(coeffs, drv.grid.times, drv.y)
    else:
        g = coeffs
    if rho_hat is not None and rho_hat.L.shape[0] != f.gamma.shape[0]:
        raise DomainError("likelihood lattice and flow must share saved times")
    X, _ = f.lattice.mesh()
    Yf = transported_field(f)
    out = [[], [], []]
    for k, s in enumerate(f.times):
        gam = f.gamma[k]
        if rho_hat is None:
            z = np.zeros_like(gam)
            like = (z, z, z, z)
        else:
            like = rho_hat.evaluate(k, X, gam)
        a, b, c, _, _ = transformed_pointwise(g, s, X, (gam, f.d_nu[k], f.d_xi[k], f.d2[0][k]), like)
        out[0].append(a)
        out[1].append(b)
        out[2].append(c)
    a_star, b_star, c_star = (np.stack(o) for o in out)
    m1, ok1 = _two_sided(a_star)
    m2, ok2 = _two_sided(f.d_nu)
    return TransformedCoefficients(times=f.times, lattice=f.lattice, a_star=a_star, b_star=b_star, c_star=c_star,
                                   Yfield=Yf, m1=m1, m2=m2, bounds_ok=ok1 and ok2,
                                   exact=bool(g.nu_free_h or rho_hat is None))


# ---------------------------------------------------------------------------
# pathwise bounds on the flow gradient
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LemmaBoundFit:
    """Fitted constants of ``exp(-c r^eps) <= d_nu gamma <= exp(c r^eps)`` and ``|d_xi gamma| <= c r^eps``.

    ``r`` is the elapsed time since the anchor.
    """

    eps: float
    c_nu: np.ndarray
    c_xi: np.ndarray
    min_d_nu: float
    sup_dev: Dict[float, float]

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.c_nu)) and np.all(np.isfinite(self.c_xi)))


def fit_lemma_bounds(flows: Sequence[FlowSolution], eps: float, probe_elapsed: Sequence[float] = ()) -> LemmaBoundFit:
    """Fit the per-realization constants over saved times (excluding the anchor).

    ``probe_elapsed`` lists elapsed times at which the supremum of
    ``|d_nu gamma - 1|`` is reported (nearest saved time).
    """
    c_nu, c_xi = [], []
    min_dnu = np.inf
    dev = {float(p): 0.0 for p in probe_elapsed}
    for f in flows:
        r = np.abs(f.times - f.anchor_time)
        keep = r > 0
        w = r[keep] ** eps
        dnu = f.d_nu[keep]
        min_dnu = min(min_dnu, float(np.min(f.d_nu)))
        if np.any(dnu <= 0):
            c_nu.append(np.inf)
        else:
            c_nu.append(float(np.max(np.max(np.abs(np.log(dnu)), axis=(1, 2)) / w)))
        c_xi.append(float(np.max(np.max(np.abs(f.d_xi[keep]), axis=(1, 2)) / w)))
        for p in dev:
            k = int(np.argmin(np.abs(r - p)))
            dev[p] = max(dev[p], float(np.max(np.abs(f.d_nu[k] - 1.0))))
    return LemmaBoundFit(eps=float(eps), c_nu=np.asarray(c_nu), c_xi=np.asarray(c_xi), min_d_nu=min_dnu,
                         sup_dev=dev)
