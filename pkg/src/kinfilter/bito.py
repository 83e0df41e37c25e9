"""Backward Ito calculus on discrete grids.

The backward integral uses right-endpoint Riemann sums.  The checks
assemble both sides of the backward Ito formula and of the backward
diffusion SPDE on dyadic meshes of a common fine Brownian path and report
the residual versus mesh together with a fitted convergence rate.
Ordinary ``ds``-integrals are evaluated by the composite Simpson rule.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .errors import DomainError
from .io import write_csv


@dataclass(frozen=True)
class BackwardIntegralResult:
    """Right-endpoint sum with its values on dyadically coarsened meshes.

    ``refinement_trace`` holds ``(dt, value)`` pairs from the coarsest mesh
    to the input mesh.
    """

    value: float
    mesh: float
    refinement_trace: tuple


def _check_paths(u, w, times):
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if u.shape != w.shape or u.ndim != 1 or u.size < 2:
        raise DomainError("integrand and Brownian path must be 1-D arrays on a common grid")
    if times is not None and np.asarray(times).shape != u.shape:
        raise DomainError("time grid does not match the paths")
    return u, w


def backward_sum(u, w) -> float:
    """``sum_k u[k] (w[k] - w[k-1])``: integrand taken at the right endpoint."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    return float(np.sum(u[1:] * np.diff(w)))


def forward_sum(u, w) -> float:
    """``sum_k u[k-1] (w[k] - w[k-1])``: the usual (left-endpoint) Ito sum."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    return float(np.sum(u[:-1] * np.diff(w)))


def backward_integral(u, w, times=None, min_steps: int = 1) -> BackwardIntegralResult:
    """Backward stochastic integral of ``u`` against ``w`` on a common grid.

    Args:
        u: integrand values at the grid points.
        w: Brownian path at the grid points.
        times: optional grid times (uniform spacing assumed for ``mesh``).
        min_steps: stop coarsening below this number of steps.

    Returns:
        BackwardIntegralResult with a dyadic refinement trace.
    """
    u, w = _check_paths(u, w, times)
    n = u.size - 1
    span = (float(times[-1]) - float(times[0])) if times is not None else float(n)
    trace = []
    stride = 1
    while n % stride == 0 and n // stride >= min_steps:
        trace.append((span * stride / n, backward_sum(u[::stride], w[::stride])))
        if (n // stride) % 2:
            break
        stride *= 2
    trace = tuple(reversed(trace))
    return BackwardIntegralResult(value=trace[-1][1], mesh=span / n, refinement_trace=trace)


def simpson_weights(n: int, h: float) -> np.ndarray:
    """Composite Simpson weights on ``n+1`` points (trapezoid if ``n`` is odd)."""
    if n < 1:
        raise DomainError("need at least one interval")
    if n % 2:
        w = np.full(n + 1, h)
        w[0] = w[-1] = 0.5 * h
        return w
    w = np.empty(n + 1)
    w[0] = w[-1] = h / 3.0
    w[1:-1:2] = 4.0 * h / 3.0
    w[2:-1:2] = 2.0 * h / 3.0
    return w


def fitted_rate(meshes, residuals) -> float:
    """Least-squares slope of ``log residual`` against ``log mesh``."""
    meshes = np.asarray(meshes, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    ok = residuals > 0
    if np.count_nonzero(ok) < 2:
        return float("inf")
    return float(np.polyfit(np.log(meshes[ok]), np.log(residuals[ok]), 1)[0])


# ---------------------------------------------------------------------------
# test functions and scalar SDE presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothFunction:
    """``v(t, x)`` with the partial derivatives needed by the Ito formula."""

    name: str
    f: Callable
    f_t: Callable
    f_x: Callable
    f_xx: Callable


def make_test_function(name: str, **params) -> SmoothFunction:
    """Registry: ``identity``, ``square``, ``time-sin``, ``sigmoid``, ``cos-mixed``."""
    z = lambda t, x: 0.0 * np.asarray(x, dtype=float) + 0.0 * np.asarray(t, dtype=float)  # noqa: E731
    if name == "identity":
        return SmoothFunction(name, lambda t, x: np.asarray(x, dtype=float) + 0.0 * t, z,
                              lambda t, x: 1.0 + z(t, x), z)
    if name == "square":
        return SmoothFunction(name, lambda t, x: np.asarray(x) ** 2 + 0.0 * t, z,
                              lambda t, x: 2.0 * np.asarray(x) + 0.0 * t, lambda t, x: 2.0 + z(t, x))
    if name == "time-sin":
        return SmoothFunction(name, lambda t, x: np.sin(t) + z(t, x), lambda t, x: np.cos(t) + z(t, x), z, z)
    if name == "sigmoid":
        k = float(params.get("k", 2.0))

        def s(t, x):
            return 1.0 / (1.0 + np.exp(-k * np.asarray(x))) + 0.0 * t

        def s1(t, x):
            q = s(t, x)
            return k * q * (1.0 - q)

        def s2(t, x):
            q = s(t, x)
            return k * k * q * (1.0 - q) * (1.0 - 2.0 * q)
        return SmoothFunction(name, s, z, s1, s2)
    if name == "cos-mixed":
        return SmoothFunction(name, lambda t, x: np.cos(x) * np.exp(-t),
                              lambda t, x: -np.cos(x) * np.exp(-t),
                              lambda t, x: -np.sin(x) * np.exp(-t),
                              lambda t, x: -np.cos(x) * np.exp(-t))
    raise DomainError(f"unknown test function {name!r}")


@dataclass(frozen=True)
class ScalarSDE:
    """Autonomous scalar SDE ``dX = b(X) ds + sigma(X) dW``."""

    name: str
    b: Callable
    sigma: Callable
    deterministic: bool = False


def make_scalar_sde(name: str, **params) -> ScalarSDE:
    """Registry: ``ou``, ``brownian``, ``constant-drift``, ``sine-drift``, ``geometric``."""
    if name == "ou":
        kappa = float(params.get("kappa", 1.0))
        sig = float(params.get("sigma", 1.0))
        return ScalarSDE(name, lambda x: -kappa * x, lambda x: sig + 0.0 * x)
    if name == "brownian":
        sig = float(params.get("sigma", 1.0))
        return ScalarSDE(name, lambda x: 0.0 * x, lambda x: sig + 0.0 * x)
    if name == "constant-drift":
        b0 = float(params.get("b", 0.7))
        return ScalarSDE(name, lambda x: b0 + 0.0 * x, lambda x: 0.0 * x, deterministic=True)
    if name == "sine-drift":
        a = float(params.get("a", 1.0))
        return ScalarSDE(name, lambda x: a * np.sin(x), lambda x: 0.0 * x, deterministic=True)
    if name == "geometric":
        mu = float(params.get("mu", 0.1))
        sig = float(params.get("sigma", 0.4))
        return ScalarSDE(name, lambda x: mu * x, lambda x: sig * x)
    raise DomainError(f"unknown scalar SDE {name!r}")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualReport:
    """Median absolute residual per mesh and the fitted rate in ``dt``."""

    name: str
    meshes: np.ndarray
    median_residual: np.ndarray
    rate: float
    max_residual: np.ndarray

    def rows(self):
        for dt, med, mx in zip(self.meshes, self.median_residual, self.max_residual):
            yield (self.name, float(dt), float(med), float(mx), self.rate)

    def to_csv(self, path: str, manifest: dict) -> str:
        return write_csv(path, ["check", "mesh", "median_residual", "max_residual", "fitted_rate"],
                         self.rows(), manifest)


def _report(name, meshes, residuals) -> ResidualReport:
    res = np.abs(np.asarray(residuals, dtype=float))
    med = np.median(res.reshape(res.shape[0], -1), axis=1)
    mx = np.max(res.reshape(res.shape[0], -1), axis=1)
    return ResidualReport(name=name, meshes=np.asarray(meshes, dtype=float), median_residual=med,
                          rate=fitted_rate(meshes, med), max_residual=mx)


def brownian_paths(seeds: Sequence[int], n_steps: int, T: float, stream: int = rng.STREAM_AUX) -> np.ndarray:
    """Brownian paths of shape ``(len(seeds), n_steps+1)`` started at 0."""
    dt = T / n_steps
    out = np.zeros((len(seeds), n_steps + 1))
    for i, s in enumerate(seeds):
        out[i, 1:] = np.cumsum(np.sqrt(dt) * rng.normals(int(s), 0, 0, n_steps, stream=stream))
    return out


def backward_integral_convergence(seeds: Sequence[int], T: float = 1.0, n_fine: int = 2 ** 12,
                                  levels: Sequence[int] = (2 ** 4, 2 ** 5, 2 ** 6, 2 ** 7, 2 ** 8, 2 ** 9,
                                                           2 ** 10)) -> ResidualReport:
    """Deviation of ``int W * dW`` from ``W_T^2/2 + T/2`` over seeds and meshes."""
    paths = brownian_paths(seeds, n_fine, T)
    meshes, res = [], []
    for n in levels:
        if n_fine % n:
            raise DomainError("levels must divide the fine grid")
        w = paths[:, :: n_fine // n]
        val = np.sum(w[:, 1:] * np.diff(w, axis=1), axis=1)
        res.append(val - (0.5 * w[:, -1] ** 2 + 0.5 * T))
        meshes.append(T / n)
    return _report("backward-integral", meshes, res)


# ---------------------------------------------------------------------------
# backward Ito formula
# ---------------------------------------------------------------------------

def backward_ito_process(x_T, b: Callable, sigma: Callable, w: np.ndarray, T: float) -> np.ndarray:
    """Build ``X`` from ``-dX = b(t,X) dt + sigma(t,X) * dW`` backward from ``X_T``.

    ``w`` has shape ``(paths, n+1)``; coefficients are evaluated at the
    right endpoint of each step.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    n = w.shape[1] - 1
    dt = T / n
    ts = np.linspace(0.0, T, n + 1)
    x = np.empty_like(w)
    x[:, -1] = x_T
    for k in range(n, 0, -1):
        dw = w[:, k] - w[:, k - 1]
        x[:, k - 1] = x[:, k] + b(ts[k], x[:, k]) * dt + sigma(ts[k], x[:, k]) * dw
    return x


def backward_ito_check(v: SmoothFunction, b: Callable, sigma: Callable, x_T: Callable,
                       seeds: Sequence[int], T: float = 1.0, n_fine: int = 2 ** 10,
                       levels: Optional[Sequence[int]] = None) -> ResidualReport:
    """Residual of the backward Ito formula for ``v(t, X_t)``.

    ``X`` is a backward Ito process built on the fine grid; on each mesh the
    residual is

        v(0,X_0) - v(T,X_T) - int (-v_t + sigma^2 v_xx / 2 + b v_x) dt - sum sigma v_x dW

    with the stochastic sum evaluated at right endpoints.  The time
    derivative enters with a minus sign because time runs backward.

    Args:
        v: test function with derivatives.
        b, sigma: coefficients ``(t, x) -> value`` of the backward process.
        x_T: map from the Brownian path array to terminal values.
        seeds: independent Brownian paths.
        T: horizon.
        n_fine: fine grid size (a power of two).
        levels: mesh sizes (divisors of ``n_fine``); defaults to dyadic levels.
    """
    if levels is None:
        levels = [2 ** k for k in range(3, int(np.log2(n_fine)) + 1)]
    w = brownian_paths(seeds, n_fine, T)
    x = backward_ito_process(x_T(w), b, sigma, w, T)
    ts_f = np.linspace(0.0, T, n_fine + 1)
    meshes, res = [], []
    for n in levels:
        if n_fine % n:
            raise DomainError("levels must divide the fine grid")
        stride = n_fine // n
        xs = x[:, ::stride]
        ws = w[:, ::stride]
        ts = ts_f[::stride]
        h = T / n
        vx = v.f_x(ts, xs)
        sg = sigma(ts, xs)
        drift = -v.f_t(ts, xs) + 0.5 * sg ** 2 * v.f_xx(ts, xs) + b(ts, xs) * vx
        dt_part = drift @ simpson_weights(n, h)
        st_part = np.sum((sg * vx)[:, 1:] * np.diff(ws, axis=1), axis=1)
        lhs = v.f(ts[0], xs[:, 0]) - v.f(ts[-1], xs[:, -1])
        res.append(lhs - dt_part - st_part)
        meshes.append(h)
    return _report(f"backward-ito[{v.name}]", meshes, res)


# ---------------------------------------------------------------------------
# backward diffusion SPDE
# ---------------------------------------------------------------------------

def _rk4_flow(b, x, h):
    k1 = b(x)
    k2 = b(x + 0.5 * h * k1)
    k3 = b(x + 0.5 * h * k2)
    k4 = b(x + h * k3)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def terminal_flow_values(sde: ScalarSDE, w: np.ndarray, T: float, start_indices: np.ndarray,
                         points: np.ndarray) -> np.ndarray:
    """``X^{t_j, x}_T`` for all start indices ``j`` and start points ``x``.

    Uses Euler-Maruyama on the fine grid of ``w`` (RK4 when the SDE is
    deterministic), with common noise across start points.

    Returns:
        Array of shape ``(paths, len(start_indices), len(points))``.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    n = w.shape[1] - 1
    h = T / n
    starts = np.asarray(start_indices)
    pts = np.asarray(points, dtype=float)
    state = np.broadcast_to(pts, (w.shape[0], starts.size, pts.size)).copy()
    for i in range(n):
        active = (starts <= i)[None, :, None]
        if not np.any(active):
            continue
        if sde.deterministic:
            new = _rk4_flow(sde.b, state, h)
        else:
            dw = (w[:, i + 1] - w[:, i])[:, None, None]
            new = state + sde.b(state) * h + sde.sigma(state) * dw
        state = np.where(active, new, state)
    return state


def _spde_residuals(sde: ScalarSDE, x_lattice, T, seeds, n_fine, levels, fd_step, v: Optional[SmoothFunction]):
    x_lattice = np.asarray(x_lattice, dtype=float)
    n_max = max(levels)
    if n_fine % n_max:
        raise DomainError("levels must divide the fine grid")
    w = brownian_paths(seeds, n_fine, T)
    if sde.deterministic:
        w = np.zeros_like(w)
    starts = np.arange(0, n_fine + 1, n_fine // n_max)
    pts = np.concatenate([x_lattice - fd_step, x_lattice, x_lattice + fd_step])
    vals = terminal_flow_values(sde, w, T, starts, pts)
    m = x_lattice.size
    lo, mid, hi = vals[..., :m], vals[..., m:2 * m], vals[..., 2 * m:]
    d1 = (hi - lo) / (2.0 * fd_step)
    d2 = (hi - 2.0 * mid + lo) / fd_step ** 2
    if v is not None:
        # chain-rule identities for V = v(X)
        vp = v.f_x(T, mid)
        vpp = v.f_xx(T, mid)
        g, g1, g2 = v.f(T, mid), vp * d1, vpp * d1 * d1 + vp * d2
        g0 = v.f(T, x_lattice)
    else:
        g, g1, g2 = mid, d1, d2
        g0 = x_lattice
    bx = sde.b(x_lattice)
    sx = sde.sigma(x_lattice)
    meshes, res = [], []
    for n in levels:
        stride = n_max // n
        sel = slice(None, None, stride)
        h = T / n
        ws = w[:, :: n_fine // n]
        dW = np.diff(ws, axis=1)[:, :, None]
        gg1 = g1[:, sel]
        gg2 = g2[:, sel]
        drift = bx * gg1 + 0.5 * sx ** 2 * gg2
        dt_part = np.einsum("pkx,k->px", drift, simpson_weights(n, h))
        st_part = np.sum(sx * gg1[:, 1:] * dW, axis=1)
        res.append(g[:, 0] - g0 - dt_part - st_part)
        meshes.append(h)
    return meshes, res


def backward_diffusion_spde_check(sde: ScalarSDE, x_lattice, T: float, seeds: Sequence[int],
                                  n_fine: int = 2 ** 10, levels: Sequence[int] = (4, 8, 16, 32, 64, 128),
                                  fd_step: float = 1e-3) -> ResidualReport:
    """Residual of the backward diffusion SPDE for ``(t, x) -> X^{t,x}_T`` at ``t = 0``.

    Terminal values are simulated with common noise over the lattice and
    all start times of the finest mesh; spatial derivatives come from
    central differences on neighbouring start points.  On each mesh

        X^{0,x}_T - x - int (b X_x + sigma^2 X_xx / 2)(s) ds - sum sigma(x) X_x(t_k) dW_k

    is reported (right-endpoint stochastic sum).
    """
    meshes, res = _spde_residuals(sde, x_lattice, T, seeds, n_fine, levels, fd_step, None)
    return _report(f"backward-spde[{sde.name}]", meshes, res)


def invariance_check(v: SmoothFunction, sde: ScalarSDE, x_lattice, T: float, seeds: Sequence[int],
                     n_fine: int = 2 ** 10, levels: Sequence[int] = (4, 8, 16, 32, 64, 128),
                     fd_step: float = 1e-3) -> ResidualReport:
    """Same residual for ``V = v(X^{t,x}_T)`` using chain-rule derivatives of ``V``."""
    meshes, res = _spde_residuals(sde, x_lattice, T, seeds, n_fine, levels, fd_step, v)
    return _report(f"invariance[{v.name},{sde.name}]", meshes, res)
