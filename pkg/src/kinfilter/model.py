"""Coefficient presets for the partially observed kinetic system.

The signal ``(X, V)`` and observation ``Y`` follow

    dX = V dt
    dV = b dt + sigma1 dW^1 + sum_i sigma_hat_i dW^i
    dY = h dt + theta dW^1

Coefficients are named presets with numeric parameters so that scenarios
serialize into config files.  Each preset exposes analytic partial
derivatives in ``(x, v)``; custom sets fall back to finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, DomainError

Fn = Callable[..., np.ndarray]
THETA_GUARD = 1e-12
SCALAR_FIELDS = ("b", "sigma1", "h", "sigma_hat_sq")


def _zeros_like(*args):
    return np.zeros(np.broadcast(*[np.asarray(a, dtype=float) for a in args]).shape)


def _const(value: float) -> Fn:
    def f(t, x, v, y):
        return np.full(np.broadcast(np.asarray(t), np.asarray(x), np.asarray(v), np.asarray(y)).shape,
                       float(value))
    return f


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficients ``(b, sigma1, sigma_hat, theta, h)`` with metadata.

    Attributes:
        preset_id: registry name.
        params: resolved numeric parameters.
        n: Brownian dimension (``1 + len(sigma_hat)``).
        m: coercivity constant.
        holder_alpha: Hoelder regularity tag.
        flatten_eps: weight exponent for the flattening check.
        flatten_M: bound for the weighted derivative sums.
        bound_M: bound on coefficient magnitudes on sampled grids.
        autonomous: coefficients depend on neither time nor the observation,
            so solvers may evaluate them once per lattice.
    """

    preset_id: str
    params: Tuple[Tuple[str, object], ...]
    n: int
    funcs: Mapping[Tuple[str, int, int], Fn] = field(repr=False, compare=False)
    sigma_hat_fn: Fn = field(repr=False, compare=False)
    theta_fn: Callable[[object, object], np.ndarray] = field(repr=False, compare=False)
    m: float = 0.5
    holder_alpha: float = 0.5
    flatten_eps: float = 0.25
    flatten_M: float = 10.0
    bound_M: float = 10.0
    autonomous: bool = False

    # -- raw evaluations -------------------------------------------------
    def b(self, t, x, v, y):
        return self.partial("b", 0, 0)(t, x, v, y)

    def sigma1(self, t, x, v, y):
        return self.partial("sigma1", 0, 0)(t, x, v, y)

    def sigma_hat(self, t, x, v, y):
        """Independent loadings, shape ``broadcast + (n-1,)``."""
        return self.sigma_hat_fn(t, x, v, y)

    def theta(self, t, y):
        return self.theta_fn(t, y)

    def h(self, t, x, v, y):
        return self.partial("h", 0, 0)(t, x, v, y)

    def sigma_sq(self, t, x, v, y):
        """Total squared loading ``sigma1^2 + |sigma_hat|^2``."""
        s1 = self.sigma1(t, x, v, y)
        return s1 * s1 + self.partial("sigma_hat_sq", 0, 0)(t, x, v, y)

    @property
    def param_dict(self) -> Dict[str, object]:
        return dict(self.params)

    def partial(self, name: str, nx: int, nv: int) -> Fn:
        """Partial derivative ``d^nx/dx^nx d^nv/dv^nv`` of a scalar field.

        Analytic when the preset provides it, central differences otherwise.
        """
        if name not in SCALAR_FIELDS:
            raise KeyError(name)
        key = (name, nx, nv)
        if key in self.funcs:
            return self.funcs[key]
        base = self.funcs[(name, 0, 0)]
        return _fd_partial(base, nx, nv)


def _fd_partial(base: Fn, nx: int, nv: int, step: float = 1e-3) -> Fn:
    """Nested central differences of ``base`` (fallback for custom sets)."""
    if nx == 0 and nv == 0:
        return base
    if nx > 0:
        inner = _fd_partial(base, nx - 1, nv, step)

        def fx(t, x, v, y):
            x = np.asarray(x, dtype=float)
            return (inner(t, x + step, v, y) - inner(t, x - step, v, y)) / (2.0 * step)
        return fx
    inner = _fd_partial(base, 0, nv - 1, step)

    def fv(t, x, v, y):
        v = np.asarray(v, dtype=float)
        return (inner(t, x, v + step, y) - inner(t, x, v - step, y)) / (2.0 * step)
    return fv


def _sigma_hat_const(values) -> Fn:
    arr = np.asarray(values, dtype=float).reshape(-1)

    def f(t, x, v, y):
        shape = np.broadcast(np.asarray(t), np.asarray(x), np.asarray(v), np.asarray(y)).shape
        return np.broadcast_to(arr, shape + arr.shape).copy()
    return f


def _theta_const(value: float):
    def f(t, y):
        return np.full(np.broadcast(np.asarray(t), np.asarray(y)).shape, float(value))
    return f


def _parse_vector(value) -> Tuple[float, ...]:
    if isinstance(value, str):
        parts = [p for p in value.replace(";", ",").split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    if np.ndim(value) == 0:
        return (float(value),)
    return tuple(float(p) for p in value)


# ---------------------------------------------------------------------------
# preset factories
# ---------------------------------------------------------------------------

def _build_constant(p: dict) -> dict:
    sh = _parse_vector(p["sigma_hat"])
    sh_sq = float(np.sum(np.square(sh)))
    funcs = {
        ("b", 0, 0): _const(p["b"]),
        ("sigma1", 0, 0): _const(p["sigma1"]),
        ("h", 0, 0): _const(p["h"]),
        ("sigma_hat_sq", 0, 0): _const(sh_sq),
    }
    return dict(funcs=funcs, sigma_hat=sh, theta=float(p["theta"]))


def _build_sinusoidal(p: dict) -> dict:
    b0, s0, s1, h0 = (float(p[k]) for k in ("b0", "s0", "s1", "h0"))
    sh = _parse_vector(p["sigma_hat"])
    sh_sq = float(np.sum(np.square(sh)))

    def b(t, x, v, y):
        return b0 * np.sin(v) + 0.0 * np.asarray(x, dtype=float)

    def b_v(t, x, v, y):
        return b0 * np.cos(v) + 0.0 * np.asarray(x, dtype=float)

    def b_vv(t, x, v, y):
        return -b0 * np.sin(v) + 0.0 * np.asarray(x, dtype=float)

    # sigma1 = s0 + s1 * g(x), g = sin(x)/(1+x^2); derivatives of g by the quotient rule
    def g_derivs(x):
        x = np.asarray(x, dtype=float)
        q = 1.0 / (1.0 + x * x)
        s, c = np.sin(x), np.cos(x)
        # q' = -2x q^2, q'' = (6x^2-2) q^3, q''' = 24 x (1-x^2) q^4
        q1 = -2.0 * x * q * q
        q2 = (6.0 * x * x - 2.0) * q ** 3
        q3 = 24.0 * x * (1.0 - x * x) * q ** 4
        g0 = s * q
        g1 = c * q + s * q1
        g2 = -s * q + 2.0 * c * q1 + s * q2
        g3 = -c * q - 3.0 * s * q1 + 3.0 * c * q2 + s * q3
        return g0, g1, g2, g3

    def _s1(order):
        def f(t, x, v, y):
            g = g_derivs(x)[order]
            val = s1 * g + (s0 if order == 0 else 0.0)
            return val + 0.0 * np.asarray(v, dtype=float)
        return f

    def _h(order):
        def f(t, x, v, y):
            x = np.asarray(x, dtype=float)
            th = np.tanh(x)
            if order == 0:
                val = th
            elif order == 1:
                val = 1.0 - th * th
            elif order == 2:
                val = -2.0 * th * (1.0 - th * th)
            else:
                val = -2.0 * (1.0 - th * th) * (1.0 - 3.0 * th * th)
            return h0 * val + 0.0 * np.asarray(v, dtype=float)
        return f

    zero = lambda t, x, v, y: _zeros_like(x, v)  # noqa: E731
    funcs = {
        ("b", 0, 0): b, ("b", 0, 1): b_v, ("b", 0, 2): b_vv, ("b", 1, 0): zero,
        ("sigma1", 0, 0): _s1(0), ("sigma1", 1, 0): _s1(1), ("sigma1", 2, 0): _s1(2),
        ("sigma1", 3, 0): _s1(3),
        ("h", 0, 0): _h(0), ("h", 1, 0): _h(1), ("h", 2, 0): _h(2), ("h", 3, 0): _h(3),
        ("sigma_hat_sq", 0, 0): _const(sh_sq),
    }
    for name in ("sigma1", "h"):
        for nx in range(0, 3):
            for nv in range(1, 3):
                funcs[(name, nx, nv)] = zero
    return dict(funcs=funcs, sigma_hat=sh, theta=float(p["theta0"]))


def _build_langevin_pure(p: dict) -> dict:
    sh = _parse_vector(p["sigma"])
    sh_sq = float(np.sum(np.square(sh)))
    funcs = {
        ("b", 0, 0): _const(0.0),
        ("sigma1", 0, 0): _const(0.0),
        ("h", 0, 0): _const(0.0),
        ("sigma_hat_sq", 0, 0): _const(sh_sq),
    }
    return dict(funcs=funcs, sigma_hat=sh, theta=float(p["theta"]))


_META_KEYS = ("m", "holder_alpha", "flatten_eps", "flatten_M", "bound_M")

PRESETS = {
    "constant": (_build_constant, dict(b=0.0, sigma1=0.5, sigma_hat="1.0", theta=1.0, h=0.0,
                                       m=0.5, holder_alpha=0.5, flatten_eps=0.25, flatten_M=10.0,
                                       bound_M=10.0)),
    "sinusoidal": (_build_sinusoidal, dict(b0=0.5, s0=0.5, s1=0.3, sigma_hat="1.0", h0=1.0, theta0=1.0,
                                           m=0.5, holder_alpha=0.5, flatten_eps=0.25, flatten_M=10.0,
                                           bound_M=10.0)),
    "langevin-pure": (_build_langevin_pure, dict(sigma="1.0", theta=1.0, m=0.5, holder_alpha=0.5,
                                                 flatten_eps=0.25, flatten_M=10.0, bound_M=10.0)),
}

# Analytic derivatives that vanish identically for constant-type presets.
_CONSTANT_LIKE = ("constant", "langevin-pure")


def make_preset(preset_id: str, **overrides) -> CoefficientSet:
    """Build a registered preset, optionally overriding parameters.

    Args:
        preset_id: one of ``constant``, ``sinusoidal``, ``langevin-pure``.
        **overrides: parameter values (numbers or comma-separated vectors).

    Returns:
        The resolved :class:`CoefficientSet`.
    """
    if preset_id not in PRESETS:
        raise ConfigError(f"unknown preset {preset_id!r}; known: {sorted(PRESETS)}")
    builder, defaults = PRESETS[preset_id]
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown parameters for {preset_id!r}: {sorted(unknown)}")
    params = dict(defaults)
    params.update(overrides)
    built = builder(params)
    funcs = dict(built["funcs"])
    if preset_id in _CONSTANT_LIKE:
        zero = lambda t, x, v, y: _zeros_like(x, v)  # noqa: E731
        for name in SCALAR_FIELDS:
            for nx in range(4):
                for nv in range(4):
                    if nx + nv > 0:
                        funcs[(name, nx, nv)] = zero
    sh = built["sigma_hat"]
    meta = {k: float(params[k]) for k in _META_KEYS}
    resolved = tuple((k, params[k]) for k in sorted(params) if k not in _META_KEYS)
    return CoefficientSet(preset_id=preset_id, params=resolved, n=1 + len(sh), funcs=funcs,
                          sigma_hat_fn=_sigma_hat_const(sh), theta_fn=_theta_const(built["theta"]),
                          autonomous=True, **meta)


def custom_coefficients(b: Fn, sigma1: Fn, sigma_hat: Fn, theta, h: Fn, n: int = 2,
                        partials: Optional[Mapping[Tuple[str, int, int], Fn]] = None,
                        preset_id: str = "custom", **meta) -> CoefficientSet:
    """Coefficient set from user callables (used for checks and tests).

    ``theta`` may be a callable ``(t, y)`` or a number.  Missing partial
    derivatives are evaluated by central differences.
    """
    def sh_sq(t, x, v, y):
        s = np.asarray(sigma_hat(t, x, v, y), dtype=float)
        return np.sum(s * s, axis=-1)

    funcs = {("b", 0, 0): b, ("sigma1", 0, 0): sigma1, ("h", 0, 0): h, ("sigma_hat_sq", 0, 0): sh_sq}
    if partials:
        funcs.update(partials)
    theta_fn = theta if callable(theta) else _theta_const(float(theta))
    return CoefficientSet(preset_id=preset_id, params=(), n=n, funcs=funcs, sigma_hat_fn=sigma_hat,
                          theta_fn=theta_fn, **meta)


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservableFn:
    """Test function ``phi(xi, nu[, y])`` with a sup-norm estimate."""

    name: str
    fn: Callable[..., np.ndarray] = field(repr=False, compare=False)
    bound: float = np.inf
    params: Tuple[Tuple[str, float], ...] = ()

    def __call__(self, xi, nu, y=None):
        out = self.fn(np.asarray(xi, dtype=float), np.asarray(nu, dtype=float), y)
        return np.broadcast_to(out, np.broadcast(np.asarray(xi), np.asarray(nu)).shape).astype(float)


def make_observable(name: str, **params) -> ObservableFn:
    """Observable registry: ``one``, ``x``, ``v``, ``tanh-xi``, ``holder``, ``gaussian``."""
    if name == "one":
        return ObservableFn("one", lambda xi, nu, y: np.ones(np.broadcast(xi, nu).shape), 1.0)
    if name == "x":
        return ObservableFn("x", lambda xi, nu, y: xi + 0.0 * nu)
    if name == "v":
        return ObservableFn("v", lambda xi, nu, y: nu + 0.0 * xi)
    if name == "tanh-xi":
        return ObservableFn("tanh-xi", lambda xi, nu, y: np.tanh(xi) + 0.0 * nu, 1.0)
    if name == "holder":
        alpha = float(params.get("alpha", 0.5))

        def f(xi, nu, y):
            p = np.abs(nu) ** alpha
            return p / (1.0 + p) + 0.0 * xi
        return ObservableFn("holder", f, 1.0, (("alpha", alpha),))
    if name == "gaussian":
        cx = float(params.get("cx", 0.0))
        cv = float(params.get("cv", 0.0))
        vx = float(params.get("vx", 1.0))
        vv = float(params.get("vv", 1.0))

        def g(xi, nu, y):
            return np.exp(-0.5 * ((xi - cx) ** 2 / vx + (nu - cv) ** 2 / vv))
        return ObservableFn("gaussian", g, 1.0, (("cx", cx), ("cv", cv), ("vx", vx), ("vv", vv)))
    raise ConfigError(f"unknown observable {name!r}")


# ---------------------------------------------------------------------------
# checks and derived quantities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleGrid:
    """Product grid of sample points ``t x x x v x y`` (1-D axes)."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray

    def mesh(self):
        return np.meshgrid(self.t, self.x, self.v, self.y, indexing="ij")


def default_verification_grid(radius: float = 50.0, n_radial: int = 18) -> SampleGrid:
    """Symmetric grid whose points spread geometrically out to ``radius``."""
    r = radius * np.geomspace(1e-2, 1.0, n_radial)
    axis = np.concatenate([-r[::-1], [0.0], r])
    return SampleGrid(t=np.array([0.0, 0.5, 1.0]), x=axis, v=axis, y=np.array([-1.0, 0.0, 1.0]))


@dataclass(frozen=True)
class CoercivityReport:
    passed: bool
    margin: float
    theta_margin: float
    sigma_hat_margin: float


def check_coercivity(c: CoefficientSet, grid: SampleGrid) -> CoercivityReport:
    """Worst margins of ``theta^2 - m`` and ``|sigma_hat|^2 - m`` over the grid."""
    t, x, v, y = grid.mesh()
    if t.size == 0:
        raise DomainError("sample grid is empty")
    th = np.asarray(c.theta(t, y), dtype=float)
    sh = np.asarray(c.sigma_hat(t, x, v, y), dtype=float)
    th_m = float(np.min(th * th) - c.m)
    sh_m = float(np.min(np.sum(sh * sh, axis=-1)) - c.m)
    margin = min(th_m, sh_m)
    return CoercivityReport(passed=bool(th_m >= 0.0 and sh_m >= 0.0), margin=margin,
                            theta_margin=th_m, sigma_hat_margin=sh_m)


def tilde_h(c: CoefficientSet, t, x, v, y):
    """Normalized observation drift ``h / theta``."""
    th = np.asarray(c.theta(t, y), dtype=float)
    if np.any(np.abs(th) < THETA_GUARD):
        raise DomainError("observation noise theta vanishes; h/theta undefined")
    out = c.h(t, x, v, y) / th
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class FlatteningReport:
    passed: bool
    weighted_sup: float
    terms: Tuple[Tuple[str, float], ...]
    inner_sup: float
    outer_sup: float


def _fd_derivs_xv(f: Fn, t, x, v, y, order: int, step: float):
    """All partials of total order ``order`` in ``(x, v)`` by central differences."""
    if order == 0:
        return [f(t, x, v, y)]
    out = []
    lower = lambda xx, vv: _fd_derivs_xv(f, t, xx, vv, y, order - 1, step)  # noqa: E731
    px = lower(x + step, v)
    mx = lower(x - step, v)
    out.extend((a - b) / (2.0 * step) for a, b in zip(px, mx))
    # mixed partials already covered by the x-branch except the pure-v one
    pv = lower(x, v + step)[-1]
    mv = lower(x, v - step)[-1]
    out.append((pv - mv) / (2.0 * step))
    return out


def _active_radius2(f: Fn, t, x, v, y, step: float):
    """Squared radius over the coordinates on which ``f`` actually depends."""
    dx, dv = _fd_derivs_xv(f, t, x, v, y, 1, step)
    r2 = np.zeros_like(np.asarray(x, dtype=float))
    if np.max(np.abs(dx)) > 1e-12:
        r2 = r2 + x * x
    if np.max(np.abs(dv)) > 1e-12:
        r2 = r2 + v * v
    return r2


def check_flattening(c: CoefficientSet, grid: SampleGrid, step: float = 1e-3) -> FlatteningReport:
    """Weighted derivative sups of ``sigma1`` and ``h`` compared with ``flatten_M``.

    First derivatives of ``sigma1`` carry the weight ``(1+|w|^2)^eps``,
    second and third ones ``(1+|w|^2)^(1/2+eps)``, first derivatives of ``h``
    ``(1+|w|^2)^(1/2)``.  Here ``|w|`` is the radius in the coordinates the
    coefficient depends on.  The check also fails when the weighted magnitude
    on the outer half of the grid exceeds the inner half, i.e. when it grows
    with the radius.
    """
    t, x, v, y = grid.mesh()
    eps = c.flatten_eps
    s1 = lambda tt, xx, vv, yy: c.sigma1(tt, xx, vv, yy)  # noqa: E731
    hh = lambda tt, xx, vv, yy: c.h(tt, xx, vv, yy)  # noqa: E731
    rs = _active_radius2(s1, t, x, v, y, step)
    rh = _active_radius2(hh, t, x, v, y, step)
    pieces = {}
    pieces["sigma1_d1"] = (1.0 + rs) ** eps * np.max(
        np.abs(np.stack(_fd_derivs_xv(s1, t, x, v, y, 1, step))), axis=0)
    d2 = np.max(np.abs(np.stack(_fd_derivs_xv(s1, t, x, v, y, 2, 10 * step))), axis=0)
    d3 = np.max(np.abs(np.stack(_fd_derivs_xv(s1, t, x, v, y, 3, 30 * step))), axis=0)
    pieces["sigma1_d23"] = (1.0 + rs) ** (0.5 + eps) * np.maximum(d2, d3)
    pieces["h_d1"] = np.sqrt(1.0 + rh) * np.max(np.abs(np.stack(_fd_derivs_xv(hh, t, x, v, y, 1, step))),
                                                 axis=0)
    total = sum(pieces.values())
    r2 = x * x + v * v
    rmax = np.sqrt(np.max(r2))
    inner = np.sqrt(r2) <= 0.5 * rmax
    inner_sup = float(np.max(total[inner]))
    outer_sup = float(np.max(total[~inner])) if np.any(~inner) else 0.0
    sup = float(np.max(total))
    tol = 1e-9 * max(1.0, inner_sup)
    passed = bool(np.isfinite(sup) and sup <= c.flatten_M and outer_sup <= inner_sup + tol)
    terms = tuple((k, float(np.max(v_))) for k, v_ in pieces.items())
    return FlatteningReport(passed=passed, weighted_sup=sup, terms=terms, inner_sup=inner_sup,
                            outer_sup=outer_sup)


def check_bounds(c: CoefficientSet, grid: SampleGrid) -> bool:
    """True when every coefficient evaluation on the grid is finite and within ``bound_M``."""
    t, x, v, y = grid.mesh()
    vals = [c.b(t, x, v, y), c.sigma1(t, x, v, y), c.h(t, x, v, y), c.theta(t, y),
            np.asarray(c.sigma_hat(t, x, v, y))]
    return all(np.all(np.isfinite(a)) and np.max(np.abs(a)) <= c.bound_M for a in vals)
