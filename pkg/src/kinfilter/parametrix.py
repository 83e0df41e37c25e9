"""Parametrix construction for kinetic transport-diffusion equations.

The forward equation in the variables ``(s, zeta)`` is

    d_s v = a d_nunu v + b d_nu v + c v - Y . grad v,

with a transport field ``Y`` whose first component behaves like ``nu``.
Frozen kernels are Gaussians along the nonlinear characteristic of ``Y``;
the remainder kernel ``H`` measures the freezing error and the Duhamel
series sums iterated convolutions with ``H``.  The backward equation
(``d_t u + a d_vv u + b d_v u + c u + Y . grad u = 0``) is handled by
reversing time and the transport field, which turns it into a forward
equation with the roles of the two end points swapped.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import RectBivariateSpline

from .errors import DomainError, OutOfRangeError, SingularKernelError
from .io import write_csv
from .itow import (TransformedCoefficients, invert_flow, likelihood_lattice, make_lattice, solve_forward_flow,
                   transformed_coefficients)
from .kernels import log_gaussian_bound_kernel
from .model import CoefficientSet

log = logging.getLogger(__name__)

LAMBDA_RANGE = (1.0, 1.0e3)
LAMBDA_RESOLUTION = 1.01
DOMAIN_SLACK = 1e-9


def gaussian2(d1, d2, c11, c12, c22, order: int = 0):
    """Bivariate normal density and derivatives at offset ``(d1, d2)``.

    Same contract as :func:`kinfilter.kernels.gaussian2` but accepts the
    tiny (still positive) determinants of very short horizons that nested
    convolutions reach; only non-positive determinants are refused.
    """
    det = c11 * c22 - c12 * c12
    if np.any(~(det > 0)):
        raise SingularKernelError("frozen covariance is not positive definite")
    i11, i12, i22 = c22 / det, -c12 / det, c11 / det
    g1 = i11 * d1 + i12 * d2
    g2 = i12 * d1 + i22 * d2
    p = np.exp(-0.5 * (d1 * g1 + d2 * g2) - math.log(2.0 * math.pi) - 0.5 * np.log(det))
    if order == 0:
        return p
    if order == 1:
        return p, (-p * g1, -p * g2)
    return p, (-p * g1, -p * g2), (p * (g1 * g1 - i11), p * (g1 * g2 - i12), p * (g2 * g2 - i22))


# ---------------------------------------------------------------------------
# coefficient fields
# ---------------------------------------------------------------------------

class TransformedField:
    """Coefficients ``a, b, c`` and transport field ``Y`` of a kinetic equation.

    Subclasses implement :meth:`values`.  ``step`` is the RK4 step used for
    characteristics; ``domain`` is ``((xi_lo, xi_hi), (nu_lo, nu_hi))`` or
    ``None`` for an unbounded field.
    """

    t0: float = 0.0
    t1: float = math.inf
    step: float = 0.01
    domain: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None

    def values(self, s: float, xi, nu):
        """``(a, b, c, Y1, Y2, dY1)`` at time ``s``; ``dY1 = d_nu Y1``."""
        raise NotImplementedError

    def transport(self, s: float, xi, nu):
        """``(a, Y1, Y2, dY1)``; subclasses may skip ``b`` and ``c``."""
        a, _, _, y1, y2, dy1 = self.values(s, xi, nu)
        return a, y1, y2, dy1

    def check(self, s: float, xi, nu) -> None:
        if not self.t0 - DOMAIN_SLACK <= s <= self.t1 + DOMAIN_SLACK:
            raise OutOfRangeError(f"time {s} outside [{self.t0}, {self.t1}]")
        if self.domain is None:
            return
        (x0, x1), (v0, v1) = self.domain
        xi = np.asarray(xi)
        nu = np.asarray(nu)
        if xi.size and (xi.min() < x0 - DOMAIN_SLACK or xi.max() > x1 + DOMAIN_SLACK
                        or nu.min() < v0 - DOMAIN_SLACK or nu.max() > v1 + DOMAIN_SLACK):
            raise OutOfRangeError("characteristic or quadrature node left the coefficient lattice; "
                                  "enlarge the lattice")


def _full(value, shape):
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


class ConstantField(TransformedField):
    """Constant ``a, b, c`` with the free transport ``Y = (nu, 0)``."""

    def __init__(self, a: float, b: float = 0.0, c: float = 0.0, t0: float = 0.0, t1: float = math.inf,
                 step: float = 0.01):
        if a <= 0:
            raise DomainError("diffusion coefficient must be positive")
        self.a, self.b, self.c = float(a), float(b), float(c)
        self.t0, self.t1, self.step = float(t0), float(t1), float(step)

    def values(self, s, xi, nu):
        self.check(s, xi, nu)
        shape = np.broadcast(np.asarray(xi), np.asarray(nu)).shape
        nu = _full(nu, shape)
        return (_full(self.a, shape), _full(self.b, shape), _full(self.c, shape), nu,
                _full(0.0, shape), _full(1.0, shape))


class CallableField(TransformedField):
    """Field given by closed-form callables ``f(s, xi, nu)``."""

    def __init__(self, a: Callable, b: Callable, c: Callable, Y1: Callable, Y2: Callable, dY1: Callable,
                 t0: float = 0.0, t1: float = math.inf, step: float = 0.01, domain=None):
        self._f = (a, b, c, Y1, Y2, dY1)
        self.t0, self.t1, self.step, self.domain = float(t0), float(t1), float(step), domain

    def values(self, s, xi, nu):
        self.check(s, xi, nu)
        shape = np.broadcast(np.asarray(xi), np.asarray(nu)).shape
        return tuple(_full(f(s, xi, nu), shape) for f in self._f)


def _keys_weights(t, derivative: bool = False):
    """Cubic-convolution weights (Keys, a = -1/2) for offsets -1, 0, 1, 2."""
    t2 = t * t
    t3 = t2 * t
    w = np.empty(t.shape + (4,))
    if not derivative:
        w[..., 0] = 0.5 * (-t3 + 2.0 * t2 - t)
        w[..., 1] = 1.5 * t3 - 2.5 * t2 + 1.0
        w[..., 2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t)
        w[..., 3] = 0.5 * (t3 - t2)
    else:
        w[..., 0] = -1.5 * t2 + 2.0 * t - 0.5
        w[..., 1] = 4.5 * t2 - 5.0 * t
        w[..., 2] = -4.5 * t2 + 4.0 * t + 0.5
        w[..., 3] = 1.5 * t2 - t
    return w


_OFFSETS = np.arange(-1, 3)


class CubicStack:
    """Cubic-convolution interpolation of stacked fields on a uniform lattice.

    ``data`` has shape ``(nx, ny, F)``; all fields are gathered in one pass
    and ``deriv`` lists the columns whose nu-derivative is also returned.
    Indices are clamped at the lattice edge.
    """

    def __init__(self, x, y, data, deriv: Sequence[int] = ()):
        self.x0, self.y0 = float(x[0]), float(y[0])
        self.hx = float(x[1] - x[0]) if len(x) > 1 else 1.0
        self.hy = float(y[1] - y[0]) if len(y) > 1 else 1.0
        for ax, h in ((x, self.hx), (y, self.hy)):
            if len(ax) > 1 and np.max(np.abs(np.diff(ax) - h)) > 1e-9 * max(1.0, abs(h)):
                raise DomainError("cubic interpolation needs a uniform lattice")
        data = np.asarray(data, dtype=float)
        self.nx, self.ny, self.nf = data.shape
        self.flat = np.ascontiguousarray(data.reshape(self.nx * self.ny, self.nf))
        self.deriv = list(deriv)

    def _axis(self, p, p0, h, n):
        u = (p - p0) / h
        i = np.minimum(np.maximum(np.floor(u), 0.0), max(n - 2, 0)).astype(np.intp)
        idx = np.minimum(np.maximum(i[:, None] + _OFFSETS, 0), n - 1)
        return idx, u - i

    def __call__(self, px, py):
        """Values ``(M, F)`` and nu-derivatives ``(M, len(deriv))`` (or None)."""
        ix, tx = self._axis(np.ravel(px), self.x0, self.hx, self.nx)
        iy, ty = self._axis(np.ravel(py), self.y0, self.hy, self.ny)
        nb = np.take(self.flat, (ix[:, :, None] * self.ny + iy[:, None, :]).reshape(-1, 16), axis=0)
        wx = _keys_weights(tx)
        w = (wx[:, :, None] * _keys_weights(ty)[:, None, :]).reshape(-1, 16)
        vals = np.einsum("mk,mkf->mf", w, nb)
        if not self.deriv:
            return vals, None
        wd = (wx[:, :, None] * _keys_weights(ty, True)[:, None, :]).reshape(-1, 16)
        der = np.einsum("mk,mkf->mf", wd, nb[..., self.deriv]) / self.hy
        return vals, der


class LatticeField(TransformedField):
    """Field interpolated from :class:`TransformedCoefficients`.

    Cubic convolution in space at each saved time, linear in time between
    saved times; ``d_nu Y1`` is the derivative of the interpolant.
    """

    NAMES = ("a", "b", "c", "Y1", "Y2")
    _SETS = {"values": (0, 1, 2, 3, 4), "transport": (0, 3, 4)}

    def __init__(self, tc: TransformedCoefficients, step: Optional[float] = None):
        self.tc = tc
        self.times = np.asarray(tc.times, dtype=float)
        self.t0, self.t1 = float(self.times[0]), float(self.times[-1])
        gaps = np.diff(self.times)
        self.step = float(step if step is not None else (gaps.min() if gaps.size else 0.01))
        lat = tc.lattice
        self.domain = ((float(lat.xi[0]), float(lat.xi[-1])), (float(lat.nu[0]), float(lat.nu[-1])))
        self._data = np.stack([tc.a_star, tc.b_star, tc.c_star, tc.Yfield[..., 0], tc.Yfield[..., 1]], axis=-1)
        self._cache: Dict[tuple, CubicStack] = {}

    def _pair(self, k: int, which: str) -> CubicStack:
        """Interpolant of the selected fields at saved times ``k`` and ``k + 1``."""
        key = (k, which)
        if key not in self._cache:
            if len(self._cache) > 64:
                self._cache.clear()
            cols = list(self._SETS[which])
            k1 = min(k + 1, self.times.size - 1)
            data = np.concatenate([self._data[k][..., cols], self._data[k1][..., cols]], axis=-1)
            y1 = cols.index(3)
            self._cache[key] = CubicStack(self.tc.lattice.xi, self.tc.lattice.nu, data,
                                          deriv=(y1, y1 + len(cols)))
        return self._cache[key]

    def _eval(self, s, xi, nu, which: str):
        self.check(s, xi, nu)
        shape = np.broadcast(np.asarray(xi), np.asarray(nu)).shape
        x = np.broadcast_to(np.asarray(xi, dtype=float), shape)
        v = np.broadcast_to(np.asarray(nu, dtype=float), shape)
        if self.times.size == 1:
            k, w = 0, 0.0
        else:
            k = int(np.clip(np.searchsorted(self.times, s, side="right") - 1, 0, self.times.size - 2))
            w = float(np.clip((s - self.times[k]) / (self.times[k + 1] - self.times[k]), 0.0, 1.0))
        vals, der = self._pair(k, which)(x, v)
        m = vals.shape[1] // 2
        blended = (1.0 - w) * vals[:, :m] + w * vals[:, m:]
        dy1 = (1.0 - w) * der[:, 0] + w * der[:, 1]
        return tuple(blended[:, i].reshape(shape) for i in range(m)) + (dy1.reshape(shape),)

    def values(self, s, xi, nu):
        return self._eval(s, xi, nu, "values")

    def transport(self, s, xi, nu):
        return self._eval(s, xi, nu, "transport")


class ReversedField(TransformedField):
    """Time reversal ``s -> pivot - s`` with the transport field negated.

    The backward equation for a field ``F`` is the forward equation for
    ``ReversedField(F, pivot)``; kernels correspond after swapping the
    end points.
    """

    def __init__(self, base: TransformedField, pivot: float):
        self.base = base
        self.pivot = float(pivot)
        self.t0, self.t1 = self.pivot - base.t1, self.pivot - base.t0
        self.step = base.step
        self.domain = base.domain

    def values(self, s, xi, nu):
        a, b, c, y1, y2, dy1 = self.base.values(self.pivot - s, xi, nu)
        return a, b, c, -y1, -y2, -dy1

    def transport(self, s, xi, nu):
        a, y1, y2, dy1 = self.base.transport(self.pivot - s, xi, nu)
        return a, -y1, -y2, -dy1


def deterministic_field(c: CoefficientSet, t0: float = 0.0, t1: float = 1.0, step: float = 0.01,
                        y: float = 0.0, probe=None) -> CallableField:
    """Backward Kolmogorov field of the signal when ``sigma1 = h = 0``.

    The operator is ``1/2 |sigma|^2 d_vv + b d_v + v d_x`` with the
    observation frozen at ``y``.
    """
    pts = np.linspace(-3.0, 3.0, 7) if probe is None else np.asarray(probe, dtype=float)
    X, V = np.meshgrid(pts, pts, indexing="ij")
    for s in (t0, 0.5 * (t0 + min(t1, t0 + 1.0))):
        if np.max(np.abs(c.sigma1(s, X, V, y))) > 0 or np.max(np.abs(c.h(s, X, V, y))) > 0:
            raise DomainError("the deterministic case needs sigma1 = 0 and h = 0")
    return CallableField(a=lambda s, x, v: 0.5 * c.sigma_sq(s, x, v, y),
                         b=lambda s, x, v: c.b(s, x, v, y),
                         c=lambda s, x, v: 0.0,
                         Y1=lambda s, x, v: v, Y2=lambda s, x, v: 0.0, dY1=lambda s, x, v: 1.0,
                         t0=t0, t1=t1, step=step)


def model_field(c: CoefficientSet, driving, lattice=None, save_every: int = 1) -> LatticeField:
    """Transformed-equation field of a model along realized driving data."""
    lattice = make_lattice() if lattice is None else lattice
    f = solve_forward_flow(c, driving, lattice, save_every=save_every)
    like = likelihood_lattice(c, driving, lattice, save_every=save_every)
    return LatticeField(transformed_coefficients(c, f, like, driving))


def _as_field(obj) -> TransformedField:
    if isinstance(obj, TransformedField):
        return obj
    if isinstance(obj, TransformedCoefficients):
        return LatticeField(obj)
    raise DomainError("expected a TransformedField or TransformedCoefficients")


# ---------------------------------------------------------------------------
# frozen characteristics
# ---------------------------------------------------------------------------

def _rhs(fld: TransformedField, s: float, st: np.ndarray) -> np.ndarray:
    a, y1, y2, dy1 = fld.transport(s, st[0], st[1])
    a2 = 2.0 * a
    p = st[2]
    return np.stack([y1, y2, dy1, a2, a2 * p, a2 * p * p])


def _march(fld: TransformedField, t_from: float, pts, targets: Sequence[float]):
    """RK4 on ``gamma' = Y(gamma)`` with the covariance accumulators.

    The state is ``(gamma1, gamma2, P, A0, A1, A2)`` with ``P' = d_nu Y1``,
    ``A0' = 2a``, ``A1' = 2a P``, ``A2' = 2a P^2``.  ``targets`` must be
    monotone in the direction of integration; returns the state at each.
    """
    pts = np.asarray(pts, dtype=float)
    st = np.zeros((6,) + pts.shape[:-1])
    st[0], st[1] = pts[..., 0], pts[..., 1]
    cur = float(t_from)
    out = []
    for tgt in targets:
        span = float(tgt) - cur
        n = int(math.ceil(abs(span) / fld.step - 1e-9)) if span != 0.0 else 0
        if n:
            h = span / n
            for i in range(n):
                s = cur + i * h
                k1 = _rhs(fld, s, st)
                k2 = _rhs(fld, s + 0.5 * h, st + 0.5 * h * k1)
                k3 = _rhs(fld, s + 0.5 * h, st + 0.5 * h * k2)
                k4 = _rhs(fld, s + h, st + h * k3)
                st = st + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        cur = float(tgt)
        fld.check(cur, st[0], st[1])
        out.append(st.copy())
    return out


def _forward_moments(st):
    """End point and covariance ``(c11, c12, c22)`` from a forward march."""
    p, a0, a1, a2 = st[2], st[3], st[4], st[5]
    return np.stack([st[0], st[1]], axis=-1), (p * p * a0 - 2.0 * p * a1 + a2, p * a0 - a1, a0)


def _backward_envelope(st):
    """Pre-image and covariance in the start variable from a backward march.

    After marching back from ``(s, zeta)`` to ``tau`` the accumulators give
    ``Q = -P``, ``C22 = -A0``, ``C12 = A1``, ``C11 = -A2``; the start-variable
    covariance is ``E^-1 C E^-T`` with ``E = [[1, Q], [0, 1]]``.
    """
    q = -st[2]
    c11, c12, c22 = -st[5], st[4], -st[3]
    w11 = c11 - 2.0 * q * c12 + q * q * c22
    w12 = c12 - q * c22
    return np.stack([st[0], st[1]], axis=-1), (w11, w12, c22)


def _frozen_flow(fld: TransformedField, tau: float, w, s: float, n_flow: int):
    """End points and covariances of frozen kernels started at many points ``w``.

    Marches every start point when there are at most ``n_flow^2`` of them;
    otherwise marches a ``n_flow x n_flow`` lattice over the bounding box of
    ``w`` and interpolates with bicubic splines.
    """
    w = np.asarray(w, dtype=float)
    pts = w.reshape(-1, 2)
    if pts.shape[0] <= n_flow * n_flow:
        gam, cov = _forward_moments(_march(fld, tau, pts, [s])[0])
    else:
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        pad = np.maximum(1e-6, 1e-3 * (hi - lo))
        ax = [np.linspace(lo[i] - pad[i], hi[i] + pad[i], n_flow) for i in range(2)]
        X, V = np.meshgrid(ax[0], ax[1], indexing="ij")
        g, c = _forward_moments(_march(fld, tau, np.stack([X, V], axis=-1), [s])[0])
        fields = (g[..., 0], g[..., 1]) + tuple(c)
        vals = [RectBivariateSpline(ax[0], ax[1], f, kx=3, ky=3, s=0).ev(pts[:, 0], pts[:, 1]) for f in fields]
        gam = np.stack(vals[:2], axis=-1)
        cov = tuple(vals[2:])
    shape = w.shape[:-1]
    return gam.reshape(shape + (2,)), tuple(ci.reshape(shape) for ci in cov)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

class ParametrixKernel:
    """Forward parametrix ``Z(t, z; s, zeta)``: Gaussian frozen at ``(t, z)``."""

    def __init__(self, fld: TransformedField, n_flow: int = 33):
        self.field = _as_field(fld)
        self.n_flow = n_flow

    # envelopes used to place quadrature nodes
    def envelope_out(self, t: float, z, taus):
        """Mean and covariance of ``K(t, z; tau, .)`` at each ``tau`` (increasing)."""
        states = _march(self.field, t, np.asarray(z, dtype=float)[None, :], taus)
        means, covs = [], []
        for st in states:
            g, c = _forward_moments(st)
            means.append(g[0])
            covs.append(np.array([[c[0][0], c[1][0]], [c[1][0], c[2][0]]]))
        return np.array(means), np.array(covs)

    def envelope_in(self, taus, s: float, zeta):
        """Mean and covariance of ``K(tau, .; s, zeta)`` in the start variable.

        Returns arrays of shape ``(n_tau, G, 2)`` and ``(n_tau, G, 2, 2)``.
        """
        taus = np.asarray(taus, dtype=float)
        order = np.argsort(-taus)
        states = _march(self.field, s, zeta, taus[order])
        G = zeta.shape[0]
        means = np.empty((taus.size, G, 2))
        covs = np.empty((taus.size, G, 2, 2))
        for j, st in zip(order, states):
            m, (c11, c12, c22) = _backward_envelope(st)
            means[j] = m
            covs[j] = np.stack([np.stack([c11, c12], -1), np.stack([c12, c22], -1)], -2)
        return means, covs

    def _moments_from(self, t, z, s):
        g, c = _forward_moments(_march(self.field, t, np.asarray(z, dtype=float)[None, :], [s])[0])
        return g[0], tuple(ci[0] for ci in c)

    def start(self, t: float, z, s: float, zeta, order: int = 0):
        """Kernel from the single point ``z`` to points ``zeta`` (derivatives in ``zeta``)."""
        if not s > t:
            raise DomainError(f"need t < s, got t={t}, s={s}")
        zeta = np.asarray(zeta, dtype=float)
        g, c = self._moments_from(t, z, s)
        return gaussian2(zeta[..., 0] - g[0], zeta[..., 1] - g[1], *c, order=order)

    def between(self, tau: float, w, s: float, zeta, order: int = 0):
        """Kernel from many start points ``w`` to ``zeta`` (broadcast)."""
        if not s > tau:
            raise DomainError(f"need tau < s, got tau={tau}, s={s}")
        zeta = np.asarray(zeta, dtype=float)
        g, c = _frozen_flow(self.field, tau, w, s, self.n_flow)
        return gaussian2(zeta[..., 0] - g[..., 0], zeta[..., 1] - g[..., 1], *c, order=order)


class RemainderKernel(ParametrixKernel):
    """Remainder ``H = (L_s - L_s^{frozen}) Z`` of the forward parametrix.

    ``L = a d_nunu + b d_nu + c - Y . grad`` and the frozen operator keeps
    ``a`` at the characteristic point and the affine part of ``Y``.
    """

    def _assemble(self, s, gam, cov, zeta):
        p, (p1, p2), (_, _, p22) = gaussian2(zeta[..., 0] - gam[..., 0], zeta[..., 1] - gam[..., 1], *cov,
                                             order=2)
        a_z, b_z, c_z, y1_z, y2_z, _ = self.field.values(s, zeta[..., 0], zeta[..., 1])
        a_g, y1_g, y2_g, dy1_g = self.field.transport(s, gam[..., 0], gam[..., 1])
        lin1 = y1_g + dy1_g * (zeta[..., 1] - gam[..., 1])
        return (a_z - a_g) * p22 - ((y1_z - lin1) * p1 + (y2_z - y2_g) * p2) + b_z * p2 + c_z * p

    def start(self, t, z, s, zeta, order: int = 0):
        if not s > t:
            raise DomainError(f"need t < s, got t={t}, s={s}")
        zeta = np.asarray(zeta, dtype=float)
        g, c = self._moments_from(t, z, s)
        return self._assemble(s, np.broadcast_to(g, zeta.shape), c, zeta)

    def between(self, tau, w, s, zeta, order: int = 0):
        if not s > tau:
            raise DomainError(f"need tau < s, got tau={tau}, s={s}")
        w = np.asarray(w, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        g, c = _frozen_flow(self.field, tau, w, s, self.n_flow)
        shape = np.broadcast_shapes(g.shape, zeta.shape)
        g = np.broadcast_to(g, shape)
        c = tuple(np.broadcast_to(ci, shape[:-1]) for ci in c)
        return self._assemble(s, g, c, np.broadcast_to(zeta, shape))


class ScaledKernel:
    """``scale * K``; keeps the envelopes of ``K``."""

    def __init__(self, kernel, scale: float):
        self.kernel, self.scale = kernel, float(scale)

    def envelope_out(self, *args):
        return self.kernel.envelope_out(*args)

    def envelope_in(self, *args):
        return self.kernel.envelope_in(*args)

    def start(self, *args, **kw):
        return self.scale * self.kernel.start(*args, **kw)

    def between(self, *args, **kw):
        return self.scale * self.kernel.between(*args, **kw)


class ZeroKernel(ScaledKernel):
    def __init__(self, kernel):
        super().__init__(kernel, 0.0)


# ---------------------------------------------------------------------------
# Duhamel convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureSpec:
    """Quadrature parameters for Duhamel convolutions.

    Attributes:
        n_time: Gauss-Legendre nodes per half of ``[t, s]`` (after the
            ``u^2`` substitution towards each end point).
        n_space: Gauss-Hermite nodes per axis.
        n_space_table: Gauss-Hermite nodes per axis inside tabulated
            iterated kernels (their values enter only higher-order terms).
        n_flow: lattice size per axis for tabulated frozen flows.
        n_table: grid size per axis for tabulated iterated kernels.
        table_extent: half-width of that grid in standard deviations.
        prune: drop Gauss-Hermite nodes whose weight is below this fraction
            of the largest.
        tol: relative gap between refinements accepted as converged.
    """

    n_time: int = 8
    n_space: int = 16
    n_space_table: int = 8
    n_flow: int = 17
    n_table: int = 25
    table_extent: float = 5.0
    prune: float = 1e-14
    tol: float = 1e-3
    chunk: int = 40000

    def coarser(self) -> "QuadratureSpec":
        return replace(self, n_time=max(2, self.n_time // 2), n_space=max(4, self.n_space // 2))

    def for_tables(self) -> "QuadratureSpec":
        return replace(self, n_space=self.n_space_table)


def time_nodes(t: float, s: float, n: int):
    """Nodes and weights on ``[t, s]`` clustered quadratically at both ends."""
    u, wu = leggauss(n)
    u = 0.5 * (u + 1.0)
    wu = 0.5 * wu
    m = 0.5 * (t + s)
    h = m - t
    taus = np.concatenate([t + h * u * u, s - h * u[::-1] ** 2])
    wts = np.concatenate([2.0 * h * u * wu, 2.0 * h * u[::-1] * wu[::-1]])
    return taus, wts


def _hermite2(n: int, prune: float):
    x, w = hermegauss(n)
    w = w / math.sqrt(2.0 * math.pi)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    keep = W.ravel() >= prune * W.max()
    return np.stack([X1.ravel(), X2.ravel()], axis=-1)[keep], W.ravel()[keep]


def _inv2(c):
    det = c[..., 0, 0] * c[..., 1, 1] - c[..., 0, 1] * c[..., 1, 0]
    out = np.empty_like(c)
    out[..., 0, 0] = c[..., 1, 1] / det
    out[..., 1, 1] = c[..., 0, 0] / det
    out[..., 0, 1] = -c[..., 0, 1] / det
    out[..., 1, 0] = -c[..., 1, 0] / det
    return out


def _chol2(c):
    l11 = np.sqrt(c[..., 0, 0])
    l21 = c[..., 1, 0] / l11
    l22 = np.sqrt(np.maximum(c[..., 1, 1] - l21 * l21, 0.0))
    L = np.zeros_like(c)
    L[..., 0, 0], L[..., 1, 0], L[..., 1, 1] = l11, l21, l22
    return L


@dataclass(frozen=True)
class ConvolutionResult:
    """Values of a Duhamel convolution with the refinement gap when checked."""

    values: np.ndarray
    gap: float = float("nan")
    converged: bool = True


def _convolve(K1, K2, t, z, s, zeta, spec: QuadratureSpec):
    zeta = np.asarray(zeta, dtype=float)
    shape = zeta.shape[:-1]
    Z = zeta.reshape(-1, 2)
    block = max(1, spec.chunk // spec.n_space ** 2)
    if Z.shape[0] > block:
        parts = [_convolve(K1, K2, t, z, s, Z[i:i + block], spec) for i in range(0, Z.shape[0], block)]
        return np.concatenate(parts).reshape(shape)
    taus, wts = time_nodes(t, s, spec.n_time)
    mu1, C1 = K1.envelope_out(t, z, taus)
    mu2, C2 = K2.envelope_in(taus, s, Z)
    x, wgh = _hermite2(spec.n_space, spec.prune)
    x2 = 0.5 * np.sum(x * x, axis=-1)
    total = np.zeros(Z.shape[0])
    for j, tau in enumerate(taus):
        P1 = _inv2(C1[j])
        P2 = _inv2(C2[j])
        C = _inv2(P1[None] + P2)
        mu = np.einsum("gij,gj->gi", C, (P1 @ mu1[j])[None] + np.einsum("gij,gj->gi", P2, mu2[j]))
        L = _chol2(C)
        nodes = mu[:, None, :] + np.einsum("gij,nj->gni", L, x)
        logdet = np.log(L[:, 0, 0] * L[:, 1, 1])
        inv_q = np.exp(x2[None, :] + math.log(2.0 * math.pi) + logdet[:, None])
        f1 = K1.start(t, z, tau, nodes)
        f2 = K2.between(tau, nodes, s, Z[:, None, :])
        total += wts[j] * np.sum(wgh[None, :] * f1 * f2 * inv_q, axis=1)
    return total.reshape(shape)


def duhamel_convolve(K1, K2, t: float, z, s: float, zeta, spec: Optional[QuadratureSpec] = None,
                     check: bool = False) -> ConvolutionResult:
    """``int_t^s int K1(t, z; tau, w) K2(tau, w; s, zeta) dw dtau``.

    Time nodes cluster at both end points (``tau - t ~ u^2`` and
    ``s - tau ~ u^2``); for each ``tau`` the space nodes are tensor
    Gauss-Hermite nodes of the Gaussian product of the envelopes of
    ``K1(t, z; tau, .)`` and ``K2(tau, .; s, zeta)``, so both the start-side
    and the end-side concentration are resolved.

    Args:
        K1: start-side kernel (``start`` and ``envelope_out``).
        K2: end-side kernel (``between`` and ``envelope_in``).
        t, z: start time and point.
        s: end time, ``s > t``.
        zeta: end points, last axis of size 2.
        spec: quadrature parameters.
        check: also evaluate with a coarser rule and report the gap.

    Returns:
        ConvolutionResult; ``converged`` is False when the relative gap
        exceeds ``spec.tol`` (a warning is logged, nothing is raised).
    """
    if not s > t:
        raise DomainError(f"need t < s, got t={t}, s={s}")
    spec = spec or QuadratureSpec()
    if isinstance(K2, ZeroKernel) or isinstance(K1, ZeroKernel):
        return ConvolutionResult(np.zeros(np.asarray(zeta).shape[:-1]), 0.0 if check else float("nan"))
    vals = _convolve(K1, K2, t, z, s, zeta, spec)
    if not check:
        return ConvolutionResult(vals)
    coarse = _convolve(K1, K2, t, z, s, zeta, spec.coarser())
    scale = max(float(np.max(np.abs(vals))), 1e-300)
    gap = float(np.max(np.abs(vals - coarse))) / scale
    ok = gap <= spec.tol
    if not ok:
        log.warning("Duhamel quadrature not converged: relative refinement gap %.3e > %.1e", gap, spec.tol)
    return ConvolutionResult(vals, gap, ok)


class ConvolvedKernel:
    """Start-side kernel ``int K1(t, z; tau, w) K2(tau, w; s, .) dw dtau``.

    Values for a fixed ``(t, z, s)`` are tabulated on a grid aligned with
    the frozen Gaussian of the leading kernel and interpolated (zero
    outside), so the kernel can be nested in further convolutions.
    """

    def __init__(self, K1, K2, spec: Optional[QuadratureSpec] = None):
        self.K1, self.K2 = K1, K2
        self.spec = (spec or QuadratureSpec()).for_tables()
        self._tables: Dict[tuple, tuple] = {}

    def envelope_out(self, t, z, taus):
        return self.K1.envelope_out(t, z, taus)

    def envelope_in(self, taus, s, zeta):
        raise NotImplementedError("convolved kernels are only used on the start side")

    def _table(self, t, z, s):
        key = (float(t), tuple(np.asarray(z, dtype=float).tolist()), float(s))
        if key not in self._tables:
            mean, cov = self.envelope_out(t, z, [s])
            mean, cov = mean[0], cov[0]
            L = _chol2(cov)
            ax = np.linspace(-self.spec.table_extent, self.spec.table_extent, self.spec.n_table)
            U1, U2 = np.meshgrid(ax, ax, indexing="ij")
            pts = mean + np.stack([U1, U2], axis=-1) @ L.T
            vals = duhamel_convolve(self.K1, self.K2, t, z, s, pts, self.spec).values
            spl = RectBivariateSpline(ax, ax, vals, kx=3, ky=3, s=0)
            self._tables[key] = (mean, np.linalg.inv(L), spl, self.spec.table_extent)
        return self._tables[key]

    def start(self, t, z, s, zeta, order: int = 0):
        mean, Linv, spl, ext = self._table(t, z, s)
        zeta = np.asarray(zeta, dtype=float)
        u = (zeta - mean) @ Linv.T
        inside = np.all(np.abs(u) <= ext, axis=-1)
        out = np.zeros(zeta.shape[:-1])
        out[inside] = spl.ev(u[inside][:, 0], u[inside][:, 1])
        return out


# ---------------------------------------------------------------------------
# public kernel evaluations and the series
# ---------------------------------------------------------------------------

def parametrix_Z(tc, t: float, z, s: float, zeta, derivatives: int = 0):
    """Forward parametrix ``Z(t, z; s, zeta)``.

    Args:
        tc: TransformedField or TransformedCoefficients.
        t, z: start time and point.
        s: end time, ``s > t``.
        zeta: end points, last axis of size 2.
        derivatives: 0, 1 or 2 (gradient and Hessian in ``zeta`` as in
            :func:`kinfilter.kernels.gaussian2`).

    Raises:
        OutOfRangeError: the characteristic leaves the coefficient lattice.
    """
    return ParametrixKernel(tc).start(t, z, s, zeta, order=derivatives)


def kernel_H(tc, t: float, z, s: float, zeta):
    """Remainder kernel ``H(t, z; s, zeta)`` of the forward parametrix."""
    return RemainderKernel(tc).start(t, z, s, zeta)


@dataclass(frozen=True)
class ParametrixSeries:
    """Truncated Duhamel series on an evaluation set.

    ``terms[k]`` holds ``Z (x) H^(x)k`` at the evaluation points.  For the
    forward direction the start ``(t, z)`` is fixed and ``points`` are end
    points; for the backward direction the end ``(s, zeta)`` is fixed and
    ``points`` are start points.
    """

    N: int
    direction: str
    t: float
    s: float
    anchor: Tuple[float, float]
    points: np.ndarray
    terms: Tuple[np.ndarray, ...]
    quadrature: QuadratureSpec

    @property
    def total(self) -> np.ndarray:
        return np.sum(self.terms, axis=0)

    @property
    def sup_norms(self) -> Tuple[float, ...]:
        return tuple(float(np.max(np.abs(term))) for term in self.terms)

    @property
    def ratios(self) -> Tuple[float, ...]:
        n = self.sup_norms
        # a vanished term followed by another vanished term counts as decay
        return tuple(n[k + 1] / n[k] if n[k] > 0 else (0.0 if n[k + 1] == 0 else float("inf"))
                     for k in range(len(n) - 1))

    @property
    def decay_ratio(self) -> float:
        """Largest ratio of consecutive correction sup-norms (``k >= 1``)."""
        r = self.ratios[1:]
        return max(r) if r else float("nan")

    def rows(self):
        pts = self.points.reshape(-1, 2)
        cols = [t.ravel() for t in self.terms]
        for i in range(pts.shape[0]):
            yield (pts[i, 0], pts[i, 1]) + tuple(c[i] for c in cols) + (sum(c[i] for c in cols),)

    def to_csv(self, path: str, manifest: dict) -> str:
        header = ["xi", "nu"] + [f"term{k}" for k in range(self.N)] + ["total"]
        return write_csv(path, header, self.rows(), manifest)


def _series_terms(fld, N, t, z, s, points, spec):
    Zk = ParametrixKernel(fld, spec.n_flow)
    Hk = RemainderKernel(fld, spec.n_flow)
    terms = [Zk.start(t, z, s, points)]
    lead = Hk
    for k in range(1, N):
        terms.append(duhamel_convolve(lead, Zk, t, z, s, points, spec).values)
        if k + 1 < N:
            lead = ConvolvedKernel(lead, Hk, spec)
    return terms


def parametrix_series(tc, N: int, t: float, z, s: float, zeta, spec: Optional[QuadratureSpec] = None,
                      direction: str = "forward") -> ParametrixSeries:
    """Truncated parametrix series ``sum_{k<N} Z (x) H^(x)k``.

    Args:
        tc: TransformedField or TransformedCoefficients.
        N: number of terms, ``>= 1``.
        t, s: start and end times, ``t < s``.
        z: forward: the start point; backward: start points (array).
        zeta: forward: end points (array); backward: the end point.
        spec: quadrature parameters.
        direction: ``"forward"`` (kernel in the end variable) or
            ``"backward"`` (kernel in the start variable, frozen at the end).

    Returns:
        ParametrixSeries; a warning is logged when the decay ratio is >= 1.
    """
    if N < 1:
        raise DomainError("truncation order N must be >= 1")
    if not s > t:
        raise DomainError(f"need t < s, got t={t}, s={s}")
    spec = spec or QuadratureSpec()
    fld = _as_field(tc)
    if direction == "forward":
        anchor, points = np.asarray(z, dtype=float), np.asarray(zeta, dtype=float)
        terms = _series_terms(fld, N, t, anchor, s, points, spec)
    elif direction == "backward":
        anchor, points = np.asarray(zeta, dtype=float), np.asarray(z, dtype=float)
        rev = ReversedField(fld, t + s)
        terms = _series_terms(rev, N, t, anchor, s, points, spec)
    else:
        raise DomainError(f"unknown direction {direction!r}")
    out = ParametrixSeries(N, direction, float(t), float(s), tuple(anchor.tolist()), points,
                           tuple(np.asarray(x) for x in terms), spec)
    if N >= 3 and out.decay_ratio >= 1.0:
        log.warning("parametrix series does not decay: ratio %.3f >= 1", out.decay_ratio)
    return out


def series_nu_derivatives(tc, N: int, t: float, z, s: float, zeta, spec: Optional[QuadratureSpec] = None,
                          rel_step: float = 0.05):
    """Series value and its first two ``nu``-derivatives at end points.

    The leading term is differentiated analytically; correction terms by
    central differences with step ``rel_step * sqrt(s - t)``.
    """
    spec = spec or QuadratureSpec()
    fld = _as_field(tc)
    zeta = np.asarray(zeta, dtype=float)
    p, (_, p2), (_, _, p22) = ParametrixKernel(fld, spec.n_flow).start(t, z, s, zeta, order=2)
    if N == 1:
        return p, p2, p22
    h = rel_step * math.sqrt(s - t)
    shift = np.array([0.0, h])
    stacked = np.stack([zeta - shift, zeta, zeta + shift])
    terms = _series_terms(fld, N, t, np.asarray(z, dtype=float), s, stacked, spec)
    corr = np.sum(terms[1:], axis=0)
    d1 = (corr[2] - corr[0]) / (2.0 * h)
    d2 = (corr[2] - 2.0 * corr[1] + corr[0]) / (h * h)
    return p + corr[1], p2 + d1, p22 + d2


def scaled_grid(center, horizon: float, n: int = 13, extent: float = 3.0) -> np.ndarray:
    """Points ``center + (u h^1.5, w h^0.5)`` with ``u, w`` on ``[-extent, extent]``."""
    ax = np.linspace(-extent, extent, n)
    U, W = np.meshgrid(ax, ax, indexing="ij")
    c = np.asarray(center, dtype=float)
    return np.stack([c[0] + U * horizon ** 1.5, c[1] + W * horizon ** 0.5], axis=-1)


def characteristic_end(tc, t: float, z, s: float) -> np.ndarray:
    """End point ``gamma_s`` of the characteristic of ``Y`` from ``(t, z)``."""
    st = _march(_as_field(tc), t, np.asarray(z, dtype=float)[None, :], [s])[0]
    return np.array([st[0][0], st[1][0]])


def whitened_grid(tc, t: float, z, s: float, n: int = 41, extent: float = 7.0):
    """Grid adapted to the frozen kernel ``Z(t, z; s, .)``.

    Points are ``mean + L u`` with ``u`` on ``[-extent, extent]^2`` and
    ``L`` the Cholesky factor of the kernel covariance.

    Returns:
        (points of shape (n, n, 2), cell area in the original variables).
    """
    mean, cov = ParametrixKernel(_as_field(tc)).envelope_out(t, z, [s])
    L = _chol2(cov[0])
    ax = np.linspace(-extent, extent, n)
    U1, U2 = np.meshgrid(ax, ax, indexing="ij")
    pts = mean[0] + np.stack([U1, U2], axis=-1) @ L.T
    du = ax[1] - ax[0]
    return pts, du * du * L[0, 0] * L[1, 1]


# ---------------------------------------------------------------------------
# Gaussian sandwich certification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SandwichReport:
    """Outcome of a two-sided Gaussian bound fit.

    ``lam`` is the largest of the fitted constants (kernel and the
    requested derivatives); it is ``nan`` on failure.
    """

    success: bool
    lam: float
    lam_kernel: float
    lam_d1: float
    lam_d2: float
    horizon: float
    n_points: int
    message: str = ""

    def rows(self):
        yield (self.horizon, self.success, self.lam, self.lam_kernel, self.lam_d1, self.lam_d2, self.n_points,
               self.message)

    def to_csv(self, path: str, manifest: dict) -> str:
        header = ["horizon", "success", "lam", "lam_kernel", "lam_d1", "lam_d2", "n_points", "message"]
        return write_csv(path, header, self.rows(), manifest)


def _smallest_lambda(ok: Callable[[float], bool], lo: float, hi: float, resolution: float) -> Optional[float]:
    if ok(lo):
        return lo
    if not ok(hi):
        return None
    while hi / lo > resolution:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def certify_sandwich(values, t: float, s: float, center, zeta, d1=None, d2=None, flow=None,
                     flow_index: Optional[int] = None, lam_range=LAMBDA_RANGE,
                     resolution: float = LAMBDA_RESOLUTION) -> SandwichReport:
    """Fit ``lam`` with ``Gamma_{1/lam} <= K <= Gamma_lam`` on a grid.

    Offsets are ``zeta - center``; when ``flow`` is given the end points are
    first pulled back through the flow (``nu -> g^{-1}(xi, nu)`` at saved
    index ``flow_index``).  Derivative checks use ``|d1| sqrt(s - t) <=
    Gamma_lam`` and ``|d2| (s - t) <= Gamma_lam``.

    Returns:
        SandwichReport; ``success`` is False when the kernel is not positive
        on the grid or no ``lam`` in ``lam_range`` works.
    """
    h = s - t
    if not h > 0:
        raise DomainError(f"need t < s, got t={t}, s={s}")
    values = np.asarray(values, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if flow is not None:
        k = flow.times.size - 1 if flow_index is None else flow_index
        zeta = np.stack([zeta[..., 0], invert_flow(flow, k, zeta[..., 0], zeta[..., 1])], axis=-1)
    d = zeta - np.asarray(center, dtype=float)
    nan = float("nan")
    if not np.all(values > 0):
        return SandwichReport(False, nan, nan, nan, nan, h, values.size, "kernel not positive on the grid")
    lo, hi = lam_range
    logv = np.log(values)

    def both(lam):
        upper = np.all(logv <= log_gaussian_bound_kernel(lam, h, d[..., 0], d[..., 1]))
        lower = np.all(log_gaussian_bound_kernel(1.0 / lam, h, d[..., 0], d[..., 1]) <= logv)
        return bool(upper and lower)

    def bounded(arr, power):
        with np.errstate(divide="ignore"):
            la = np.log(np.abs(np.asarray(arr, dtype=float)) * h ** power)
        return lambda lam: bool(np.all(la <= log_gaussian_bound_kernel(lam, h, d[..., 0], d[..., 1])))

    lam_k = _smallest_lambda(both, lo, hi, resolution)
    lam_1 = _smallest_lambda(bounded(d1, 0.5), lo, hi, resolution) if d1 is not None else None
    lam_2 = _smallest_lambda(bounded(d2, 1.0), lo, hi, resolution) if d2 is not None else None
    fails = [name for name, lam, req in (("kernel", lam_k, True), ("d_nu", lam_1, d1 is not None),
                                         ("d_nunu", lam_2, d2 is not None)) if req and lam is None]
    as_f = (lambda v: nan if v is None else float(v))
    if fails:
        return SandwichReport(False, nan, as_f(lam_k), as_f(lam_1), as_f(lam_2), h, values.size,
                              "no lambda in range for " + ", ".join(fails))
    lam = max(v for v in (lam_k, lam_1, lam_2) if v is not None)
    return SandwichReport(True, float(lam), as_f(lam_k), as_f(lam_1), as_f(lam_2), h, values.size)


@dataclass(frozen=True)
class RemainderBound:
    """Fitted constant ``C`` of ``|H| <= C (s-t)^(alpha/2 - 1) Gamma_lam``.

    ``scaled_sup[i]`` is ``sup |H| (s-t)^(1 - alpha/2) / Gamma_lam`` at
    ``horizons[i]`` over the scaled offsets; ``C`` is its maximum.
    """

    alpha_bar: float
    lam_bar: float
    horizons: Tuple[float, ...]
    scaled_sup: Tuple[float, ...]

    @property
    def C(self) -> float:
        return max(self.scaled_sup)


def fit_remainder_bound(tc, t: float, z, horizons: Sequence[float], alpha_bar: float = 1.0, lam_bar: float = 4.0,
                        n: int = 13, extent: float = 3.0) -> RemainderBound:
    """Sweep ``H`` over horizons at fixed scaled offsets from the characteristic."""
    fld = _as_field(tc)
    H = RemainderKernel(fld)
    out = []
    for h in horizons:
        s = t + h
        center = characteristic_end(fld, t, z, s)
        pts = scaled_grid(center, h, n, extent)
        vals = H.start(t, z, s, pts)
        d = pts - center
        env = np.exp(log_gaussian_bound_kernel(lam_bar, h, d[..., 0], d[..., 1]))
        out.append(float(np.max(np.abs(vals) * h ** (1.0 - 0.5 * alpha_bar) / env)))
    return RemainderBound(alpha_bar, lam_bar, tuple(float(h) for h in horizons), tuple(out))


# ---------------------------------------------------------------------------
# deterministic backward Cauchy problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CauchySolution:
    """``f(t, z)`` with ``d_v f`` and ``d_vv f`` at the evaluation points."""

    t: float
    T: float
    points: np.ndarray
    f: np.ndarray
    f_v: np.ndarray
    f_vv: np.ndarray

    def rows(self):
        pts = self.points.reshape(-1, 2)
        for i, (x, v) in enumerate(pts):
            yield (self.t, x, v, self.f.ravel()[i], self.f_v.ravel()[i], self.f_vv.ravel()[i])

    def to_csv(self, path: str, manifest: dict) -> str:
        return write_csv(path, ["t", "x", "v", "f", "f_v", "f_vv"], self.rows(), manifest)


def solve_backward_cauchy(tc, phi, T: float, t: float, z, n_space: int = 32, batch: int = 256) -> CauchySolution:
    """``f(t, z) = int Gamma_back(t, z; T, zeta) phi(zeta) dzeta`` by kernel quadrature.

    The backward kernel is the frozen backward parametrix (exact for
    constant coefficients).  For each evaluation point the terminal
    variable is integrated with tensor Gauss-Hermite nodes aligned with the
    kernel's envelope; derivatives in ``v`` are analytic.

    Args:
        tc: deterministic field (see :func:`deterministic_field`).
        phi: terminal datum, ObservableFn or callable ``phi(xi, nu)``.
        T: terminal time.
        t: evaluation time, ``t < T``.
        z: evaluation points, last axis of size 2.
        n_space: Gauss-Hermite nodes per axis.
        batch: evaluation points per vectorized block.

    Returns:
        CauchySolution.
    """
    if not t < T:
        raise DomainError(f"need t < T, got t={t}, T={T}")
    fld = _as_field(tc)
    pivot = t + T
    rev = ParametrixKernel(ReversedField(fld, pivot))
    r0, r1 = pivot - T, pivot - t
    z = np.asarray(z, dtype=float)
    pts = z.reshape(-1, 2)
    x, wgh = _hermite2(n_space, 1e-16)
    x2 = 0.5 * np.sum(x * x, axis=-1)
    out = np.zeros((3, pts.shape[0]))
    for lo in range(0, pts.shape[0], batch):
        P = pts[lo:lo + batch]
        mu, C = rev.envelope_in([r0], r1, P)
        L = _chol2(C[0])
        nodes = mu[0][:, None, :] + np.einsum("gij,nj->gni", L, x)
        inv_q = np.exp(x2[None, :] + math.log(2.0 * math.pi) + np.log(L[:, 0, 0] * L[:, 1, 1])[:, None])
        p, (_, p2), (_, _, p22) = rev.between(r0, nodes, r1, P[:, None, :], order=2)
        ph = np.asarray(phi(nodes[..., 0], nodes[..., 1]), dtype=float)
        wq = wgh[None, :] * inv_q * ph
        out[0, lo:lo + batch] = np.sum(wq * p, axis=1)
        out[1, lo:lo + batch] = np.sum(wq * p2, axis=1)
        out[2, lo:lo + batch] = np.sum(wq * p22, axis=1)
    shape = z.shape[:-1]
    return CauchySolution(float(t), float(T), z, out[0].reshape(shape), out[1].reshape(shape),
                          out[2].reshape(shape))
