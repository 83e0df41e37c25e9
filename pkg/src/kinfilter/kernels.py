"""Closed-form Gaussian kernels for kinetic (degenerate) Kolmogorov operators.

Phase points are pairs ``(position, velocity)``.  Kernels are evaluated in
log-space and exponentiated at the end so that far tails underflow gracefully.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, SingularKernelError

SINGULAR_DET = 1e-30
SIMPSON_TOL = 1e-10


def _check_positive(name: str, value) -> None:
    if not np.all(np.asarray(value) > 0.0):
        raise DomainError(f"{name} must be positive, got {value!r}")


def log_gaussian_bound_kernel(lam, dt, dx, dv):
    """Logarithm of :func:`gaussian_bound_kernel` (vectorized)."""
    _check_positive("lambda", lam)
    _check_positive("dt", dt)
    dt = np.asarray(dt, dtype=float)
    dx = np.asarray(dx, dtype=float)
    dv = np.asarray(dv, dtype=float)
    quad = dx * dx / dt ** 3 + dv * dv / dt
    return np.log(lam) - 2.0 * np.log(dt) - quad / (2.0 * lam)


def gaussian_bound_kernel(lam, dt, dx, dv):
    """Anisotropic Gaussian envelope ``lam/dt^2 * exp(-(dx^2/dt^3 + dv^2/dt)/(2 lam))``.

    Args:
        lam: dilation parameter, > 0.
        dt: time lag, > 0.
        dx: position offset (scalar or array).
        dv: velocity offset (scalar or array).

    Returns:
        Kernel value(s), broadcast over the offsets.
    """
    out = np.exp(log_gaussian_bound_kernel(lam, dt, dx, dv))
    return out if np.ndim(out) else float(out)


def characteristic_shift(dt, z):
    """Free transport flow ``(x, v) -> (x + dt*v, v)``; ``z`` has last axis of size 2."""
    z = np.asarray(z, dtype=float)
    out = np.array(z, copy=True)
    out[..., 0] = z[..., 0] + dt * z[..., 1]
    return out


def langevin_covariance(sigma: float, dt: float) -> np.ndarray:
    """Covariance of ``(X, V)`` after time ``dt`` for ``dX = V dt, dV = sigma dW``."""
    _check_positive("dt", dt)
    s2 = sigma * sigma
    return s2 * np.array([[dt ** 3 / 3.0, dt ** 2 / 2.0], [dt ** 2 / 2.0, dt]])


def gaussian2(d1, d2, c11, c12, c22, order: int = 0):
    """Bivariate normal density at offset ``(d1, d2)`` from the mean, with derivatives.

    All arguments broadcast.  Derivatives are taken with respect to the
    evaluation point (equivalently the offset).

    Returns:
        ``p`` if ``order == 0``; ``(p, (p1, p2))`` if ``order == 1``;
        ``(p, (p1, p2), (p11, p12, p22))`` if ``order == 2``.
    """
    c11 = np.asarray(c11, dtype=float)
    det = c11 * c22 - c12 * c12
    if np.any(det < SINGULAR_DET):
        raise SingularKernelError(f"covariance determinant {np.min(det):.3e} below {SINGULAR_DET}")
    i11 = c22 / det
    i12 = -c12 / det
    i22 = c11 / det
    g1 = i11 * d1 + i12 * d2
    g2 = i12 * d1 + i22 * d2
    quad = d1 * g1 + d2 * g2
    logp = -0.5 * quad - np.log(2.0 * np.pi) - 0.5 * np.log(det)
    p = np.exp(logp)
    if order == 0:
        return p
    p1 = -p * g1
    p2 = -p * g2
    if order == 1:
        return p, (p1, p2)
    p11 = p * (g1 * g1 - i11)
    p12 = p * (g1 * g2 - i12)
    p22 = p * (g2 * g2 - i22)
    return p, (p1, p2), (p11, p12, p22)


def exact_langevin_kernel(sigma: float, dt: float, z, zeta):
    """Transition density of ``dX = V dt, dV = sigma dW`` from ``z`` to ``zeta`` in time ``dt``.

    Args:
        sigma: noise amplitude, > 0.
        dt: elapsed time, > 0.
        z: starting phase point ``(x, v)``.
        zeta: target point(s), last axis of size 2.

    Returns:
        Density value(s).
    """
    _check_positive("sigma", sigma)
    _check_positive("dt", dt)
    z = np.asarray(z, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    mean = characteristic_shift(dt, z)
    c = langevin_covariance(sigma, dt)
    p = gaussian2(zeta[..., 0] - mean[..., 0], zeta[..., 1] - mean[..., 1], c[0, 0], c[0, 1], c[1, 1])
    return p if np.ndim(p) else float(p)


def adaptive_simpson(f: Callable[[float], np.ndarray], a: float, b: float, tol: float = SIMPSON_TOL,
                     max_depth: int = 40) -> np.ndarray:
    """Adaptive Simpson quadrature of a (possibly vector-valued) function on ``[a, b]``."""
    fa = np.asarray(f(a), dtype=float)
    fb = np.asarray(f(b), dtype=float)
    m = 0.5 * (a + b)
    fm = np.asarray(f(m), dtype=float)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm = np.asarray(f(lm), dtype=float)
        frm = np.asarray(f(rm), dtype=float)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        delta = left + right - whole
        if depth <= 0 or np.max(np.abs(delta)) <= 15.0 * tol:
            return left + right + delta / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2.0, depth - 1))

    return recurse(a, b, fa, fm, fb, whole, tol, max_depth)


@dataclass(frozen=True)
class LinearizedKernelSpec:
    """Frozen-coefficient data defining a linearized kinetic kernel.

    Attributes:
        freeze_point: ``(t0, z0)`` where the coefficients are frozen.
        frozen_diffusion: ``s -> a_s`` along the frozen trajectory (> 0).
        drift_matrix_path: ``s -> DY_s`` reduced 2x2 Jacobian (only entry (0, 1) nonzero).
        frozen_trajectory: ``s -> gamma_s`` phase point on the frozen characteristic.
    """

    freeze_point: tuple
    frozen_diffusion: Callable[[float], float]
    drift_matrix_path: Callable[[float], Sequence]
    frozen_trajectory: Callable[[float], Sequence]

    def transport_rate(self, s: float) -> float:
        dy = np.asarray(self.drift_matrix_path(s), dtype=float)
        if dy.shape != (2, 2) or dy[0, 0] != 0.0 or dy[1, 0] != 0.0 or dy[1, 1] != 0.0:
            raise DomainError("drift matrix must be reduced: only the (1,2) entry may be nonzero")
        return float(dy[0, 1])


def linearized_moments(spec: LinearizedKernelSpec, t: float, z, s: float, tol: float = SIMPSON_TOL):
    """Mean and covariance of the linearized kernel from ``(t, z)`` to time ``s``.

    The mean follows the affine field ``Y(gamma) + DY (w - gamma)``; the
    covariance is ``int 2 a(tau) E(s,tau) e2 e2^T E(s,tau)^T dtau`` with the
    resolvent ``E`` of the reduced drift.
    """
    if not s > t:
        raise DomainError(f"need t < s, got t={t}, s={s}")
    z = np.asarray(z, dtype=float)

    def rate_integral(lo, hi):
        if hi <= lo:
            return 0.0
        return float(adaptive_simpson(spec.transport_rate, lo, hi, tol=tol * 1e-2))

    p_s = rate_integral(t, s)

    def integrand(tau):
        p = rate_integral(t, tau)
        a2 = 2.0 * float(spec.frozen_diffusion(tau))
        return np.array([a2, a2 * p, a2 * p * p])

    a0, a1, a2 = adaptive_simpson(integrand, t, s, tol=tol)
    cov = np.array([[p_s * p_s * a0 - 2.0 * p_s * a1 + a2, p_s * a0 - a1],
                    [p_s * a0 - a1, a0]])
    g_t = np.asarray(spec.frozen_trajectory(t), dtype=float)
    g_s = np.asarray(spec.frozen_trajectory(s), dtype=float)
    dz = z - g_t
    mean = g_s + np.array([dz[0] + p_s * dz[1], dz[1]])
    return mean, cov


def linearized_kernel(spec: LinearizedKernelSpec, t: float, z, s: float, zeta, derivatives: int = 0):
    """Fundamental solution of the linearized kinetic equation.

    Args:
        spec: frozen-coefficient data.
        t: start time.
        z: start point.
        s: end time, ``s > t``.
        zeta: target point(s), last axis of size 2.
        derivatives: 0, 1 or 2; when positive also return the gradient
            ``(d/dxi, d/dnu)`` and Hessian ``(xixi, xinu, nunu)`` in ``zeta``.

    Returns:
        Density value(s), optionally with derivative tuples.
    """
    mean, cov = linearized_moments(spec, t, z, s)
    zeta = np.asarray(zeta, dtype=float)
    return gaussian2(zeta[..., 0] - mean[0], zeta[..., 1] - mean[1], cov[0, 0], cov[0, 1], cov[1, 1],
                     order=derivatives)
