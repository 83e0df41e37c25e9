import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfilter.errors import DomainError, SingularKernelError
from kinfilter.kernels import (LinearizedKernelSpec, adaptive_simpson, characteristic_shift,
                               exact_langevin_kernel, gaussian_bound_kernel, langevin_covariance,
                               linearized_kernel, linearized_moments)

# frozen with 30-digit arithmetic: sqrt(3)/pi and exp(-1)
PEAK_SIGMA1_DT1 = 0.551328895421792049511326498313
EXP_MINUS_ONE = 0.367879441171442321595523770161


def test_bound_kernel_values():
    assert gaussian_bound_kernel(2.0, 1.0, 0.0, 0.0) == pytest.approx(2.0, rel=1e-15)
    assert gaussian_bound_kernel(1.0, 1.0, 1.0, 1.0) == pytest.approx(EXP_MINUS_ONE, rel=1e-15)


@pytest.mark.parametrize("lam,dt", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (1.0, -0.5)])
def test_bound_kernel_domain(lam, dt):
    with pytest.raises(DomainError):
        gaussian_bound_kernel(lam, dt, 0.0, 0.0)


@given(lam=st.floats(0.1, 50), dt=st.floats(0.01, 5), dx=st.floats(-3, 3), dv=st.floats(-3, 3),
       c=st.floats(0.2, 5))
@settings(max_examples=200, deadline=None)
def test_bound_kernel_anisotropic_scaling(lam, dt, dx, dv, c):
    lhs = gaussian_bound_kernel(lam, c * c * dt, c ** 3 * dx, c * dv)
    rhs = c ** -4 * gaussian_bound_kernel(lam, dt, dx, dv)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-300)


@given(lam=st.floats(0.1, 50), dt=st.floats(0.01, 5), dx=st.floats(0, 3), dv=st.floats(0, 3),
       ex=st.floats(0, 1), ev=st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_bound_kernel_monotone_decay(lam, dt, dx, dv, ex, ev):
    peak = gaussian_bound_kernel(lam, dt, 0.0, 0.0)
    here = gaussian_bound_kernel(lam, dt, dx, dv)
    further = gaussian_bound_kernel(lam, dt, dx + ex, dv + ev)
    assert here <= peak and further <= here


def test_characteristic_shift():
    assert np.allclose(characteristic_shift(0.0, (0.3, -1.2)), (0.3, -1.2))
    assert np.allclose(characteristic_shift(2.0, (0.0, 1.0)), (2.0, 1.0))


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), x=st.floats(-5, 5), v=st.floats(-5, 5))
@settings(max_examples=50, deadline=None)
def test_characteristic_shift_flow_property(a, b, x, v):
    lhs = characteristic_shift(a, characteristic_shift(b, (x, v)))
    assert np.allclose(lhs, characteristic_shift(a + b, (x, v)), atol=1e-12)


def test_exact_kernel_peak_matches_closed_form():
    assert exact_langevin_kernel(1.0, 1.0, (0.0, 0.0), (0.0, 0.0)) == pytest.approx(PEAK_SIGMA1_DT1,
                                                                                    rel=1e-14)
    assert exact_langevin_kernel(1.0, 1.0, (0.5, 1.0), (1.5, 1.0)) == pytest.approx(PEAK_SIGMA1_DT1,
                                                                                    rel=1e-14)


def _simulate_prototype(n_paths, n_steps, sigma=1.0, T=1.0, z=(0.0, 0.0), seed=5):
    gen = np.random.default_rng(seed)
    dt = T / n_steps
    x = np.full(n_paths, z[0])
    v = np.full(n_paths, z[1])
    for _ in range(n_steps):
        dv = sigma * np.sqrt(dt) * gen.standard_normal(n_paths)
        x += (v + 0.5 * dv) * dt  # trapezoid in time for the position integral
        v += dv
    return x, v


def test_exact_kernel_peak_monte_carlo():
    x, v = _simulate_prototype(10 ** 6, 200)
    hx, hv = 0.06, 0.1
    frac = np.mean((np.abs(x) < hx) & (np.abs(v) < hv))
    density = frac / (4 * hx * hv)
    assert density == pytest.approx(PEAK_SIGMA1_DT1, rel=0.03)


def test_exact_kernel_mean_monte_carlo():
    z = (0.4, -0.7)
    x, v = _simulate_prototype(200000, 100, sigma=0.8, T=0.5, z=z, seed=9)
    mean = characteristic_shift(0.5, z)
    cov = langevin_covariance(0.8, 0.5)
    assert abs(x.mean() - mean[0]) < 3 * math.sqrt(cov[0, 0] / 2e5)
    assert abs(v.mean() - mean[1]) < 3 * math.sqrt(cov[1, 1] / 2e5)


def _grid_integral(f, center, half, n=401):
    xs = np.linspace(center[0] - half[0], center[0] + half[0], n)
    vs = np.linspace(center[1] - half[1], center[1] + half[1], n)
    X, V = np.meshgrid(xs, vs, indexing="ij")
    vals = f(np.stack([X, V], axis=-1))
    return np.trapezoid(np.trapezoid(vals, vs, axis=1), xs)


def test_exact_kernel_integrates_to_one_and_delta_limit():
    z = (0.2, 0.3)
    for dt in (1.0, 0.1):
        c = langevin_covariance(1.0, dt)
        mass = _grid_integral(lambda p: exact_langevin_kernel(1.0, dt, z, p),
                              characteristic_shift(dt, z), 9 * np.sqrt(np.diag(c)))
        assert mass == pytest.approx(1.0, abs=1e-8)
    phi = lambda p: np.cos(p[..., 0]) * np.exp(-p[..., 1] ** 2)  # noqa: E731
    target = math.cos(0.2) * math.exp(-0.09)
    errs = []
    for dt in (0.1, 0.01, 0.001):
        c = langevin_covariance(1.0, dt)
        val = _grid_integral(lambda p: exact_langevin_kernel(1.0, dt, z, p) * phi(p),
                             characteristic_shift(dt, z), 9 * np.sqrt(np.diag(c)))
        errs.append(abs(val - target))
    assert errs[2] < errs[1] < errs[0] and errs[2] < 2e-3


def test_chapman_kolmogorov():
    # deterministic Gauss-Hermite oracle over the intermediate point
    z = np.array([0.1, -0.4])
    t, r, s = 0.0, 0.3, 0.7
    sigma = 1.3
    zeta = np.array([[-0.35, -0.1], [0.05, 0.6], [-0.2, -1.0]])
    nodes, weights = np.polynomial.hermite_e.hermegauss(48)
    weights = weights / weights.sum()
    m1 = characteristic_shift(r - t, z)
    L = np.linalg.cholesky(langevin_covariance(sigma, r - t))
    U1, U2 = np.meshgrid(nodes, nodes, indexing="ij")
    W = m1 + np.stack([U1, U2], -1) @ L.T
    wts = np.outer(weights, weights)
    for target in zeta:
        conv = np.sum(wts * exact_langevin_kernel(sigma, s - r, W, target))
        direct = exact_langevin_kernel(sigma, s - t, z, target)
        assert conv == pytest.approx(direct, rel=1e-4)


def test_exact_kernel_domain():
    with pytest.raises(DomainError):
        exact_langevin_kernel(1.0, 0.0, (0, 0), (0, 0))


def test_adaptive_simpson_accuracy():
    val = adaptive_simpson(lambda t: np.array([np.sin(t), t ** 5]), 0.0, 2.0, tol=1e-12)
    assert val[0] == pytest.approx(1.0 - math.cos(2.0), abs=1e-11)
    assert val[1] == pytest.approx(2.0 ** 6 / 6.0, rel=1e-12)


def _spec_constant(sigma, z0=(0.0, 0.0), t0=0.0):
    def traj(s):
        return characteristic_shift(s - t0, z0)
    return LinearizedKernelSpec((t0, z0), lambda s: 0.5 * sigma ** 2,
                                lambda s: [[0.0, 1.0], [0.0, 0.0]], traj)


def test_linearized_reduces_to_exact():
    spec = _spec_constant(1.4, z0=(0.3, 0.2))
    z = (0.3, 0.2)
    pts = np.array([[0.5, 0.1], [0.2, 0.9], [0.9, -0.3]])
    lin = linearized_kernel(spec, 0.0, z, 0.6, pts)
    ex = exact_langevin_kernel(1.4, 0.6, z, pts)
    assert np.allclose(lin, ex, rtol=1e-12)


def _spec_varying():
    a = lambda s: 0.5 + 0.25 * np.sin(3 * s)  # noqa: E731
    k = lambda s: 1.0 + 0.5 * np.cos(2 * s)  # noqa: E731

    def traj(s):
        return np.array([0.2 * s + 0.1 * s * s, 0.4 - 0.3 * s])
    return LinearizedKernelSpec((0.0, (0.0, 0.4)), a, lambda s: [[0.0, k(s)], [0.0, 0.0]], traj), a, k


def test_linearized_mass_is_one():
    spec, _, _ = _spec_varying()
    z = np.array([0.1, 0.5])
    mean, cov = linearized_moments(spec, 0.1, z, 0.9)
    mass = _grid_integral(lambda p: linearized_kernel(spec, 0.1, z, 0.9, p), mean,
                          9 * np.sqrt(np.diag(cov)))
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_linearized_covariance_monte_carlo():
    # independent oracle: simulate the linear SDE d(dx) = k(s) dv ds, d(dv) = sqrt(2 a(s)) dW
    spec, a, k = _spec_varying()
    t, s = 0.1, 0.9
    _, cov = linearized_moments(spec, t, (0.0, 0.0), s)
    gen = np.random.default_rng(21)
    n_paths, n_steps = 10 ** 6, 200
    h = (s - t) / n_steps
    dx = np.zeros(n_paths)
    dv = np.zeros(n_paths)
    for j in range(n_steps):
        tm = t + (j + 0.5) * h
        inc = np.sqrt(2 * a(tm) * h) * gen.standard_normal(n_paths)
        dx += k(tm) * (dv + 0.5 * inc) * h
        dv += inc
    emp = np.cov(np.stack([dx, dv]))
    assert np.allclose(emp, cov, rtol=0.01)


def test_linearized_mean_follows_affine_field():
    spec, _, k = _spec_varying()
    t, s = 0.1, 0.9
    z = np.array([0.5, -0.2])
    mean, _ = linearized_moments(spec, t, z, s)
    g_t = spec.frozen_trajectory(t)
    g_s = spec.frozen_trajectory(s)
    p = adaptive_simpson(k, t, s, tol=1e-13)
    expected = g_s + np.array([z[0] - g_t[0] + p * (z[1] - g_t[1]), z[1] - g_t[1]])
    assert np.allclose(mean, expected, atol=1e-10)


def test_linearized_derivatives_match_finite_differences():
    spec, _, _ = _spec_varying()
    t, s = 0.1, 0.9
    z = (0.0, 0.4)
    mean, cov = linearized_moments(spec, t, z, s)
    sd = np.sqrt(np.diag(cov))
    h = 1e-4
    for off in ([0.5, -0.3], [-0.8, 0.6], [1.0, 1.0]):
        p0 = mean + np.array(off) * sd
        val, grad, hess = linearized_kernel(spec, t, z, s, p0, derivatives=2)
        f = lambda q: linearized_kernel(spec, t, z, s, q)  # noqa: E731
        e = [np.array([h, 0.0]), np.array([0.0, h])]
        fd_grad = [(f(p0 + ei) - f(p0 - ei)) / (2 * h) for ei in e]
        fd_xx = (f(p0 + e[0]) - 2 * val + f(p0 - e[0])) / h ** 2
        fd_vv = (f(p0 + e[1]) - 2 * val + f(p0 - e[1])) / h ** 2
        fd_xv = (f(p0 + e[0] + e[1]) - f(p0 + e[0] - e[1]) - f(p0 - e[0] + e[1])
                 + f(p0 - e[0] - e[1])) / (4 * h * h)
        for an, fd in zip(grad, fd_grad):
            assert an == pytest.approx(fd, rel=1e-4)
        for an, fd in zip(hess, (fd_xx, fd_xv, fd_vv)):
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-4 * abs(hess[0]))


def test_linearized_rejects_degenerate_and_unreduced():
    spec = LinearizedKernelSpec((0.0, (0, 0)), lambda s: 1e-40, lambda s: [[0, 1], [0, 0]],
                                lambda s: (0.0, 0.0))
    with pytest.raises(SingularKernelError):
        linearized_kernel(spec, 0.0, (0, 0), 1e-3, (0, 0))
    bad = LinearizedKernelSpec((0.0, (0, 0)), lambda s: 1.0, lambda s: [[1, 1], [0, 0]],
                               lambda s: (0.0, 0.0))
    with pytest.raises(DomainError):
        linearized_kernel(bad, 0.0, (0, 0), 1.0, (0, 0))
    with pytest.raises(DomainError):
        linearized_kernel(_spec_constant(1.0), 1.0, (0, 0), 1.0, (0, 0))
