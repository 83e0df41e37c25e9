import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfilter import itow, model, sde
from kinfilter.errors import DegenerateFlowError, DomainError, OutOfRangeError
from kinfilter.rng import brownian_increments

GRID = sde.TimeGrid(0.0, 0.5, 100)


def _driving(seed=1, grid=GRID):
    return itow.DrivingData(grid, brownian_increments(seed, grid.n_steps, grid.dt)[:, 0])


def _nonlinear_sigma():
    # nu- and xi-dependent flow coefficient; derivatives left to the finite-difference fallback
    return itow.generic_coefficients(lambda s, x, v: 2.0 + 0 * v, lambda s, x, v: 0 * v, lambda s, x, v: 0 * v,
                                     lambda s, x, v: 0.4 * np.sin(v) + 0.2 * np.cos(x),
                                     lambda s, x, v: 0 * v)


SMALL = itow.make_lattice((-2, 2), (-2, 2), 9, 11)


def test_constant_flow_closed_form():
    drv = _driving()
    f = itow.solve_forward_flow(itow.constant_generic(2.0, sigma=0.7), drv, SMALL)
    X, V = SMALL.mesh()
    for k, step in enumerate(f.saved_steps):
        assert np.allclose(f.gamma[k], V - 0.7 * drv.W[step], atol=1e-13)
    assert np.all(f.d_nu == 1.0) and np.all(f.d_xi == 0.0)


def test_identity_at_anchor():
    f = itow.solve_forward_flow(_nonlinear_sigma(), _driving(), SMALL, save_every=25)
    X, V = SMALL.mesh()
    assert f.saved_steps[0] == 0 and f.elapsed(0) == 0.0
    assert np.array_equal(f.gamma[0], V) and np.all(f.d_nu[0] == 1)
    assert np.all(f.d_xi[0] == 0) and all(np.all(d[0] == 0) for d in f.d2)
    assert f.saved_steps[-1] == GRID.n_steps


@given(seed=st.integers(0, 2 ** 31))
@settings(max_examples=10, deadline=None)
def test_derivatives_match_finite_differences(seed):
    h = 1e-2
    drv = _driving(seed)
    base = np.array([-1.0, 0.3, 1.7])
    g = _nonlinear_sigma()
    f = itow.solve_forward_flow(g, drv, itow.Lattice(base, base))
    fv = itow.solve_forward_flow(g, drv, itow.Lattice(base, np.concatenate([base - h, base + h])))
    fx = itow.solve_forward_flow(g, drv, itow.Lattice(np.concatenate([base - h, base + h]), base))
    n = base.size
    dnu = (fv.gamma[-1][:, n:] - fv.gamma[-1][:, :n]) / (2 * h)
    dxi = (fx.gamma[-1][n:, :] - fx.gamma[-1][:n, :]) / (2 * h)
    assert np.allclose(dnu, f.d_nu[-1], rtol=1e-3)
    assert np.allclose(dxi, f.d_xi[-1], rtol=1e-3, atol=1e-3 * np.max(np.abs(dxi)))
    dnunu = (fv.d_nu[-1][:, n:] - fv.d_nu[-1][:, :n]) / (2 * h)
    dnuxi = (fx.d_nu[-1][n:, :] - fx.d_nu[-1][:n, :]) / (2 * h)
    dxixi = (fx.d_xi[-1][n:, :] - fx.d_xi[-1][:n, :]) / (2 * h)
    for fd, an in zip((dnunu, dnuxi, dxixi), f.d2):
        assert np.allclose(fd, an[-1], rtol=1e-3, atol=1e-3 * max(np.max(np.abs(fd)), 1e-3))


def test_backward_constant_and_identity():
    drv = _driving(3)
    f = itow.solve_backward_flow(itow.constant_generic(2.0, sigma=0.7), drv, SMALL)
    X, V = SMALL.mesh()
    W = drv.W
    assert f.direction == "backward" and f.anchor_time == GRID.t1
    for k, step in enumerate(f.saved_steps):
        assert np.allclose(f.gamma[k], V + 0.7 * (W[-1] - W[step]), atol=1e-13)
    assert np.array_equal(f.gamma[-1], V)


def test_backward_time_only_matches_reflected_forward():
    # for a deterministic integrand the two integrals differ only by the endpoint of the time sample
    diffs = []
    for n in (100, 400, 1600):
        grid = sde.TimeGrid(0.0, 0.5, n)
        drv = _driving(5, grid)
        sig = lambda s, x, v: np.cos(3 * s) + 0 * v  # noqa: E731
        back = itow.generic_coefficients(lambda s, x, v: 2 + 0 * v, lambda s, x, v: 0 * v,
                                         lambda s, x, v: 0 * v, sig, lambda s, x, v: 0 * v)
        fwd = itow.generic_coefficients(lambda s, x, v: 2 + 0 * v, lambda s, x, v: 0 * v,
                                        lambda s, x, v: 0 * v, lambda s, x, v: -sig(s, x, v),
                                        lambda s, x, v: 0 * v)
        fb = itow.solve_backward_flow(back, drv, SMALL)
        ff = itow.solve_forward_flow(fwd, drv, SMALL)
        diffs.append(np.max(np.abs(fb.gamma[0] - ff.gamma[-1])))
    assert diffs[-1] < 0.01
    assert diffs[0] > diffs[1] > diffs[2]


def test_invert_identity_and_constant():
    drv = _driving(2)
    lat = itow.make_lattice((-3, 3), (-6, 6), 5, 97)
    f = itow.solve_forward_flow(itow.constant_generic(2.0, sigma=0.5), drv, lat, save_every=50)
    w = np.linspace(-2, 2, 7)
    assert np.allclose(itow.invert_flow(f, 0, 0.5, w), w, atol=1e-10)
    k = len(f.times) - 1
    dW = drv.W[f.saved_steps[k]]
    assert np.allclose(itow.invert_flow(f, k, 0.5, w), w + 0.5 * dW, atol=1e-9)


@given(xi=st.floats(-2, 2), w=st.floats(-3, 3), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_invert_round_trip(xi, w, seed):
    lat = itow.make_lattice((-2, 2), (-6, 6), 9, 121)
    f = itow.solve_forward_flow(_nonlinear_sigma(), _driving(seed), lat, save_every=100)
    nu = itow.invert_flow(f, 1, xi, w)
    assert abs(f.evaluate(1, xi, nu) - w) < 1e-10


def test_invert_out_of_range():
    f = itow.solve_forward_flow(itow.constant_generic(2.0), _driving(), SMALL, save_every=100)
    with pytest.raises(OutOfRangeError):
        itow.invert_flow(f, 0, 0.0, 10.0)


def test_transported_field():
    drv = _driving(4)
    X, V = SMALL.mesh()
    ident = itow.solve_forward_flow(itow.constant_generic(2.0, sigma=0.3), drv, SMALL, save_every=100)
    Y = itow.transported_field(ident)
    assert np.array_equal(Y[0, ..., 0], V) and np.all(Y[0, ..., 1] == 0)
    assert np.allclose(Y[-1, ..., 0], V - 0.3 * drv.W[-1]) and np.all(Y[-1, ..., 1] == 0)
    g = itow.generic_coefficients(lambda s, x, v: 2 + 0 * v, lambda s, x, v: 0 * v, lambda s, x, v: 0 * v,
                                  lambda s, x, v: 0.4 * np.sin(v), lambda s, x, v: 0 * v)
    Yv = itow.transported_field(itow.solve_forward_flow(g, drv, SMALL))
    assert np.all(Yv[..., 1] == 0)


def test_degenerate_flow_raises():
    f = itow.solve_forward_flow(itow.constant_generic(2.0), _driving(), SMALL, save_every=100)
    bad = itow.FlowSolution(f.direction, f.anchor_time, f.times, f.lattice, f.gamma, 0 * f.d_nu, f.d_xi, f.d2,
                            f.driving_increments, f.saved_steps)
    with pytest.raises(DegenerateFlowError):
        itow.transported_field(bad)


def test_empty_lattice():
    with pytest.raises(DomainError):
        itow.make_lattice(n_xi=0)
    with pytest.raises(DomainError):
        itow.Lattice(np.array([]), np.array([1.0]))


def test_transformed_constant_coefficients():
    a, b, sig = 2.0, 0.3, 0.6
    g = itow.constant_generic(a, b=b, c=0.0, sigma=sig)
    f = itow.solve_forward_flow(g, _driving(), SMALL, save_every=20)
    tc = itow.transformed_coefficients(g, f)
    assert np.allclose(tc.a_star, 0.5 * (a - sig ** 2))
    assert np.allclose(tc.b_star, b)
    assert np.allclose(tc.c_star, 0.0)
    assert tc.bounds_ok and tc.m1 == pytest.approx(1 / (0.5 * (a - sig ** 2)))


def test_transformed_identity_without_noise():
    g = itow.generic_coefficients(lambda s, x, v: 1.5 + np.sin(x) ** 2 + 0 * v, lambda s, x, v: np.cos(v) + x,
                                  lambda s, x, v: -0.2 * v ** 2 / (1 + v ** 2) + 0 * x,
                                  lambda s, x, v: 0 * v, lambda s, x, v: 0 * v)
    f = itow.solve_forward_flow(g, _driving(), SMALL, save_every=50)
    tc = itow.transformed_coefficients(g, f)
    X, V = SMALL.mesh()
    assert np.allclose(tc.a_star, 0.5 * (1.5 + np.sin(X) ** 2))
    assert np.allclose(tc.b_star, np.cos(V) + X)
    assert np.allclose(tc.c_star, -0.2 * V ** 2 / (1 + V ** 2))


def test_sinusoidal_closed_form_and_bounds():
    c = model.make_preset("sinusoidal")
    grid = sde.TimeGrid(0.0, 0.5, 100)
    drv = itow.driving_from_bundle(sde.simulate_system(c, (0.0, 0.0, 0.0), grid, seed=7))
    lat = itow.make_lattice()
    f = itow.solve_forward_flow(c, drv, lat, save_every=10)
    rho = itow.likelihood_lattice(c, drv, lat, save_every=10)
    tc = itow.transformed_coefficients(c, f, rho, drv)
    X, V = lat.mesh()
    s1 = 0.5 + 0.3 * np.sin(X) / (1 + X ** 2)
    h = np.tanh(X)
    for k, step in enumerate(f.saved_steps):
        gam = V + s1 * drv.W[step]
        assert np.allclose(f.gamma[k], gam, atol=1e-12)
        assert np.allclose(tc.b_star[k], -0.5 * np.sin(gam) + s1 * h, atol=1e-12)
        assert np.allclose(tc.c_star[k], -0.5 * np.cos(gam) - gam * rho.L_xi[k] - h ** 2, atol=1e-12)
    # a* = sigma_hat^2 / 2
    assert tc.bounds_ok and tc.exact
    assert 1 / tc.m1 <= tc.a_star.min() and tc.a_star.max() <= tc.m1
    assert np.allclose(tc.a_star, 0.5)


@given(seed=st.integers(0, 10_000), s=st.floats(0, 1))
@settings(max_examples=20, deadline=None)
def test_zakai_mapping_is_adjoint(seed, s):
    # generic form must equal the adjoint operators applied to a smooth test function
    c = model.make_preset("sinusoidal")
    g = itow.zakai_coefficients(c)
    rng = np.random.default_rng(seed)
    x, v = rng.uniform(-2, 2, 2)
    u = lambda vv: np.exp(-0.5 * (vv - 0.3) ** 2)  # noqa: E731
    e = 1e-3
    vs = v + e * np.arange(-2, 3)
    sig2 = c.sigma_sq(s, x, vs, 0.0)
    bb = c.b(s, x, vs, 0.0)
    q = sig2 * u(vs)
    adj = 0.5 * (q[3] - 2 * q[2] + q[1]) / e ** 2 - (bb[3] * u(vs[3]) - bb[1] * u(vs[1])) / (2 * e)
    uu = u(vs)
    gen = (0.5 * g("a", s, x, v) * (uu[3] - 2 * uu[2] + uu[1]) / e ** 2
           + g("b", s, x, v) * (uu[3] - uu[1]) / (2 * e) + g("c", s, x, v) * uu[2])
    assert gen == pytest.approx(adj, abs=1e-5)
    s1 = c.sigma1(s, x, vs, 0.0)
    adj_g = -(s1[3] * uu[3] - s1[1] * uu[1]) / (2 * e) + model.tilde_h(c, s, x, v, 0.0) * uu[2]
    gen_g = g("sigma", s, x, v) * (uu[3] - uu[1]) / (2 * e) + g("h", s, x, v) * uu[2]
    assert gen_g == pytest.approx(adj_g, abs=1e-6)


def test_lemma_bounds_sinusoidal():
    c = model.make_preset("sinusoidal")
    grid = sde.TimeGrid(0.0, 0.1, 100)
    flows = [itow.solve_forward_flow(c, _driving(s, grid), SMALL) for s in range(5)]
    fit = itow.fit_lemma_bounds(flows, c.flatten_eps, probe_elapsed=[1e-3])
    assert fit.finite and fit.min_d_nu > 0 and fit.sup_dev[1e-3] < 0.05


def test_lemma_bounds_nu_dependent_flow_tends_to_one():
    grid = sde.TimeGrid(0.0, 0.1, 1000)
    flows = [itow.solve_forward_flow(_nonlinear_sigma(), _driving(s, grid), SMALL, save_every=10) for s in range(5)]
    fit = itow.fit_lemma_bounds(flows, 0.25, probe_elapsed=[1e-3, 1e-1])
    assert fit.finite and fit.min_d_nu > 0
    assert fit.sup_dev[1e-3] < 0.05 and fit.sup_dev[1e-3] < fit.sup_dev[1e-1]


def test_flow_csv(tmp_path):
    from kinfilter.io import read_csv
    f = itow.solve_forward_flow(itow.constant_generic(2.0, sigma=0.3), _driving(), SMALL, save_every=50)
    man, head, rows = read_csv(f.to_csv(str(tmp_path / "f.csv"), {"seed": 1}))
    assert len(rows) == len(f.times) * SMALL.shape[0] * SMALL.shape[1]
    assert man["direction"] == "forward"
