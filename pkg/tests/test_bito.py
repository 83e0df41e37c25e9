import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfilter import bito
from kinfilter.errors import DomainError


def _path(seed, n=256, T=1.0):
    return np.linspace(0, T, n + 1), bito.brownian_paths([seed], n, T)[0]


@given(c=st.floats(-5, 5), seed=st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_constant_integrand_is_mesh_independent(c, seed):
    t, w = _path(seed)
    res = bito.backward_integral(np.full_like(w, c), w, t)
    for _, val in res.refinement_trace:
        assert val == pytest.approx(c * (w[-1] - w[0]), abs=1e-12)


def test_time_only_integrand_matches_forward():
    t, w = _path(3)
    u = np.cos(3 * t)
    # both use the same increments; only the endpoint differs, a deterministic O(dt) effect
    diff = bito.backward_sum(u, w) - bito.forward_sum(u, w)
    assert abs(diff) < 4 * (t[1] - t[0]) * np.max(np.abs(np.diff(w))) * len(t)


def test_endpoint_discrepancy_is_quadratic_variation():
    t, w = _path(11, n=4096)
    gap = bito.backward_sum(w, w) - bito.forward_sum(w, w)
    assert gap == pytest.approx(np.sum(np.diff(w) ** 2), rel=1e-12)
    assert gap == pytest.approx(1.0, abs=0.1)


def test_refinement_trace_shapes():
    t, w = _path(0, n=64)
    res = bito.backward_integral(w, w, t)
    meshes = [m for m, _ in res.refinement_trace]
    assert meshes == sorted(meshes, reverse=True)
    assert meshes[-1] == pytest.approx(1 / 64)
    assert res.value == res.refinement_trace[-1][1]


def test_grid_mismatch_raises():
    with pytest.raises(DomainError):
        bito.backward_integral(np.zeros(5), np.zeros(6))
    with pytest.raises(DomainError):
        bito.backward_integral(np.zeros(5), np.zeros(5), times=np.zeros(4))


def test_w_star_dw_converges_to_plus_half_t():
    rep = bito.backward_integral_convergence(range(1000))
    assert rep.rate >= 0.4
    # three-sigma band of the discrepancy sum (dW^2 - dt): std sqrt(2 dt T)
    dt = rep.meshes[-1]
    assert rep.median_residual[-1] < 3 * np.sqrt(2 * dt)


def test_ito_formula_identity_is_roundoff():
    # constant drift so the ds-quadrature coincides with the construction sum
    rep = bito.backward_ito_check(bito.make_test_function("identity"), lambda t, x: 0.3 + 0 * x,
                                  lambda t, x: np.cos(x), lambda w: w[:, -1], range(5), levels=[2 ** 10])
    assert rep.max_residual[-1] < 1e-12


def test_ito_formula_square_of_brownian():
    rep = bito.backward_ito_check(bito.make_test_function("square"), lambda t, x: 0 * x,
                                  lambda t, x: -1 + 0 * x, lambda w: w[:, -1], range(200))
    assert rep.meshes[-1] == 2.0 ** -10
    assert rep.median_residual[-1] < 4 * (2.0 ** -10) ** 0.4
    assert rep.rate >= 0.4


def test_ito_formula_time_only_is_calculus():
    rep = bito.backward_ito_check(bito.make_test_function("time-sin"), lambda t, x: 0 * x,
                                  lambda t, x: -1 + 0 * x, lambda w: w[:, -1], range(3))
    assert rep.max_residual[-1] < 1e-8


def test_ito_formula_mixed_time_space():
    rep = bito.backward_ito_check(bito.make_test_function("cos-mixed"), lambda t, x: 0.2 + 0 * x,
                                  lambda t, x: 0.5 + 0 * x, lambda w: w[:, -1], range(200))
    assert rep.rate >= 0.4


LATTICE = [-1.0, 0.0, 0.5, 1.0]


@pytest.mark.parametrize("name", ["constant-drift", "sine-drift"])
def test_spde_deterministic_flow(name):
    rep = bito.backward_diffusion_spde_check(bito.make_scalar_sde(name), LATTICE, 1.0, [0])
    assert rep.max_residual[-1] < 1e-6


def test_spde_brownian_identically_satisfied():
    rep = bito.backward_diffusion_spde_check(bito.make_scalar_sde("brownian", sigma=0.7), LATTICE, 1.0, range(10))
    assert np.all(rep.max_residual < 1e-9)


def test_spde_ou_rate():
    rep = bito.backward_diffusion_spde_check(bito.make_scalar_sde("ou"), LATTICE, 1.0, range(200))
    assert rep.rate >= 0.4


def test_invariance_sigmoid_ou():
    rep = bito.invariance_check(bito.make_test_function("sigmoid"), bito.make_scalar_sde("ou"), LATTICE,
                                1.0, range(200))
    assert rep.rate >= 0.4


def test_flow_property_of_terminal_values():
    sde = bito.make_scalar_sde("geometric")
    w = bito.brownian_paths([4], 256, 1.0)
    x0 = np.array([0.8])
    full = bito.terminal_flow_values(sde, w, 1.0, np.array([0]), x0)[0, 0, 0]
    mid = bito.terminal_flow_values(sde, w[:, :129], 0.5, np.array([0]), x0)[0, 0, 0]
    restart = bito.terminal_flow_values(sde, w, 1.0, np.array([128]), np.array([mid]))[0, 0, 0]
    assert restart == pytest.approx(full, rel=1e-12)


def test_simpson_weights():
    w = bito.simpson_weights(8, 0.125)
    x = np.linspace(0, 1, 9)
    assert w @ x ** 3 == pytest.approx(0.25, abs=1e-14)
    assert bito.simpson_weights(3, 1.0).sum() == pytest.approx(3.0)


def test_report_csv(tmp_path):
    rep = bito.backward_integral_convergence(range(20), n_fine=2 ** 8, levels=(16, 32, 64))
    p = rep.to_csv(str(tmp_path / "r.csv"), {"seed": 0})
    from kinfilter.io import read_csv
    man, head, rows = read_csv(p)
    assert head[0] == "check" and len(rows) == 3
