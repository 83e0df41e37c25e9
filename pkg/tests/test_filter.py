import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfilter import filter as F
from kinfilter import itow, kernels, model, sde
from kinfilter.errors import DegenerateDensityError, DomainError, StabilityError
from kinfilter.rng import brownian_increments

T_HALF = sde.TimeGrid(0.0, 0.5, 1000)


def _driving(seed, grid=T_HALF):
    return itow.DrivingData(grid, brownian_increments(seed, grid.n_steps, grid.dt)[:, 0])


def _zeros(t, x, v, y):
    return 0.0 * np.asarray(x, dtype=float) * np.asarray(v, dtype=float)


def _custom(h=0.0, sigma_hat=0.0):
    return model.custom_coefficients(
        b=_zeros, sigma1=_zeros, h=lambda t, x, v, y: h + _zeros(t, x, v, y),
        sigma_hat=lambda t, x, v, y: np.full(np.shape(_zeros(t, x, v, y)) + (1,), sigma_hat), theta=1.0)


def _bump(xi, nu, mx=0.0, mv=0.0, s=0.4):
    X, V = np.meshgrid(xi, nu, indexing="ij")
    return np.exp(-0.5 * ((X - mx) ** 2 + (V - mv) ** 2) / s ** 2)


@pytest.fixture(scope="module")
def sinusoidal_scene():
    c = model.make_preset("sinusoidal")
    b = sde.simulate_system(c, (0.0, 0.0, 0.0), T_HALF, seed=11)
    return c, itow.driving_from_bundle(b)


# ---------------------------------------------------------------------------
# forward step
# ---------------------------------------------------------------------------

def test_pure_advection_moves_rows_along_characteristics():
    # [TRIVIAL] no diffusion, drift or observation coupling
    xi, nu = np.linspace(-6, 6, 257), np.linspace(-2, 2, 41)
    u = F.GridDensity(0.0, xi, nu, _bump(xi, nu))
    out = F.forward_spde_step(u, _custom(), dW=0.3, dt=0.05)
    X, V = np.meshgrid(xi, nu, indexing="ij")
    expect = np.exp(-0.5 * ((X - 0.05 * V) ** 2 + V ** 2) / 0.16)
    assert np.max(np.abs(out.values - expect)) < 1e-10
    assert out.time == pytest.approx(0.05)


def test_constant_likelihood_mass_is_stochastic_exponential_step():
    # [DERIVED] integrate the update: the difference terms integrate to zero
    xi, nu = np.linspace(-6, 6, 129), np.linspace(-6, 6, 129)
    u = F.GridDensity(0.0, xi, nu, _bump(xi, nu, s=0.7))
    for dW in (0.05, -0.11):
        out = F.forward_spde_step(u, _custom(h=0.7), dW=dW, dt=0.01)
        assert out.total_mass == pytest.approx(u.total_mass * (1 + 0.7 * dW), rel=1e-12)
        out = F.forward_spde_step(u, _custom(h=0.7), dW=dW, dt=0.01, milstein=True)
        assert out.total_mass == pytest.approx(u.total_mass * (1 + 0.7 * dW + 0.245 * (dW * dW - 0.01)), rel=1e-12)


def test_step_refuses_unstable_parameters():
    xi, nu = np.linspace(-3, 3, 33), np.linspace(-3, 3, 61)
    u = F.GridDensity(0.0, xi, nu, _bump(xi, nu))
    with pytest.raises(StabilityError):
        F.forward_spde_step(u, _custom(sigma_hat=1.0), dW=0.0, dt=0.01)
    with pytest.raises(StabilityError):
        F.forward_spde_step(u, _custom(h=5.0), dW=0.0, dt=0.005)
    with pytest.raises(DomainError):
        F.forward_spde_step(u, _custom(), dW=np.inf, dt=0.001)


def test_forward_density_matches_exact_langevin_kernel():
    # [DERIVED] closed-form kernel comparison in L1 at T - t = 0.5
    c = model.make_preset("langevin-pure")
    u = F.forward_fundamental(c, 0.0, (0.3, -0.2), 0.5, _driving(3))
    X, V = np.meshgrid(u.xi, u.nu, indexing="ij")
    exact = kernels.exact_langevin_kernel(1.0, 0.5, (0.3, -0.2), np.stack([X, V], -1))
    assert u.values.shape == (129, 129)
    assert float(np.sum(u.weights * np.abs(u.values - exact))) < 1e-3


def test_decoupled_density_ignores_the_observation():
    # [TRIVIAL] no observation coupling when h = sigma1 = 0
    c = model.make_preset("constant", sigma1=0.0, h=0.0)
    u1 = F.forward_fundamental(c, 0.0, (0.0, 0.5), 0.5, _driving(1))
    u2 = F.forward_fundamental(c, 0.0, (0.0, 0.5), 0.5, _driving(2), lattice=(u1.xi, u1.nu))
    assert np.max(np.abs(u1.values - u2.values)) < 1e-12 * np.max(u1.values)


def test_halving_initial_width_changes_estimates_little():
    # [DERIVED] width-refinement sweep at T - t = 0.5
    c = model.make_preset("constant", h=0.5)
    drv = itow.driving_from_bundle(sde.simulate_system(c, (0.0, 0.0, 0.0), T_HALF, seed=5))
    spec = F.ForwardLatticeSpec(n_xi=1025, n_nu=145, n_std=6.0)
    est = []
    for w in (0.62, 0.31):
        u = F.forward_fundamental(c, 0.0, (0.0, 0.0), 0.5, drv, spec=spec, initial_width=w)
        assert u.clipped_mass < 1e-4 * u.total_mass
        uh = F.normalize(u)
        est.append([F.estimate_forward(uh, f).value for f in (lambda x, v: np.cos(v), lambda x, v: np.tanh(x))])
    assert np.max(np.abs(np.diff(est, axis=0))) < 1e-3


def test_unresolved_initial_width_is_refused():
    c = model.make_preset("constant")
    with pytest.raises(DomainError):
        F.forward_fundamental(c, 0.0, (0.0, 0.0), 0.5, _driving(1), initial_width=0.05)


def test_positivity_before_clipping(sinusoidal_scene):
    # [DERIVED] monitored minimum node over maximum before clipping
    c, drv = sinusoidal_scene
    u = F.forward_fundamental(c, 0.0, (0.0, 0.0), 0.5, drv, spec=F.ForwardLatticeSpec(n_xi=1025, n_nu=257))
    assert u.min_ratio >= -1e-8
    assert u.clipped_mass < 1e-4 * u.total_mass
    assert np.all(u.values >= 0)


# ---------------------------------------------------------------------------
# normalization and estimates
# ---------------------------------------------------------------------------

def _random_density(seed, n=33):
    gen = np.random.default_rng(seed)
    xi, nu = np.linspace(-3, 3, n), np.linspace(-4, 4, n)
    return F.GridDensity(0.25, xi, nu, gen.uniform(0.1, 2.0) * _bump(xi, nu, *gen.normal(size=2), s=0.8)
                         + 0.01 * gen.uniform(size=(n, n)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_normalized_densities_integrate_to_one(seed):
    uh = F.normalize(_random_density(seed))
    assert abs(uh.total_mass - 1.0) < 1e-12


def test_normalize_examples():
    u = _random_density(0)
    uh = F.normalize(u)
    assert np.array_equal(F.normalize(uh).values, uh.values) or np.allclose(F.normalize(uh).values, uh.values,
                                                                            rtol=1e-15, atol=0)
    scaled = F.GridDensity(u.time, u.xi, u.nu, 7.0 * u.values)
    assert np.allclose(F.normalize(scaled).values, uh.values, rtol=1e-14, atol=0)
    with pytest.raises(DegenerateDensityError):
        F.normalize(F.GridDensity(0.0, u.xi, u.nu, np.zeros_like(u.values)))
    with pytest.raises(DegenerateDensityError):
        F.normalize(F.GridDensity(0.0, u.xi, u.nu, 1e-40 * u.values))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1e-3, 1e6))
def test_estimates_are_scale_invariant(seed, scale):
    u = _random_density(seed)
    scaled = F.GridDensity(u.time, u.xi, u.nu, scale * u.values)
    for phi in (lambda x, v: v, lambda x, v: np.tanh(x), lambda x, v: np.cos(x * v)):
        a = F.estimate_forward(F.normalize(u), phi).value
        b = F.estimate_forward(F.normalize(scaled), phi).value
        assert abs(a - b) < 1e-10


def test_unit_observable_is_exactly_one(sinusoidal_scene):
    # [TRIVIAL] ratios of identical sums
    c, drv = sinusoidal_scene
    uh = F.normalize(_random_density(3))
    assert F.estimate_forward(uh, lambda x, v: 1.0).value == 1.0
    one = lambda x, v, y: 1.0  # noqa: E731
    assert F.ks_backward_estimate(c, 0.0, (0, 0, 0), 0.5, one, drv, 200, seed=1).value == 1.0
    assert F.particle_oracle(c, 0.0, (0, 0, 0), 0.5, one, drv, 200, seed=1).value == 1.0


def test_symmetric_density_recovers_center():
    # [TRIVIAL] symmetry about x0
    xi, nu = np.linspace(-1, 3, 81), np.linspace(-2, 2, 41)
    u = F.GridDensity(0.0, xi, nu, _bump(xi, nu, mx=1.0, s=0.5) * (1 + 0.3 * np.cos(nu))[None, :])
    est = F.estimate_forward(F.normalize(u), lambda x, v: x)
    assert est.value == pytest.approx(1.0, abs=1e-12)


def test_estimate_rejects_unnormalized_and_unbounded():
    u = _random_density(1)
    with pytest.raises(DomainError):
        F.estimate_forward(F.GridDensity(u.time, u.xi, u.nu, 3 * u.values / u.total_mass), lambda x, v: v)
    with pytest.raises(DomainError):
        F.estimate_forward(F.normalize(u), lambda x, v: 1.0 / (x - x))


def test_forward_error_bar_uses_companion():
    u = F.normalize(_random_density(2))
    comp = F.normalize(_random_density(9))
    e = F.estimate_forward(u, lambda x, v: v, companion=comp)
    assert e.stderr >= abs(e.value - F.estimate_forward(comp, lambda x, v: v).value) - 1e-15
    assert e.method == "spde-forward"


# ---------------------------------------------------------------------------
# Monte Carlo estimators
# ---------------------------------------------------------------------------

def test_ks_without_likelihood_is_plain_mean():
    # [TRIVIAL] the weights collapse to one
    c = model.make_preset("constant", h=0.0)
    drv = _driving(4)
    phi = lambda x, v, y: np.cos(v) + x  # noqa: E731
    est = F.ks_backward_estimate(c, 0.0, (0.1, 0.2, 0.0), 0.5, phi, drv, 3000, seed=8, chunk=700)
    b = sde.simulate_under_Q(c, (0.1, 0.2, 0.0, 1.0), drv.dW, drv.grid, 8, n_paths=3000, record="terminal")
    assert np.all(b.rho[:, -1] == 1.0)
    vals = phi(b.X[:, -1], b.V[:, -1], b.Y[:, -1])
    assert est.value == pytest.approx(vals.mean(), abs=1e-12)
    assert est.stderr == pytest.approx(vals.std() / np.sqrt(3000), rel=1e-9)
    assert est.ess == pytest.approx(3000)


def test_particle_oracle_agrees_with_ks(sinusoidal_scene):
    # [DERIVED] two-implementation cross-check
    c, drv = sinusoidal_scene
    for phi in (lambda x, v, y: v, lambda x, v, y: np.tanh(x)):
        a = F.ks_backward_estimate(c, 0.0, (0, 0, 0), 0.5, phi, drv, 20000, seed=2)
        b = F.particle_oracle(c, 0.0, (0, 0, 0), 0.5, phi, drv, 20000, seed=3)
        assert abs(a.value - b.value) < 3 * np.hypot(a.stderr, b.stderr)
        assert a.warning is None and b.warning is None


def test_oracle_standard_error_halves_with_four_times_particles():
    # [DERIVED] Monte Carlo scaling
    c = model.make_preset("constant", h=0.5)
    drv = _driving(6, sde.TimeGrid(0.0, 0.5, 100))
    phi = lambda x, v, y: v  # noqa: E731
    se1 = F.particle_oracle(c, 0.0, (0, 0, 0), 0.5, phi, drv, 4000, seed=1).stderr
    se4 = F.particle_oracle(c, 0.0, (0, 0, 0), 0.5, phi, drv, 16000, seed=1).stderr
    assert 1.7 < se1 / se4 < 2.3


def test_oracle_resampling_keeps_estimate(sinusoidal_scene):
    c, drv = sinusoidal_scene
    phi = lambda x, v, y: v  # noqa: E731
    a = F.particle_oracle(c, 0.0, (0, 0, 0), 0.5, phi, drv, 10000, seed=4)
    b = F.particle_oracle(c, 0.0, (0, 0, 0), 0.5, phi, drv, 10000, seed=5, resample=True, ess_fraction=0.99)
    assert abs(a.value - b.value) < 3 * np.hypot(a.stderr, b.stderr)


def test_degenerate_weights_are_flagged():
    vals = np.arange(50.0)
    w = np.full(50, 1e-12)
    w[7] = 1.0
    e = F._ratio_estimate(vals, w, "ks-backward", ())
    assert e.warning is not None and e.ess < 10
    with pytest.raises(DomainError):
        F.ks_backward_estimate(model.make_preset("constant"), 0.0, (0, 0, 0), 0.5, lambda x, v, y: v,
                               _driving(1), 1, seed=1)


def test_decoupled_estimators_match_unconditional_expectation():
    # [DERIVED] with h = sigma1 = 0 all methods target the exact kernel expectation
    c = model.make_preset("langevin-pure")
    drv = _driving(2)
    z = (0.2, -0.4)
    phi2 = lambda x, v: np.cos(v) * np.exp(-0.1 * x * x)  # noqa: E731
    u = F.forward_fundamental(c, 0.0, z, 0.5, drv)
    X, V = np.meshgrid(u.xi, u.nu, indexing="ij")
    exact_k = kernels.exact_langevin_kernel(1.0, 0.5, z, np.stack([X, V], -1))
    exact = float(np.sum(u.weights * exact_k * phi2(X, V)) / np.sum(u.weights * exact_k))
    fw = F.estimate_forward(F.normalize(u), phi2)
    assert abs(fw.value - exact) < 1e-3
    phi3 = lambda x, v, y: phi2(x, v)  # noqa: E731
    for est in (F.ks_backward_estimate(c, 0.0, (*z, 0.0), 0.5, phi3, drv, 20000, seed=1),
                F.particle_oracle(c, 0.0, (*z, 0.0), 0.5, phi3, drv, 20000, seed=1)):
        assert abs(est.value - exact) < 3 * est.stderr + 1e-3


def test_estimates_csv_has_manifest(tmp_path):
    e = F.FilterEstimate(0.5, "ks-backward", 0.01, (("preset", "constant"),))
    path = F.write_estimates(str(tmp_path / "est.csv"), [e], {"seed": 1})
    text = open(path).read()
    assert text.startswith("#") and "method,value,stderr,fingerprint" in text


# ---------------------------------------------------------------------------
# backward lattice scheme
# ---------------------------------------------------------------------------

def test_backward_unit_datum_is_preserved():
    # [TRIVIAL] no observation drift and no potential term
    c = model.make_preset("langevin-pure")
    drv = _driving(1, sde.TimeGrid(0.0, 0.5, 200))
    lat = F.backward_lattice(c, 0.0, (0, 0, 0), 0.5, drv, n_x=33, n_v=33)
    u = F.backward_solve(c, lat, np.ones(lat.shape), drv, 0.0, 0.5)
    assert np.max(np.abs(u - 1.0)) < 1e-13


def test_backward_constant_coefficients_match_gaussian_convolution():
    # [DERIVED] deterministic Kolmogorov problem against the closed-form convolution
    c = model.make_preset("constant", sigma1=0.0, h=0.0)
    drv = _driving(1, sde.TimeGrid(0.0, 0.5, 500))
    lat = F.backward_lattice(c, 0.0, (0, 0, 0), 0.5, drv, n_x=129, n_v=129)
    X, V, Y = lat.mesh()
    m, S = np.array([0.4, -0.3]), np.array([[0.5, 0.1], [0.1, 0.6]])
    Si = np.linalg.inv(S)
    d = np.stack([X - m[0], V - m[1]], -1)
    data = np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, Si, d))
    u = F.backward_solve(c, lat, data, drv, 0.0, 0.5)
    for z in ((0.0, 0.0), (0.5, -0.5)):
        C = S + kernels.langevin_covariance(1.0, 0.5)
        mu = np.array([z[0] + 0.5 * z[1], z[1]])
        e = mu - m
        exact = np.sqrt(np.linalg.det(S) / np.linalg.det(C)) * np.exp(-0.5 * e @ np.linalg.solve(C, e))
        from scipy.interpolate import RegularGridInterpolator
        got = RegularGridInterpolator((lat.x, lat.v), u[..., 0], method="cubic")([z])[0]
        assert abs(got - exact) < 1e-3


def test_backward_refuses_y_dependence_without_y_lattice():
    c = model.custom_coefficients(b=_zeros, sigma1=_zeros, h=lambda t, x, v, y: np.tanh(y) + _zeros(t, x, v, y),
                                  sigma_hat=lambda t, x, v, y: np.ones(np.shape(_zeros(t, x, v, y)) + (1,)),
                                  theta=1.0)
    lat = F.BackwardLattice(np.linspace(-2, 2, 9), np.linspace(-3, 3, 9), np.array([0.0]))
    with pytest.raises(DomainError):
        F.backward_spde_step(np.ones(lat.shape), c, lat, 0.1, 0.01, 0.5)
    with pytest.raises(StabilityError):
        F.backward_spde_step(np.ones(lat.shape), model.make_preset("langevin-pure"), lat, 0.0, 0.5, 0.5)


def test_backward_ratio_matches_ks(sinusoidal_scene):
    # [DERIVED] the backward representation against the reference-measure ratio
    c, drv = sinusoidal_scene
    phis = [lambda x, v, y: v, lambda x, v, y: np.tanh(x)]
    lat = F.backward_lattice(c, 0.0, (0, 0, 0), 0.5, drv, n_x=65, n_v=65)
    back = F.backward_ratio_estimate(c, 0.0, (0, 0, 0), 0.5, phis, drv, lat=lat)
    for phi, b in zip(phis, back):
        a = F.ks_backward_estimate(c, 0.0, (0, 0, 0), 0.5, phi, drv, 20000, seed=7)
        assert abs(a.value - b.value) < 3 * np.hypot(a.stderr, b.stderr)


def test_backward_density_normalization_and_unit_observable():
    # [TRIVIAL]
    c = model.make_preset("constant", h=0.4)
    drv = _driving(2, sde.TimeGrid(0.0, 0.25, 100))
    zx, zv = np.linspace(-1.5, 1.5, 13), np.linspace(-2, 2, 13)
    lat = F.backward_lattice(c, 0.0, (0, 0, 0), 0.25, drv, n_x=33, n_v=33)
    d = F.backward_filtering_density(c, 0.0, (0, 0, 0), 0.25, drv, zx, zv, lat=lat)
    assert abs(np.sum(d.weights * d.values) - 1.0) < 1e-12
    assert abs(d.integrate(lambda a, b, e: 1.0) - 1.0) < 1e-12
    assert np.all(d.values > -1e-8 * d.values.max())


def test_backward_density_factorizes_when_decoupled():
    # [DERIVED] independence of signal and observation under decoupling; the explicit
    # step couples the (x, v) and y operators only through O(dt^2) cross terms
    c = model.make_preset("constant", sigma1=0.0, h=0.0)
    grid = sde.TimeGrid(0.0, 0.25, 50)
    drv = _driving(5, grid)
    lat = F.BackwardLattice(np.linspace(-2.5, 2.5, 25), np.linspace(-3, 3, 25), np.linspace(-2.5, 2.5, 15))
    zx, zv = np.linspace(-1.2, 1.2, 7), np.linspace(-1.6, 1.6, 7)
    eta = drv.W[-1] + np.linspace(-0.8, 0.8, 3)
    d = F.backward_filtering_density(c, 0.0, (0.1, 0.2, 0.0), 0.25, drv, zx, zv, eta=eta, lat=lat)
    pz, py = d.marginal((0, 1)), d.marginal((2,))
    assert abs(np.sum(d.weights * d.values) - 1.0) < 1e-12
    assert np.max(np.abs(d.values - pz[..., None] * py)) < 5e-3 * d.values.max()
    # signal marginal against the Gaussian kernel smoothed by the terminal bumps
    sx, sv = 2 * (zx[1] - zx[0]), 2 * (zv[1] - zv[0])
    C = kernels.langevin_covariance(1.0, 0.25) + np.diag([sx ** 2, sv ** 2])
    Z1, Z2 = np.meshgrid(zx, zv, indexing="ij")
    e = np.stack([Z1 - 0.1 - 0.25 * 0.2, Z2 - 0.2], -1)
    ref = np.exp(-0.5 * np.einsum("...i,ij,...j->...", e, np.linalg.inv(C), e))
    w = np.outer(F.trapezoid_weights(zx), F.trapezoid_weights(zv))
    ref /= np.sum(w * ref)
    assert np.sum(w * np.abs(pz - ref)) < 0.02


def test_density_csv(tmp_path):
    u = F.normalize(_random_density(4, n=5))
    path = u.to_csv(str(tmp_path / "d.csv"), {"k": 1})
    lines = [ln for ln in open(path).read().splitlines() if not ln.startswith("#")]
    assert lines[0] == "xi,nu,value" and len(lines) == 26
