"""Acceptance suite: numerical checks reported as pass/fail rows.

Each check returns a :class:`CheckResult` with a metric, its threshold and
detail tables.  Result files never contain runtimes, so two runs of the
same configuration produce identical bytes; wall times go to a separate
``timings.txt``.
"""
from __future__ import annotations

import filecmp
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import bito, itow
from . import filter as F
from . import parametrix as P
from .config import ScenarioConfig, VerifySettings, load_config, resolve_config_path
from .errors import KinfilterError
from .io import write_csv
from .kernels import characteristic_shift, exact_langevin_kernel, langevin_covariance
from .model import make_observable, make_preset
from .rng import brownian_increments
from .sde import TimeGrid, simulate_system

RESULT_HEADER = ["criterion", "name", "passed", "metric", "threshold", "detail"]

# wall-time budgets in seconds (consistency is per scenario)
BUDGETS = {1: 60.0, 2: 30.0, 3: 600.0, 4: 600.0, 6: 300.0, 7: 300.0, 8: 120.0}
NAMES = {1: "kernel-exactness", 2: "parametrix-degeneracy", 3: "sandwich-certification",
         4: "filtering-consistency", 5: "normalization-invariance", 6: "flow-derivative-bounds",
         7: "backward-ito", 8: "deterministic-cauchy", 9: "reproducibility"}


@dataclass
class CheckResult:
    """Outcome of one criterion.

    ``passed`` covers the numerical check only; ``timings`` holds wall
    times keyed by label and is kept out of result files.
    """

    criterion: int
    name: str
    passed: bool
    metric: float
    threshold: float
    detail: str
    tables: List[Tuple[str, Sequence[str], list]] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)

    def row(self):
        return (self.criterion, self.name, self.passed, self.metric, self.threshold, self.detail)

    def within_budget(self) -> bool:
        budget = BUDGETS.get(self.criterion)
        return budget is None or all(v < budget for v in self.timings.values())

    @property
    def ok(self) -> bool:
        return self.passed and self.within_budget()

    def line(self) -> str:
        secs = ", ".join(f"{k} {v:.1f}s" for k, v in self.timings.items())
        status = "PASS" if self.ok else "FAIL"
        budget = "" if self.within_budget() else " (over time budget)"
        return (f"criterion {self.criterion} {self.name}: {status}{budget}  metric={self.metric:.4g} "
                f"threshold={self.threshold:.4g}  {self.detail}  [{secs}]")


def _driving(seed: int, grid: TimeGrid) -> itow.DrivingData:
    return itow.DrivingData(grid, brownian_increments(seed, grid.n_steps, grid.dt)[:, 0])


def _scenario_driving(cfg: ScenarioConfig):
    c = cfg.coefficients()
    bundle = simulate_system(c, cfg.start(), cfg.time_grid(), seed=cfg.seed)
    return c, itow.driving_from_bundle(bundle)


def _lattice_spec(cfg: ScenarioConfig, n_xi: Optional[int] = None, n_nu: Optional[int] = None):
    lt = cfg["lattice"]
    return F.ForwardLatticeSpec(n_xi=n_xi or lt["n_xi"], n_nu=n_nu or lt["n_nu"], n_std=lt["n_std"],
                                width_factor=lt["width_factor"], xi_resolution=lt["xi_resolution"])


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def kernel_exactness(s: VerifySettings, z=(0.3, -0.2), horizon: float = 0.5) -> CheckResult:
    """L1 distance of the forward density to the closed-form kernel with no coupling."""
    c = make_preset("langevin-pure")
    sigma = math.sqrt(float(c.sigma_sq(0.0, 0.0, 0.0, 0.0)))
    drv = _driving(s.kernel_seed, TimeGrid(0.0, horizon, s.kernel_steps))
    spec = F.ForwardLatticeSpec(n_xi=s.kernel_n, n_nu=s.kernel_n)
    u = F.forward_fundamental(c, 0.0, z, horizon, drv, spec)
    X, V = np.meshgrid(u.xi, u.nu, indexing="ij")
    exact = exact_langevin_kernel(sigma, horizon, z, np.stack([X, V], -1))
    err = float(np.sum(u.weights * np.abs(u.values - exact)))
    return CheckResult(1, "kernel-exactness", err < 1e-3, err, 1e-3,
                       f"lattice {u.xi.size}x{u.nu.size} horizon {horizon}")


def parametrix_degeneracy(cfg: ScenarioConfig) -> CheckResult:
    """Constant coefficients: the remainder vanishes and the series is its first term.

    The first-order coefficients stay zero because the frozen kernel keeps
    only the diffusion and the transport; a constant drift or potential
    leaves the remainder ``b d_nu Z + c Z``.
    """
    base = make_preset("constant", sigma1=0.0)
    a0 = 0.5 * float(base.sigma_sq(0.0, 0.0, 0.0, 0.0))
    pr = cfg["parametrix"]
    # the vanishing is exact, so a coarse quadrature suffices
    spec = P.QuadratureSpec(n_time=4, n_space=6, n_space_table=6, n_flow=9, n_table=17)
    rows, sup_h, exact = [], 0.0, True
    for a in (0.25 * a0, a0, 4.0 * a0):
        fld = P.ConstantField(a)
        for h in pr["horizons"]:
            g = P.scaled_grid(P.characteristic_end(fld, 0.0, (0.0, 0.0), h), h, pr["grid_n"], pr["grid_extent"])
            H = float(np.max(np.abs(P.kernel_H(fld, 0.0, (0.0, 0.0), h, g))))
            S = P.parametrix_series(fld, pr["order"], 0.0, (0.0, 0.0), h, g, spec)
            first = bool(np.array_equal(S.total, S.terms[0])) and all(m == 0.0 for m in S.sup_norms[1:])
            rows.append((a, h, H, first))
            sup_h, exact = max(sup_h, H), exact and first
    return CheckResult(2, "parametrix-degeneracy", sup_h < 1e-10 and exact, sup_h, 1e-10,
                       f"series equals first term: {exact}",
                       [("degeneracy.csv", ["a", "horizon", "sup_H", "series_is_first_term"], rows)])


def sandwich_certification(s: VerifySettings, cfg: ScenarioConfig) -> CheckResult:
    """Two-sided Gaussian bounds of the truncated series and two velocity derivatives."""
    pr = cfg["parametrix"]
    c = make_preset("sinusoidal")
    drv = itow.driving_from_bundle(
        simulate_system(c, (0.0, 0.0, 0.0), TimeGrid(0.0, max(pr["horizons"]), s.sandwich_steps),
                        seed=s.sandwich_seed))
    ext, n = pr["flow_extent"], pr["flow_n"]
    fld = P.model_field(c, drv, itow.make_lattice((-ext, ext), (-ext, ext), n, n), save_every=pr["save_every"])
    spec = P.QuadratureSpec(n_time=pr["n_time"], n_space=pr["n_space"])
    rows, lam, ok = [], 0.0, True
    for h in pr["horizons"]:
        center = P.characteristic_end(fld, 0.0, (0.0, 0.0), h)
        g = P.scaled_grid(center, h, pr["grid_n"], pr["grid_extent"])
        p, d1, d2 = P.series_nu_derivatives(fld, pr["order"], 0.0, (0.0, 0.0), h, g, spec)
        rep = P.certify_sandwich(p, 0.0, h, center, g, d1, d2)
        rows.extend(rep.rows())
        good = rep.success and rep.lam <= pr["lam_max"]
        ok = ok and good
        lam = max(lam, rep.lam) if rep.success else math.inf
    return CheckResult(3, "sandwich-certification", ok, lam, pr["lam_max"],
                       f"order {pr['order']} horizons {','.join(map(str, pr['horizons']))}",
                       [("sandwich.csv", ["horizon", "success", "lam", "lam_kernel", "lam_d1", "lam_d2",
                                          "n_points", "message"], rows)])


def _estimates(cfg: ScenarioConfig, c, drv, n_particles: int):
    t, T = cfg["time"]["t"], cfg["time"]["T"]
    zy = cfg.start()
    spec = _lattice_spec(cfg)
    uh = F.normalize(F.forward_fundamental(c, t, zy[:2], T, drv, spec))
    comp = F.normalize(F.forward_fundamental(c, t, zy[:2], T, drv, F.coarse_spec(spec)))
    chunk = cfg["particles"]["chunk"]
    out = []
    for phi in cfg.observables():
        out.append((phi.name, [
            F.estimate_forward(uh, phi, comp),
            F.ks_backward_estimate(c, t, zy, T, phi, drv, n_particles, seed=cfg.seed, chunk=chunk),
            F.particle_oracle(c, t, zy, T, phi, drv, n_particles, seed=cfg.seed, chunk=chunk),
        ]))
    return out


def filtering_consistency(s: VerifySettings, scenarios: Sequence[ScenarioConfig]) -> CheckResult:
    """Forward, Kallianpur-Striebel and oracle estimates agree within three combined errors."""
    rows, worst, unit_ok, timings = [], 0.0, True, {}
    for cfg in scenarios:
        t0 = time.perf_counter()
        c, drv = _scenario_driving(cfg)
        for name, ests in _estimates(cfg, c, drv, s.consistency_particles):
            for e in ests:
                rows.append((cfg.name, name, e.method, e.value, e.stderr, e.ess if e.ess is not None else ""))
            if name == "one":
                unit_ok = unit_ok and all(e.value == 1.0 for e in ests)
            for i in range(len(ests)):
                for j in range(i + 1, len(ests)):
                    a, b = ests[i], ests[j]
                    se = math.hypot(a.stderr, b.stderr)
                    gap = abs(a.value - b.value)
                    worst = max(worst, 0.0 if gap == 0 else (gap / (3 * se) if se > 0 else math.inf))
        timings[cfg.name] = time.perf_counter() - t0
    return CheckResult(4, "filtering-consistency", worst <= 1.0 and unit_ok, worst, 1.0,
                       f"max gap over 3 combined errors; unit observable exact: {unit_ok}; "
                       f"scenarios {','.join(c.name for c in scenarios)}",
                       [("consistency.csv", ["scenario", "observable", "method", "value", "stderr", "ess"], rows)],
                       timings)


def normalization_invariance(s: VerifySettings, scenarios: Sequence[ScenarioConfig]) -> CheckResult:
    """Unit mass after normalization and invariance of estimates under rescaling."""
    rows, mass_err, scale_err = [], 0.0, 0.0
    for cfg in scenarios:
        c, drv = _scenario_driving(cfg)
        t, T = cfg["time"]["t"], cfg["time"]["T"]
        spec = _lattice_spec(cfg, s.normalization_n_xi, s.normalization_n_nu)
        u = F.forward_fundamental(c, t, cfg.start()[:2], T, drv, spec)
        uh = F.normalize(u)
        us = F.normalize(F.GridDensity(u.time, u.xi, u.nu, 1e3 * u.values))
        m = abs(uh.total_mass - 1.0)
        for phi in cfg.observables():
            d = abs(F.estimate_forward(uh, phi).value - F.estimate_forward(us, phi).value)
            rows.append((cfg.name, phi.name, m, d))
            scale_err = max(scale_err, d)
        mass_err = max(mass_err, m)
    ok = mass_err < 1e-12 and scale_err < 1e-10
    return CheckResult(5, "normalization-invariance", ok, mass_err, 1e-12,
                       f"max estimate change under scaling by 1e3: {scale_err:.3e} (threshold 1e-10)",
                       [("normalization.csv", ["scenario", "observable", "mass_error", "scaling_change"], rows)])


def lemma_surrogate(s: VerifySettings) -> CheckResult:
    """Positivity and short-time flatness of the velocity derivative of the flow over many seeds."""
    c = make_preset("sinusoidal")
    grid = TimeGrid(0.0, s.lemma_horizon, s.lemma_steps)
    lat = itow.make_lattice((-2.0, 2.0), (-2.0, 2.0), 9, 11)
    flows = [itow.solve_forward_flow(c, _driving(seed, grid), lat) for seed in range(s.lemma_seeds)]
    probe = 1e-3
    fit = itow.fit_lemma_bounds(flows, c.flatten_eps, probe_elapsed=[probe])
    dev = float(fit.sup_dev[probe])
    ok = fit.finite and fit.min_d_nu > 0 and dev < 0.05
    rows = [(s.lemma_seeds, fit.min_d_nu, probe, dev, float(np.max(fit.c_nu)), float(np.max(fit.c_xi)))]
    return CheckResult(6, "flow-derivative-bounds", ok, dev, 0.05,
                       f"min d_nu gamma {fit.min_d_nu:.6g}; constants finite: {fit.finite}",
                       [("lemma.csv", ["seeds", "min_d_nu", "probe_elapsed", "sup_dev", "max_c_nu", "max_c_xi"],
                         rows)])


def backward_ito_suite(s: VerifySettings, cfg: ScenarioConfig) -> CheckResult:
    """Backward integral convergence and the two residual checks on a scalar diffusion."""
    b = cfg["bito"]
    sde = bito.make_scalar_sde(b["sde"])
    reps = [("integral", bito.backward_integral_convergence(range(s.integral_seeds))),
            ("spde", bito.backward_diffusion_spde_check(sde, list(b["lattice"]), b["T"], range(s.spde_seeds))),
            ("invariance", bito.invariance_check(bito.make_test_function(b["test_function"]), sde,
                                                 list(b["lattice"]), b["T"], range(s.spde_seeds)))]
    rows = []
    for name, rep in reps:
        for mesh, res in zip(rep.meshes, rep.median_residual):
            rows.append((name, mesh, res, rep.rate))
    rate = min(rep.rate for _, rep in reps)
    return CheckResult(7, "backward-ito", rate >= 0.4, rate, 0.4,
                       "rates " + " ".join(f"{n}={r.rate:.4f}" for n, r in reps),
                       [("bito.csv", ["check", "mesh", "median_residual", "rate"], rows)])


def _gaussian_convolution(z, h: float, sigma: float, cx, cv, vx, vv):
    """Closed form of the Gaussian observable transported by the free kernel."""
    m = characteristic_shift(h, np.asarray(z, dtype=float))
    C = langevin_covariance(sigma, h) + np.diag([vx, vv])
    d = m - np.array([cx, cv])
    q = np.einsum("...i,ij,...j->...", d, np.linalg.inv(C), d)
    return math.sqrt(vx * vv / np.linalg.det(C)) * np.exp(-0.5 * q)


def deterministic_cauchy(s: VerifySettings) -> CheckResult:
    """Gaussian datum against its closed form and the gradient blow-up rate for Holder data."""
    c = make_preset("constant", sigma1=0.0)
    sigma = math.sqrt(float(c.sigma_sq(0.0, 0.0, 0.0, 0.0)))
    fld = P.deterministic_field(c)
    prm = dict(cx=0.5, cv=-0.3, vx=0.8, vv=0.4)
    phi = make_observable("gaussian", **prm)
    ax = np.linspace(-2.0, 2.0, 9)
    z = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1)
    rows, err = [], 0.0
    for t in s.cauchy_times:
        sol = P.solve_backward_cauchy(fld, phi, 1.0, t, z)
        e = float(np.max(np.abs(sol.f - _gaussian_convolution(z, 1.0 - t, sigma, **prm))))
        rows.append(("gaussian", t, e))
        err = max(err, e)
    alpha = c.holder_alpha
    hs = np.geomspace(max(s.holder_range), min(s.holder_range), s.holder_points)
    holder = make_observable("holder", alpha=alpha)
    sups = []
    for h in hs:
        v = math.sqrt(h) * np.linspace(-3.0, 3.0, 25)
        pts = np.stack([np.zeros_like(v), v], axis=-1)
        sups.append(float(np.max(np.abs(P.solve_backward_cauchy(fld, holder, 1.0, 1.0 - h, pts).f_v))))
        rows.append(("holder", 1.0 - h, sups[-1]))
    exponent = -float(np.polyfit(np.log(hs), np.log(sups), 1)[0])
    target = (1.0 - alpha) / 2.0
    ok = err < 1e-4 and abs(exponent - target) <= 0.15
    return CheckResult(8, "deterministic-cauchy", ok, err, 1e-4,
                       f"blow-up exponent {exponent:.4f} target {target:.4f} +-0.15",
                       [("cauchy.csv", ["case", "t", "value"], rows)])


def reproducibility(s: VerifySettings, cfg: ScenarioConfig) -> CheckResult:
    """Run the reproducibility config twice (one and two threads) and compare result files byte by byte."""
    path = resolve_config_path(s.reproducibility_config, cfg.path)
    inner = load_config(path)
    crit = tuple(k for k in inner.verify.criteria if k != 9)
    with tempfile.TemporaryDirectory() as d:
        a, b = os.path.join(d, "a"), os.path.join(d, "b")
        run_verify(inner, a, threads=1, criteria=crit)
        run_verify(inner, b, threads=2, criteria=crit)
        names = sorted(n for n in os.listdir(a) if n.endswith(".csv"))
        same = sorted(n for n in os.listdir(b) if n.endswith(".csv")) == names
        diff = [n for n in names if not filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False)]
    ok = same and not diff and bool(names)
    return CheckResult(9, "reproducibility", ok, float(len(diff)), 0.0,
                       f"config {os.path.basename(path)}; {len(names)} result files compared"
                       + (f"; differing: {','.join(diff)}" if diff else ""))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def scenario_configs(cfg: ScenarioConfig) -> List[ScenarioConfig]:
    return [load_config(resolve_config_path(n, cfg.path)) for n in cfg.verify.scenarios]


def criterion_runner(k: int, cfg: ScenarioConfig) -> Callable[[], CheckResult]:
    s = cfg.verify
    table = {
        1: lambda: kernel_exactness(s),
        2: lambda: parametrix_degeneracy(cfg),
        3: lambda: sandwich_certification(s, cfg),
        4: lambda: filtering_consistency(s, scenario_configs(cfg)),
        5: lambda: normalization_invariance(s, scenario_configs(cfg)),
        6: lambda: lemma_surrogate(s),
        7: lambda: backward_ito_suite(s, cfg),
        8: lambda: deterministic_cauchy(s),
        9: lambda: reproducibility(s, cfg),
    }

    def run() -> CheckResult:
        t0 = time.perf_counter()
        try:
            res = table[k]()
        except KinfilterError as exc:
            # a numerical failure fails this criterion only
            res = CheckResult(k, NAMES[k], False, math.nan, math.nan, f"{type(exc).__name__}: {exc}")
        if not res.timings:
            res.timings = {"total": time.perf_counter() - t0}
        return res
    return run


def run_criterion(k: int, cfg: ScenarioConfig) -> CheckResult:
    return criterion_runner(k, cfg)()


def write_results(out: str, results: Sequence[CheckResult], manifest: dict) -> str:
    """Write ``results.csv``, per-criterion tables and ``timings.txt``; returns the results path."""
    os.makedirs(out, exist_ok=True)
    for r in results:
        for name, header, rows in r.tables:
            write_csv(os.path.join(out, f"criterion{r.criterion}-{name}"), header, rows,
                      dict(manifest, criterion=r.criterion))
    path = write_csv(os.path.join(out, "results.csv"), RESULT_HEADER, [r.row() for r in results], manifest)
    with open(os.path.join(out, "timings.txt"), "w", encoding="utf-8") as fh:
        for r in results:
            for label, sec in r.timings.items():
                budget = BUDGETS.get(r.criterion)
                fh.write(f"criterion {r.criterion} {label} {sec:.2f}s budget "
                         f"{'none' if budget is None else f'{budget:.0f}s'}\n")
    return path


def run_verify(cfg: ScenarioConfig, out: str, threads: int = 1, criteria: Optional[Sequence[int]] = None,
               report: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    """Run the requested criteria (independent checks run concurrently) and write the result files."""
    ks = sorted(set(criteria if criteria is not None else cfg.verify.criteria))
    runners = [criterion_runner(k, cfg) for k in ks]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda f: f(), runners))
    else:
        results = [f() for f in runners]
    if report is not None:
        for r in results:
            report(r)
    manifest = dict(cfg.manifest(), subcommand="verify", criteria=",".join(map(str, ks)))
    write_results(out, results, manifest)
    return results
