"""Command-line experiment runner.

Every subcommand reads a scenario config, writes CSV artifacts that begin
with a manifest block, and exits 0 only when its checks pass.  Exit codes:
1 for failed checks, 2 for invalid configuration, 3 for numerical failures
(a report is written next to the artifacts).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import __version__, acceptance, bito, itow
from . import filter as F
from . import parametrix as P
from .config import DEFAULT_CONFIG, OUT_ENV, ScenarioConfig, load_config
from .errors import ConfigError, KinfilterError
from .io import write_csv
from .sde import simulate_system

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SUBCOMMANDS = ("simulate", "flow", "kernel", "parametrix", "filter-forward", "filter-backward", "bito-check",
               "verify")

log = logging.getLogger("kinfilter")


def _pmap(fn: Callable, items: Sequence, threads: int) -> List:
    """Order-preserving map, concurrent when ``threads > 1``."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


class Run:
    """One subcommand invocation: resolved config, output directory and manifest."""

    def __init__(self, cfg: ScenarioConfig, sub: str, out_root: str, threads: int):
        self.cfg, self.sub, self.threads = cfg, sub, max(1, int(threads))
        self.out = out_root if sub == "verify" else os.path.join(out_root, sub)
        self.manifest = dict(cfg.manifest(), subcommand=sub, version=__version__)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def driving(self):
        c = self.cfg.coefficients()
        bundle = simulate_system(c, self.cfg.start(), self.cfg.time_grid(), seed=self.cfg.seed)
        return c, bundle, itow.driving_from_bundle(bundle)

    def field(self, c, drv):
        pr = self.cfg["parametrix"]
        ext, n = pr["flow_extent"], pr["flow_n"]
        return P.model_field(c, drv, itow.make_lattice((-ext, ext), (-ext, ext), n, n), save_every=pr["save_every"])


# ---------------------------------------------------------------------------
# subcommands: each returns True when its checks pass
# ---------------------------------------------------------------------------

def cmd_simulate(run: Run) -> bool:
    c, bundle, _ = run.driving()
    bundle.to_csv(run.path("path.csv"), run.manifest)
    print(f"wrote {run.path('path.csv')}")
    return bool(np.all(np.isfinite(bundle.X)) and np.all(np.isfinite(bundle.V)))


def cmd_flow(run: Run) -> bool:
    c, _, drv = run.driving()
    pr = run.cfg["parametrix"]
    ext, n = pr["flow_extent"], pr["flow_n"]
    flow = itow.solve_forward_flow(c, drv, itow.make_lattice((-ext, ext), (-ext, ext), n, n),
                                   save_every=pr["save_every"])
    flow.to_csv(run.path("flow.csv"), run.manifest)
    probe = float(flow.times[1] - flow.times[0])
    fit = itow.fit_lemma_bounds([flow], c.flatten_eps, probe_elapsed=[probe])
    write_csv(run.path("lemma.csv"), ["eps", "min_d_nu", "c_nu", "c_xi", "probe_elapsed", "sup_dev"],
              [(fit.eps, fit.min_d_nu, float(fit.c_nu[0]), float(fit.c_xi[0]), probe, fit.sup_dev[probe])],
              run.manifest)
    ok = fit.finite and fit.min_d_nu > 0
    print(f"flow: min d_nu gamma {fit.min_d_nu:.6g}, constants finite {fit.finite}")
    return ok


def cmd_kernel(run: Run) -> bool:
    c, _, drv = run.driving()
    fld = run.field(c, drv)
    pr = run.cfg["parametrix"]
    t0, z = run.cfg["time"]["t"], run.cfg.start()[:2]

    def sweep(h):
        g = P.scaled_grid(P.characteristic_end(fld, t0, z, h), h, pr["grid_n"], pr["grid_extent"])
        return h, g, P.parametrix_Z(fld, t0, z, t0 + h, g), P.kernel_H(fld, t0, z, t0 + h, g)

    rows, ok = [], True
    for h, g, Z, H in _pmap(sweep, list(pr["horizons"]), run.threads):
        pts = g.reshape(-1, 2)
        rows.extend(zip([h] * len(pts), pts[:, 0], pts[:, 1], Z.ravel(), H.ravel()))
        ok = ok and bool(np.all(np.isfinite(Z)) and np.all(Z >= 0) and np.all(np.isfinite(H)))
    write_csv(run.path("kernel.csv"), ["horizon", "xi", "nu", "Z", "H"], rows, run.manifest)
    print(f"kernel: {len(rows)} values")
    return ok


def cmd_parametrix(run: Run) -> bool:
    c, _, drv = run.driving()
    fld = run.field(c, drv)
    pr = run.cfg["parametrix"]
    t0, z = run.cfg["time"]["t"], run.cfg.start()[:2]
    spec = P.QuadratureSpec(n_time=pr["n_time"], n_space=pr["n_space"])

    def one(h):
        center = P.characteristic_end(fld, t0, z, h)
        g = P.scaled_grid(center, h, pr["grid_n"], pr["grid_extent"])
        p, d1, d2 = P.series_nu_derivatives(fld, pr["order"], t0, z, t0 + h, g, spec)
        return h, g, p, d1, d2, P.certify_sandwich(p, t0, t0 + h, center, g, d1, d2)

    rows, reps = [], []
    for h, g, p, d1, d2, rep in _pmap(one, list(pr["horizons"]), run.threads):
        pts = g.reshape(-1, 2)
        rows.extend(zip([h] * len(pts), pts[:, 0], pts[:, 1], p.ravel(), d1.ravel(), d2.ravel()))
        reps.append(rep)
        print(f"parametrix s-t={h}: success {rep.success} lambda {rep.lam:.6g} {rep.message}")
    write_csv(run.path("series.csv"), ["horizon", "xi", "nu", "value", "d_nu", "d_nunu"], rows, run.manifest)
    write_csv(run.path("certification.csv"),
              ["horizon", "success", "lam", "lam_kernel", "lam_d1", "lam_d2", "n_points", "message"],
              [row for r in reps for row in r.rows()], run.manifest)
    return all(r.success and r.lam <= pr["lam_max"] for r in reps)


def _forward_spec(cfg: ScenarioConfig) -> F.ForwardLatticeSpec:
    lt = cfg["lattice"]
    return F.ForwardLatticeSpec(n_xi=lt["n_xi"], n_nu=lt["n_nu"], n_std=lt["n_std"],
                                width_factor=lt["width_factor"], xi_resolution=lt["xi_resolution"])


def cmd_filter_forward(run: Run) -> bool:
    c, _, drv = run.driving()
    t, T = run.cfg["time"]["t"], run.cfg["time"]["T"]
    z = run.cfg.start()[:2]
    spec = _forward_spec(run.cfg)
    fine, coarse = _pmap(lambda sp: F.forward_fundamental(c, t, z, T, drv, sp), [spec, F.coarse_spec(spec)],
                         run.threads)
    uh, ch = F.normalize(fine), F.normalize(coarse)
    uh.to_csv(run.path("density.csv"), run.manifest)
    ests = [F.estimate_forward(uh, phi, ch, (("observable", phi.name),)) for phi in run.cfg.observables()]
    F.write_estimates(run.path("estimates.csv"), ests, run.manifest)
    for e in ests:
        print(f"filter-forward {dict(e.fingerprint)['observable']}: {e.value!r} +- {e.stderr:.3g}")
    unit = [e for e in ests if dict(e.fingerprint)["observable"] == "one"]
    clipped = fine.clipped_mass <= 1e-4 * fine.total_mass
    return all(np.isfinite(e.value) for e in ests) and all(e.value == 1.0 for e in unit) and clipped


def cmd_filter_backward(run: Run) -> bool:
    c, _, drv = run.driving()
    cfg = run.cfg
    t, T = cfg["time"]["t"], cfg["time"]["T"]
    zy = cfg.start()
    n, chunk = cfg["particles"]["n"], cfg["particles"]["chunk"]
    phis = cfg.observables()
    ks = _pmap(lambda phi: F.ks_backward_estimate(c, t, zy, T, phi, drv, n, seed=cfg.seed, chunk=chunk), phis,
               run.threads)
    ks = [F.FilterEstimate(e.value, e.method, e.stderr, e.fingerprint + (("observable", p.name),), e.warning,
                           e.ess) for e, p in zip(ks, phis)]
    bn = cfg["lattice"]["backward_n"]
    lat = F.backward_lattice(c, t, zy, T, drv, n_x=bn, n_v=bn)
    back = F.backward_ratio_estimate(c, t, zy, T, phis, drv, lat=lat)
    back = [F.FilterEstimate(e.value, e.method, e.stderr, e.fingerprint + (("observable", p.name),))
            for e, p in zip(back, phis)]
    F.write_estimates(run.path("estimates.csv"), ks + back, run.manifest)
    ok = True
    for a, b in zip(ks, back):
        name = dict(a.fingerprint)["observable"]
        gap = abs(a.value - b.value)
        agree = gap <= 3 * float(np.hypot(a.stderr, b.stderr)) or gap == 0.0
        ok = ok and agree and a.warning is None
        print(f"filter-backward {name}: ks {a.value!r} +- {a.stderr:.3g}, lattice {b.value!r} +- {b.stderr:.3g}")
    return ok


def cmd_bito_check(run: Run) -> bool:
    b = run.cfg["bito"]
    sde = bito.make_scalar_sde(b["sde"])
    lattice = list(b["lattice"])
    jobs = [("integral", lambda: bito.backward_integral_convergence(range(b["integral_seeds"]))),
            ("spde", lambda: bito.backward_diffusion_spde_check(sde, lattice, b["T"], range(b["seeds"]))),
            ("invariance", lambda: bito.invariance_check(bito.make_test_function(b["test_function"]), sde,
                                                         lattice, b["T"], range(b["seeds"])))]
    reps = _pmap(lambda j: (j[0], j[1]()), jobs, run.threads)
    for name, rep in reps:
        rep.to_csv(run.path(f"{name}.csv"), dict(run.manifest, check=name))
        print(f"bito-check {name}: rate {rep.rate:.4f}")
    return all(rep.rate >= 0.4 for _, rep in reps)


def cmd_verify(run: Run) -> bool:
    results = acceptance.run_verify(run.cfg, run.out, threads=run.threads, report=lambda r: print(r.line()))
    ok = all(r.ok for r in results)
    print(f"verify: {'PASS' if ok else 'FAIL'} ({sum(r.ok for r in results)}/{len(results)} criteria) "
          f"-> {os.path.join(run.out, 'results.csv')}")
    return ok


COMMANDS = {"simulate": cmd_simulate, "flow": cmd_flow, "kernel": cmd_kernel, "parametrix": cmd_parametrix,
            "filter-forward": cmd_filter_forward, "filter-backward": cmd_filter_backward,
            "bito-check": cmd_bito_check, "verify": cmd_verify}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _u64(text: str) -> int:
    val = int(text, 0)
    if not 0 <= val < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def _positive(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("threads must be at least 1")
    return val


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kinfilter", description="Filtering experiments for kinetic diffusions.")
    ap.add_argument("--version", action="version", version=f"kinfilter {__version__}")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", default=DEFAULT_CONFIG,
                    help="config file or shipped config name (default: %(default)s)")
    ap.add_argument("--seed", type=_u64, default=None, help="override the scenario seed")
    ap.add_argument("--out", default=None, help=f"output root (default: ${OUT_ENV} or ./kinfilter-out)")
    ap.add_argument("--threads", type=_positive, default=1, help="worker threads for independent sub-tasks")
    return ap


def _out_root(arg: Optional[str], cfg: ScenarioConfig) -> str:
    if arg:
        return arg
    if os.environ.get(OUT_ENV):
        return os.environ[OUT_ENV]
    return cfg["output"]["dir"] or "kinfilter-out"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, args.subcommand, _out_root(args.out, cfg), args.threads)
    try:
        ok = COMMANDS[args.subcommand](run)
    except KinfilterError as exc:
        os.makedirs(run.out, exist_ok=True)
        report = run.path("error-report.txt")
        with open(report, "w", encoding="utf-8") as fh:
            fh.write(f"{type(exc).__name__}: {exc}\n\n")
            fh.writelines(f"{k} = {v}\n" for k, v in sorted(run.manifest.items()))
            fh.write("\n" + traceback.format_exc())
        print(f"error: {type(exc).__name__}: {exc} (report: {report})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if ok else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
