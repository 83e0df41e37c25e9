"""Euler-Maruyama simulation of the signal/observation system.

Two dynamics are provided: the physical system driven by independent
Brownian motions, and the reference-measure dynamics driven by a supplied
observation-driven Brownian path (plus fresh independent noise).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rng
from .errors import CoercivityError, DomainError
from .io import write_csv
from .model import CoefficientSet, SampleGrid, check_coercivity, tilde_h

DEFAULT_CHUNK = 20000


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 < t0+dt < ... < t1`` with ``n_steps`` steps."""

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise DomainError(f"need t0 < t1, got {self.t0}, {self.t1}")
        if int(self.n_steps) < 1:
            raise DomainError("n_steps must be positive")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass(frozen=True)
class PathBundle:
    """Simulated trajectories; arrays have shape ``(n_paths, n_recorded)``.

    ``dW`` has shape ``(n_paths, n_steps, n)`` when recorded, else ``None``.
    ``recorded`` lists the step indices kept in the trajectory arrays.
    """

    grid: TimeGrid
    X: np.ndarray
    V: np.ndarray
    Y: np.ndarray
    rho: np.ndarray
    tildeW: np.ndarray
    dW: Optional[np.ndarray]
    seed: int
    recorded: np.ndarray
    scheme: str = "euler"
    measure: str = "P"

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def tildeW_increments(self) -> np.ndarray:
        """Increments of the first path's ``tildeW`` (needs full recording)."""
        if len(self.recorded) != self.grid.n_steps + 1:
            raise DomainError("increments need a fully recorded path")
        return np.diff(self.tildeW[0])

    def to_csv(self, path: str, manifest: dict, path_index: int = 0) -> str:
        times = self.grid.times[self.recorded]
        rows = zip(times, self.X[path_index], self.V[path_index], self.Y[path_index],
                   self.rho[path_index], self.tildeW[path_index])
        return write_csv(path, ["t", "X", "V", "Y", "rho", "tildeW"], rows, manifest)


def _coercivity_grid(init) -> SampleGrid:
    x, v, y = float(init[0]), float(init[1]), float(init[2])
    ax = np.linspace(-5.0, 5.0, 11)
    return SampleGrid(t=np.array([0.0]), x=x + ax, v=v + ax, y=y + ax)


def _loadings(c: CoefficientSet, t, x, v, y):
    return c.sigma1(t, x, v, y), np.asarray(c.sigma_hat(t, x, v, y), dtype=float)


def _record_plan(n_steps: int, record: str) -> np.ndarray:
    if record == "all":
        return np.arange(n_steps + 1)
    if record == "terminal":
        return np.array([0, n_steps])
    raise DomainError(f"unknown record mode {record!r}")


def simulate_system(c: CoefficientSet, init: Sequence[float], grid: TimeGrid, seed: int,
                    n_paths: int = 1, record: str = "all", keep_increments: bool = True,
                    check: bool = True, increments: Optional[np.ndarray] = None) -> PathBundle:
    """Euler-Maruyama paths of the physical system and its likelihood process.

    Args:
        c: coefficients.
        init: ``(x, v, y)`` initial state.
        grid: time grid.
        seed: RNG seed.
        n_paths: number of independent paths.
        record: ``"all"`` or ``"terminal"``.
        keep_increments: store the Brownian increments (only with ``record="all"``).
        check: refuse to simulate when coercivity fails near ``init``.
        increments: optional Brownian increments of shape ``(n_paths, n_steps, n)``
            replacing the seeded draws (common-random-number studies).

    Returns:
        PathBundle under the physical measure.
    """
    if check and not check_coercivity(c, _coercivity_grid(init)).passed:
        raise CoercivityError("coefficients fail the coercivity check; refusing to simulate")
    dt = grid.dt
    sq = np.sqrt(dt)
    ts = grid.times
    rec = _record_plan(grid.n_steps, record)
    n = c.n
    if increments is not None:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (n_paths, grid.n_steps, n):
            raise DomainError(f"increments must have shape {(n_paths, grid.n_steps, n)}")
    x = np.full(n_paths, float(init[0]))
    v = np.full(n_paths, float(init[1]))
    y = np.full(n_paths, float(init[2]))
    logr = np.zeros(n_paths)
    wt = np.zeros(n_paths)
    out = {k: np.empty((n_paths, len(rec))) for k in ("X", "V", "Y", "rho", "W")}
    keep = keep_increments and record == "all"
    dws = np.empty((n_paths, grid.n_steps, n)) if keep else None
    slot = 0

    def store(k):
        nonlocal slot
        if slot < len(rec) and rec[slot] == k:
            out["X"][:, slot] = x
            out["V"][:, slot] = v
            out["Y"][:, slot] = y
            out["rho"][:, slot] = np.exp(logr)
            out["W"][:, slot] = wt
            slot += 1

    store(0)
    for k in range(grid.n_steps):
        t = ts[k]
        if increments is None:
            dw = np.stack([sq * rng.normals(seed, k, ch, n_paths) for ch in range(n)], axis=-1)
        else:
            dw = increments[:, k, :]
        s1, sh = _loadings(c, t, x, v, y)
        bb = c.b(t, x, v, y)
        th = c.theta(t, y)
        hh = c.h(t, x, v, y)
        ht = hh / th
        dy = hh * dt + th * dw[:, 0]
        dwt = dy / th
        logr = logr + ht * dwt - 0.5 * ht * ht * dt
        wt = wt + dwt
        x, v, y = (x + v * dt,
                   v + bb * dt + s1 * dw[:, 0] + np.sum(sh * dw[:, 1:], axis=-1),
                   y + dy)
        if keep:
            dws[:, k, :] = dw
        store(k + 1)
    return PathBundle(grid=grid, X=out["X"], V=out["V"], Y=out["Y"], rho=out["rho"], tildeW=out["W"],
                      dW=dws, seed=int(seed), recorded=rec, measure="P")


def as_increments(tildeW_path, grid: TimeGrid) -> np.ndarray:
    """Accept a path (``n_steps+1`` values) or increments (``n_steps``) and return increments."""
    w = np.asarray(tildeW_path, dtype=float).reshape(-1)
    if w.size == grid.n_steps + 1:
        return np.diff(w)
    if w.size == grid.n_steps:
        return w.copy()
    raise DomainError(f"observation path length {w.size} does not match grid with {grid.n_steps} steps")


def simulate_under_Q(c: CoefficientSet, init: Sequence[float], tildeW_path, grid: TimeGrid, seed: int,
                     n_paths: int = 1, record: str = "all", chunk: int = DEFAULT_CHUNK,
                     stream: int = rng.STREAM_REFERENCE) -> PathBundle:
    """Reference-measure dynamics driven by a fixed observation Brownian path.

    The shared channel uses the supplied increments, the independent
    channels fresh noise; the drift is corrected to ``b - (h/theta) sigma1``
    and the likelihood is the stochastic exponential of ``h/theta`` against
    the supplied path, started at ``eta``.

    Args:
        c: coefficients.
        init: ``(x, v, y, eta)``.
        tildeW_path: observation-driven Brownian path or its increments.
        grid: time grid.
        seed: seed for the independent channels.
        n_paths: number of particles.
        record: ``"all"`` or ``"terminal"``.
        chunk: particles per block (results do not depend on it).
        stream: RNG stream tag.

    Returns:
        PathBundle under the reference measure (``dW`` not stored).
    """
    dwt = as_increments(tildeW_path, grid)
    if len(init) != 4:
        raise DomainError("init must be (x, v, y, eta)")
    if not float(init[3]) > 0.0:
        raise DomainError("initial likelihood eta must be positive")
    rec = _record_plan(grid.n_steps, record)
    wpath = np.concatenate([[0.0], np.cumsum(dwt)])
    outs = {k: np.empty((n_paths, len(rec))) for k in ("X", "V", "Y", "rho")}
    for lo in range(0, n_paths, chunk):
        cnt = min(chunk, n_paths - lo)
        res = _q_block(c, init, dwt, grid, seed, lo, cnt, rec, stream)
        for k in outs:
            outs[k][lo:lo + cnt] = res[k]
    wrec = np.broadcast_to(wpath[rec], (n_paths, len(rec))).copy()
    return PathBundle(grid=grid, X=outs["X"], V=outs["V"], Y=outs["Y"], rho=outs["rho"], tildeW=wrec,
                      dW=None, seed=int(seed), recorded=rec, measure="Q")


def _q_block(c, init, dwt, grid, seed, start, count, rec, stream):
    dt = grid.dt
    sq = np.sqrt(dt)
    ts = grid.times
    n = c.n
    x = np.full(count, float(init[0]))
    v = np.full(count, float(init[1]))
    y = np.full(count, float(init[2]))
    logr = np.full(count, np.log(float(init[3])))
    out = {k: np.empty((count, len(rec))) for k in ("X", "V", "Y", "rho")}
    slot = 0
    for k in range(grid.n_steps + 1):
        if slot < len(rec) and rec[slot] == k:
            out["X"][:, slot] = x
            out["V"][:, slot] = v
            out["Y"][:, slot] = y
            out["rho"][:, slot] = np.exp(logr)
            slot += 1
        if k == grid.n_steps:
            break
        t = ts[k]
        s1, sh = _loadings(c, t, x, v, y)
        ht = tilde_h(c, t, x, v, y)
        bb = c.b(t, x, v, y)
        th = c.theta(t, y)
        noise = 0.0
        for ch in range(1, n):
            noise = noise + sh[..., ch - 1] * sq * rng.normals(seed, k, ch, count, start=start, stream=stream)
        dw = dwt[k]
        logr = logr + ht * dw - 0.5 * ht * ht * dt
        x, v, y = x + v * dt, v + (bb - ht * s1) * dt + s1 * dw + noise, y + th * dw
    return out
