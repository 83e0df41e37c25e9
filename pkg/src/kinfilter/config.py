"""Scenario configuration files.

Grammar: UTF-8 text with ``[section]`` headers and ``key = value`` lines;
``#`` and ``;`` start comments; numbers are decimal with optional exponent;
lists are comma-separated.  Keys are case-sensitive.  Every validation
failure is reported as ``path:line: message``.
"""
from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Tuple

from .errors import ConfigError
from .model import CoefficientSet, make_observable, make_preset
from .sde import TimeGrid

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")
DEFAULT_CONFIG = "sinusoidal"
OUT_ENV = "KINFILTER_OUT"

_FLOAT, _INT, _STR = "float", "int", "str"
_FLOATS, _INTS, _STRS = "floats", "ints", "strs"

# section -> key -> (kind, default); ``None`` marks a required key
SCHEMA: Dict[str, Dict[str, Tuple[str, object]]] = {
    "scenario": {"name": (_STR, "scenario"), "preset": (_STR, None), "seed": (_INT, None)},
    "time": {"t": (_FLOAT, 0.0), "T": (_FLOAT, 0.5), "steps": (_INT, 1000)},
    "initial": {"x": (_FLOAT, 0.0), "v": (_FLOAT, 0.0), "y": (_FLOAT, 0.0)},
    "observable": {"names": (_STRS, ("one", "v", "tanh-xi"))},
    "lattice": {"n_xi": (_INT, 129), "n_nu": (_INT, 129), "n_std": (_FLOAT, 8.0),
                "width_factor": (_FLOAT, 2.0), "xi_resolution": (_FLOAT, 2.5),
                "backward_n": (_INT, 65)},
    "particles": {"n": (_INT, 100000), "chunk": (_INT, 20000)},
    "parametrix": {"order": (_INT, 3), "horizons": (_FLOATS, (0.1, 0.25, 0.5)), "n_time": (_INT, 8),
                   "n_space": (_INT, 8), "flow_n": (_INT, 65), "flow_extent": (_FLOAT, 8.0),
                   "save_every": (_INT, 10), "grid_n": (_INT, 13), "grid_extent": (_FLOAT, 3.0),
                   "lam_max": (_FLOAT, 1e3)},
    "bito": {"sde": (_STR, "ou"), "test_function": (_STR, "sigmoid"), "seeds": (_INT, 200),
             "integral_seeds": (_INT, 1000), "lattice": (_FLOATS, (-1.0, 0.0, 0.5, 1.0)), "T": (_FLOAT, 1.0)},
    "output": {"dir": (_STR, "")},
}

# free-form section: preset parameter overrides, checked by the preset registry
FREE_SECTIONS = ("preset",)


@dataclass(frozen=True)
class VerifySettings:
    """Sizes of the acceptance checks; ``[verify]`` keys override them."""

    scenarios: Tuple[str, ...] = ("sinusoidal", "constant", "langevin-pure")
    criteria: Tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9)
    reproducibility_config: str = "smoke"
    kernel_n: int = 129
    kernel_steps: int = 1000
    kernel_seed: int = 3
    sandwich_seed: int = 11
    sandwich_steps: int = 1000
    consistency_particles: int = 100000
    normalization_n_xi: int = 257
    normalization_n_nu: int = 129
    lemma_seeds: int = 100
    lemma_steps: int = 100
    lemma_horizon: float = 0.1
    integral_seeds: int = 1000
    spde_seeds: int = 200
    cauchy_times: Tuple[float, ...] = (0.0, 0.6, 0.95)
    holder_range: Tuple[float, ...] = (1e-6, 1e-3)
    holder_points: int = 7


def _kind_of(default) -> str:
    if isinstance(default, bool):
        raise TypeError("boolean settings are not supported")
    if isinstance(default, int):
        return _INT
    if isinstance(default, float):
        return _FLOAT
    if isinstance(default, str):
        return _STR
    first = default[0]
    return _INTS if isinstance(first, int) else _FLOATS if isinstance(first, float) else _STRS


VERIFY_SCHEMA = {f.name: (_kind_of(f.default), f.default) for f in fields(VerifySettings)}


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully resolved scenario: every section with defaults filled in."""

    path: str
    values: Dict[str, Dict[str, object]] = field(repr=False)
    preset_overrides: Tuple[Tuple[str, object], ...] = ()
    verify: VerifySettings = VerifySettings()

    def __getitem__(self, section: str) -> Dict[str, object]:
        return self.values[section]

    @property
    def name(self) -> str:
        return str(self.values["scenario"]["name"])

    @property
    def seed(self) -> int:
        return int(self.values["scenario"]["seed"])

    def coefficients(self) -> CoefficientSet:
        return make_preset(self.values["scenario"]["preset"], **dict(self.preset_overrides))

    def time_grid(self) -> TimeGrid:
        tm = self.values["time"]
        return TimeGrid(tm["t"], tm["T"], tm["steps"])

    def start(self) -> Tuple[float, float, float]:
        i = self.values["initial"]
        return (i["x"], i["v"], i["y"])

    def observables(self):
        return [make_observable(n) for n in self.values["observable"]["names"]]

    def with_seed(self, seed: Optional[int]) -> "ScenarioConfig":
        if seed is None:
            return self
        vals = {s: dict(v) for s, v in self.values.items()}
        vals["scenario"]["seed"] = int(seed)
        return ScenarioConfig(self.path, vals, self.preset_overrides, self.verify)

    def manifest(self) -> Dict[str, object]:
        """Flat ``section.key`` echo of the resolved configuration (no paths)."""
        out: Dict[str, object] = {}
        for sec, kv in self.values.items():
            if sec == "output":
                continue
            for k, v in kv.items():
                out[f"{sec}.{k}"] = _show(v)
        for k, v in self.preset_overrides:
            out[f"preset.{k}"] = _show(v)
        for f in fields(VerifySettings):
            out[f"verify.{f.name}"] = _show(getattr(self.verify, f.name))
        return out


def _show(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_show(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]\s*(?:[#;].*)?$")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    idx: Dict[Tuple[str, Optional[str]], int] = {}
    sec = None
    for n, line in enumerate(text.splitlines(), 1):
        if line.lstrip().startswith(("#", ";")) or not line.strip():
            continue
        m = _SECTION_RE.match(line)
        if m:
            sec = m.group(1).strip()
            idx.setdefault((sec, None), n)
            continue
        m = _KEY_RE.match(line)
        if m and sec is not None and not line[:1].isspace():
            idx.setdefault((sec, m.group(1)), n)
    return idx


def _convert(kind: str, raw: str):
    if kind == _FLOAT:
        return float(raw)
    if kind == _INT:
        val = float(raw)
        if not val.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(val)
    if kind == _STR:
        if not raw:
            raise ValueError("empty value")
        return raw
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    sub = {_FLOATS: _FLOAT, _INTS: _INT, _STRS: _STR}[kind]
    return tuple(_convert(sub, p) for p in parts)


def _number_or_text(raw: str):
    try:
        return float(raw)
    except ValueError:
        return raw


def resolve_config_path(name: str, base: Optional[str] = None) -> str:
    """Path of a config given as a file path or a shipped config name."""
    if os.path.isfile(name):
        return name
    if base is not None:
        cand = os.path.join(os.path.dirname(base), name)
        for c in (cand, cand + ".ini"):
            if os.path.isfile(c):
                return c
    shipped = os.path.join(CONFIG_DIR, name if name.endswith(".ini") else name + ".ini")
    if os.path.isfile(shipped):
        return shipped
    raise ConfigError(f"config not found: {name}")


def load_config(path: str) -> ScenarioConfig:
    """Parse and validate a scenario config.

    Raises:
        ConfigError: with a ``path:line: message`` text.
    """
    path = resolve_config_path(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=path)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{path}:{lineno}: cannot parse {line!r}") from None
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", 1)
        raise ConfigError(f"{path}:{lineno}: {exc.message.splitlines()[0]}") from None
    idx = _line_index(text)

    def where(sec, key=None) -> str:
        return f"{path}:{idx.get((sec, key), idx.get((sec, None), 1))}"

    for sec in cp.sections():
        if sec not in SCHEMA and sec not in FREE_SECTIONS and sec != "verify":
            raise ConfigError(f"{where(sec)}: unknown section [{sec}]")
    values: Dict[str, Dict[str, object]] = {}
    for sec, keys in SCHEMA.items():
        have = cp[sec] if cp.has_section(sec) else {}
        for k in have:
            if k not in keys:
                raise ConfigError(f"{where(sec, k)}: unknown key {k!r} in [{sec}]")
        out = {}
        for k, (kind, default) in keys.items():
            if k in have:
                try:
                    out[k] = _convert(kind, have[k].strip())
                except ValueError as exc:
                    raise ConfigError(f"{where(sec, k)}: bad value for {k}: {exc}") from None
            elif default is None:
                raise ConfigError(f"{where(sec)}: missing required key {k!r} in [{sec}]")
            else:
                out[k] = default
        values[sec] = out
    _validate(values, where)

    overrides = tuple((k, _number_or_text(v.strip())) for k, v in cp["preset"].items()) \
        if cp.has_section("preset") else ()
    try:
        make_preset(values["scenario"]["preset"], **dict(overrides))
    except ConfigError as exc:
        anchor = where("preset", overrides[0][0]) if overrides and "parameters" in str(exc) \
            else where("scenario", "preset")
        raise ConfigError(f"{anchor}: {exc}") from None
    for name in values["observable"]["names"]:
        try:
            make_observable(name)
        except ConfigError as exc:
            raise ConfigError(f"{where('observable', 'names')}: {exc}") from None

    verify = {}
    if cp.has_section("verify"):
        for k, raw in cp["verify"].items():
            if k not in VERIFY_SCHEMA:
                raise ConfigError(f"{where('verify', k)}: unknown key {k!r} in [verify]")
            try:
                verify[k] = _convert(VERIFY_SCHEMA[k][0], raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{where('verify', k)}: bad value for {k}: {exc}") from None
        bad = [c for c in verify.get("criteria", ()) if not 1 <= c <= 9]
        if bad:
            raise ConfigError(f"{where('verify', 'criteria')}: criteria must lie in 1..9, got {bad}")
    return ScenarioConfig(path, values, overrides, VerifySettings(**verify))


def _validate(values, where) -> None:
    tm = values["time"]
    if not tm["T"] > tm["t"]:
        raise ConfigError(f"{where('time', 'T')}: need T > t")
    if tm["steps"] < 1:
        raise ConfigError(f"{where('time', 'steps')}: need at least one step")
    if values["scenario"]["seed"] < 0:
        raise ConfigError(f"{where('scenario', 'seed')}: seed must be a non-negative integer")
    for k in ("n_xi", "n_nu", "backward_n"):
        if values["lattice"][k] < 5:
            raise ConfigError(f"{where('lattice', k)}: need at least 5 nodes")
    if values["particles"]["n"] < 2:
        raise ConfigError(f"{where('particles', 'n')}: need at least two particles")
    pr = values["parametrix"]
    if pr["order"] < 1:
        raise ConfigError(f"{where('parametrix', 'order')}: order must be at least 1")
    if any(h <= 0 for h in pr["horizons"]):
        raise ConfigError(f"{where('parametrix', 'horizons')}: horizons must be positive")
    if pr["save_every"] < 1:
        raise ConfigError(f"{where('parametrix', 'save_every')}: save_every must be at least 1")
