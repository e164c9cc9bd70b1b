"""Scenario configuration: a flat ``key = value`` text format with sections.

    # comment
    n = 300
    H_list = [1, 10, 100]

    [weights]
    kind = ou
    F = identity

Values are Python literals (numbers, lists, True/False); bare words are
strings.  Keys before the first section header belong to ``[scenario]``.
Every key is checked against the schema and every error carries the
source line and column.
"""

from __future__ import annotations

import ast
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dynamics import UPDATE_ORDERS, n_steps
from .diagnostics import DISSIPATION_MODES
from .jko import COUPLINGS, MOBILITY_MODES
from .weights import KINDS as WEIGHT_KINDS, WeightProcessSpec


class ConfigError(ValueError):
    def __init__(self, message, source="<config>", line=None, column=None, key=None):
        self.source = source
        self.line = line
        self.column = column
        self.key = key
        where = source
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class WeightsBlock:
    kind: str = "ou"
    F: object = "identity"  # "identity", "zero" or a nested list
    sigma2: float = 1.0
    phase_spread: bool = True
    init: str = "random"
    init_scale: float = 1.0
    schedule_times: tuple = ()
    schedule_values: tuple = ()

    def target_matrix(self, d):
        if self.F == "identity":
            return np.eye(d)
        if self.F in ("zero", "zeros"):
            return np.zeros((d, d))
        return np.asarray(self.F, dtype=float)

    def to_spec(self, d):
        return WeightProcessSpec(
            kind=self.kind,
            F=self.target_matrix(d) if self.kind in ("ou", "frozen") else None,
            sigma2=self.sigma2,
            phase_spread=self.phase_spread,
            schedule_times=np.asarray(self.schedule_times, dtype=float) if self.schedule_times else None,
            schedule_values=np.asarray(self.schedule_values, dtype=float) if self.schedule_values else None,
            init=self.init,
            init_scale=self.init_scale,
        )


@dataclass(frozen=True)
class JkoBlock:
    n: int = 20
    H: int = 3
    T: float = 1.0
    tau_list: tuple = (0.1, 0.05, 0.025)
    inner_iters: int = 50
    inner_lr: float = 0.0  # 0 -> tau / 2
    coupling: str = "identity"
    mobility_mode: str = "constant"
    reference_dt: float = 1e-4


@dataclass(frozen=True)
class GronwallBlock:
    n: int = 32
    H: int = 100
    T: float = 20.0
    dt: float = 0.01
    eta_list: tuple = (1e-3, 1e-2, 1e-1)
    n_seeds: int = 3
    early_time: float = 5.0


@dataclass(frozen=True)
class StabilityBlock:
    n: int = 32
    T: float = 5.0
    dt: float = 0.01
    H_approx_list: tuple = (1, 4, 16, 64)
    reference_H: int = 256
    n_seeds: int = 8


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    n: int = 300
    d: int = 3
    H_list: tuple = (1, 10, 100)
    dt: float = 0.01
    T: float = 20.0
    N_MC: int = 20
    seed: int = 0
    update_order: str = "tokens_first"
    g2_weighted: bool = False
    dissipation: str = "power"
    record_stride: int = 0  # 0 -> max(1, floor(0.1 / dt))
    g2_window: tuple = ()  # (t0, t1); empty -> [0, T]
    bootstrap: int = 0  # resamples for bootstrap SEs; 0 -> plain SE
    out: str = "runs"
    weights: WeightsBlock = field(default_factory=WeightsBlock)
    jko: JkoBlock = field(default_factory=JkoBlock)
    gronwall: GronwallBlock = field(default_factory=GronwallBlock)
    stability: StabilityBlock = field(default_factory=StabilityBlock)

    @property
    def spec(self):
        return self.weights.to_spec(self.d)

    @property
    def stride(self):
        return self.record_stride or None

    def to_dict(self):
        return _plain(asdict(self))

    def with_overrides(self, overrides):
        """Apply ``key=value`` strings (``section.key`` or a unique bare key)."""
        return parse_config_text(format_config(self), source="<resolved>", overrides=overrides)


SECTIONS = {
    "scenario": ScenarioConfig,
    "weights": WeightsBlock,
    "jko": JkoBlock,
    "gronwall": GronwallBlock,
    "stability": StabilityBlock,
}
_NESTED = ("weights", "jko", "gronwall", "stability")


def _schema(section):
    return {f.name: f for f in fields(SECTIONS[section]) if f.name not in _NESTED}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTION_RE = re.compile(r"^\[\s*([A-Za-z_][A-Za-z0-9_]*)\s*\]$")
_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")
_BARE_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_./\-]*$")


def _parse_value(text, source, line, column, key):
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if _BARE_RE.match(text):
        return text
    raise ConfigError(f"cannot parse value {text!r} for key {key!r}", source, line, column, key)


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _coerce(section, key, value, where):
    f = _schema(section)[key]
    default = f.default if f.default is not f.default_factory else None
    source, line, column = where

    def fail(msg):
        raise ConfigError(f"{section}.{key}: {msg}", source, line, column, key)

    if isinstance(default, bool):
        if not isinstance(value, bool):
            fail(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            fail(f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)):
            fail(f"expected a list, got {value!r}")
        return _tuplify(list(value))
    if key == "F":
        if isinstance(value, str):
            return value
        if isinstance(value, (list, tuple)):
            return _tuplify(list(value))
        fail(f"expected identity, zero or a matrix, got {value!r}")
    if not isinstance(value, str):
        fail(f"expected a word, got {value!r}")
    return value


def _read_entries(text, source):
    """Yield (section, key, raw_value, line, column) for every assignment."""
    section = "scenario"
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped or stripped.startswith(";"):
            continue
        indent = len(raw) - len(raw.lstrip()) + 1
        m = _SECTION_RE.match(stripped)
        if m:
            section = m.group(1)
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", source, lineno, indent)
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value' or '[section]', got {stripped!r}", source, lineno, indent)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not _KEY_RE.match(key):
            raise ConfigError(f"invalid key {key!r}", source, lineno, indent)
        if key not in _schema(section):
            raise ConfigError(f"unknown key {key!r} in [{section}]", source, lineno, indent, key)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", source, lineno, indent, key)
        seen.add((section, key))
        if not value:
            raise ConfigError(f"missing value for key {key!r}", source, lineno, indent, key)
        column = raw.index("=") + 2 + (len(raw.split("=", 1)[1]) - len(raw.split("=", 1)[1].lstrip()))
        yield section, key, value, lineno, column


def _resolve_override_key(key):
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or name not in _schema(section):
            raise ConfigError(f"unknown key {key!r}", "<override>", key=key)
        return section, name
    owners = [s for s in SECTIONS if key in _schema(s)]
    if not owners:
        raise ConfigError(f"unknown key {key!r}", "<override>", key=key)
    if len(owners) > 1:
        # top-level keys win; qualify to reach a block
        if "scenario" in owners:
            return "scenario", key
        raise ConfigError(f"ambiguous key {key!r}; use one of {[f'{s}.{key}' for s in owners]}", "<override>", key=key)
    return owners[0], key


def parse_config_text(text, source="<string>", overrides=()):
    values = {s: {} for s in SECTIONS}
    for section, key, raw, line, column in _read_entries(text, source):
        values[section][key] = (raw, (source, line, column))
    for i, item in enumerate(overrides, start=1):
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "<override>", i)
        key, raw = (s.strip() for s in item.split("=", 1))
        section, name = _resolve_override_key(key)
        values[section][name] = (raw, ("<override>", i, len(key) + 2))

    built = {}
    for section, entries in values.items():
        kwargs = {}
        for key, (raw, where) in entries.items():
            parsed = _parse_value(raw, *where, key)
            kwargs[key] = _coerce(section, key, parsed, where)
        built[section] = kwargs
    nested = {s: SECTIONS[s](**built[s]) for s in _NESTED}
    cfg = ScenarioConfig(**built["scenario"], **nested)
    where = {(s, k): w for s, e in values.items() for k, (_, w) in e.items()}
    validate_config(cfg, where, source)
    return cfg


def parse_config(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, source=str(path), overrides=overrides)


def validate_config(cfg, where=None, source="<config>"):
    where = where or {}

    def check(ok, section, key, msg):
        if not ok:
            src, line, column = where.get((section, key), (source, None, None))
            raise ConfigError(f"{section}.{key}: {msg}" if section != "scenario" else f"{key}: {msg}",
                              src, line, column, key)

    check(cfg.n >= 1, "scenario", "n", f"must be >= 1, got {cfg.n}")
    check(cfg.d >= 2, "scenario", "d", f"must be >= 2, got {cfg.d}")
    check(len(cfg.H_list) >= 1 and all(isinstance(h, int) and h >= 1 for h in cfg.H_list),
          "scenario", "H_list", f"must be a non-empty list of positive integers, got {cfg.H_list}")
    check(cfg.dt > 0, "scenario", "dt", f"must be positive, got {cfg.dt}")
    check(cfg.T > 0, "scenario", "T", f"must be positive, got {cfg.T}")
    if cfg.dt > 0 and cfg.T > 0:
        try:
            n_steps(cfg.T, cfg.dt)
        except ValueError as exc:
            check(False, "scenario", "dt", str(exc))
    check(cfg.N_MC >= 1, "scenario", "N_MC", f"must be >= 1, got {cfg.N_MC}")
    check(0 <= cfg.seed < 2**64, "scenario", "seed", f"must be a 64-bit unsigned integer, got {cfg.seed}")
    check(cfg.update_order in UPDATE_ORDERS, "scenario", "update_order",
          f"must be one of {UPDATE_ORDERS}, got {cfg.update_order!r}")
    check(cfg.dissipation in DISSIPATION_MODES, "scenario", "dissipation",
          f"must be one of {DISSIPATION_MODES}, got {cfg.dissipation!r}")
    check(cfg.record_stride >= 0, "scenario", "record_stride", f"must be >= 0, got {cfg.record_stride}")
    check(cfg.bootstrap >= 0, "scenario", "bootstrap", f"must be >= 0, got {cfg.bootstrap}")
    check(len(cfg.g2_window) in (0, 2) and (not cfg.g2_window or cfg.g2_window[0] < cfg.g2_window[1]),
          "scenario", "g2_window", f"must be empty or [t0, t1] with t0 < t1, got {cfg.g2_window}")

    w = cfg.weights
    check(w.kind in WEIGHT_KINDS, "weights", "kind", f"must be one of {WEIGHT_KINDS}, got {w.kind!r}")
    check(w.sigma2 >= 0, "weights", "sigma2", f"must be >= 0, got {w.sigma2}")
    if isinstance(w.F, str):
        check(w.F in ("identity", "zero", "zeros"), "weights", "F", f"must be identity, zero or a matrix, got {w.F!r}")
    else:
        F = np.asarray(w.F, dtype=float)
        check(F.shape == (cfg.d, cfg.d), "weights", "F", f"must be {cfg.d}x{cfg.d}, got shape {F.shape}")
        check(np.allclose(F, F.T, atol=1e-9), "weights", "F", "must be symmetric")
    check(w.kind != "frozen" or w.sigma2 == 0, "weights", "sigma2", "frozen weights need sigma2 = 0")
    try:
        cfg.spec
    except ValueError as exc:
        check(False, "weights", "kind", str(exc))
    if w.kind == "oscillating":
        check(cfg.d == 3, "scenario", "d", "the oscillating target is 3x3; set d = 3")

    j = cfg.jko
    check(j.n >= 1, "jko", "n", f"must be >= 1, got {j.n}")
    check(j.H >= 1, "jko", "H", f"must be >= 1, got {j.H}")
    check(len(j.tau_list) >= 1 and all(t > 0 for t in j.tau_list), "jko", "tau_list", "taus must be positive")
    check(j.inner_iters >= 1, "jko", "inner_iters", f"must be >= 1, got {j.inner_iters}")
    check(j.inner_lr >= 0, "jko", "inner_lr", f"must be >= 0, got {j.inner_lr}")
    check(j.coupling in COUPLINGS, "jko", "coupling", f"must be one of {COUPLINGS}")
    check(j.mobility_mode in MOBILITY_MODES, "jko", "mobility_mode", f"must be one of {MOBILITY_MODES}")
    check(j.reference_dt > 0, "jko", "reference_dt", "must be positive")

    g = cfg.gronwall
    check(g.n >= 2, "gronwall", "n", f"must be >= 2, got {g.n}")
    check(g.H >= 1, "gronwall", "H", f"must be >= 1, got {g.H}")
    check(g.dt > 0 and g.T > 0, "gronwall", "dt", "dt and T must be positive")
    check(all(e >= 0 for e in g.eta_list), "gronwall", "eta_list", "perturbation sizes must be >= 0")
    check(g.n_seeds >= 1, "gronwall", "n_seeds", "must be >= 1")

    s = cfg.stability
    check(s.n >= 1, "stability", "n", f"must be >= 1, got {s.n}")
    check(all(isinstance(h, int) and h >= 1 for h in s.H_approx_list), "stability", "H_approx_list",
          "must be positive integers")
    check(s.reference_H >= max(s.H_approx_list, default=1), "stability", "reference_H",
          "must be at least the largest approximating H")
    check(s.n_seeds >= 1, "stability", "n_seeds", "must be >= 1")
    return cfg


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    return repr(v)


def format_config(cfg):
    """Canonical text form; ``parse_config_text(format_config(c)) == c``."""
    lines = []
    for f in fields(ScenarioConfig):
        if f.name in _NESTED:
            continue
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    for section in _NESTED:
        block = getattr(cfg, section)
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(block):
            lines.append(f"{f.name} = {_format_value(getattr(block, f.name))}")
    return "\n".join(lines) + "\n"

