"""Experiment configuration: dataclasses, TOML loading and validation.

Files are TOML with optional ``[scenario]`` and ``[attacker]`` tables; every
other key sits at top level.  Values given on the command line override the
file, which overrides the defaults.  Node indices in files, flags and reports
are 1-based.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DESK_SIZES = (5000, 20000)
FULL_SIZES = (20000, 80000)
DDB_METHODS = ("lrt", "deepfool", "cw", "lbfgs")
ATTACK_METHODS = ("fgsm", "pgd", "deepfool", "lbfgs")
MODES = ("surrogate", "white_box")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


def _err(path, msg):
    raise ConfigError(f"{path}: {msg}")


@dataclass(frozen=True)
class ScenarioSpec:
    node_count: int = 20
    sample_count: int = 64
    noise_scale: tuple = (0.05, 0.12)
    snr: tuple = (0.2, 1.0)
    occupancy_prior: float = 0.5
    seed: int = 1

    def validate(self, path="scenario"):
        if self.node_count < 2:
            _err(f"{path}.node_count", "need at least 2 nodes")
        if self.sample_count < 1:
            _err(f"{path}.sample_count", "must be >= 1")
        for name in ("noise_scale", "snr"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                _err(f"{path}.{name}", "must be an increasing pair of positive numbers")
        if not 0 <= self.occupancy_prior <= 1:
            _err(f"{path}.occupancy_prior", "must lie in [0, 1]")


@dataclass(frozen=True)
class AttackerSpec:
    m: int = 7
    nodes: tuple | None = None
    method: str = "fgsm"
    ratio: float = 1.0
    mode: str = "surrogate"
    step_size: float = 5.0
    pgd_steps: int = 10

    @property
    def controlled(self) -> tuple:
        """1-based controlled node indices."""
        return tuple(sorted(self.nodes)) if self.nodes is not None else tuple(range(1, self.m + 1))

    def validate(self, node_count, path="attacker"):
        if self.nodes is not None:
            if len(set(self.nodes)) != len(self.nodes):
                _err(f"{path}.nodes", "duplicate node index")
            if any(not 1 <= j <= node_count for j in self.nodes):
                _err(f"{path}.nodes", f"indices must lie in 1..{node_count}")
            if len(self.nodes) != self.m:
                _err(f"{path}.nodes", f"lists {len(self.nodes)} nodes but m = {self.m}")
        if not 1 <= self.m < node_count:
            _err(f"{path}.m", f"must satisfy 1 <= m < {node_count}")
        if self.method not in ATTACK_METHODS:
            _err(f"{path}.method", f"must be one of {', '.join(ATTACK_METHODS)}")
        if self.mode not in MODES:
            _err(f"{path}.mode", f"must be one of {', '.join(MODES)}")
        if not 0 <= self.ratio <= 1:
            _err(f"{path}.ratio", "must lie in [0, 1]")
        if not self.step_size > 0:
            _err(f"{path}.step_size", "must be positive")
        if self.pgd_steps < 1:
            _err(f"{path}.pgd_steps", "must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    attacker: AttackerSpec = field(default_factory=AttackerSpec)
    train_size: int = DESK_SIZES[0]
    test_size: int = DESK_SIZES[1]
    observation_size: int = 5000
    comparison_size: int = 1000
    ddb_method: str = "lrt"
    group_size: int = 25
    alpha: float = 0.01
    trials: int = 1
    seed: int = 0
    scale: float = 1.0

    def __post_init__(self):
        self.scenario.validate()
        self.attacker.validate(self.scenario.node_count)
        for name in ("train_size", "test_size", "observation_size", "comparison_size", "group_size", "trials"):
            if getattr(self, name) < 1:
                _err(name, "must be a positive integer")
        if self.ddb_method not in DDB_METHODS:
            _err("ddb_method", f"must be one of {', '.join(DDB_METHODS)}")
        if not 0 <= self.alpha <= 1:
            _err("alpha", "must lie in [0, 1]")
        if not 0 < self.scale <= 1:
            _err("scale", "must lie in (0, 1]")

    @property
    def floor_slack(self) -> float:
        """Extra tolerance applied to trend floors on scaled-down runs."""
        return 0.05 if self.scale < 1 else 0.0

    def scaled(self, scale: float) -> "ExperimentConfig":
        return replace(self, scale=scale, train_size=max(1, round(self.train_size * scale)),
                       test_size=max(1, round(self.test_size * scale)),
                       observation_size=max(1, round(self.observation_size * scale)),
                       comparison_size=max(1, round(self.comparison_size * scale)))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _read_table(cls, data: dict, path: str) -> dict:
    defaults = {f.name: f.default for f in fields(cls) if f.default is not MISSING}
    out = {}
    for key, value in data.items():
        where = f"{path}{key}"
        if key not in defaults:
            _err(where, "unknown key")
        default = defaults[key]
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(default, tuple):
            if not (isinstance(value, tuple) and len(value) == len(default) and all(map(_is_number, value))):
                _err(where, f"expected a list of {len(default)} numbers")
        elif default is None:
            if not (isinstance(value, tuple) and all(map(_is_int, value))):
                _err(where, "expected a list of integers")
        elif isinstance(default, int):
            if not _is_int(value):
                _err(where, f"expected an integer, got {value!r}")
        elif isinstance(default, float):
            if not _is_number(value):
                _err(where, f"expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            _err(where, f"expected a string, got {value!r}")
        out[key] = value
    return out


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    tables = {}
    for name in ("scenario", "attacker"):
        table = data.pop(name, {})
        if not isinstance(table, dict):
            _err(name, "must be a table")
        tables[name] = table
    return ExperimentConfig(scenario=ScenarioSpec(**_read_table(ScenarioSpec, tables["scenario"], "scenario.")),
                            attacker=AttackerSpec(**_read_table(AttackerSpec, tables["attacker"], "attacker.")),
                            **_read_table(ExperimentConfig, data, ""))


def load(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
