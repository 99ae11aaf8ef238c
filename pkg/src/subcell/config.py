"""Run configuration documents (TOML) and run manifests."""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .antenna_planner import PlannerConfig
from .harness import ScenarioConfig

__all__ = [
    "ConfigError",
    "DurationsConfig",
    "RunConfig",
    "load_config",
    "parse_config",
    "dump_config",
    "config_digest",
    "RunManifest",
]


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending key path."""


@dataclass
class DurationsConfig:
    """Where service times come from: exactly one of ``path``, ``samples``,
    ``table2_set`` or a fitted ``alpha``/``rate_matrix`` pair."""

    path: str | None = None
    samples: list | None = None
    table2_set: int | None = None
    alpha: list | None = None
    rate_matrix: list | None = None
    m: int = 4
    max_iters: int = 5000

    def __post_init__(self):
        sources = [self.path is not None, self.samples is not None,
                   self.table2_set is not None, self.alpha is not None]
        if sum(sources) != 1:
            raise ConfigError("durations: give exactly one of path, samples, table2_set, alpha")
        if (self.alpha is None) != (self.rate_matrix is None):
            raise ConfigError("durations: alpha and rate_matrix go together")
        if self.m < 1:
            raise ConfigError("durations.m: must be >= 1")


_PLANNER_EXTRA = {"selector"}


@dataclass
class RunConfig:
    seed: int | None = None
    arrivals: dict | None = None
    durations: DurationsConfig | None = None
    planner: PlannerConfig | None = None
    selector: str = "eta"
    scenario: ScenarioConfig | None = None
    base_dir: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        doc = {}
        if self.seed is not None:
            doc["seed"] = self.seed
        if self.arrivals is not None:
            doc["arrivals"] = dict(self.arrivals)
        if self.durations is not None:
            doc["durations"] = {k: v for k, v in asdict(self.durations).items() if v is not None}
        if self.planner is not None:
            doc["planner"] = asdict(self.planner)
            doc["planner"]["selector"] = self.selector
        if self.scenario is not None:
            doc["scenario"] = self.scenario.to_dict()
        return doc


def _check_keys(section: str, doc: dict, allowed: set):
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected a table")
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}: unknown key")


def _build(section: str, cls, doc: dict, extra=frozenset()):
    names = {f.name for f in fields(cls)}
    _check_keys(section, doc, names | set(extra))
    try:
        return cls(**{k: v for k, v in doc.items() if k in names})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(doc: dict, base_dir: Path | str = ".") -> RunConfig:
    _check_keys("<root>", doc, {"seed", "arrivals", "durations", "planner", "scenario"})
    cfg = RunConfig(base_dir=Path(base_dir))
    if "seed" in doc:
        if not isinstance(doc["seed"], int):
            raise ConfigError("seed: must be an integer")
        cfg.seed = doc["seed"]
    if "arrivals" in doc:
        arr = doc["arrivals"]
        _check_keys("arrivals", arr, {"slot_length_min", "rates", "horizon_min"})
        for key in ("slot_length_min", "rates"):
            if key not in arr:
                raise ConfigError(f"arrivals.{key}: required")
        cfg.arrivals = dict(arr)
    if "durations" in doc:
        cfg.durations = _build("durations", DurationsConfig, doc["durations"])
    if "planner" in doc:
        pl = doc["planner"]
        cfg.planner = _build("planner", PlannerConfig, pl, _PLANNER_EXTRA)
        cfg.selector = pl.get("selector", "eta")
        if cfg.selector not in ("eta", "gamma"):
            raise ConfigError("planner.selector: must be 'eta' or 'gamma'")
    if "scenario" in doc:
        cfg.scenario = _build("scenario", ScenarioConfig, doc["scenario"])
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"<file>: {path}: {exc}") from None
    return parse_config(doc, path.parent)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def config_digest(cfg: RunConfig | dict) -> str:
    """SHA-256 of the canonical JSON form; insensitive to key order."""
    doc = cfg.to_dict() if isinstance(cfg, RunConfig) else cfg
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    master_seed: int | None
    artifact_version: str = __version__
    outputs: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    status: str = "ok"
    warnings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def finish(self, path) -> None:
        self.wall_clock_s = time.perf_counter() - self._t0
        doc = {k: v for k, v in asdict(self).items() if not k.startswith("_")}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
