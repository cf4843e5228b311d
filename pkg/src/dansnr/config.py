"""Run configuration: one JSON document covering every pipeline stage.

Example (every key optional except ``paths``)::

    {
      "paths": {"checkins": "data/checkins.txt", "edges": "data/edges.txt", "workspace": "runs/a"},
      "seed": 0,
      "filter": {"min_user": 20, "min_poi": 20, "min_traj": 5, "gap_hours": 6, "ratio": 0.8,
                 "cell_size_deg": 0.5, "l2l_k": 20},
      "user_walk": {"p": 1, "q": 1, "walk_len": 80, "walks_per_node": 10},
      "location_walk": {"p": 1, "q": 1, "walk_len": 80, "walks_per_node": 10},
      "skipgram": {"window": 10, "negatives": 5, "epochs": 1, "lr": 0.025},
      "model": {"d": 256, "heads": 8, "layers": 6, "stc_len": 50, "ltsc_len": 200, "variant": "full"},
      "train": {"batch_size": 50, "negatives": 500, "lr0": 0.001, "decay": 0.96, "max_iters": 1000},
      "eval": {"k": [5, 10], "policy": "sampled", "negatives": 500, "batch_size": 50}
    }

Stage seeds derive from the global ``seed`` so one number pins a run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .graphembed import WalkConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Bad or inconsistent configuration (a usage error)."""


@dataclass(frozen=True)
class FilterConfig:
    min_user: int = 20
    min_poi: int = 20
    min_traj: int = 5
    gap_hours: float = 6.0
    ratio: float = 0.8
    cell_size_deg: float = 0.5
    l2l_k: int = 20


@dataclass(frozen=True)
class SkipGramConfig:
    window: int = 10
    negatives: int = 5
    epochs: int = 1
    lr: float = 0.025


@dataclass(frozen=True)
class EvalConfig:
    k: tuple[int, ...] = (5, 10)
    policy: str = "sampled"
    negatives: int = 500
    batch_size: int = 50

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(x) for x in self.k))
        if self.policy not in ("sampled", "full"):
            raise ConfigError("eval.policy must be 'sampled' or 'full'")


@dataclass(frozen=True)
class Paths:
    checkins: str = ""
    edges: str = ""
    workspace: str = "workspace"


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    filter: FilterConfig = field(default_factory=FilterConfig)
    user_walk: WalkConfig = field(default_factory=WalkConfig)
    location_walk: WalkConfig = field(default_factory=WalkConfig)
    skipgram: SkipGramConfig = field(default_factory=SkipGramConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # stage seeds
    @property
    def user_walk_cfg(self) -> WalkConfig:
        return replace(self.user_walk, seed=self.seed)

    @property
    def location_walk_cfg(self) -> WalkConfig:
        return replace(self.location_walk, seed=self.seed + 1)

    @property
    def train_cfg(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    @property
    def workspace(self) -> Path:
        return Path(self.paths.workspace)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def check_inputs(self) -> None:
        for key in ("checkins", "edges"):
            p = getattr(self.paths, key)
            if not p:
                raise ConfigError(f"paths.{key} is not set")
            if not Path(p).is_file():
                raise FileNotFoundError(f"{key} file not found: {p}")


_SECTIONS = {
    "paths": Paths,
    "filter": FilterConfig,
    "user_walk": WalkConfig,
    "location_walk": WalkConfig,
    "skipgram": SkipGramConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kw = {name: _build(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return RunConfig(seed=seed, **kw)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) == 1 and parts[0] == "seed":
            doc["seed"] = _parse_value(value)
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"override key {key!r} must be 'seed' or '<section>.<field>'")
        doc.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
    return doc


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    return from_dict(apply_overrides(doc, list(overrides)))
