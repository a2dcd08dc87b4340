"""Run configuration: one JSON schema shared by every subcommand.

Each subcommand validates only the sections it needs; command-line flags
override file values. Unknown keys are errors so typos fail loudly.
"""

import json
from dataclasses import dataclass, field

from .ann.graph import AnnConfig
from .data import GenConfig
from .errors import InvalidConfigError
from .model import TowerConfig
from .train import TrainConfig

_SECTIONS = ("paths", "gen", "tower", "train", "ann", "eval")

_PATH_KEYS = ("dataset", "checkpoint", "checkpoint_lr", "checkpoint_cr",
              "index", "report", "loss_curve")

_EVAL_DEFAULTS = {
    "k": 100,
    "methods": ["INDEX", "LR", "CR"],
    "modes": ["none"],
    "max_queries": None,
    "seed": 0,
    "streaming_batch_size": 64,
    "streaming_budget": None,
    "overfetch_factor": 10,
}


@dataclass
class RunConfig:
    paths: dict = field(default_factory=dict)
    gen: dict = field(default_factory=dict)
    tower: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    ann: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def gen_config(self) -> GenConfig:
        d = dict(self.gen)
        if "topics_per_item_range" in d:
            d["topics_per_item_range"] = tuple(d["topics_per_item_range"])
        cfg = _build(GenConfig, d, "gen")
        cfg.validate()
        return cfg

    def tower_config(self, num_users, num_items, num_topics) -> TowerConfig:
        d = dict(self.tower)
        if "hidden_sizes" in d:
            d["hidden_sizes"] = tuple(d["hidden_sizes"])
        d.setdefault("num_users", num_users)
        d.setdefault("num_items", num_items)
        d.setdefault("num_topics", num_topics)
        cfg = _build(TowerConfig, d, "tower")
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, dict(self.train), "train")

    def ann_config(self) -> AnnConfig:
        cfg = _build(AnnConfig, dict(self.ann), "ann")
        cfg.validate()
        return cfg

    def eval_settings(self) -> dict:
        out = dict(_EVAL_DEFAULTS)
        for key, value in self.eval.items():
            if key not in _EVAL_DEFAULTS:
                raise InvalidConfigError(f"unknown eval key {key!r}")
            out[key] = value
        return out

    def path(self, key, required=True):
        if key not in _PATH_KEYS:
            raise InvalidConfigError(f"unknown path key {key!r}")
        value = self.paths.get(key)
        if value is None and required:
            raise InvalidConfigError(f"config is missing required path {key!r}")
        return value


def _build(cls, d, section):
    valid = set(cls.__dataclass_fields__)
    unknown = set(d) - valid
    if unknown:
        raise InvalidConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise InvalidConfigError(f"bad {section} section: {exc}")


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Load the JSON config file and apply dotted-key overrides (flags win)."""
    raw = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfigError(f"{path}: invalid JSON: {exc}")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise InvalidConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = RunConfig(**{k: dict(raw.get(k, {})) for k in _SECTIONS})
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or not key:
            raise InvalidConfigError(f"bad override target {dotted!r}")
        getattr(cfg, section)[key] = value
    return cfg
