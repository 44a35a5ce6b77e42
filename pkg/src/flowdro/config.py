"""JSON experiment configs with field-path validation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from .datasets import KINDS as DATASET_KINDS
from .errors import ConfigError
from .train import LFDTrainConfig, MinMaxConfig

EXPERIMENTS = ("lfd", "minmax", "wdro-lp", "privacy", "verify")
DEFAULTS_DIR = Path(__file__).with_name("configs")

# (section, key) -> (lower, upper, inclusive lower)
_RANGES = {
    "gamma": (0.0, 1e6, False),
    "lr": (0.0, 10.0, False),
    "lr_flow": (0.0, 10.0, False),
    "lr_classifier": (0.0, 10.0, False),
    "epochs": (0, 10 ** 6, True),
    "K": (1, 1000, True),
    "N": (1, 10 ** 6, True),
    "N_inner": (0, 1000, True),
    "substeps": (1, 1000, True),
    "n": (1, 10 ** 7, True),
    "test_n": (1, 10 ** 7, True),
    "target_eps": (0.0, 1e6, True),
    "eps1": (0.0, 1e6, True),
    "eps2": (0.0, 1e6, True),
    "h": (0.0, 1e6, True),
}


def _check_ranges(section, d):
    for k, v in d.items():
        if k in _RANGES and v is not None:
            lo, hi, incl = _RANGES[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{section}.{k}", f"must be a number, got {v!r}")
            if not (lo <= v if incl else lo < v) or v > hi:
                bound = "[" if incl else "("
                raise ConfigError(f"{section}.{k}", f"{v!r} outside {bound}{lo}, {hi}]")


def _check_dataclass(section, d, cls):
    names = {f.name for f in fields(cls)}
    for k in d:
        if k not in names:
            raise ConfigError(f"{section}.{k}", f"unknown field for {cls.__name__}")
    try:
        cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


@dataclass
class ExperimentConfig:
    experiment: str
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0])
    output: Optional[str] = None
    base_dir: Optional[str] = field(default=None, compare=False)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment", f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for name in ("dataset", "model", "train", "evaluate"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(name, "must be a JSON object")
        if not isinstance(self.seeds, list) or not self.seeds or not all(
                isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds", "must be a nonempty list of nonnegative integers")
        if self.experiment == "verify":
            return self
        kind = self.dataset.get("kind")
        if self.experiment != "wdro-lp" or "points" not in self.evaluate:
            if kind not in DATASET_KINDS:
                raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}")
            if kind == "csv":
                p = Path(self.dataset.get("path", ""))
                if self.base_dir is not None and not p.is_absolute():
                    p = Path(self.base_dir) / p
                if not p.is_file():
                    raise ConfigError("dataset.path", f"file not found: {p}")
        for name in ("dataset", "model", "train", "evaluate"):
            _check_ranges(name, getattr(self, name))
        if self.experiment in ("lfd", "privacy"):
            _check_dataclass("train", self.train, LFDTrainConfig)
        elif self.experiment == "minmax":
            _check_dataclass("train", self.train, MinMaxConfig)
        return self

    def to_dict(self):
        d = {"experiment": self.experiment, "dataset": self.dataset, "model": self.model, "train": self.train,
             "evaluate": self.evaluate, "seeds": self.seeds}
        if self.output is not None:
            d["output"] = self.output
        return copy.deepcopy(d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def content_hash(self):
        """sha256 over the canonical config and the bytes of any referenced data file."""
        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode())
        if self.dataset.get("kind") == "csv":
            p = Path(self.dataset["path"])
            if self.base_dir is not None and not p.is_absolute():
                p = Path(self.base_dir) / p
            h.update(p.read_bytes())
        return h.hexdigest()


def parse_config(doc: dict, base_dir=None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {"experiment", "dataset", "model", "train", "evaluate", "seeds", "seed", "output"}
    for k in doc:
        if k not in known:
            raise ConfigError(k, "unknown top-level field")
    if "experiment" not in doc:
        raise ConfigError("experiment", "missing")
    seeds = doc.get("seeds")
    if seeds is None:
        seeds = [doc.get("seed", 0)]
    cfg = ExperimentConfig(doc["experiment"], copy.deepcopy(doc.get("dataset", {})),
                           copy.deepcopy(doc.get("model", {})), copy.deepcopy(doc.get("train", {})),
                           copy.deepcopy(doc.get("evaluate", {})), seeds, doc.get("output"),
                           None if base_dir is None else str(base_dir))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<path>", f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    return parse_config(doc, base_dir=path.parent)


def default_config(experiment) -> ExperimentConfig:
    path = DEFAULTS_DIR / f"{experiment}.json"
    if not path.is_file():
        raise ConfigError("experiment", f"no default config for {experiment!r}")
    return load_config(path)
