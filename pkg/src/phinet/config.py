"""Run configuration: one JSON document with strict, per-section keys."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .arch import PhiNetSpec, spec_from_dict, spec_to_dict
from .phantom import PhantomSpec
from .training import TrainConfig
from .volume import PreprocessConfig

SECTIONS = ("model", "train", "preprocess", "phantom", "paths", "seed")


class ConfigError(ValueError):
    pass


def _strict(cls, doc: dict, section: str, exclude=()):
    known = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kwargs = {}
    for k, v in doc.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from None


@dataclass
class PhantomJob:
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    classes: List[str] = field(default_factory=lambda: ["T1", "T2", "FLAIR"])
    n_train: Any = 20
    n_test: Any = 10


@dataclass
class RunConfig:
    model: Dict[str, Any] = field(default_factory=lambda: spec_to_dict(PhiNetSpec()))
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    phantom: PhantomJob = field(default_factory=PhantomJob)
    paths: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if "model" in doc:
            try:
                cfg.model = spec_to_dict(spec_from_dict(doc["model"]))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [model] section: {exc}") from None
        if "train" in doc:
            cfg.train = _strict(TrainConfig, doc["train"], "train")
        if "preprocess" in doc:
            cfg.preprocess = _strict(PreprocessConfig, doc["preprocess"], "preprocess")
        if "phantom" in doc:
            ph = dict(doc["phantom"])
            unknown = set(ph) - {"spec", "classes", "n_train", "n_test"}
            if unknown:
                raise ConfigError(f"unknown keys in [phantom]: {sorted(unknown)}")
            job = PhantomJob()
            if "spec" in ph:
                job.spec = _strict(PhantomSpec, ph["spec"], "phantom.spec")
            for key in ("classes", "n_train", "n_test"):
                if key in ph:
                    setattr(job, key, ph[key])
            cfg.phantom = job
        if "paths" in doc:
            if not isinstance(doc["paths"], dict):
                raise ConfigError("[paths] must be an object")
            cfg.paths = {str(k): str(v) for k, v in doc["paths"].items()}
        if "seed" in doc:
            if not isinstance(doc["seed"], int):
                raise ConfigError("seed must be an integer")
            cfg.seed = doc["seed"]
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def require_seed(self, command: str) -> int:
        if self.seed is None:
            raise ConfigError(f"'{command}' needs a seed (config 'seed' or --seed)")
        return self.seed
