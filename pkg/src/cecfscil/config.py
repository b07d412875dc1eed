"""Run configuration: one JSON document, overridable with dotted ``--key=value`` flags."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .encoder import Augment, EncoderConfig
from .pil import PilConfig

# paths to trained components; unset ones are trained by the pipeline
CHECKPOINT_KEYS = {"encoder": None, "base_head": None, "adapter": None}


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"          # "synthetic" | "cifar100"
    classes: int = 20
    per_class_train: int = 50
    per_class_test: int = 10
    side: int = 16
    seed: int | None = None          # None: derived from the run seed
    path: str | None = None


@dataclass(frozen=True)
class SplitConfig:
    base_count: int = 12
    n_sessions: int = 4
    way: int = 2
    shot: int = 5


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9


@dataclass(frozen=True)
class DeployConfig:
    decoupled: bool = True
    data_init: bool = True
    adapter: bool = True
    pil: bool = True
    head: str = "cosine"
    scale: float = 16.0
    fit_epochs: int = 0
    fit_lr: float = 0.1
    base_head: str = "data-init"     # "data-init" | "pretrained"


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    pil: PilConfig = field(default_factory=PilConfig)
    run: DeployConfig = field(default_factory=DeployConfig)
    checkpoints: dict = field(default_factory=lambda: dict(CHECKPOINT_KEYS))

    def __post_init__(self):
        if self.run.head not in ("linear", "cosine", "neg-l2"):
            raise ValueError(f"unknown head kind {self.run.head!r}")
        if self.run.base_head == "pretrained" and self.run.head != "linear":
            raise ValueError("the pretrained base head is linear; set run.head=linear")

    def to_dict(self) -> dict:
        return {
            "data": vars(self.data).copy(),
            "split": vars(self.split).copy(),
            "encoder": self.encoder.to_dict(),
            "pretrain": vars(self.pretrain).copy(),
            "pil": self.pil.to_dict(),
            "run": vars(self.run).copy(),
            "checkpoints": dict(self.checkpoints),
        }

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise KeyError(f"unknown config sections: {sorted(extra)}")
        enc = dict(d.get("encoder", {}))
        if "augment" in enc:
            enc["augment"] = Augment(**enc["augment"])
        return cls(
            data=DataConfig(**d.get("data", {})),
            split=SplitConfig(**d.get("split", {})),
            encoder=EncoderConfig(**enc),
            pretrain=PretrainConfig(**d.get("pretrain", {})),
            pil=PilConfig(**d.get("pil", {})),
            run=DeployConfig(**d.get("run", {})),
            checkpoints=_checkpoints(d.get("checkpoints", {})),
        )

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides))


def _checkpoints(d: dict) -> dict:
    extra = set(d) - set(CHECKPOINT_KEYS)
    if extra:
        raise KeyError(f"unknown checkpoint keys: {sorted(extra)}")
    return {**CHECKPOINT_KEYS, **d}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def apply_overrides(d: dict, overrides: dict[str, Any]) -> dict:
    """Set dotted keys (``"pil.iterations"``) in a nested dict copy."""
    d = copy.deepcopy(d)
    for key, value in overrides.items():
        *path, leaf = key.split(".")
        node = d
        for part in path:
            if part not in node or not isinstance(node[part], dict):
                raise KeyError(f"unknown config key {key!r}")
            node = node[part]
        if leaf not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[leaf] = value
    return d


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    base = json.loads(Path(path).read_text()) if path else {}
    cfg = RunConfig.from_dict(base)
    return cfg.with_overrides(overrides) if overrides else cfg


# desk-scale benchmark used throughout the tests and demos
DESK_CONFIG = {
    "data": {"kind": "synthetic", "classes": 20, "per_class_train": 50, "per_class_test": 10,
             "side": 16},
    "split": {"base_count": 12, "n_sessions": 4, "way": 2, "shot": 5},
    "encoder": {"kind": "tiny-cnn", "channels": 1, "height": 16, "width": 16,
                "conv_channels": [8, 16], "embed_dim": 32, "augment": {"crop_pad": 1}},
    "pretrain": {"epochs": 30, "lr": 0.05, "batch_size": 64, "momentum": 0.9},
    # episodes use the deployment shot; smaller projections keep attention unsaturated
    "pil": {"way": 5, "shot": 5, "query": 10, "iterations": 300, "lr": 0.01,
            "decay_every": 100, "last_layer_lr_ratio": 0.1, "proj_scale": 0.1},
}
