"""Run configuration: defaults, JSON loading, field-level validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


class ConfigError(Exception):
    """Invalid configuration; message lists every offending field."""


@dataclass
class TrainConfig:
    seed: int = 0
    num_classes: int = 5
    num_novel: int = 2
    scene_size: int = 64
    support_size: int = 32
    max_objects: int = 3

    base_episodes: int = 2000
    finetune_episodes: int = 400
    base_k: int = 5
    finetune_k: int = 5
    base_m: int = 3

    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_factor: float = 0.1
    base_decay_interval: int = 500
    finetune_decay_interval: int = 150
    grad_accum: int = 1
    log_interval: int = 10

    rpn_top_n_train: int = 12
    rpn_top_n_test: int = 16
    roi_pool: int = 4
    rpn_pos_iou: float = 0.6
    rpn_neg_iou: float = 0.3
    roi_pos_iou: float = 0.5

    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    eval_scenes: int = 32
    eval_repeats: int = 10
    eval_support_k: int = 5

    fusion_cls_conv: bool = True
    fusion_cls_fc: bool = True
    fusion_reg_conv: bool = True
    fusion_reg_fc: bool = True
    meta_cls: bool = True
    meta_reg: bool = True
    meta_on_averaged: bool = False
    cls_objective: str = "softmax"

    freeze: list = field(default_factory=list)

    def validate(self) -> "TrainConfig":
        problems = []
        if self.lr <= 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("base_k", "finetune_k", "eval_support_k"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("base_episodes", "finetune_episodes"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("base_decay_interval", "finetune_decay_interval", "log_interval",
                     "grad_accum", "base_m", "roi_pool", "rpn_top_n_train",
                     "rpn_top_n_test", "eval_scenes", "eval_repeats", "max_objects"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.lr_decay_factor <= 1:
            problems.append(f"lr_decay_factor must be in (0,1], got {self.lr_decay_factor}")
        if not 1 <= self.num_novel < self.num_classes:
            problems.append(f"need 1 <= num_novel < num_classes, got "
                            f"{self.num_novel} of {self.num_classes}")
        if not (self.fusion_cls_conv or self.fusion_cls_fc):
            problems.append("fusion: classification branch has no encoder path enabled")
        if not (self.fusion_reg_conv or self.fusion_reg_fc):
            problems.append("fusion: regression branch has no encoder path enabled")
        if self.cls_objective != "softmax":
            problems.append(f"cls_objective {self.cls_objective!r} is not implemented "
                            "(only 'softmax' is)")
        if not 0.0 <= self.score_thresh < 1.0:
            problems.append(f"score_thresh must be in [0,1), got {self.score_thresh}")
        if not 0.0 < self.nms_thresh < 1.0:
            problems.append(f"nms_thresh must be in (0,1), got {self.nms_thresh}")
        if not isinstance(self.freeze, list) or not all(isinstance(p, str) for p in self.freeze):
            problems.append("freeze must be a list of parameter-name prefixes")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def from_dict(data: dict) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    return TrainConfig(**data).validate()


def load_config(path: str) -> TrainConfig:
    """Read a JSON key/value config; unset fields take their defaults."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return from_dict(data)


def dump_resolved(cfg: TrainConfig, path: str) -> None:
    """Persist the fully resolved (post-default) config for provenance."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
