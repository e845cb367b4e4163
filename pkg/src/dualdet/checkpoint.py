"""Checkpoint save/load on top of the named-tensor archive.

A checkpoint stores every parameter, the optimizer momentum buffers, the
iteration counter, and the full resolved config (as UTF-8 bytes packed
into a float tensor, keeping the archive single-file and purely numeric).
Loading validates shapes against a detector built from the stored config
before any state is touched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import archive, config, rng
from .detector import Detector


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: dict                  # name -> np.ndarray
    momentum: dict                # name -> np.ndarray
    iteration: int
    config: dict
    version: int = archive.VERSION

    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    tensors = {}
    for name, arr in ckpt.params.items():
        tensors[f"param/{name}"] = arr
    for name, arr in ckpt.momentum.items():
        tensors[f"momentum/{name}"] = arr
    tensors["meta/iteration"] = np.asarray(float(ckpt.iteration))
    raw = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    tensors["meta/config_json"] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    archive.write_archive(path, tensors)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        tensors = archive.read_archive(path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except archive.ArchiveError as exc:
        raise CheckpointError(str(exc)) from None
    if "meta/config_json" not in tensors or "meta/iteration" not in tensors:
        raise CheckpointError(f"{path}: missing checkpoint metadata")
    raw = tensors["meta/config_json"].astype(np.uint8).tobytes()
    cfg_dict = json.loads(raw.decode("utf-8"))
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    momentum = {k[len("momentum/"):]: v for k, v in tensors.items()
                if k.startswith("momentum/")}
    return Checkpoint(params=params, momentum=momentum,
                      iteration=int(tensors["meta/iteration"]), config=cfg_dict)


def snapshot(detector: Detector, momentum: dict, iteration: int) -> Checkpoint:
    """Copy current parameter state into a Checkpoint."""
    return Checkpoint(
        params={name: t.values.copy() for name, t in detector.parameters().items()},
        momentum={name: buf.copy() for name, buf in momentum.items()},
        iteration=iteration,
        config=detector.cfg.to_dict(),
    )


def restore_detector(ckpt: Checkpoint, cfg: config.TrainConfig = None) -> Detector:
    """Build a detector from a checkpoint, validating every tensor shape.

    ``cfg`` overrides the stored config (it must describe the same
    architecture); shape mismatches name the offending tensor and both
    shapes before any state is applied.
    """
    stored = config.from_dict(ckpt.config)
    cfg = stored if cfg is None else cfg
    det = Detector(cfg, rng.stream(cfg.seed, "init"))
    live = det.parameters()
    missing = sorted(set(live) - set(ckpt.params))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r}")
    surplus = sorted(set(ckpt.params) - set(live))
    if surplus:
        raise CheckpointError(f"checkpoint has unexpected parameter {surplus[0]!r}")
    for name in live:
        want = live[name].values.shape
        got = ckpt.params[name].shape
        if want != got:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {got} vs config {want}")
    for name, t in live.items():
        t.values = ckpt.params[name].copy()
    return det
