"""Two-phase training loop: SGD with momentum, LR schedule, CSV logging.

Phase one trains on base-class episodes; phase two fine-tunes on all
classes with novel supports drawn from a K-shot pool fixed once per run.
Every run is a pure function of (seed, config): episodes are keyed
streams, so the loss curve, the fusion-weight trajectories and the final
parameters are reproducible bit for bit.
"""

from __future__ import annotations

import os
import queue
import threading
import warnings

import numpy as np

from . import checkpoint as ckpt_mod
from . import episodes, metrics, rng
from . import tensor as T
from .config import TrainConfig
from .detector import Detector

LOG_HEADER = ("iteration,lr,rpn_cls,rpn_reg,rcnn_cls,rcnn_reg,meta_cls,meta_reg,"
              "total,lambda_cls_conv,lambda_cls_fc,lambda_reg_conv,lambda_reg_fc")

USUAL_SHOT_COUNTS = (1, 2, 3, 5, 10)


class NumericAbort(Exception):
    """Training hit NaN/Inf; carries the episode stream key for replay."""

    def __init__(self, phase: str, index: int, seed: int, cause: str):
        self.phase = phase
        self.index = index
        self.seed = seed
        super().__init__(
            f"non-finite loss in {phase} episode {index} "
            f"(stream key ({seed}, {phase!r}, {index})): {cause}")


def sgd_step(params: dict, state: dict, lr: float, momentum: float,
             weight_decay: float, freeze=()) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v; zero grads.

    Frozen parameters (name-prefix match) are skipped and their grads
    discarded; any other parameter missing a gradient is an error.
    """
    for name, p in params.items():
        if any(name.startswith(pref) for pref in freeze):
            p.grad = None
            continue
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient (graph detached?)")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.values)
        v = momentum * v + p.grad + weight_decay * p.values
        state[name] = v
        p.values = p.values - lr * v
        p.grad = None


def split_for(cfg: TrainConfig) -> episodes.ClassSplit:
    return episodes.make_split(cfg.num_classes, cfg.num_novel, cfg.seed)


def _build_one(cfg: TrainConfig, split, phase: str, i: int, novel_pool):
    ep_rng = rng.stream(cfg.seed, phase, i)
    size = (cfg.scene_size, cfg.scene_size)
    sup = (cfg.support_size, cfg.support_size)
    if phase == "base":
        m = min(cfg.base_m, len(split.base_classes))
        return episodes.build_episode("base", split, m, cfg.base_k, ep_rng,
                                      scene_size=size, support_size=sup,
                                      max_objects=cfg.max_objects)
    m = len(split.all_classes)
    pool_classes = split.base_classes if i % 2 == 0 else split.novel_classes
    return episodes.build_episode("finetune", split, m, cfg.finetune_k, ep_rng,
                                  scene_size=size, support_size=sup,
                                  max_objects=cfg.max_objects,
                                  novel_pool=novel_pool, query_pool=pool_classes)


def _episode_stream(cfg: TrainConfig, split, phase: str, count: int, novel_pool=None):
    """Yield (index, episode); optionally prefetched on a worker thread.

    AFD_THREADS >= 1 enables one ahead-of-time generator thread (episode
    content is keyed by index, so threading cannot change the stream).
    """
    workers = int(os.environ.get("AFD_THREADS", "0") or 0)
    if workers < 1 or count <= 1:
        for i in range(count):
            yield i, _build_one(cfg, split, phase, i, novel_pool)
        return

    q: queue.Queue = queue.Queue(maxsize=4)

    def producer():
        try:
            for i in range(count):
                q.put((i, _build_one(cfg, split, phase, i, novel_pool)))
            q.put(None)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)

    thread = threading.Thread(target=producer, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is None:
            break
        if isinstance(item, BaseException):
            raise item
        yield item


def _log_row(iteration: int, lr: float, report, detector: Detector) -> str:
    vals = report.as_floats()
    lam = detector.fusion.as_floats()
    fields = [str(iteration), repr(lr)]
    fields += [repr(vals[k]) for k in ("rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg",
                                       "meta_cls", "meta_reg", "total")]
    fields += [repr(lam[k]) for k in ("fusion.lambda_cls_conv", "fusion.lambda_cls_fc",
                                      "fusion.lambda_reg_conv", "fusion.lambda_reg_fc")]
    return ",".join(fields)


def _run_phase(detector: Detector, cfg: TrainConfig, phase: str, count: int,
               decay_interval: int, start_iteration: int, momentum_state: dict,
               log_rows: list, novel_pool=None) -> int:
    split = split_for(cfg)
    params = detector.parameters()
    iteration = start_iteration
    for i, episode in _episode_stream(cfg, split, phase, count, novel_pool):
        lr = cfg.lr * cfg.lr_decay_factor ** (i // decay_interval)
        sample_rng = rng.stream(cfg.seed, phase, i, "sample")
        try:
            with T.Tape():
                report = detector.forward_episode(episode, sample_rng)
                loss = report.total if cfg.grad_accum == 1 else \
                    T.scale(report.total, 1.0 / cfg.grad_accum)
                T.backward(loss)
        except T.NonFiniteError as exc:
            raise NumericAbort(phase, i, cfg.seed, str(exc)) from exc
        if i % cfg.log_interval == 0 or i == count - 1:
            log_rows.append(_log_row(iteration, lr, report, detector))
        if (i + 1) % cfg.grad_accum == 0:
            sgd_step(params, momentum_state, lr, cfg.momentum,
                     cfg.weight_decay, freeze=tuple(cfg.freeze))
        iteration += 1
    return iteration


def train_base(cfg: TrainConfig, log_path: str = None):
    """Run the base phase from scratch; returns (checkpoint, log rows)."""
    cfg.validate()
    detector = Detector(cfg, rng.stream(cfg.seed, "init"))
    momentum_state: dict = {}
    log_rows = [LOG_HEADER]
    iteration = _run_phase(detector, cfg, "base", cfg.base_episodes,
                           cfg.base_decay_interval, 0, momentum_state, log_rows)
    ckpt = ckpt_mod.snapshot(detector, momentum_state, iteration)
    if log_path:
        _write_log(log_path, log_rows)
    return ckpt, log_rows


def finetune(base_ckpt, k: int, cfg: TrainConfig = None, log_path: str = None):
    """K-shot fine-tuning phase on top of a base checkpoint.

    Novel support shots are sampled once and reused for every episode;
    optimizer momentum restarts for the new phase.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k not in USUAL_SHOT_COUNTS:
        warnings.warn(f"K={k} is outside the usual shot counts {USUAL_SHOT_COUNTS}; "
                      "proceeding anyway", stacklevel=2)
    stored = ckpt_mod.load_checkpoint(base_ckpt) if isinstance(base_ckpt, str) else base_ckpt
    if cfg is None:
        from . import config as config_mod
        cfg = config_mod.from_dict(stored.config)
    cfg = cfg.replace(finetune_k=k).validate()
    detector = ckpt_mod.restore_detector(stored, cfg)
    split = split_for(cfg)
    novel_pool = episodes.sample_novel_pool(
        split, k, rng.stream(cfg.seed, "novelpool", k),
        (cfg.scene_size, cfg.scene_size), (cfg.support_size, cfg.support_size))
    momentum_state: dict = {}
    log_rows = [LOG_HEADER]
    iteration = _run_phase(detector, cfg, "finetune", cfg.finetune_episodes,
                           cfg.finetune_decay_interval, stored.iteration,
                           momentum_state, log_rows, novel_pool=novel_pool)
    ckpt = ckpt_mod.snapshot(detector, momentum_state, iteration)
    if log_path:
        _write_log(log_path, log_rows)
    return ckpt, log_rows


def _write_log(path: str, rows: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


def evaluate_checkpoint(ckpt, subset: str, repeats: int = None,
                        num_scenes: int = None) -> metrics.EvalResult:
    """Rebuild the detector from a checkpoint and run held-out evaluation."""
    stored = ckpt_mod.load_checkpoint(ckpt) if isinstance(ckpt, str) else ckpt
    detector = ckpt_mod.restore_detector(stored)
    cfg = detector.cfg
    return metrics.evaluate(
        detector, split_for(cfg), subset,
        num_scenes or cfg.eval_scenes, repeats or cfg.eval_repeats, cfg.seed,
        support_k=cfg.eval_support_k, score_thresh=cfg.score_thresh,
        nms_thresh=cfg.nms_thresh, scene_size=(cfg.scene_size, cfg.scene_size),
        support_size=(cfg.support_size, cfg.support_size),
        max_objects=cfg.max_objects)
