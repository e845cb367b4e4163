"""Dual task-specific feature encoders and the adaptive fusion weights.

The query branch and the support branch each encode features twice, once
per subtask (classification / box regression).  Each task path runs a
conv encoder and a 2-layer fc encoder whose outputs are concatenated
after scaling by learned scalar weights.  The four weights are shared by
object identity between the query-side and support-side encoders, so one
backward pass accumulates both branches' contributions into each weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TASKS = ("cls", "reg")
D_CONV = 64
D_FC = 64
FC_HIDDEN = 128


@dataclass
class FusionFlags:
    """Which encoder paths are active (the fusion-combination ablation)."""
    cls_conv: bool = True
    cls_fc: bool = True
    reg_conv: bool = True
    reg_fc: bool = True

    def __post_init__(self):
        if not (self.cls_conv or self.cls_fc):
            raise ValueError("classification branch needs at least one encoder path")
        if not (self.reg_conv or self.reg_fc):
            raise ValueError("regression branch needs at least one encoder path")

    def enabled(self, task: str):
        if task == "cls":
            return self.cls_conv, self.cls_fc
        if task == "reg":
            return self.reg_conv, self.reg_fc
        raise ValueError(f"unknown task {task!r}")

    def dim(self, task: str) -> int:
        conv_on, fc_on = self.enabled(task)
        return D_CONV * conv_on + D_FC * fc_on


class FusionWeights:
    """The four learnable fusion scalars, all initialized to exactly 1.0."""

    def __init__(self):
        self.lambda_conv_cls = Tensor(1.0, requires_grad=True)
        self.lambda_fc_cls = Tensor(1.0, requires_grad=True)
        self.lambda_conv_reg = Tensor(1.0, requires_grad=True)
        self.lambda_fc_reg = Tensor(1.0, requires_grad=True)

    def pair(self, task: str):
        if task == "cls":
            return self.lambda_conv_cls, self.lambda_fc_cls
        if task == "reg":
            return self.lambda_conv_reg, self.lambda_fc_reg
        raise ValueError(f"unknown task {task!r}")

    def parameters(self) -> dict:
        return {"fusion.lambda_cls_conv": self.lambda_conv_cls,
                "fusion.lambda_cls_fc": self.lambda_fc_cls,
                "fusion.lambda_reg_conv": self.lambda_conv_reg,
                "fusion.lambda_reg_fc": self.lambda_fc_reg}

    def as_floats(self) -> dict:
        return {name: t.item() for name, t in self.parameters().items()}


def afm_fuse(conv_feat, fc_feat, task: str, weights: FusionWeights,
             enabled=(True, True), axis: int = -1) -> Tensor:
    """Weighted concatenation [w_conv*conv, w_fc*fc] for the given task.

    Disabled paths are dropped from the concatenation entirely; pass
    feature rows batched on axis 0 with axis=1, or plain vectors with
    the default axis.
    """
    w_conv, w_fc = weights.pair(task)
    parts = []
    if enabled[0]:
        parts.append((conv_feat, w_conv))
    if enabled[1]:
        parts.append((fc_feat, w_fc))
    return T.weighted_concat(parts, axis=axis)


@dataclass
class TaskVectors:
    """One feature row per RoI (or per support class) for each subtask."""
    cls: Tensor      # [n, d_cls]
    reg: Tensor      # [n, d_reg]

    def __post_init__(self):
        if self.cls.shape[0] != self.reg.shape[0]:
            raise ValueError(
                f"cls/reg counts differ: {self.cls.shape[0]} vs {self.reg.shape[0]}")

    @property
    def n(self) -> int:
        return self.cls.shape[0]

    def by_task(self, task: str) -> Tensor:
        return self.cls if task == "cls" else self.reg


class DualEncoder:
    """Conv + 2-fc encoder pair per task; used by both branches.

    The query-side and support-side instances have identical layer shapes
    but independent parameters (structure-only sharing).
    """

    def __init__(self, rng: np.random.Generator, prefix: str, in_channels: int,
                 patch: int, flags: FusionFlags):
        self.prefix = prefix
        self.in_channels = in_channels
        self.patch = patch
        self.flags = flags
        self._params = {}
        flat = in_channels * patch * patch
        for task in TASKS:
            conv_on, fc_on = flags.enabled(task)
            if conv_on:
                std = np.sqrt(2.0 / (in_channels * 9))
                self._params[f"{prefix}.{task}_conv.w"] = Tensor(
                    rng.normal(0.0, std, (D_CONV, in_channels, 3, 3)), requires_grad=True)
                self._params[f"{prefix}.{task}_conv.b"] = Tensor(
                    np.zeros(D_CONV), requires_grad=True)
            if fc_on:
                std1 = np.sqrt(2.0 / flat)
                std2 = np.sqrt(2.0 / FC_HIDDEN)
                self._params[f"{prefix}.{task}_fc.w1"] = Tensor(
                    rng.normal(0.0, std1, (flat, FC_HIDDEN)), requires_grad=True)
                self._params[f"{prefix}.{task}_fc.b1"] = Tensor(
                    np.zeros(FC_HIDDEN), requires_grad=True)
                self._params[f"{prefix}.{task}_fc.w2"] = Tensor(
                    rng.normal(0.0, std2, (FC_HIDDEN, D_FC)), requires_grad=True)
                self._params[f"{prefix}.{task}_fc.b2"] = Tensor(
                    np.zeros(D_FC), requires_grad=True)

    def parameters(self) -> dict:
        return dict(self._params)

    def layer_shapes(self) -> dict:
        """Shape signature used to assert structural parity across branches."""
        return {k.split(".", 1)[1]: v.shape for k, v in self._params.items()}

    def _task_paths(self, x: Tensor, task: str):
        n = x.shape[0]
        conv_on, fc_on = self.flags.enabled(task)
        conv_feat = fc_feat = None
        if conv_on:
            w = self._params[f"{self.prefix}.{task}_conv.w"]
            b = self._params[f"{self.prefix}.{task}_conv.b"]
            h = T.relu(T.add_bias(T.conv2d(x, w, stride=1, padding=1), b))
            conv_feat = T.tmean(h, axis=(2, 3))
        if fc_on:
            w1 = self._params[f"{self.prefix}.{task}_fc.w1"]
            b1 = self._params[f"{self.prefix}.{task}_fc.b1"]
            w2 = self._params[f"{self.prefix}.{task}_fc.w2"]
            b2 = self._params[f"{self.prefix}.{task}_fc.b2"]
            flat = T.reshape(x, (n, self.in_channels * self.patch * self.patch))
            fc_feat = T.add_bias(T.matmul(T.relu(T.add_bias(T.matmul(flat, w1), b1)), w2), b2)
        return conv_feat, fc_feat

    def encode(self, x: Tensor, weights: FusionWeights) -> TaskVectors:
        """[n,C,P,P] feature patches -> fused per-task rows."""
        if x.shape[1] != self.in_channels or x.shape[2] != self.patch or x.shape[3] != self.patch:
            raise ValueError(f"{self.prefix}: expected [n,{self.in_channels},"
                             f"{self.patch},{self.patch}] patches, got {x.shape}")
        out = {}
        for task in TASKS:
            conv_feat, fc_feat = self._task_paths(x, task)
            out[task] = afm_fuse(conv_feat, fc_feat, task, weights,
                                 enabled=self.flags.enabled(task), axis=1)
        return TaskVectors(cls=out["cls"], reg=out["reg"])


def dqe_encode(encoder: DualEncoder, patches, weights: FusionWeights) -> TaskVectors:
    """Encode RoI patches (list of RoiPatch or a stacked [n,C,P,P] tensor)."""
    if isinstance(patches, Tensor):
        stacked = patches
    else:
        if not patches:
            raise ValueError("dqe_encode: empty patch list")
        stacked = T.stack([p.tensor for p in patches], axis=0)
    return encoder.encode(stacked, weights)


def dag_encode(encoder: DualEncoder, backbone, support, class_list,
               weights: FusionWeights):
    """Encode support clusters into class-attentive vectors.

    Every support image passes the shared backbone and the support-side
    encoder, then the K per-class rows are averaged into one attentive
    vector per class.  Returns (attentive [m,d], per_support [m*K,d],
    per-support class ids).
    """
    images = []
    ids = []
    sizes = []
    for cid in class_list:
        cluster = support[cid]
        if not cluster:
            raise ValueError(f"dag_encode: empty support cluster for class {cid}")
        sizes.append(len(cluster))
        for sup in cluster:
            images.append(sup.image_with_mask)
            ids.append(cid)
    batch = T.stack(images, axis=0)
    fms = backbone.forward_batch(batch)
    per_support = encoder.encode(fms, weights)
    m = len(class_list)
    avg = np.zeros((m, len(images)))
    off = 0
    for j, size in enumerate(sizes):
        avg[j, off:off + size] = 1.0 / size
        off += size
    avg_t = Tensor(avg)
    attentive = TaskVectors(cls=T.matmul(avg_t, per_support.cls),
                            reg=T.matmul(avg_t, per_support.reg))
    return attentive, per_support, ids
