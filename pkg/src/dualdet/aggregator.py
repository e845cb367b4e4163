"""Pairwise feature aggregation and the dual R-CNN decision heads.

Every RoI vector r is paired with every class-attentive vector a per
task, producing [r*a, r-a, r] rows ordered row-major in (roi, class).
The classification head scores each pair with one foreground logit; the
regression head predicts four box deltas.  The two heads share no
parameters, so each task's loss can only reach its own head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import perception
from . import tensor as T
from .encoders import TaskVectors
from .tensor import Tensor

HEAD_HIDDEN = 128


@dataclass
class AggregatedPairs:
    """Per-task [n*m, 3d] pair features, row k = (i=k//m, j=k%m)."""
    cls: Tensor
    reg: Tensor
    n: int
    m: int


@dataclass
class PairPredictions:
    cls_logits: Tensor     # [n*m] foreground logit of pair (i,j)
    box_deltas: Tensor     # [n*m, 4]
    n: int
    m: int


def aggregate(rois: TaskVectors, attentive: TaskVectors) -> AggregatedPairs:
    """Pair every RoI row with every class row: concat(r*a, r-a, r)."""
    n, m = rois.n, attentive.n
    out = {}
    for task in ("cls", "reg"):
        r = rois.by_task(task)
        a = attentive.by_task(task)
        if r.shape[1] != a.shape[1]:
            raise ValueError(f"aggregate: {task} dims differ, "
                             f"roi d={r.shape[1]} vs attentive d={a.shape[1]}")
        rr = T.repeat_rows(r, m)
        aa = T.tile_rows(a, n)
        out[task] = T.concat([T.mul(rr, aa), T.sub(rr, aa), rr], axis=1)
    return AggregatedPairs(cls=out["cls"], reg=out["reg"], n=n, m=m)


class DetectionHeads:
    """Separate 2-fc classifier and regressor over aggregated pairs."""

    def __init__(self, rng: np.random.Generator, d_cls: int, d_reg: int):
        self.d_cls = d_cls
        self.d_reg = d_reg
        self._params = {}
        for name, d_in, d_out in (("cls", 3 * d_cls, 1), ("reg", 3 * d_reg, 4)):
            std1 = np.sqrt(2.0 / (3 * d_in))
            std2 = np.sqrt(2.0 / HEAD_HIDDEN)
            self._params[f"head_{name}.w1"] = Tensor(
                rng.normal(0.0, std1, (d_in, HEAD_HIDDEN)), requires_grad=True)
            self._params[f"head_{name}.b1"] = Tensor(np.zeros(HEAD_HIDDEN), requires_grad=True)
            self._params[f"head_{name}.w2"] = Tensor(
                rng.normal(0.0, std2, (HEAD_HIDDEN, d_out)), requires_grad=True)
            self._params[f"head_{name}.b2"] = Tensor(np.zeros(d_out), requires_grad=True)
        self._params["head_cls.background"] = Tensor(0.0, requires_grad=True)

    def parameters(self) -> dict:
        return dict(self._params)

    @property
    def background_logit(self) -> Tensor:
        return self._params["head_cls.background"]

    def _mlp(self, name: str, x: Tensor) -> Tensor:
        p = self._params
        h = T.relu(T.add_bias(T.matmul(x, p[f"{name}.w1"]), p[f"{name}.b1"]))
        return T.add_bias(T.matmul(h, p[f"{name}.w2"]), p[f"{name}.b2"])

    def forward(self, pairs: AggregatedPairs) -> PairPredictions:
        logits = T.reshape(self._mlp("head_cls", pairs.cls), (pairs.n * pairs.m,))
        deltas = self._mlp("head_reg", pairs.reg)
        return PairPredictions(cls_logits=logits, box_deltas=deltas,
                               n=pairs.n, m=pairs.m)


def detect_heads(heads: DetectionHeads, pairs: AggregatedPairs) -> PairPredictions:
    return heads.forward(pairs)


def class_scores(preds: PairPredictions, background_logit: Tensor) -> Tensor:
    """Per-RoI (m+1)-way logits: the m pair logits plus the background."""
    n, m = preds.n, preds.m
    grid = T.reshape(preds.cls_logits, (n, m))
    bg = T.tile_rows(T.reshape(background_logit, (1, 1)), n)
    return T.concat([grid, bg], axis=1)


def decode_detections(preds: PairPredictions, proposals: perception.ProposalSet,
                      class_ids, background_logit: Tensor, score_thresh: float,
                      image_size):
    """Pick each RoI's winning class via softmax, decode its deltas.

    RoIs won by the background column or scoring below the threshold are
    dropped.  Returns plain (class_id, box, score) records.
    """
    if not 0.0 <= score_thresh < 1.0:
        raise ValueError(f"score_thresh must be in [0,1), got {score_thresh}")
    from .metrics import Detection
    n, m = preds.n, preds.m
    logits = np.concatenate([preds.cls_logits.values.reshape(n, m),
                             np.full((n, 1), background_logit.item())], axis=1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    winners = np.argmax(probs, axis=1)
    deltas = preds.box_deltas.values.reshape(n, m, 4)
    out = []
    for i in range(n):
        j = int(winners[i])
        if j == m:
            continue
        score = float(probs[i, j])
        if score < score_thresh:
            continue
        box = perception.decode_boxes(deltas[i, j][None, :],
                                      proposals.boxes[i][None, :])[0]
        box = perception.clip_boxes(box[None, :], image_size)[0]
        if box[2] - box[0] <= 0 or box[3] - box[1] <= 0:
            continue
        out.append(Detection(class_id=int(class_ids[j]), box=box, score=score))
    return out
