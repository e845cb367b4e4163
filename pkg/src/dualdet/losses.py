"""Training objective: detector losses plus dual meta losses.

Total = rpn objectness BCE + rpn box smooth-L1 + (m+1)-way RoI
cross-entropy + positive-RoI box smooth-L1 + one cross-entropy meta loss
per task pushing support embeddings of different classes apart.  All
components are plain unweighted sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import perception
from . import tensor as T
from .aggregator import PairPredictions, class_scores
from .tensor import Tensor

RPN_SAMPLE_SIZE = 32
RPN_MAX_POS = 8
RPN_NEG_PER_POS = 3


@dataclass
class LossReport:
    rpn_cls: Tensor
    rpn_reg: Tensor
    rcnn_cls: Tensor
    rcnn_reg: Tensor
    meta_cls: Tensor
    meta_reg: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {name: getattr(self, name).item() for name in
                ("rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg",
                 "meta_cls", "meta_reg", "total")}


def sample_rpn_anchors(labels: np.ndarray, rng: np.random.Generator):
    """Balanced anchor subsample: <=8 positives, negatives capped at 3x."""
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    if len(pos) > RPN_MAX_POS:
        pos = np.sort(rng.choice(pos, size=RPN_MAX_POS, replace=False))
    n_neg = min(len(neg), RPN_NEG_PER_POS * max(len(pos), 1),
                RPN_SAMPLE_SIZE - len(pos))
    if len(neg) > n_neg:
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    return pos, neg


def assign_roi_targets(proposals: perception.ProposalSet, query_objects,
                       class_list, pos_iou: float = 0.5):
    """Label each proposal with a cluster index (background = m).

    A proposal is positive when its best IoU with a ground-truth box of an
    episode class reaches ``pos_iou``; its regression target encodes that
    box against the proposal.
    """
    m = len(class_list)
    n = len(proposals.boxes)
    labels = np.full(n, m, dtype=np.int64)
    targets = np.zeros((n, 4))
    gt = [(cid, box) for cid, box in query_objects if cid in class_list]
    if gt:
        gt_boxes = np.stack([box for _, box in gt])
        gt_cls = np.array([class_list.index(cid) for cid, _ in gt])
        ious = perception.iou_matrix(proposals.boxes, gt_boxes)
        best = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(n), best]
        pos = best_iou >= pos_iou
        labels[pos] = gt_cls[best[pos]]
        if np.any(pos):
            targets[pos] = perception.encode_boxes(gt_boxes[best[pos]],
                                                   proposals.boxes[pos])
    proposals.labels = labels
    proposals.reg_targets = targets
    return labels, targets


def faster_rcnn_loss(rpn_out: perception.RpnOut, proposals: perception.ProposalSet,
                     preds: PairPredictions, episode, background_logit: Tensor,
                     rng: np.random.Generator, rpn_pos_iou: float = 0.6,
                     rpn_neg_iou: float = 0.3):
    """The four detector components: (rpn_cls, rpn_reg, rcnn_cls, rcnn_reg).

    Requires ``assign_roi_targets`` to have populated proposal labels.
    """
    gt_boxes = np.stack([box for _, box in episode.query.objects])
    labels, targets = perception.assign_rpn_targets(
        rpn_out.anchors, gt_boxes, pos_iou=rpn_pos_iou, neg_iou=rpn_neg_iou)
    pos_idx, neg_idx = sample_rpn_anchors(labels, rng)
    sample = np.concatenate([pos_idx, neg_idx])
    sampled_logits = T.gather_rows(rpn_out.logits, sample)
    sampled_y = Tensor((labels[sample] == 1).astype(np.float64))
    rpn_cls = T.tmean(T.bce_with_logits(sampled_logits, sampled_y))

    if len(pos_idx):
        diff = T.sub(T.gather_rows(rpn_out.deltas, pos_idx), Tensor(targets[pos_idx]))
        rpn_reg = T.tmean(T.tsum(T.smooth_l1(diff), axis=(1,)))
    else:
        rpn_reg = Tensor(0.0)

    if proposals.labels is None:
        raise ValueError("proposal targets not assigned")
    n, m = preds.n, preds.m
    scores = class_scores(preds, background_logit)
    logp = T.log_softmax(scores, axis=1)
    rcnn_cls = T.scale(T.tmean(T.take_per_row(logp, proposals.labels)), -1.0)

    pos_rois = np.nonzero(proposals.labels < m)[0]
    if len(pos_rois):
        rows = pos_rois * m + proposals.labels[pos_rois]
        diff = T.sub(T.gather_rows(preds.box_deltas, rows),
                     Tensor(proposals.reg_targets[pos_rois]))
        rcnn_reg = T.scale(T.tsum(T.smooth_l1(diff)), 1.0 / len(pos_rois))
    else:
        rcnn_reg = Tensor(0.0)
    return rpn_cls, rpn_reg, rcnn_cls, rcnn_reg


def meta_loss(vectors: Tensor, class_ids, classifier_w: Tensor,
              classifier_b: Tensor, num_classes: int) -> Tensor:
    """Cross-entropy of support embeddings against their true class.

    One task-specific linear classifier maps each (pre-average) support
    vector to a logit per world class.
    """
    ids = np.asarray(class_ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= num_classes):
        bad = ids[(ids < 0) | (ids >= num_classes)][0]
        raise ValueError(f"unknown class id {bad} (have {num_classes} classes)")
    logits = T.add_bias(T.matmul(vectors, classifier_w), classifier_b)
    logp = T.log_softmax(logits, axis=1)
    return T.scale(T.tmean(T.take_per_row(logp, ids)), -1.0)


def total_loss(rpn_cls, rpn_reg, rcnn_cls, rcnn_reg, meta_cls, meta_reg) -> LossReport:
    """Unweighted sum of all six components."""
    total = rpn_cls + rpn_reg + rcnn_cls + rcnn_reg + meta_cls + meta_reg
    return LossReport(rpn_cls=rpn_cls, rpn_reg=rpn_reg, rcnn_cls=rcnn_cls,
                      rcnn_reg=rcnn_reg, meta_cls=meta_cls, meta_reg=meta_reg,
                      total=total)
