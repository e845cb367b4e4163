"""Shared convolutional backbone, single-scale region proposals, RoIAlign.

The backbone is four 3x3 conv layers (4->16->32->64->64) with three
stride-2 stages, net stride 8.  The same parameters encode query images
(zero-padded to 4 channels) and mask-concatenated support images.  The
proposal stage places one square anchor per feature cell and scores it
with a tiny conv head; RoIAlign pools proposal boxes to PxP patches with
averaged 2x2 bilinear samples per cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BACKBONE_CHANNELS = (16, 32, 64, 64)
BACKBONE_STRIDES = (1, 2, 2, 2)
NET_STRIDE = 8
ANCHOR_SCALE = 4          # anchor side = ANCHOR_SCALE * stride px


@dataclass
class FeatureMap:
    tensor: Tensor            # [C,Hf,Wf]
    stride: int


@dataclass
class ProposalSet:
    boxes: np.ndarray         # [P,4] pixel coords, clipped to image
    objectness: np.ndarray    # [P]
    labels: np.ndarray = None        # optional per-proposal class ids
    reg_targets: np.ndarray = None   # optional per-proposal box deltas

    def __post_init__(self):
        if len(self.boxes) != len(self.objectness):
            raise ValueError("boxes and objectness lengths differ")


@dataclass
class RoiPatch:
    tensor: Tensor            # [C,P,P]


def _he_conv(rng, out_ch, in_ch, k):
    std = np.sqrt(2.0 / (in_ch * k * k))
    return Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), requires_grad=True)


class Backbone:
    """Four conv+ReLU stages shared by the query and support branches."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 4):
        self.in_channels = in_channels
        self.weights = []
        self.biases = []
        ch = in_channels
        for out_ch in BACKBONE_CHANNELS:
            self.weights.append(_he_conv(rng, out_ch, ch, 3))
            self.biases.append(Tensor(np.zeros(out_ch), requires_grad=True))
            ch = out_ch

    @property
    def out_channels(self) -> int:
        return BACKBONE_CHANNELS[-1]

    def forward_batch(self, x: Tensor) -> Tensor:
        """[N,in,H,W] -> [N,64,H/8,W/8]."""
        if x.shape[1] != self.in_channels:
            raise ValueError(f"backbone expects {self.in_channels} channels, got {x.shape[1]}")
        h = x
        for w, b, s in zip(self.weights, self.biases, BACKBONE_STRIDES):
            h = T.relu(T.add_bias(T.conv2d(h, w, stride=s, padding=1), b))
        return h

    def parameters(self) -> dict:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            params[f"backbone.conv{i}.w"] = w
            params[f"backbone.conv{i}.b"] = b
        return params


def backbone_forward(backbone: Backbone, image: Tensor) -> FeatureMap:
    """Encode one [4,H,W] image into its stride-8 feature map."""
    c, h, w = image.shape
    if c != backbone.in_channels:
        raise ValueError(f"backbone expects {backbone.in_channels} channels, got {c}")
    if h % NET_STRIDE or w % NET_STRIDE:
        raise ValueError(f"image size {h}x{w} must be a multiple of stride {NET_STRIDE}")
    batched = backbone.forward_batch(T.reshape(image, (1, c, h, w)))
    fm = T.reshape(batched, batched.shape[1:])
    return FeatureMap(tensor=fm, stride=NET_STRIDE)


# ---------------------------------------------------------------------------
# proposal stage

@dataclass
class RpnOut:
    logits: Tensor            # [A] objectness logits, row-major over cells
    deltas: Tensor            # [A,4] box deltas in (dx,dy,dw,dh)
    anchors: np.ndarray       # [A,4] anchor boxes in pixels


class RPN:
    def __init__(self, rng: np.random.Generator, in_channels: int = 64, mid: int = 32):
        self.w1 = _he_conv(rng, mid, in_channels, 3)
        self.b1 = Tensor(np.zeros(mid), requires_grad=True)
        self.w2 = _he_conv(rng, 5, mid, 1)
        self.b2 = Tensor(np.zeros(5), requires_grad=True)

    def parameters(self) -> dict:
        return {"rpn.conv.w": self.w1, "rpn.conv.b": self.b1,
                "rpn.head.w": self.w2, "rpn.head.b": self.b2}

    def forward(self, features: FeatureMap) -> RpnOut:
        c, hf, wf = features.tensor.shape
        x = T.reshape(features.tensor, (1, c, hf, wf))
        h = T.relu(T.add_bias(T.conv2d(x, self.w1, stride=1, padding=1), self.b1))
        out = T.add_bias(T.conv2d(h, self.w2, stride=1, padding=0), self.b2)
        flat = T.reshape(out, (5, hf * wf))
        logits = T.reshape(T.gather_rows(flat, [0]), (hf * wf,))
        deltas = T.transpose2d(T.gather_rows(flat, [1, 2, 3, 4]))
        return RpnOut(logits=logits, deltas=deltas,
                      anchors=make_anchors(hf, wf, features.stride))


def make_anchors(hf: int, wf: int, stride: int) -> np.ndarray:
    """One square anchor per cell, side ANCHOR_SCALE*stride, row-major."""
    side = ANCHOR_SCALE * stride
    ys, xs = np.mgrid[0:hf, 0:wf]
    cx = (xs.reshape(-1) + 0.5) * stride
    cy = (ys.reshape(-1) + 0.5) * stride
    half = side / 2.0
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Box -> delta parameterization relative to anchors."""
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    return np.stack([(bcx - acx) / aw, (bcy - acy) / ah,
                     np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    # Clamped so an untrained head cannot blow boxes up to inf.
    w = np.exp(np.clip(deltas[:, 2], -10.0, 10.0)) * aw
    h = np.exp(np.clip(deltas[:, 3], -10.0, 10.0)) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, image_size) -> np.ndarray:
    h, w = image_size
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, h)
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] and [M,4] boxes."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, 1e-12)


def rpn_propose(rpn_out: RpnOut, image_size, train_mode: bool, top_n: int,
                gt_boxes: np.ndarray = None) -> ProposalSet:
    """Decode and rank anchors; in train mode, append ground truth boxes."""
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    scores = _np_sigmoid(rpn_out.logits.values)
    boxes = clip_boxes(decode_boxes(rpn_out.deltas.values, rpn_out.anchors), image_size)
    order = np.argsort(-scores, kind="stable")[:top_n]
    boxes, scores = boxes[order], scores[order]
    if train_mode and gt_boxes is not None and len(gt_boxes):
        boxes = np.concatenate([boxes, clip_boxes(np.asarray(gt_boxes, dtype=float), image_size)])
        scores = np.concatenate([scores, np.ones(len(gt_boxes))])
    keep = (boxes[:, 2] - boxes[:, 0] > 1e-6) & (boxes[:, 3] - boxes[:, 1] > 1e-6)
    return ProposalSet(boxes=boxes[keep], objectness=scores[keep])


def assign_rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray,
                       pos_iou: float = 0.6, neg_iou: float = 0.3):
    """Per-anchor label in {1 pos, 0 neg, -1 ignore} plus regression targets."""
    a = len(anchors)
    labels = np.full(a, -1, dtype=np.int64)
    targets = np.zeros((a, 4))
    if gt_boxes is None or len(gt_boxes) == 0:
        labels[:] = 0
        return labels, targets
    gt_boxes = np.asarray(gt_boxes, dtype=float)
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(a), best_gt]
    labels[best_iou <= neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # every GT keeps its best-matching anchor(s) positive (if they overlap at all)
    gt_best = np.max(ious, axis=0)
    for g in range(len(gt_boxes)):
        if gt_best[g] <= 0.0:
            continue
        winners = np.nonzero(ious[:, g] == gt_best[g])[0]
        labels[winners] = 1
        best_gt[winners] = g
    pos = labels == 1
    if np.any(pos):
        targets[pos] = encode_boxes(gt_boxes[best_gt[pos]], anchors[pos])
    return labels, targets


def _np_sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# ---------------------------------------------------------------------------
# RoIAlign

def _sampling_matrix(boxes: np.ndarray, stride: int, hf: int, wf: int, pool: int) -> np.ndarray:
    """Dense [R*P*P, Hf*Wf] matrix mapping feature cells to pooled cells.

    Feature value (i,j) sits at continuous coordinate (i+0.5, j+0.5);
    each output cell averages 2x2 bilinear samples at its quarter points.
    Out-of-range samples replicate the border.
    """
    r = len(boxes)
    fb = boxes / stride
    if np.any(fb[:, 2] - fb[:, 0] <= 0) or np.any(fb[:, 3] - fb[:, 1] <= 0):
        bad = np.nonzero((fb[:, 2] - fb[:, 0] <= 0) | (fb[:, 3] - fb[:, 1] <= 0))[0][0]
        raise ValueError(f"degenerate box {boxes[bad].tolist()} has zero area")
    offs = np.array([0.25, 0.75])
    cy = (fb[:, 3] - fb[:, 1])[:, None, None] / pool
    cx = (fb[:, 2] - fb[:, 0])[:, None, None] / pool
    ys = fb[:, 1][:, None, None] + (np.arange(pool)[None, :, None] + offs[None, None, :]) * cy
    xs = fb[:, 0][:, None, None] + (np.arange(pool)[None, :, None] + offs[None, None, :]) * cx

    def neighbors(coords, limit):
        t = coords - 0.5
        i0 = np.floor(t).astype(np.intp)
        frac = t - i0
        lo = np.clip(i0, 0, limit - 1)
        hi = np.clip(i0 + 1, 0, limit - 1)
        return lo, hi, frac

    y_lo, y_hi, fy = neighbors(ys, hf)      # [R,P,2]
    x_lo, x_hi, fx = neighbors(xs, wf)

    s = np.zeros((r, pool, pool, hf * wf))
    rows = np.arange(r)[:, None, None]
    pys = np.arange(pool)[None, :, None]
    pxs = np.arange(pool)[None, None, :]
    for sy in range(2):
        wy0 = (1.0 - fy[:, :, sy])[:, :, None]
        iy0 = y_lo[:, :, sy][:, :, None]
        iy1 = y_hi[:, :, sy][:, :, None]
        for sx in range(2):
            wx0 = (1.0 - fx[:, :, sx])[:, None, :]
            ix0 = x_lo[:, :, sx][:, None, :]
            ix1 = x_hi[:, :, sx][:, None, :]
            for iy, wy in ((iy0, wy0), (iy1, 1.0 - wy0)):
                for ix, wx in ((ix0, wx0), (ix1, 1.0 - wx0)):
                    np.add.at(s, (rows, pys, pxs, iy * wf + ix), 0.25 * wy * wx)
    return s.reshape(r * pool * pool, hf * wf)


def roi_align_batch(features: FeatureMap, boxes: np.ndarray, pool: int) -> Tensor:
    """Pool every box to a [C,P,P] patch; returns [R,C,P,P]."""
    if pool < 1:
        raise ValueError(f"pool must be >= 1, got {pool}")
    boxes = np.asarray(boxes, dtype=float)
    fm = features.tensor
    c, hf, wf = fm.shape
    s = _sampling_matrix(boxes, features.stride, hf, wf, pool)
    flat = fm.values.reshape(c, hf * wf)
    out = (s @ flat.T).reshape(len(boxes), pool, pool, c).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c)
        return ((gmat.T @ s).reshape(c, hf, wf),)

    return T.apply_op("roi_align", np.ascontiguousarray(out), (fm,), grad_fn)


def roi_align(features: FeatureMap, proposals, pool: int):
    """Spec surface: one RoiPatch per proposal box."""
    boxes = proposals.boxes if isinstance(proposals, ProposalSet) else np.asarray(proposals, float)
    batched = roi_align_batch(features, boxes, pool)
    c = features.tensor.shape[0]
    return [RoiPatch(tensor=T.reshape(T.gather_rows(batched, [i]), (c, pool, pool)))
            for i in range(len(boxes))]
