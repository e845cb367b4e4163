"""Detection metrics: IoU, per-class NMS, AP50, repeated-run evaluation.

Average precision uses VOC-style all-point interpolation over a greedy
score-ordered matching.  Evaluation generates held-out scenes from a
stream keyed by the master seed XOR 0x5EED, runs inference over several
repeats with independently sampled support sets, and reports the mean
and standard deviation across repeats.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import episodes as E
from . import rng as R


@dataclass
class Detection:
    class_id: int
    box: np.ndarray            # [x1,y1,x2,y2]
    score: float
    scene_id: int = 0


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    for box in (a, b):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"degenerate box {box.tolist()}")
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def _det_key(d: Detection):
    return (-d.score, d.scene_id, tuple(d.box.tolist()))


def nms(dets, iou_thresh: float):
    """Greedy per-class suppression of overlapping lower-scored boxes."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0,1), got {iou_thresh}")
    kept = []
    for cid in sorted({d.class_id for d in dets}):
        group = sorted((d for d in dets if d.class_id == cid), key=_det_key)
        while group:
            best = group.pop(0)
            kept.append(best)
            group = [d for d in group
                     if d.scene_id != best.scene_id or iou(d.box, best.box) <= iou_thresh]
    kept.sort(key=lambda d: (d.class_id,) + _det_key(d))
    return kept


def average_precision(dets, scenes, class_id: int, iou_thresh: float = 0.5):
    """All-point interpolated AP of one class over a scene list.

    Detections must carry scene ids indexing into ``scenes``.  Returns
    None when the class has no ground-truth instances (AP undefined).
    """
    gt_boxes = [[box for cid, box in s.objects if cid == class_id] for s in scenes]
    npos = sum(len(g) for g in gt_boxes)
    if npos == 0:
        return None
    cand = sorted((d for d in dets if d.class_id == class_id), key=_det_key)
    matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(cand))
    fp = np.zeros(len(cand))
    for k, det in enumerate(cand):
        boxes = gt_boxes[det.scene_id]
        best_iou, best_g = 0.0, -1
        for g, box in enumerate(boxes):
            if matched[det.scene_id][g]:
                continue
            v = iou(det.box, box)
            if v > best_iou:
                best_iou, best_g = v, g
        if best_iou >= iou_thresh:
            tp[k] = 1.0
            matched[det.scene_id][best_g] = True
        else:
            fp[k] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(dets, scenes, class_ids, iou_thresh: float = 0.5):
    """Mean AP over classes; classes without GT are excluded with a warning."""
    per_class = {}
    for cid in class_ids:
        ap = average_precision(dets, scenes, cid, iou_thresh)
        if ap is None:
            warnings.warn(f"class {cid} has no ground-truth instances; "
                          "excluded from mAP", stacklevel=2)
            continue
        per_class[cid] = ap
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return m, per_class


@dataclass
class EvalResult:
    subset: str
    class_ids: list
    per_class_mean: dict
    per_class_std: dict
    map_mean: float
    map_std: float
    per_repeat_map: list = field(default_factory=list)

    def csv_rows(self):
        header = "subset,class_id,ap50_mean,ap50_std,map_mean,map_std"
        rows = [header]
        for cid in self.class_ids:
            rows.append(f"{self.subset},{cid},{self.per_class_mean[cid]!r},"
                        f"{self.per_class_std[cid]!r},{self.map_mean!r},{self.map_std!r}")
        return rows

    def table(self) -> str:
        lines = [f"subset={self.subset}  mAP50 = {self.map_mean:.4f} "
                 f"+/- {self.map_std:.4f} over {len(self.per_repeat_map)} repeats"]
        for cid in self.class_ids:
            lines.append(f"  class {cid}: AP50 = {self.per_class_mean[cid]:.4f} "
                         f"+/- {self.per_class_std[cid]:.4f}")
        return "\n".join(lines)


def subset_classes(split: E.ClassSplit, subset: str):
    if subset == "base":
        return sorted(split.base_classes)
    if subset == "novel":
        return sorted(split.novel_classes)
    if subset == "all":
        return sorted(split.all_classes)
    raise ValueError(f"unknown subset {subset!r}")


def evaluate(detector, split: E.ClassSplit, subset: str, num_scenes: int,
             repeats: int, master_seed: int, support_k: int = 5,
             score_thresh: float = 0.05, nms_thresh: float = 0.5,
             scene_size=(64, 64), support_size=(32, 32), max_objects: int = 3) -> EvalResult:
    """Held-out evaluation: fresh scenes and supports per repeat.

    Each repeat samples its own K support images per class (class-attentive
    vectors are recomputed), generates ``num_scenes`` evaluation scenes
    containing only subset classes, and scores AP50 per class.
    """
    if num_scenes < 1 or repeats < 1:
        raise ValueError("num_scenes and repeats must be >= 1")
    class_ids = subset_classes(split, subset)
    seed = R.eval_seed(master_seed)
    per_class_runs = {cid: [] for cid in class_ids}
    maps = []
    for rep in range(repeats):
        sup_rng = R.stream(seed, "support", rep)
        support = {}
        for cid in class_ids:
            shots = []
            for _ in range(support_k):
                scene = E.gen_scene(sup_rng, {cid}, 1, scene_size)
                shots.append(E.render_support(scene, 0, support_size))
            support[cid] = shots
        attentive = detector.encode_support_classes(support, class_ids)
        scenes = [E.gen_scene(R.stream(seed, "scene", rep, i), class_ids,
                              max_objects, scene_size) for i in range(num_scenes)]
        dets = []
        for i, scene in enumerate(scenes):
            for d in detector.detect_scene(scene.image, attentive, class_ids,
                                           score_thresh=score_thresh):
                d.scene_id = i
                dets.append(d)
        dets = nms(dets, nms_thresh)
        map_val, per_class = mean_average_precision(dets, scenes, class_ids)
        maps.append(map_val)
        for cid in class_ids:
            per_class_runs[cid].append(per_class.get(cid, 0.0))
    return EvalResult(
        subset=subset,
        class_ids=class_ids,
        per_class_mean={c: float(np.mean(v)) for c, v in per_class_runs.items()},
        per_class_std={c: float(np.std(v)) for c, v in per_class_runs.items()},
        map_mean=float(np.mean(maps)),
        map_std=float(np.std(maps)),
        per_repeat_map=maps,
    )
