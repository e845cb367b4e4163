"""Detection metrics: IoU hand cases, NMS vs reference, AP vs PR oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualdet import episodes as E
from dualdet import metrics as M
from dualdet.metrics import Detection
from dualdet.tensor import Tensor


def det(cid, box, score, scene=0):
    return Detection(class_id=cid, box=np.asarray(box, float), score=score, scene_id=scene)


def scene_with(objects, size=64):
    img = Tensor(np.zeros((3, size, size)))
    return E.Scene(image=img, objects=[(c, np.asarray(b, float)) for c, b in objects])


def reference_nms(dets, thresh):
    """Dumb O(n^2) per-class reference: mark suppressed pairs directly."""
    kept = []
    for cid in sorted({d.class_id for d in dets}):
        group = sorted((d for d in dets if d.class_id == cid), key=M._det_key)
        suppressed = [False] * len(group)
        for i in range(len(group)):
            if suppressed[i]:
                continue
            kept.append(group[i])
            for j in range(i + 1, len(group)):
                if (not suppressed[j] and group[j].scene_id == group[i].scene_id
                        and M.iou(group[i].box, group[j].box) > thresh):
                    suppressed[j] = True
    kept.sort(key=lambda d: (d.class_id,) + M._det_key(d))
    return kept


def oracle_ap(dets, scenes, class_id, thresh=0.5):
    """Independent PR-curve enumeration: interpolated precision per TP rank."""
    gt = [[box for cid, box in s.objects if cid == class_id] for s in scenes]
    npos = sum(len(g) for g in gt)
    if npos == 0:
        return None
    cand = sorted((d for d in dets if d.class_id == class_id), key=M._det_key)
    used = [set() for _ in scenes]
    is_tp = []
    for d in cand:
        best, best_g = 0.0, None
        for g, box in enumerate(gt[d.scene_id]):
            if g in used[d.scene_id]:
                continue
            v = M.iou(d.box, box)
            if v > best:
                best, best_g = v, g
        if best >= thresh:
            used[d.scene_id].add(best_g)
            is_tp.append(True)
        else:
            is_tp.append(False)
    total = 0.0
    for k in range(len(cand)):
        if not is_tp[k]:
            continue
        best_prec = 0.0
        for j in range(k, len(cand)):
            tp_j = sum(is_tp[:j + 1])
            best_prec = max(best_prec, tp_j / (j + 1))
        total += best_prec
    return total / npos


class TestIou:
    def test_identical(self):
        assert M.iou([0, 0, 4, 4], [0, 0, 4, 4]) == 1.0

    def test_disjoint(self):
        assert M.iou([0, 0, 2, 2], [5, 5, 9, 9]) == 0.0

    def test_hand_case_one_seventh(self):
        assert M.iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=1e-15)

    def test_degenerate_errors(self):
        with pytest.raises(ValueError, match="degenerate"):
            M.iou([0, 0, 0, 4], [0, 0, 2, 2])


class TestNms:
    def test_single_detection_unchanged(self):
        d = det(0, [0, 0, 8, 8], 0.7)
        assert M.nms([d], 0.5) == [d]

    def test_identical_boxes_keep_highest(self):
        a = det(0, [0, 0, 8, 8], 0.9)
        b = det(0, [0, 0, 8, 8], 0.8)
        kept = M.nms([a, b], 0.5)
        assert kept == [a]

    def test_matches_reference_on_random_sets(self):
        g = np.random.default_rng(0)
        for _ in range(30):
            dets = []
            for _ in range(int(g.integers(1, 40))):
                x, y = g.uniform(0, 40, 2)
                w, h = g.uniform(4, 20, 2)
                dets.append(det(int(g.integers(0, 3)), [x, y, x + w, y + h],
                                float(g.uniform(0, 1)), scene=int(g.integers(0, 2))))
            thresh = float(g.uniform(0.2, 0.8))
            got = M.nms(dets, thresh)
            want = reference_nms(dets, thresh)
            assert len(got) == len(want)
            for a, b in zip(got, want):
                assert a is b

    def test_idempotent(self):
        g = np.random.default_rng(1)
        dets = [det(int(g.integers(0, 2)),
                    [x := g.uniform(0, 40), y := g.uniform(0, 40),
                     x + g.uniform(4, 20), y + g.uniform(4, 20)],
                    float(g.uniform(0, 1))) for _ in range(25)]
        once = M.nms(dets, 0.5)
        twice = M.nms(once, 0.5)
        assert len(once) == len(twice)
        for a, b in zip(once, twice):
            assert a is b

    def test_thresh_validation(self):
        with pytest.raises(ValueError, match="iou_thresh"):
            M.nms([], 0.0)


class TestAveragePrecision:
    def test_perfect_ranking_gives_one(self):
        scenes = [scene_with([(0, [0, 0, 10, 10]), (0, [20, 20, 30, 30])]),
                  scene_with([(0, [5, 5, 18, 18])])]
        dets = [det(0, [0, 0, 10, 10], 0.9, 0),
                det(0, [20, 20, 30, 30], 0.8, 0),
                det(0, [5, 5, 18, 18], 0.7, 1)]
        assert M.average_precision(dets, scenes, 0) == pytest.approx(1.0, abs=1e-15)

    def test_zero_detections_gives_zero(self):
        scenes = [scene_with([(0, [0, 0, 10, 10])])]
        assert M.average_precision([], scenes, 0) == 0.0

    def test_no_gt_is_undefined(self):
        scenes = [scene_with([(1, [0, 0, 10, 10])])]
        assert M.average_precision([], scenes, 0) is None

    def test_matches_bruteforce_oracle_many_instances(self):
        g = np.random.default_rng(2)
        for _ in range(1000):
            n_scene = int(g.integers(1, 4))
            scenes = []
            for _ in range(n_scene):
                objs = [(0, [x := g.uniform(0, 40), y := g.uniform(0, 40),
                             x + g.uniform(8, 20), y + g.uniform(8, 20)])
                        for _ in range(int(g.integers(1, 4)))]
                scenes.append(scene_with(objs))
            dets = [det(0, [x := g.uniform(0, 45), y := g.uniform(0, 45),
                            x + g.uniform(6, 20), y + g.uniform(6, 20)],
                        float(g.uniform(0, 1)), scene=int(g.integers(0, n_scene)))
                    for _ in range(int(g.integers(0, 21)))]
            got = M.average_precision(dets, scenes, 0)
            want = oracle_ap(dets, scenes, 0)
            assert got == pytest.approx(want, abs=1e-12)

    @given(st.integers(min_value=0, max_value=10 ** 6))
    @settings(max_examples=40, deadline=None)
    def test_adding_top_rank_true_positive_never_decreases_ap(self, seed):
        g = np.random.default_rng(seed)
        scenes = [scene_with([(0, [x := g.uniform(0, 40), y := g.uniform(0, 40),
                                   x + g.uniform(8, 20), y + g.uniform(8, 20)])
                              for _ in range(int(g.integers(1, 3)))])
                  for _ in range(2)]
        dets = [det(0, [x := g.uniform(0, 45), y := g.uniform(0, 45),
                        x + g.uniform(6, 20), y + g.uniform(6, 20)],
                    float(g.uniform(0, 0.9)), scene=int(g.integers(0, 2)))
                for _ in range(int(g.integers(0, 8)))]
        before = M.average_precision(dets, scenes, 0)
        sid = int(g.integers(0, 2))
        gt_box = scenes[sid].objects[0][1]
        after = M.average_precision(dets + [det(0, gt_box, 0.99, sid)], scenes, 0)
        assert after >= before - 1e-12

    def test_mean_ap_warns_and_excludes_empty_class(self):
        scenes = [scene_with([(0, [0, 0, 10, 10])])]
        dets = [det(0, [0, 0, 10, 10], 0.9, 0)]
        with pytest.warns(UserWarning, match="no ground-truth"):
            m, per_class = M.mean_average_precision(dets, scenes, [0, 1])
        assert m == pytest.approx(1.0)
        assert set(per_class) == {0}


class TestEvaluate:
    class OracleDetector:
        """Feeds ground truth back as detections; the mAP upper bound."""

        def __init__(self):
            self.scenes = {}

        def encode_support_classes(self, support, class_ids):
            return None

        def detect_scene(self, image, attentive, class_ids, score_thresh=0.0):
            key = image.values.tobytes()
            return [Detection(class_id=cid, box=box.copy(), score=0.99)
                    for cid, box in self.scenes[key]]

    def test_oracle_detector_scores_one(self):
        split = E.make_split(5, 2, seed=3)
        oracle = self.OracleDetector()

        import dualdet.rng as R
        seed = R.eval_seed(11)
        for rep in range(2):
            for i in range(4):
                s = E.gen_scene(R.stream(seed, "scene", rep, i),
                                M.subset_classes(split, "base"), 3, (64, 64))
                oracle.scenes[s.image.values.tobytes()] = s.objects
        result = M.evaluate(oracle, split, "base", num_scenes=4, repeats=2,
                            master_seed=11, support_k=1)
        assert result.map_mean == pytest.approx(1.0, abs=1e-12)
        assert len(result.per_repeat_map) == 2

    def test_csv_rows_schema(self):
        res = M.EvalResult(subset="novel", class_ids=[1, 4],
                           per_class_mean={1: 0.5, 4: 0.25},
                           per_class_std={1: 0.1, 4: 0.05},
                           map_mean=0.375, map_std=0.075,
                           per_repeat_map=[0.3, 0.45])
        rows = res.csv_rows()
        assert rows[0] == "subset,class_id,ap50_mean,ap50_std,map_mean,map_std"
        assert rows[1].startswith("novel,1,0.5,0.1,0.375,")
        assert len(rows) == 3

    def test_validation(self):
        split = E.make_split(5, 2, seed=0)
        with pytest.raises(ValueError):
            M.evaluate(self.OracleDetector(), split, "base", 0, 1, 0)
        with pytest.raises(ValueError, match="subset"):
            M.subset_classes(split, "weird")
