"""Loss components: analytic cases, scalar oracle, ablation, coverage."""

import math

import numpy as np
import pytest

from dualdet import config as C
from dualdet import episodes as E
from dualdet import losses as L
from dualdet import perception as P
from dualdet import rng as R
from dualdet import tensor as T
from dualdet import training
from dualdet.aggregator import PairPredictions
from dualdet.detector import Detector
from dualdet.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(scene_size=32, support_size=32, base_k=1, base_m=2,
                max_objects=1, rpn_top_n_train=4, base_episodes=4,
                finetune_episodes=2, log_interval=1)
    base.update(kw)
    return C.TrainConfig(**base).validate()


def make_episode(cfg, seed=0):
    split = training.split_for(cfg)
    m = min(cfg.base_m, len(split.base_classes))
    return E.build_episode("base", split, m, cfg.base_k, R.stream(seed, "ep"),
                           scene_size=(cfg.scene_size, cfg.scene_size),
                           support_size=(cfg.support_size, cfg.support_size),
                           max_objects=cfg.max_objects)


def scalar_bce(x, y):
    return max(x, 0.0) - x * y + math.log1p(math.exp(-abs(x)))


def scalar_smooth_l1(v):
    return 0.5 * v * v if abs(v) < 1.0 else abs(v) - 0.5


def scalar_ce(logits, target):
    mx = max(logits)
    lse = mx + math.log(sum(math.exp(v - mx) for v in logits))
    return lse - logits[target]


class TestSampleRpnAnchors:
    def test_caps(self):
        labels = np.array([1] * 20 + [0] * 50 + [-1] * 10)
        pos, neg = L.sample_rpn_anchors(labels, R.stream(0, "s"))
        assert len(pos) <= 8
        assert len(neg) <= 3 * max(len(pos), 1)
        assert len(pos) + len(neg) <= 32
        assert np.all(labels[pos] == 1) and np.all(labels[neg] == 0)

    def test_deterministic(self):
        labels = np.array([1] * 20 + [0] * 50)
        a = L.sample_rpn_anchors(labels, R.stream(1, "s"))
        b = L.sample_rpn_anchors(labels, R.stream(1, "s"))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestAssignRoiTargets:
    def test_exact_proposal_is_positive_with_zero_target(self):
        gt_box = np.array([8.0, 8.0, 24.0, 24.0])
        props = P.ProposalSet(boxes=gt_box[None, :], objectness=np.ones(1))
        labels, targets = L.assign_roi_targets(props, [(3, gt_box)], [1, 3])
        assert labels[0] == 1            # index of class 3 in class_list
        assert np.allclose(targets[0], 0.0, atol=1e-12)

    def test_disjoint_proposal_is_background(self):
        props = P.ProposalSet(boxes=np.array([[0.0, 0.0, 8.0, 8.0]]),
                              objectness=np.ones(1))
        labels, _ = L.assign_roi_targets(props, [(1, np.array([40.0, 40.0, 60.0, 60.0]))],
                                         [1, 2])
        assert labels[0] == 2            # m = background index


class TestFasterRcnnLoss:
    def setup_instance(self, seed=0, cfg=None):
        cfg = cfg or tiny_cfg()
        det = Detector(cfg, R.stream(seed, "init"))
        ep = make_episode(cfg, seed)
        fm = det._query_features(ep.query.image)
        rpn_out = det.rpn.forward(fm)
        gt = np.stack([b for _, b in ep.query.objects])
        props = P.rpn_propose(rpn_out, (cfg.scene_size,) * 2, True,
                              cfg.rpn_top_n_train, gt_boxes=gt)
        rois = det._encode_rois(fm, props.boxes)
        from dualdet import aggregator, encoders
        att, _, _ = encoders.dag_encode(det.dag, det.backbone, ep.support,
                                        ep.class_list, det.fusion)
        preds = det.heads.forward(aggregator.aggregate(rois, att))
        L.assign_roi_targets(props, ep.query.objects, ep.class_list)
        return det, ep, rpn_out, props, preds

    def test_perfect_predictor_components_vanish(self):
        cfg = tiny_cfg()
        det, ep, rpn_out, props, _ = self.setup_instance(cfg=cfg)
        gt = np.stack([b for _, b in ep.query.objects])
        labels, targets = P.assign_rpn_targets(rpn_out.anchors, gt)
        big = 30.0
        perfect_logits = Tensor(np.where(labels == 1, big, -big).astype(float))
        perfect_deltas = Tensor(targets)
        rpn_perfect = P.RpnOut(logits=perfect_logits, deltas=perfect_deltas,
                               anchors=rpn_out.anchors)
        n, m = len(props.boxes), len(ep.class_list)
        pair_logits = np.full((n, m), -big)
        rows = np.arange(n)[props.labels < m]
        pair_logits[rows, props.labels[rows]] = big
        preds = PairPredictions(cls_logits=Tensor(pair_logits.reshape(-1)),
                                box_deltas=Tensor(np.tile(props.reg_targets, m)
                                                  .reshape(n * m, 4)),
                                n=n, m=m)
        # background logit at 0 dominates the -big pair logits of true
        # background RoIs while losing to the +big logit of positives
        comps = L.faster_rcnn_loss(rpn_perfect, props, preds, ep, Tensor(0.0),
                                   R.stream(0, "s"))
        for c in comps:
            assert c.item() <= 1e-6

    def test_uniform_softmax_gives_log_m_plus_one(self):
        cfg = tiny_cfg(base_m=3)
        det, ep, rpn_out, props, _ = self.setup_instance(cfg=cfg)
        n, m = len(props.boxes), len(ep.class_list)
        preds = PairPredictions(cls_logits=Tensor(np.zeros(n * m)),
                                box_deltas=Tensor(np.zeros((n * m, 4))), n=n, m=m)
        comps = L.faster_rcnn_loss(rpn_out, props, preds, ep, Tensor(0.0),
                                   R.stream(0, "s"))
        assert comps[2].item() == pytest.approx(math.log(m + 1), abs=1e-12)

    def test_components_match_scalar_oracle(self):
        for seed in range(5):
            det, ep, rpn_out, props, preds = self.setup_instance(seed=seed)
            rng_a = R.stream(seed, "oracle")
            rng_b = R.stream(seed, "oracle")
            got = L.faster_rcnn_loss(rpn_out, props, preds, ep,
                                     det.heads.background_logit, rng_a)

            gt = np.stack([b for _, b in ep.query.objects])
            labels, targets = P.assign_rpn_targets(rpn_out.anchors, gt)
            pos, neg = L.sample_rpn_anchors(labels, rng_b)
            sample = np.concatenate([pos, neg])
            logits = rpn_out.logits.values
            want_cls = np.mean([scalar_bce(logits[i], 1.0 if labels[i] == 1 else 0.0)
                                for i in sample])
            want_reg = 0.0
            if len(pos):
                want_reg = np.mean([
                    sum(scalar_smooth_l1(rpn_out.deltas.values[i, c] - targets[i, c])
                        for c in range(4)) for i in pos])
            n, m = preds.n, preds.m
            grid = preds.cls_logits.values.reshape(n, m)
            bg = det.heads.background_logit.item()
            want_rcnn_cls = np.mean([
                scalar_ce(list(grid[i]) + [bg], int(props.labels[i])) for i in range(n)])
            pos_rois = [i for i in range(n) if props.labels[i] < m]
            want_rcnn_reg = 0.0
            if pos_rois:
                acc = 0.0
                for i in pos_rois:
                    row = preds.box_deltas.values[i * m + props.labels[i]]
                    acc += sum(scalar_smooth_l1(row[c] - props.reg_targets[i, c])
                               for c in range(4))
                want_rcnn_reg = acc / len(pos_rois)
            for comp, want in zip(got, (want_cls, want_reg, want_rcnn_cls, want_rcnn_reg)):
                assert comp.item() == pytest.approx(want, abs=1e-10)


class TestMetaLoss:
    def test_uniform_classifier_gives_log_num_classes(self):
        vecs = Tensor(np.random.default_rng(0).uniform(-1, 1, (6, 16)))
        w = Tensor(np.zeros((16, 5)))
        b = Tensor(np.zeros(5))
        loss = L.meta_loss(vecs, [0, 1, 2, 3, 4, 0], w, b, 5)
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_separable_logits_vanish(self):
        vecs = Tensor(np.eye(5) * 100.0)
        w = Tensor(np.eye(5))
        b = Tensor(np.zeros(5))
        loss = L.meta_loss(vecs, [0, 1, 2, 3, 4], w, b, 5)
        assert loss.item() <= 1e-6

    def test_unknown_class_id_errors(self):
        vecs = Tensor(np.zeros((1, 4)))
        with pytest.raises(ValueError, match="unknown class id"):
            L.meta_loss(vecs, [7], Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)), 5)


class TestTotalLoss:
    def test_zeros(self):
        report = L.total_loss(*[Tensor(0.0)] * 6)
        assert report.total.item() == 0.0

    def test_simple_sum(self):
        report = L.total_loss(*[Tensor(float(v)) for v in (1, 2, 3, 4, 5, 6)])
        assert report.total.item() == 21.0

    def test_total_equals_component_sum_within_tolerance(self):
        cfg = tiny_cfg()
        det = Detector(cfg, R.stream(0, "init"))
        ep = make_episode(cfg)
        report = det.forward_episode(ep, R.stream(0, "s"))
        vals = report.as_floats()
        parts = sum(vals[k] for k in ("rpn_cls", "rpn_reg", "rcnn_cls",
                                      "rcnn_reg", "meta_cls", "meta_reg"))
        assert abs(vals["total"] - parts) <= 1e-12

    def test_components_nonnegative_over_random_episodes(self):
        cfg = tiny_cfg()
        det = Detector(cfg, R.stream(1, "init"))
        for seed in range(5):
            report = det.forward_episode(make_episode(cfg, seed), R.stream(seed, "s"))
            for v in report.as_floats().values():
                assert v >= 0.0

    def test_backward_reaches_every_parameter(self):
        cfg = tiny_cfg()
        det = Detector(cfg, R.stream(2, "init"))
        ep = make_episode(cfg, 3)
        with T.Tape():
            report = det.forward_episode(ep, R.stream(3, "s"))
            T.backward(report.total)
        for name, p in det.parameters().items():
            assert p.grad is not None, f"no gradient reached {name}"

    def test_meta_ablation_reduces_total_to_detector_loss(self):
        cfg = tiny_cfg(meta_cls=False, meta_reg=False)
        det = Detector(cfg, R.stream(4, "init"))
        report = det.forward_episode(make_episode(cfg, 1), R.stream(1, "s"))
        vals = report.as_floats()
        assert vals["meta_cls"] == 0.0 and vals["meta_reg"] == 0.0
        frcnn = vals["rpn_cls"] + vals["rpn_reg"] + vals["rcnn_cls"] + vals["rcnn_reg"]
        assert vals["total"] == pytest.approx(frcnn, abs=1e-15)

    def test_single_meta_ablation(self):
        cfg = tiny_cfg(meta_cls=True, meta_reg=False)
        det = Detector(cfg, R.stream(5, "init"))
        report = det.forward_episode(make_episode(cfg, 2), R.stream(2, "s"))
        assert report.meta_reg.item() == 0.0
        assert report.meta_cls.item() > 0.0


class TestOverfitSanity:
    def test_fifty_steps_halve_the_loss(self):
        cfg = tiny_cfg()
        det = Detector(cfg, R.stream(6, "init"))
        ep = make_episode(cfg, 4)
        params = det.parameters()
        state = {}
        first = last = None
        for step in range(50):
            with T.Tape():
                report = det.forward_episode(ep, R.stream(4, "s"))
                T.backward(report.total)
            if first is None:
                first = report.total.item()
            last = report.total.item()
            training.sgd_step(params, state, cfg.lr, cfg.momentum, cfg.weight_decay)
        assert last <= 0.5 * first, f"loss only went {first:.3f} -> {last:.3f}"
