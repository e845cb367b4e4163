"""Full detector: backbone + proposals + dual encoders + dual heads.

Owns every parameter tensor and wires one episode through the whole
graph: query -> backbone -> proposals -> RoIAlign -> query encoder;
supports -> backbone -> support encoder -> class-attentive vectors;
pairwise aggregation -> heads -> losses.
"""

from __future__ import annotations

import numpy as np

from . import aggregator, encoders, losses, perception
from . import tensor as T
from .config import TrainConfig
from .encoders import DualEncoder, FusionFlags, FusionWeights, TaskVectors
from .tensor import Tensor


class Detector:
    def __init__(self, cfg: TrainConfig, init_rng: np.random.Generator):
        self.cfg = cfg
        flags = FusionFlags(cls_conv=cfg.fusion_cls_conv, cls_fc=cfg.fusion_cls_fc,
                            reg_conv=cfg.fusion_reg_conv, reg_fc=cfg.fusion_reg_fc)
        self.flags = flags
        self.backbone = perception.Backbone(init_rng)
        self.rpn = perception.RPN(init_rng)
        self.fusion = FusionWeights()
        self.dqe = DualEncoder(init_rng, "dqe", self.backbone.out_channels,
                               cfg.roi_pool, flags)
        self.dag = DualEncoder(init_rng, "dag", self.backbone.out_channels,
                               cfg.roi_pool, flags)
        self.heads = aggregator.DetectionHeads(init_rng, flags.dim("cls"), flags.dim("reg"))
        # classifiers exist only for the meta losses that are switched on
        self.meta_params = {}
        for task, enabled in (("cls", cfg.meta_cls), ("reg", cfg.meta_reg)):
            if not enabled:
                continue
            std = np.sqrt(1.0 / flags.dim(task))
            self.meta_params[f"meta_{task}.w"] = Tensor(
                init_rng.normal(0, std, (flags.dim(task), cfg.num_classes)),
                requires_grad=True)
            self.meta_params[f"meta_{task}.b"] = Tensor(
                np.zeros(cfg.num_classes), requires_grad=True)

    def parameters(self) -> dict:
        params = {}
        params.update(self.backbone.parameters())
        params.update(self.rpn.parameters())
        params.update(self.dqe.parameters())
        params.update(self.dag.parameters())
        params.update(self.fusion.parameters())
        params.update(self.heads.parameters())
        params.update(self.meta_params)
        return params

    # ------------------------------------------------------------------
    # shared sub-passes

    def _query_features(self, image: Tensor) -> perception.FeatureMap:
        """Zero-pad the RGB query to the backbone's 4-channel input."""
        c, h, w = image.shape
        if c == 3:
            padded = Tensor(np.concatenate([image.values, np.zeros((1, h, w))]))
        elif c == 4:
            padded = image
        else:
            raise ValueError(f"query image must have 3 or 4 channels, got {c}")
        return perception.backbone_forward(self.backbone, padded)

    def _encode_rois(self, fm, boxes) -> TaskVectors:
        patches = perception.roi_align_batch(fm, boxes, self.cfg.roi_pool)
        return self.dqe.encode(patches, self.fusion)

    def encode_support_classes(self, support: dict, class_list) -> TaskVectors:
        """Class-attentive vectors for inference-time conditioning."""
        attentive, _, _ = encoders.dag_encode(self.dag, self.backbone, support,
                                              list(class_list), self.fusion)
        return attentive

    # ------------------------------------------------------------------
    # training forward

    def forward_episode(self, episode, sample_rng: np.random.Generator,
                        proposals: perception.ProposalSet = None) -> losses.LossReport:
        """Build the full training graph for one episode and return losses.

        Proposal boxes are decoded outside the graph (no gradient flows
        through box coordinates); passing ``proposals`` holds that detached
        selection fixed, which gradient checks rely on.
        """
        cfg = self.cfg
        class_list = list(episode.class_list)
        _, h, w = episode.query.image.shape
        gt_boxes = np.stack([box for _, box in episode.query.objects])

        fm = self._query_features(episode.query.image)
        rpn_out = self.rpn.forward(fm)
        if proposals is None:
            proposals = perception.rpn_propose(rpn_out, (h, w), True,
                                               cfg.rpn_top_n_train, gt_boxes=gt_boxes)
        rois = self._encode_rois(fm, proposals.boxes)
        attentive, per_support, sup_ids = encoders.dag_encode(
            self.dag, self.backbone, episode.support, class_list, self.fusion)
        pairs = aggregator.aggregate(rois, attentive)
        preds = self.heads.forward(pairs)

        losses.assign_roi_targets(proposals, episode.query.objects, class_list,
                                  pos_iou=cfg.roi_pos_iou)
        rpn_cls, rpn_reg, rcnn_cls, rcnn_reg = losses.faster_rcnn_loss(
            rpn_out, proposals, preds, episode, self.heads.background_logit,
            sample_rng, rpn_pos_iou=cfg.rpn_pos_iou, rpn_neg_iou=cfg.rpn_neg_iou)

        meta_vectors = attentive if cfg.meta_on_averaged else per_support
        meta_ids = class_list if cfg.meta_on_averaged else sup_ids
        if cfg.meta_cls:
            meta_cls = losses.meta_loss(meta_vectors.cls, meta_ids,
                                        self.meta_params["meta_cls.w"],
                                        self.meta_params["meta_cls.b"], cfg.num_classes)
        else:
            meta_cls = Tensor(0.0)
        if cfg.meta_reg:
            meta_reg = losses.meta_loss(meta_vectors.reg, meta_ids,
                                        self.meta_params["meta_reg.w"],
                                        self.meta_params["meta_reg.b"], cfg.num_classes)
        else:
            meta_reg = Tensor(0.0)
        return losses.total_loss(rpn_cls, rpn_reg, rcnn_cls, rcnn_reg, meta_cls, meta_reg)

    # ------------------------------------------------------------------
    # inference

    def detect_scene(self, image: Tensor, attentive: TaskVectors, class_ids,
                     score_thresh: float = None):
        """Score one scene against precomputed class-attentive vectors."""
        cfg = self.cfg
        if score_thresh is None:
            score_thresh = cfg.score_thresh
        _, h, w = image.shape
        fm = self._query_features(image)
        rpn_out = self.rpn.forward(fm)
        proposals = perception.rpn_propose(rpn_out, (h, w), False, cfg.rpn_top_n_test)
        if len(proposals.boxes) == 0:
            return []
        rois = self._encode_rois(fm, proposals.boxes)
        pairs = aggregator.aggregate(rois, attentive)
        preds = self.heads.forward(pairs)
        return aggregator.decode_detections(preds, proposals, class_ids,
                                            self.heads.background_logit,
                                            score_thresh, (h, w))
