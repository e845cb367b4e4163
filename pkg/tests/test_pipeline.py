"""Training loop: SGD semantics, determinism, checkpoints, freezing."""

import os

import numpy as np
import pytest

from dualdet import archive
from dualdet import checkpoint as CK
from dualdet import config as C
from dualdet import episodes as E
from dualdet import rng as R
from dualdet import training
from dualdet.detector import Detector
from dualdet.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(scene_size=32, support_size=32, base_k=1, base_m=2, max_objects=1,
                rpn_top_n_train=4, rpn_top_n_test=6, base_episodes=6,
                finetune_episodes=4, finetune_k=1, log_interval=2,
                base_decay_interval=3, finetune_decay_interval=2,
                eval_scenes=2, eval_repeats=1)
    base.update(kw)
    return C.TrainConfig(**base).validate()


class TestSgdStep:
    def test_vanilla_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([0.5, -0.5])
        training.sgd_step({"p": p}, {}, lr=1.0, momentum=0.0, weight_decay=0.0)
        assert np.array_equal(p.values, [0.5, 2.5])
        assert p.grad is None

    def test_zero_grad_zero_wd_is_fixed_point(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = np.zeros(1)
        training.sgd_step({"p": p}, {}, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert np.array_equal(p.values, [3.0])

    def test_momentum_matches_hand_recurrence(self):
        lr, mom, wd = 0.1, 0.9, 0.01
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = {}
        grads = [np.array([0.3]), np.array([-0.2])]
        # hand-unrolled reference
        val, vel = 1.0, 0.0
        for g in grads:
            vel = mom * vel + g[0] + wd * val
            val = val - lr * vel
        for g in grads:
            p.grad = g.copy()
            training.sgd_step({"p": p}, state, lr, mom, wd)
        assert abs(p.values[0] - val) <= 1e-12

    def test_missing_grad_errors(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError, match="no gradient"):
            training.sgd_step({"p": p}, {}, 0.1, 0.0, 0.0)

    def test_frozen_param_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([5.0])
        training.sgd_step({"backbone.w": p}, {}, 0.1, 0.0, 0.0, freeze=("backbone",))
        assert np.array_equal(p.values, [1.0])
        assert p.grad is None


class TestTrainBase:
    def test_zero_episodes_is_noop(self):
        cfg = tiny_cfg(base_episodes=0)
        det0 = Detector(cfg, R.stream(cfg.seed, "init"))
        ckpt, rows = training.train_base(cfg)
        assert ckpt.iteration == 0
        for name, p in det0.parameters().items():
            assert np.array_equal(ckpt.params[name], p.values)
        assert rows == [training.LOG_HEADER]

    def test_fixed_seed_gives_bit_identical_checkpoints(self):
        cfg = tiny_cfg()
        a, rows_a = training.train_base(cfg)
        b, rows_b = training.train_base(cfg)
        assert rows_a == rows_b
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name]), name
        for name in a.momentum:
            assert np.array_equal(a.momentum[name], b.momentum[name]), name

    def test_log_schema_and_lambda_start(self):
        cfg = tiny_cfg()
        _, rows = training.train_base(cfg)
        assert rows[0] == training.LOG_HEADER
        assert len(rows[0].split(",")) == 13
        first = rows[1].split(",")
        assert first[0] == "0"
        assert first[-4:] == ["1.0", "1.0", "1.0", "1.0"]
        for row in rows[1:]:
            assert len(row.split(",")) == 13

    def test_lr_decay_schedule_in_log(self):
        cfg = tiny_cfg(base_episodes=7, base_decay_interval=3, log_interval=1)
        _, rows = training.train_base(cfg)
        lrs = [float(r.split(",")[1]) for r in rows[1:]]
        assert lrs[0] == cfg.lr
        assert lrs[3] == pytest.approx(cfg.lr * 0.1)
        assert lrs[6] == pytest.approx(cfg.lr * 0.01)

    def test_freeze_flags_keep_parameters_bit_identical(self):
        cfg = tiny_cfg(freeze=["backbone", "rpn"])
        det0 = Detector(cfg, R.stream(cfg.seed, "init"))
        frozen_before = {k: v.values.copy() for k, v in det0.parameters().items()
                         if k.startswith(("backbone", "rpn"))}
        ckpt, _ = training.train_base(cfg)
        for name, before in frozen_before.items():
            assert np.array_equal(ckpt.params[name], before), name
        moved = [name for name in ckpt.params
                 if not name.startswith(("backbone", "rpn"))
                 and not np.array_equal(ckpt.params[name],
                                        det0.parameters()[name].values)]
        assert moved, "unfrozen parameters should have trained"

    def test_prefetch_thread_matches_inline(self, monkeypatch):
        cfg = tiny_cfg()
        monkeypatch.delenv("AFD_THREADS", raising=False)
        inline, rows_inline = training.train_base(cfg)
        monkeypatch.setenv("AFD_THREADS", "1")
        threaded, rows_threaded = training.train_base(cfg)
        assert rows_inline == rows_threaded
        for name in inline.params:
            assert np.array_equal(inline.params[name], threaded.params[name])


class TestFinetune:
    def test_novel_pool_fixed_across_episodes(self):
        cfg = tiny_cfg()
        split = training.split_for(cfg)
        pool = E.sample_novel_pool(split, 2, R.stream(cfg.seed, "novelpool", 2),
                                   (32, 32), (32, 32))
        seen = {cid: set() for cid in split.novel_classes}
        for i in range(1, 10, 2):  # novel-query episodes
            ep = E.build_episode("finetune", split, len(split.all_classes), 2,
                                 R.stream(cfg.seed, "finetune", i), scene_size=(32, 32),
                                 support_size=(32, 32), novel_pool=pool,
                                 query_pool=split.novel_classes)
            for cid in split.novel_classes:
                for sup in ep.support[cid]:
                    seen[cid].add(sup.image_with_mask.values.tobytes())
        for cid in split.novel_classes:
            pool_bytes = {s.image_with_mask.values.tobytes() for s in pool.supports[cid]}
            assert seen[cid] <= pool_bytes

    def test_unusual_k_warns_but_runs(self):
        cfg = tiny_cfg(finetune_episodes=1)
        base, _ = training.train_base(cfg)
        with pytest.warns(UserWarning, match="usual shot counts"):
            ckpt, _ = training.finetune(base, 4, cfg)
        assert ckpt.iteration == base.iteration + 1

    def test_iteration_continues_from_base(self):
        cfg = tiny_cfg()
        base, _ = training.train_base(cfg)
        ft, rows = training.finetune(base, 1, cfg)
        assert ft.iteration == base.iteration + cfg.finetune_episodes
        first_logged = int(rows[1].split(",")[0])
        assert first_logged == base.iteration


class TestCheckpointIO:
    def test_round_trip_is_bitwise(self, tmp_path):
        cfg = tiny_cfg()
        ckpt, _ = training.train_base(cfg)
        path = str(tmp_path / "model.ckpt")
        CK.save_checkpoint(ckpt, path)
        loaded = CK.load_checkpoint(path)
        assert loaded.iteration == ckpt.iteration
        assert loaded.config == ckpt.config
        for name in ckpt.params:
            assert np.array_equal(loaded.params[name], ckpt.params[name]), name
        for name in ckpt.momentum:
            assert np.array_equal(loaded.momentum[name], ckpt.momentum[name]), name

    def test_forward_outputs_bitwise_after_reload(self, tmp_path):
        cfg = tiny_cfg()
        ckpt, _ = training.train_base(cfg)
        path = str(tmp_path / "model.ckpt")
        CK.save_checkpoint(ckpt, path)
        det_a = CK.restore_detector(ckpt)
        det_b = CK.restore_detector(CK.load_checkpoint(path))
        split = training.split_for(cfg)
        ep = E.build_episode("base", split, 2, 1, R.stream(9, "probe"),
                             scene_size=(32, 32), support_size=(32, 32))
        ra = det_a.forward_episode(ep, R.stream(9, "s"))
        rb = det_b.forward_episode(ep, R.stream(9, "s"))
        assert ra.total.values == rb.total.values

    def test_truncated_file_errors_without_state_change(self, tmp_path):
        cfg = tiny_cfg()
        ckpt, _ = training.train_base(cfg)
        path = str(tmp_path / "model.ckpt")
        CK.save_checkpoint(ckpt, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:len(raw) // 2])
        with pytest.raises(CK.CheckpointError, match="truncated|corrupt"):
            CK.load_checkpoint(path)

    def test_bad_magic_errors(self, tmp_path):
        path = str(tmp_path / "bad.ckpt")
        open(path, "wb").write(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CK.CheckpointError, match="magic"):
            CK.load_checkpoint(path)

    def test_shape_mismatch_names_tensor_and_shapes(self, tmp_path):
        cfg = tiny_cfg()
        ckpt, _ = training.train_base(cfg)
        ckpt.params["rpn.conv.b"] = np.zeros(7)
        with pytest.raises(CK.CheckpointError,
                           match=r"rpn\.conv\.b.*\(7,\).*\(32,\)"):
            CK.restore_detector(ckpt)

    def test_missing_tensor_named(self):
        cfg = tiny_cfg()
        ckpt, _ = training.train_base(cfg)
        del ckpt.params["head_cls.background"]
        with pytest.raises(CK.CheckpointError, match="head_cls.background"):
            CK.restore_detector(ckpt)

    def test_archive_format_header(self, tmp_path):
        path = str(tmp_path / "t.bin")
        archive.write_archive(path, {"a": np.arange(3.0), "s": np.asarray(2.0)})
        raw = open(path, "rb").read()
        assert raw[:4] == b"AFDN"
        back = archive.read_archive(path)
        assert list(back) == ["a", "s"]
        assert back["s"].shape == ()
        assert np.array_equal(back["a"], [0.0, 1.0, 2.0])


class TestNumericAbort:
    def test_abort_carries_episode_stream_key(self):
        cfg = tiny_cfg(base_episodes=6, lr=1e9)  # certain blow-up
        with np.errstate(all="ignore"), \
                pytest.raises(training.NumericAbort, match=r"stream key \(0, 'base'"):
            training.train_base(cfg)


class TestEvaluateCheckpoint:
    def test_untrained_model_scores_near_zero(self):
        cfg = tiny_cfg(base_episodes=0, scene_size=64)
        ckpt, _ = training.train_base(cfg)
        res = training.evaluate_checkpoint(ckpt, "base", repeats=2, num_scenes=4)
        assert res.map_mean <= 0.05

    def test_repeats_reported(self):
        cfg = tiny_cfg(base_episodes=0, scene_size=64)
        ckpt, _ = training.train_base(cfg)
        res = training.evaluate_checkpoint(ckpt, "novel", repeats=3, num_scenes=2)
        assert len(res.per_repeat_map) == 3
        assert res.map_std >= 0.0
