"""Optimizer, training loop, checkpoint and history tests.

The Adam update is checked against a hand-rolled reference on a scalar
quadratic; the loop's determinism guarantee is exercised by running the
same config twice and comparing the artifact bytes.
"""

import os

import numpy as np
import pytest

import tmatch.data as dt
import tmatch.net as nt
import tmatch.train as tr
from tmatch.autodiff import Tensor


def _net_cfg(num_classes=3, template=True):
    from tmatch.blocks import ActivationSpec, TemplateBlockConfig
    block = None
    w_last = 8
    if template:
        block = TemplateBlockConfig(num_classes=num_classes, d_in=8, d_value=8)
        w_last = block.out_width
    return nt.NetConfig(
        stages=(nt.StageSpec(1, 4, 8, 1), nt.StageSpec(1, w_last, 8, 2)),
        stem_width=4, num_classes=num_classes, input_channels=3,
        lam=0.5 if template else 0.0, insert_block=block,
        activation=ActivationSpec())


def _dataset(n=60, classes=3, seed=0):
    return dt.synth_dataset(classes, n, size=(12, 12), seed=seed)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            tr.TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            tr.TrainConfig(lam=1.5)
        with pytest.raises(ValueError):
            tr.TrainConfig(splits=(0.5, 0.2))


class TestAdam:
    def test_matches_reference_on_scalar(self):
        # independent reference: textbook bias-corrected Adam sequence
        cfg = tr.TrainConfig(lr=0.1, weight_decay=0.0)
        t = Tensor(np.array([1.0]), requires_grad=True)
        state = tr.AdamState()
        x, m, v = 1.0, 0.0, 0.0
        b1, b2, eps = 0.9, 0.999, 1e-8
        for step in range(1, 6):
            grad = 2.0 * t.data.copy()  # d/dx of x^2
            tr.adam_step([("x", t)], [grad], state, cfg)
            g = 2.0 * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= 0.1 * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
            assert t.data.item() == pytest.approx(x, abs=1e-14)

    def test_weight_decay_pulls_toward_zero(self):
        cfg = tr.TrainConfig(lr=0.01, weight_decay=1.0)
        t = Tensor(np.array([5.0]), requires_grad=True)
        state = tr.AdamState()
        for _ in range(50):
            tr.adam_step([("x", t)], [np.zeros(1)], state, cfg)
        assert abs(t.data.item()) < 5.0

    def test_non_finite_gradient_names_parameter(self):
        cfg = tr.TrainConfig()
        t = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(tr.TrainingDiverged, match="stem.conv"):
            tr.adam_step([("stem.conv", t)], [np.array([np.nan])],
                         tr.AdamState(), cfg)

    def test_moments_keyed_by_name_survive_across_steps(self):
        cfg = tr.TrainConfig(lr=0.1, weight_decay=0.0)
        t = Tensor(np.array([1.0]), requires_grad=True)
        state = tr.AdamState()
        tr.adam_step([("x", t)], [np.array([1.0])], state, cfg)
        assert state.t == 1
        assert "x" in state.m and "x" in state.v
        first_m = state.m["x"].copy()
        tr.adam_step([("x", t)], [np.array([1.0])], state, cfg)
        assert not np.array_equal(state.m["x"], first_m)


class TestTrainLoop:
    def test_loss_decreases_on_tiny_problem(self):
        ds = _dataset()
        train, val, _ = dt.split(ds, (0.7, 0.1, 0.2), seed=0)
        cfg = tr.TrainConfig(epochs=4, seed=0, lam=0.5, batch_size=16)
        net = nt.build_network(_net_cfg(), seed=0)
        history, best = tr.train_loop(net, train, val, cfg)
        assert len(history) == 4
        assert history[-1].train_loss < history[0].train_loss
        assert 1 <= best <= 4

    def test_reruns_are_byte_identical(self, tmp_path):
        ds = _dataset()
        train, val, _ = dt.split(ds, (0.7, 0.1, 0.2), seed=0)
        cfg = tr.TrainConfig(epochs=2, seed=3, lam=0.5, batch_size=16)
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / run
            net = nt.build_network(_net_cfg(), seed=cfg.seed)
            tr.train_loop(net, train, val, cfg, out_dir=str(out))
            blobs.append({name: (out / name).read_bytes()
                          for name in ("history.csv", "best.ckpt", "last.ckpt")})
        assert blobs[0] == blobs[1]

    def test_empty_validation_keeps_last_epoch(self):
        ds = _dataset()
        train, val, _ = dt.split(ds, (0.8, 0.0, 0.2), seed=0)
        cfg = tr.TrainConfig(epochs=3, seed=0, lam=0.5, batch_size=16,
                             splits=(0.8, 0.0, 0.2))
        net = nt.build_network(_net_cfg(), seed=0)
        history, best = tr.train_loop(net, train, val, cfg)
        assert best == 3
        assert all(np.isnan(h.val_acc) for h in history)

    def test_empty_training_set_rejected(self):
        ds = _dataset()
        cfg = tr.TrainConfig(epochs=1)
        net = nt.build_network(_net_cfg(), seed=0)
        with pytest.raises(ValueError, match="empty"):
            tr.train_loop(net, ds.subset(np.array([], dtype=np.int64)), ds, cfg)

    def test_divergence_saves_last_checkpoint(self, tmp_path):
        ds = _dataset()
        train, val, _ = dt.split(ds, (0.7, 0.1, 0.2), seed=0)
        cfg = tr.TrainConfig(epochs=2, seed=0, lam=0.5, batch_size=16)
        net = nt.build_network(_net_cfg(), seed=0)
        # poison one weight: ReLU masks the NaN in the forward pass (NaN > 0
        # is false), so it surfaces as a non-finite BN gradient instead
        net.stem_kernel.data[0, 0, 0, 0] = np.nan
        with pytest.raises(tr.TrainingDiverged, match="non-finite"):
            tr.train_loop(net, train, val, cfg, out_dir=str(tmp_path))
        assert (tmp_path / "last.ckpt").exists()
        assert not (tmp_path / "history.csv").exists()


class TestHistoryCsv:
    def test_round_trip(self, tmp_path):
        history = [tr.EpochStats(1, 2.5, 2.0, 3.0, 0.25),
                   tr.EpochStats(2, 1.25, 1.0, 1.5, float("nan"))]
        path = tmp_path / "history.csv"
        tr.write_history_csv(history, str(path))
        back = tr.read_history_csv(str(path))
        assert back[0] == history[0]
        assert back[1].epoch == 2
        assert np.isnan(back[1].val_acc)

    def test_header_line(self, tmp_path):
        path = tmp_path / "history.csv"
        tr.write_history_csv([tr.EpochStats(1, 1.0, 1.0, 1.0, 0.5)], str(path))
        first = path.read_bytes().split(b"\n")[0]
        assert first == b"epoch,train_loss,main_loss,aux_loss,val_acc"

    def test_float_repr_survives_round_trip(self, tmp_path):
        value = 1.0 / 3.0
        path = tmp_path / "history.csv"
        tr.write_history_csv([tr.EpochStats(1, value, value, value, value)],
                             str(path))
        back = tr.read_history_csv(str(path))
        assert back[0].train_loss == value


class TestCheckpoints:
    def _trained_net(self, seed=0):
        ds = _dataset(n=30)
        train, val, _ = dt.split(ds, (0.7, 0.1, 0.2), seed=0)
        cfg = tr.TrainConfig(epochs=1, seed=seed, lam=0.5, batch_size=16)
        net = nt.build_network(_net_cfg(), seed=seed)
        tr.train_loop(net, train, val, cfg)
        return net

    def test_save_load_save_is_byte_identical(self, tmp_path):
        net = self._trained_net()
        p1 = str(tmp_path / "a.ckpt")
        tr.checkpoint_save(net, p1)
        loaded = tr.checkpoint_load(p1)
        p2 = str(tmp_path / "b.ckpt")
        tr.checkpoint_save(loaded, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_loaded_net_predicts_identically(self, tmp_path):
        net = self._trained_net()
        path = str(tmp_path / "net.ckpt")
        tr.checkpoint_save(net, path)
        loaded = tr.checkpoint_load(path)
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(4, 3, 12, 12))
        np.testing.assert_array_equal(net.forward(x, train=False).main_logits.data,
                                      loaded.forward(x, train=False).main_logits.data)

    def test_magic_and_version_guard(self, tmp_path):
        net = self._trained_net()
        path = str(tmp_path / "net.ckpt")
        tr.checkpoint_save(net, path)
        blob = bytearray(open(path, "rb").read())
        assert bytes(blob[:8]) == b"TMATCHCK"
        blob[0] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="magic"):
            tr.checkpoint_load(str(bad))

    def test_truncated_file_rejected(self, tmp_path):
        net = self._trained_net()
        path = str(tmp_path / "net.ckpt")
        tr.checkpoint_save(net, path)
        blob = open(path, "rb").read()
        bad = tmp_path / "short.ckpt"
        bad.write_bytes(blob[:len(blob) - 20])
        with pytest.raises(ValueError):
            tr.checkpoint_load(str(bad))

    def test_trailing_garbage_rejected(self, tmp_path):
        net = self._trained_net()
        path = str(tmp_path / "net.ckpt")
        tr.checkpoint_save(net, path)
        bad = tmp_path / "long.ckpt"
        bad.write_bytes(open(path, "rb").read() + b"extra")
        with pytest.raises(ValueError, match="trailing"):
            tr.checkpoint_load(str(bad))

    def test_checkpoint_embeds_config(self, tmp_path):
        net = self._trained_net()
        path = str(tmp_path / "net.ckpt")
        tr.checkpoint_save(net, path)
        loaded = tr.checkpoint_load(path)
        assert loaded.cfg == net.cfg


class TestRunConfigText:
    def test_round_trip(self):
        net_cfg = _net_cfg()
        train_cfg = tr.TrainConfig(epochs=7, seed=11, lam=0.25, augment=False)
        text = tr.run_config_to_text(net_cfg, train_cfg)
        back_net, back_train = tr.run_config_from_text(text)
        assert back_net == net_cfg
        assert back_train == train_cfg

    def test_unknown_train_key_rejected(self):
        text = tr.run_config_to_text(_net_cfg(), tr.TrainConfig())
        with pytest.raises(ValueError):
            tr.run_config_from_text(text + "momentum = 0.9\n")

    def test_missing_train_section_rejected(self):
        with pytest.raises(ValueError, match="train"):
            tr.run_config_from_text(nt.net_config_to_text(_net_cfg()))
