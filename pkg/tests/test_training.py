import struct

import numpy as np
import pytest

from adaptft import training
from adaptft.errors import ConfigError, DimensionError, FormatError
from adaptft.frontends import Model, ModelConfig
from adaptft.synth import Dataset, DatasetConfig, gen_dataset
from adaptft.training import (AdamState, Checkpoint, TrainConfig, adam_step, checkpoint_bytes, evaluate,
                              compute_loss, load_checkpoint, parse_checkpoint, save_checkpoint, train)

TINY = ModelConfig(kind="multiplicative", n_classes=22, n_kernels=16, seed=0)
LABELS = dict(f_min=80, f_max=400, n_pitch_classes=21)


@pytest.fixture(scope="module")
def tiny_data():
    return (gen_dataset(DatasetConfig(task="pitch", n_examples=64, seed=1, **LABELS)),
            gen_dataset(DatasetConfig(task="pitch", n_examples=32, seed=2, **LABELS)))


@pytest.fixture(scope="module")
def trained(tiny_data):
    tr, va = tiny_data
    return train(TINY, TrainConfig(epochs=2, batch_size=16, seed=0), tr, va)


def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


class TestAdam:
    def test_matches_reference(self):
        g_seq = np.random.default_rng(0).standard_normal((20, 3))
        params = {"w": np.array([0.5, -1.0, 2.0])}
        state = AdamState()
        expect = reference_adam(params["w"].copy(), g_seq, lr=0.01)
        for g, e in zip(g_seq, expect):
            adam_step(params, {"w": g}, state, lr=0.01)
            np.testing.assert_allclose(params["w"], e, rtol=1e-14)
        assert state.t == 20

    def test_zero_gradient(self):
        params = {"w": np.ones(3)}
        state = AdamState()
        adam_step(params, {"w": np.array([1.0, 1.0, 1.0])}, state)
        before, m_before = params["w"].copy(), state.m["w"].copy()
        adam_step(params, {"w": np.zeros(3)}, state)
        np.testing.assert_allclose(state.m["w"], 0.9 * m_before)
        # the bias-corrected first moment is still nonzero, so the parameter keeps drifting
        assert np.all(params["w"] < before)

    def test_zero_gradient_from_start(self):
        params = {"w": np.array([1.0, 2.0])}
        state = AdamState()
        for _ in range(5):
            adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])

    def test_constant_gradient_step_tends_to_lr(self):
        params = {"w": np.array([0.0, 0.0])}
        state = AdamState()
        prev = params["w"].copy()
        for _ in range(2000):
            adam_step(params, {"w": np.array([3.0, -0.02])}, state, lr=0.01)
            step = params["w"] - prev
            prev = params["w"].copy()
        np.testing.assert_allclose(step, [-0.01, 0.01], rtol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


class TestTrain:
    def test_lr_zero_leaves_params(self, tiny_data):
        tr, va = tiny_data
        sub = tr.subset(range(10))
        init = Model(TINY).state()
        ckpt, hist = train(TINY, TrainConfig(epochs=1, lr=0.0, batch_size=10), sub, va)
        for k, v in init.items():
            np.testing.assert_array_equal(ckpt.params[k], v.astype(np.float32).astype(np.float64))
        m = Model(TINY)
        first = float(compute_loss(m, sub.waveforms, sub.labels, TrainConfig()).data)
        assert hist[0].train_loss == pytest.approx(first, rel=1e-12)

    def test_deterministic(self, tiny_data, trained):
        tr, va = tiny_data
        again = train(TINY, TrainConfig(epochs=2, batch_size=16, seed=0), tr, va)
        assert checkpoint_bytes(again[0]) == checkpoint_bytes(trained[0])

    def test_history_and_best(self, trained):
        ckpt, hist = trained
        assert [h.epoch for h in hist] == [1, 2]
        assert ckpt.history == hist

    def test_arity_mismatch(self, tiny_data):
        tr, va = tiny_data
        with pytest.raises(ConfigError):
            train(ModelConfig(kind="multiplicative", n_classes=79, n_kernels=4), TrainConfig(epochs=1), tr, va)

    def test_overfit_eight_examples(self, tiny_data):
        tr, _ = tiny_data
        eight = tr.subset(range(8))
        ckpt, _ = train(TINY, TrainConfig(epochs=60, batch_size=8, lr=0.01), eight, eight)
        assert evaluate(ckpt, eight).accuracy == 1.0

    def test_huber_loss_trains(self, tiny_data):
        tr, va = tiny_data
        ckpt, hist = train(TINY, TrainConfig(epochs=2, loss="huber", batch_size=16), tr, va)
        assert all(np.isfinite(h.train_loss) for h in hist)

    def test_bad_loss(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss="hinge")


class TestEvaluate:
    def test_repeatable_and_pure(self, tiny_data, trained):
        _, va = tiny_data
        ckpt = trained[0]
        before = {k: v.copy() for k, v in ckpt.params.items()}
        assert evaluate(ckpt, va) == evaluate(ckpt, va)
        for k in before:
            np.testing.assert_array_equal(ckpt.params[k], before[k])

    def test_single_example(self, trained):
        ckpt = trained[0]
        model = ckpt.build_model()
        x = np.zeros((1, 640))
        y = int(np.argmax(model(x).data))
        assert evaluate(ckpt, Dataset(x, [y], [0], 22)).accuracy == 1.0

    def test_incompatible(self, trained):
        with pytest.raises(FormatError):
            evaluate(trained[0], Dataset(np.zeros((2, 640)), [0, 1], [0, 0], 79))


class TestCheckpoint:
    def test_round_trip_logits(self, trained, tiny_data, tmp_path):
        ckpt = trained[0]
        p = tmp_path / "c.adck"
        save_checkpoint(ckpt, p)
        back = load_checkpoint(p)
        x = tiny_data[1].waveforms
        a, b = ckpt.build_model()(x).data, back.build_model()(x).data
        assert np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-12)) <= 1e-6
        assert back.model == ckpt.model and back.train == ckpt.train
        assert back.history == ckpt.history

    def test_bytes_stable(self, trained, tmp_path):
        p = tmp_path / "c.adck"
        save_checkpoint(trained[0], p)
        assert checkpoint_bytes(load_checkpoint(p)) == p.read_bytes()

    def test_layout(self, trained):
        raw = checkpoint_bytes(trained[0])
        assert raw[:4] == b"ADCK"
        version, n = struct.unpack_from("<II", raw, 4)
        assert version == 1 and raw[12 + n:12 + n + 4] == struct.pack("<I", len("frontend.W"))

    def test_bad_magic(self, trained):
        raw = b"NOPE" + checkpoint_bytes(trained[0])[4:]
        with pytest.raises(FormatError, match="found b'NOPE', expected b'ADCK'"):
            parse_checkpoint(raw)

    def test_bad_version(self, trained):
        raw = bytearray(checkpoint_bytes(trained[0]))
        raw[4:8] = struct.pack("<I", 9)
        with pytest.raises(FormatError, match="found 9, expected 1"):
            parse_checkpoint(bytes(raw))

    @pytest.mark.parametrize("cut", [3, 10, 200, -1, -5000])
    def test_truncated(self, trained, cut):
        raw = checkpoint_bytes(trained[0])
        with pytest.raises(FormatError):
            parse_checkpoint(raw[:cut])

    def test_missing_parameter(self, trained):
        ck = trained[0]
        partial = Checkpoint(ck.model, ck.train, {"head.W": ck.params["head.W"]})
        with pytest.raises(FormatError):
            parse_checkpoint(checkpoint_bytes(partial))

    def test_failed_save_leaves_old_file(self, trained, tmp_path, monkeypatch):
        p = tmp_path / "c.adck"
        save_checkpoint(trained[0], p)
        good = p.read_bytes()
        def boom(*a):
            raise OSError("disk full")
        monkeypatch.setattr(training.os, "replace", boom)
        with pytest.raises(OSError):
            save_checkpoint(trained[0], p)
        assert p.read_bytes() == good
        assert [f.name for f in tmp_path.iterdir()] == ["c.adck"]
