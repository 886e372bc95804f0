import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptft import dsp
from adaptft.errors import ConfigError, ContractError, FormatError, RangeError
from adaptft.synth import (DATASET_MAGIC, DEFAULT_LABELS, DatasetConfig, LabelSpec, class_to_f0, f0_to_class,
                           gen_dataset, gen_harmonic, load_dataset, n_audible_harmonics, save_dataset)

SMALL = LabelSpec(80.0, 400.0, 21)


class TestLabels:
    def test_edges(self):
        assert f0_to_class(40.0) == 0
        assert f0_to_class(540.0) == 77

    def test_geometric_midpoint_rounds_up(self):
        assert f0_to_class(math.sqrt(40 * 540)) == 39

    def test_octave(self):
        assert f0_to_class(80.0) == 21

    def test_centers(self):
        assert class_to_f0(0) == pytest.approx(40.0)
        assert class_to_f0(77) == pytest.approx(540.0)
        assert class_to_f0(39) == pytest.approx(40 * 13.5 ** (39 / 77), rel=1e-12)  # ~149.47 Hz
        assert f0_to_class(class_to_f0(39)) == 39

    def test_round_trip_all_classes(self):
        for spec in (DEFAULT_LABELS, SMALL):
            assert [f0_to_class(class_to_f0(i, spec), spec) for i in range(spec.n_pitch_classes)] == \
                list(range(spec.n_pitch_classes))

    def test_cents_per_class(self):
        assert DEFAULT_LABELS.cents_per_class == pytest.approx(4505.9 / 77, rel=1e-4)

    def test_noise_class(self):
        assert DEFAULT_LABELS.noise_class_index == 78 and DEFAULT_LABELS.total_classes == 79
        with pytest.raises(ContractError):
            class_to_f0(78)

    @pytest.mark.parametrize("f0", [39.99, 540.01, 0.0, -5.0])
    def test_out_of_range(self, f0):
        with pytest.raises(RangeError):
            f0_to_class(f0)

    def test_bad_class(self):
        with pytest.raises(RangeError):
            class_to_f0(-1)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(40, 540), st.floats(40, 540))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert f0_to_class(lo) <= f0_to_class(hi)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(40, 540))
    def test_within_half_bin(self, f0):
        i = f0_to_class(f0)
        assert abs(1200 * math.log2(f0 / class_to_f0(i))) <= DEFAULT_LABELS.cents_per_class / 2 + 1e-6


class TestHarmonic:
    def test_pure_tone_peak(self):
        x = gen_harmonic(250.0, 1, 1.0, seed=0).samples
        assert dsp.peak_bin(dsp.dft(x).magnitude(), one_sided=True) == round(250 * 640 / 16000)

    def test_nyquist_truncation(self):
        assert n_audible_harmonics(100.0, 200) == 79
        full = gen_harmonic(100.0, 200, 0.0, seed=1).samples
        trunc = gen_harmonic(100.0, 79, 0.0, seed=1).samples
        np.testing.assert_array_equal(full, trunc)

    def test_deterministic(self):
        a = gen_harmonic(123.0, 8, 1.0, seed=5).samples
        b = gen_harmonic(123.0, 8, 1.0, seed=5).samples
        assert a.tobytes() == b.tobytes()

    def test_peak_normalized(self):
        assert np.max(np.abs(gen_harmonic(77.0, 6, 0.7, seed=2).samples)) == pytest.approx(0.9)

    def test_bad_f0(self):
        with pytest.raises(RangeError):
            gen_harmonic(0.0, 3, 1.0, seed=0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(80, 540), st.integers(1, 12), st.integers(0, 2 ** 31 - 1))
    def test_peak_near_fundamental_bin(self, f0, nh, seed):
        # decay 2 keeps the fundamental dominant
        x = gen_harmonic(f0, nh, 2.0, seed=seed).samples
        peak = dsp.peak_bin(dsp.dft(x).magnitude(), one_sided=True)
        assert abs(peak - round(f0 * 640 / 16000)) <= 1


class TestDataset:
    def test_noise_count(self):
        ds = gen_dataset(DatasetConfig(task="pitch", n_examples=100, noise_fraction=0.1, seed=3))
        assert int(np.sum(ds.labels == 78)) == 10
        assert ds.waveforms.shape == (100, 640) and ds.label_arity == 79

    def test_timbre_balanced(self):
        ds = gen_dataset(DatasetConfig(task="timbre", n_examples=80, seed=0))
        assert np.bincount(ds.labels).tolist() == [10] * 8

    def test_mixture_domains(self):
        ds = gen_dataset(DatasetConfig(task="mixture", n_examples=40, seed=0, f_min=80, f_max=400,
                                       n_pitch_classes=21, noise_fraction=0.0))
        assert np.bincount(ds.domains).tolist() == [20, 20]
        assert ds.label_arity == 22 and ds.labels.max() < 21

    def test_deterministic(self):
        cfg = DatasetConfig(task="pitch", n_examples=30, seed=9)
        assert gen_dataset(cfg).waveforms.tobytes() == gen_dataset(cfg).waveforms.tobytes()

    def test_seeds_differ(self):
        a = gen_dataset(DatasetConfig(n_examples=5, seed=1)).waveforms
        b = gen_dataset(DatasetConfig(n_examples=5, seed=2)).waveforms
        assert not np.array_equal(a, b)

    def test_labels_match_f0(self):
        ds = gen_dataset(DatasetConfig(task="pitch", n_examples=200, seed=4))
        for lab, f0 in zip(ds.labels, ds.f0):
            if lab == 78:
                assert np.isnan(f0)
            else:
                assert abs(1200 * math.log2(f0 / class_to_f0(int(lab)))) <= 29.3

    def test_waveforms_f32_exact(self):
        w = gen_dataset(DatasetConfig(n_examples=4, seed=0)).waveforms
        assert np.array_equal(w, w.astype(np.float32).astype(np.float64))

    def test_bad_family(self):
        with pytest.raises(ConfigError):
            DatasetConfig(task="timbre", families=("sine", "kazoo"))

    @pytest.mark.parametrize("kw", [{"n_examples": 0}, {"noise_fraction": 1.5}, {"task": "speech"}])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            DatasetConfig(**kw)


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        ds = gen_dataset(DatasetConfig(task="mixture", n_examples=12, seed=1))
        p = tmp_path / "d.bin"
        save_dataset(ds, p)
        back = load_dataset(p)
        assert back.waveforms.tobytes() == ds.waveforms.tobytes()
        assert back.labels.tolist() == ds.labels.tolist()
        assert back.domains.tolist() == ds.domains.tolist()
        assert back.label_arity == ds.label_arity

    def test_header_layout(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(gen_dataset(DatasetConfig(n_examples=3, seed=0)), p)
        raw = p.read_bytes()
        assert raw[:4] == DATASET_MAGIC
        assert np.frombuffer(raw[4:24], "<u4").tolist() == [1, 16000, 3, 640, 79]
        assert len(raw) == 24 + 3 * (4 + 640 * 4)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(gen_dataset(DatasetConfig(n_examples=2, seed=0)), p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"XXXX"
        p.write_bytes(raw)
        with pytest.raises(FormatError, match="found b'XXXX'"):
            load_dataset(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(gen_dataset(DatasetConfig(n_examples=2, seed=0)), p)
        raw = bytearray(p.read_bytes())
        raw[4] = 7
        p.write_bytes(raw)
        with pytest.raises(FormatError, match="found 7, expected 1"):
            load_dataset(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(gen_dataset(DatasetConfig(n_examples=2, seed=0)), p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_dataset(p)
