"""Deterministic synthetic waveforms, pitch labels and the dataset file format."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dsp import RealSignal
from .errors import ConfigError, ContractError, FormatError, RangeError

SAMPLE_RATE = 16000
WAVEFORM_LEN = 640
PEAK = 0.9

TIMBRE_FAMILIES = ("sine", "square", "sawtooth", "triangle", "am_tone",
                   "noise_burst", "chirp", "harmonic_decay")

DATASET_MAGIC = b"ADFT"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_RECORD = struct.Struct("<HBB")


@dataclass(frozen=True)
class LabelSpec:
    """Geometric (cent-scale) grid of pitch classes plus one noise class."""

    f_min: float = 40.0
    f_max: float = 540.0
    n_pitch_classes: int = 78

    @property
    def noise_class_index(self) -> int:
        return self.n_pitch_classes

    @property
    def total_classes(self) -> int:
        return self.n_pitch_classes + 1

    @property
    def cents_per_class(self) -> float:
        return 1200 * math.log2(self.f_max / self.f_min) / (self.n_pitch_classes - 1)

    def centers(self) -> np.ndarray:
        return np.array([class_to_f0(i, self) for i in range(self.n_pitch_classes)])


DEFAULT_LABELS = LabelSpec()


def f0_to_class(f0: float, spec: LabelSpec = DEFAULT_LABELS) -> int:
    if not spec.f_min <= f0 <= spec.f_max:
        raise RangeError(f"f0 {f0} Hz outside [{spec.f_min}, {spec.f_max}]")
    pos = (spec.n_pitch_classes - 1) * math.log(f0 / spec.f_min) / math.log(spec.f_max / spec.f_min)
    # round half up; the tiny slack absorbs log() error at exact class centres
    return min(int(math.floor(pos + 0.5 + 1e-9)), spec.n_pitch_classes - 1)


def class_to_f0(i: int, spec: LabelSpec = DEFAULT_LABELS) -> float:
    if i == spec.noise_class_index:
        raise ContractError("the noise class has no frequency")
    if not 0 <= i < spec.n_pitch_classes:
        raise RangeError(f"class {i} outside [0, {spec.n_pitch_classes - 1}]")
    return spec.f_min * (spec.f_max / spec.f_min) ** (i / (spec.n_pitch_classes - 1))


# ---------------------------------------------------------------------------
# waveform generators


def _normalize(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x))
    if peak == 0:
        return x
    return x * (PEAK / peak)


def _additive(f0, amps, phases, length, sr, t0=0.0):
    n = np.arange(length) / sr + t0
    out = np.zeros(length)
    for h, (a, ph) in enumerate(zip(amps, phases), start=1):
        if h * f0 >= sr / 2:
            break
        out += a * np.sin(2 * np.pi * h * f0 * n + ph)
    return out


def gen_harmonic(f0: float, n_harmonics: int, decay: float, seed: int,
                 length: int = WAVEFORM_LEN, sr: int = SAMPLE_RATE) -> RealSignal:
    """Sum of harmonics h*f0 with amplitude h**-decay and seeded random phases.

    Harmonics at or above Nyquist are dropped. Peak-normalised to 0.9.
    """
    if f0 <= 0:
        raise RangeError(f"f0 must be positive, got {f0}")
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, n_harmonics)
    amps = np.arange(1, n_harmonics + 1, dtype=np.float64) ** -decay
    return RealSignal(_normalize(_additive(f0, amps, phases, length, sr)), sr)


def n_audible_harmonics(f0: float, n_harmonics: int, sr: int = SAMPLE_RATE) -> int:
    return min(n_harmonics, math.ceil(sr / 2 / f0) - 1)


def _family_wave(family: str, f0: float, rng: np.random.Generator, length: int, sr: int) -> np.ndarray:
    t = np.arange(length) / sr
    nh = 200
    h = np.arange(1, nh + 1, dtype=np.float64)
    phase0 = rng.uniform(0, 2 * np.pi)
    if family == "sine":
        x = np.sin(2 * np.pi * f0 * t + phase0)
    elif family == "square":
        amps = np.where(h % 2 == 1, 1 / h, 0.0)
        x = _additive(f0, amps, np.full(nh, phase0) * h, length, sr)
    elif family == "sawtooth":
        x = _additive(f0, 1 / h, np.full(nh, phase0) * h, length, sr)
    elif family == "triangle":
        amps = np.where(h % 2 == 1, np.where((h // 2) % 2 == 0, 1.0, -1.0) / h ** 2, 0.0)
        x = _additive(f0, amps, np.full(nh, phase0) * h, length, sr)
    elif family == "am_tone":
        carrier = f0 * rng.uniform(4, 12)
        fm = rng.uniform(20, 80)
        depth = rng.uniform(0.5, 1.0)
        x = (1 + depth * np.sin(2 * np.pi * fm * t)) * np.sin(2 * np.pi * carrier * t + phase0)
    elif family == "noise_burst":
        onset = rng.integers(0, length // 2)
        tau = rng.uniform(0.002, 0.01) * sr
        env = np.where(np.arange(length) >= onset, np.exp(-(np.arange(length) - onset) / tau), 0.0)
        x = env * rng.standard_normal(length)
    elif family == "chirp":
        f1 = min(f0 * rng.uniform(4, 16), 0.45 * sr)
        dur = length / sr
        inst = f0 * t + (f1 - f0) * t ** 2 / (2 * dur)
        x = np.sin(2 * np.pi * inst + phase0)
    elif family == "harmonic_decay":
        amps = h ** -rng.uniform(0.5, 2.0)
        x = _additive(f0, amps, rng.uniform(0, 2 * np.pi, nh), length, sr)
        x = x * np.exp(-t / rng.uniform(0.005, 0.02))
    else:
        raise ConfigError(f"unknown waveform family {family!r}")
    return _normalize(x)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    task: str = "pitch"
    n_examples: int = 1000
    seed: int = 0
    harmonics: tuple[int, int] = (1, 12)
    decay: tuple[float, float] = (0.5, 2.0)
    noise_fraction: float = 0.1
    families: tuple[str, ...] = TIMBRE_FAMILIES
    snr_db: tuple[float, float] | None = None
    f_min: float = 40.0
    f_max: float = 540.0
    n_pitch_classes: int = 78
    length: int = WAVEFORM_LEN
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.harmonics = tuple(self.harmonics)
        self.decay = tuple(self.decay)
        self.families = tuple(self.families)
        if self.snr_db is not None:
            self.snr_db = tuple(self.snr_db)
        if self.task not in ("pitch", "timbre", "mixture"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_examples < 1:
            raise ConfigError("n_examples must be >= 1")
        if not 0 <= self.noise_fraction <= 1:
            raise ConfigError(f"noise_fraction must be in [0, 1], got {self.noise_fraction}")
        bad = [f for f in self.families if f not in TIMBRE_FAMILIES]
        if bad:
            raise ConfigError(f"unknown waveform family {bad[0]!r}")

    @property
    def labels(self) -> LabelSpec:
        return LabelSpec(self.f_min, self.f_max, self.n_pitch_classes)

    @property
    def label_arity(self) -> int:
        if self.task == "timbre":
            return len(self.families)
        return self.labels.total_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class Dataset:
    waveforms: np.ndarray  # [n, length], float64 holding float32-exact values
    labels: np.ndarray  # [n] int64
    domains: np.ndarray  # [n] int64
    label_arity: int
    sample_rate: int = SAMPLE_RATE
    version: int = DATASET_VERSION
    f0: np.ndarray | None = field(default=None, repr=False)  # generation-time only, not serialized

    def __post_init__(self):
        self.waveforms = np.asarray(self.waveforms, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.waveforms.ndim != 2:
            raise ConfigError("waveforms must be a 2-D array")
        if np.any(self.labels >= self.label_arity) or np.any(self.labels < 0):
            raise ConfigError("label outside arity")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.waveforms[idx], self.labels[idx], self.domains[idx], self.label_arity,
                       self.sample_rate, self.version, None if self.f0 is None else self.f0[idx])


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(math.log(lo), math.log(hi))))


def _add_noise(x, rng, snr_db):
    if snr_db is None:
        return x
    snr = rng.uniform(*snr_db)
    p = np.mean(x ** 2)
    return _normalize(x + rng.standard_normal(x.size) * math.sqrt(p / 10 ** (snr / 10)))


def _harmonic_example(cfg, rng, f0):
    nh = int(rng.integers(cfg.harmonics[0], cfg.harmonics[1] + 1))
    decay = rng.uniform(*cfg.decay)
    x = gen_harmonic(f0, nh, decay, int(rng.integers(2 ** 31)), cfg.length, cfg.sample_rate).samples
    return _add_noise(x, rng, cfg.snr_db)


def _noise_example(cfg, rng):
    return _normalize(rng.standard_normal(cfg.length))


def gen_dataset(cfg: DatasetConfig) -> Dataset:
    """Build a dataset whose example ``i`` depends only on (cfg, seed, i)."""
    n = cfg.n_examples
    spec = cfg.labels
    order_rng = np.random.default_rng([cfg.seed, 2 ** 32 - 1])
    waves = np.empty((n, cfg.length))
    labels = np.empty(n, dtype=np.int64)
    domains = np.zeros(n, dtype=np.int64)
    f0s = np.full(n, np.nan)

    if cfg.task == "pitch":
        n_noise = int(round(cfg.noise_fraction * n))
        is_noise = np.zeros(n, dtype=bool)
        is_noise[order_rng.permutation(n)[:n_noise]] = True
        kinds = is_noise
    else:
        n_kinds = len(cfg.families) if cfg.task == "timbre" else 2
        kinds = order_rng.permutation(np.arange(n) % n_kinds)

    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        if cfg.task == "pitch":
            if kinds[i]:
                x, lab = _noise_example(cfg, rng), spec.noise_class_index
            else:
                f0 = _log_uniform(rng, spec.f_min, spec.f_max)
                x, lab, f0s[i] = _harmonic_example(cfg, rng, f0), f0_to_class(f0, spec), f0
        elif cfg.task == "timbre":
            fam = int(kinds[i])
            f0 = _log_uniform(rng, spec.f_min, spec.f_max)
            x = _add_noise(_family_wave(cfg.families[fam], f0, rng, cfg.length, cfg.sample_rate), rng, cfg.snr_db)
            lab, f0s[i] = fam, f0
        else:
            dom = int(kinds[i])
            f0 = _log_uniform(rng, spec.f_min, spec.f_max)
            if dom == 0:
                x = _harmonic_example(cfg, rng, f0)
            else:
                fam = ("square", "sawtooth")[int(rng.integers(2))]
                x = _add_noise(_family_wave(fam, f0, rng, cfg.length, cfg.sample_rate), rng, cfg.snr_db)
            lab, f0s[i], domains[i] = f0_to_class(f0, spec), f0, dom
        waves[i] = x
        labels[i] = lab

    waves = waves.astype(np.float32).astype(np.float64)
    return Dataset(waves, labels, domains, cfg.label_arity, cfg.sample_rate, f0=f0s)


def save_dataset(ds: Dataset, path) -> None:
    n, length = ds.waveforms.shape
    head = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.sample_rate, n, length, ds.label_arity)
    rec = np.zeros(n, dtype=np.dtype([("label", "<u2"), ("domain", "u1"), ("pad", "u1"),
                                       ("wave", "<f4", (length,))]))
    rec["label"] = ds.labels
    rec["domain"] = ds.domains
    rec["wave"] = ds.waveforms
    Path(path).write_bytes(head + rec.tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"dataset file truncated: {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, sr, n, length, arity = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic: found {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version: found {version}, expected {DATASET_VERSION}")
    dt = np.dtype([("label", "<u2"), ("domain", "u1"), ("pad", "u1"), ("wave", "<f4", (length,))])
    expected = _HEADER.size + n * dt.itemsize
    if len(raw) != expected:
        raise FormatError(f"dataset size mismatch: found {len(raw)} bytes, expected {expected}")
    rec = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=n)
    return Dataset(rec["wave"].astype(np.float64), rec["label"].astype(np.int64),
                   rec["domain"].astype(np.int64), arity, sr, version)
