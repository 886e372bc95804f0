"""Turn trained weights into frequency-sorted maps, comb maps and kernel tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import dft_rows
from .errors import ContractError, DimensionError
from .frontends import AdaptiveFrontEnd
from .tensor import Tensor

CSV_HEADER = ("neuron", "peak_hz", "bandwidth_hz")


@dataclass
class SortedFilterMap:
    perm: np.ndarray  # sorted position -> original neuron index
    mags: np.ndarray  # [M, N//2 + 1], rows in sorted order
    peak_bins: np.ndarray  # sorted order
    bandwidths: np.ndarray  # bins, sorted order
    n_fft: int
    sample_rate: int

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.n_fft

    @property
    def peak_hz(self) -> np.ndarray:
        return self.peak_bins * self.bin_hz

    def fraction_below(self, f_hz: float) -> float:
        if len(self.peak_bins) == 0:
            return 0.0
        return float(np.mean(self.peak_hz < f_hz))


@dataclass
class CombMap:
    matrix: np.ndarray  # [C, M]
    perm: np.ndarray


@dataclass
class NeuronProfile:
    index: int
    kernel: np.ndarray
    peak_hz: float
    bandwidth_hz: float
    centroid_hz: float


def one_sided_magnitudes(W: np.ndarray, n_fft: int | None = None) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    n = W.shape[1] if n_fft is None else n_fft
    return np.abs(dft_rows(W, n))[:, : n // 2 + 1]


def bandwidth_db(mags, drop_db: float = 3.0) -> float:
    """Width in bins of the contiguous region around the peak above peak - drop_db.

    Crossings are located by linear interpolation between neighbouring bins.
    Returns NaN for an all-zero row. Widths below one bin are floored to 1.
    """
    m = np.asarray(mags, dtype=np.float64)
    if m.size == 0:
        raise DimensionError("bandwidth of an empty spectrum")
    p = int(np.argmax(m))
    peak = m[p]
    if peak <= 0:
        return math.nan
    thr = peak * 10 ** (-drop_db / 20)
    lo = p
    while lo > 0 and m[lo - 1] >= thr:
        lo -= 1
    hi = p
    while hi < m.size - 1 and m[hi + 1] >= thr:
        hi += 1
    left = 0.0 if lo == 0 else lo - (m[lo] - thr) / (m[lo] - m[lo - 1])
    right = float(hi) if hi == m.size - 1 else hi + (m[hi] - thr) / (m[hi] - m[hi + 1])
    return max(right - left, 1.0)


def sort_neurons_by_peak(W, sr: int) -> SortedFilterMap:
    """Stable sort of kernels by the one-sided DFT peak bin (ties keep original order)."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    n = W.shape[1]
    mags = one_sided_magnitudes(W)
    peaks = np.argmax(mags, axis=1)
    perm = np.argsort(peaks, kind="stable")
    mags = mags[perm]
    bws = np.array([bandwidth_db(r) for r in mags])
    return SortedFilterMap(perm, mags, peaks[perm], bws, n, sr)


def comb_map(W2, perm) -> CombMap:
    W2 = np.asarray(W2, dtype=np.float64)
    perm = np.asarray(perm)
    if W2.ndim != 2 or perm.shape != (W2.shape[1],):
        raise DimensionError(f"permutation of length {perm.size} for head with {W2.shape[-1]} columns")
    return CombMap(W2[:, perm], perm)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def comb_template(f0: float, sorted_peak_hz, sr: int, sigma_cents: float = 30.0) -> np.ndarray:
    """Gaussian bumps (in cents) around the sorted neurons nearest each harmonic of f0."""
    freqs = np.asarray(sorted_peak_hz, dtype=np.float64)
    safe = np.maximum(freqs, 1e-3)
    template = np.zeros(freqs.size)
    for h in range(1, int((sr / 2) // f0) + 1):
        j = int(np.argmin(np.abs(freqs - h * f0)))
        cents = 1200 * np.log2(safe / max(freqs[j], 1e-3))
        template += np.exp(-0.5 * (cents / sigma_cents) ** 2)
    return template


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return math.nan
    return float(a @ b) / den


def harmonic_template_score(row, f0: float, sorted_peak_hz, sr: int = 16000,
                            sigma_cents: float = 30.0) -> float:
    """Pearson correlation of |row| with the ideal comb for ``f0``; NaN if undefined."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != np.shape(sorted_peak_hz):
        raise DimensionError(f"row length {row.size} != {np.size(sorted_peak_hz)} sorted neurons")
    return pearson(np.abs(row), comb_template(f0, sorted_peak_hz, sr, sigma_cents))


def neuron_profiles(W, sr: int) -> list[NeuronProfile]:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    n = W.shape[1]
    mags = one_sided_magnitudes(W)
    bin_hz = sr / n
    freqs = np.arange(mags.shape[1]) * bin_hz
    out = []
    for i, (k, m) in enumerate(zip(W, mags)):
        bw = bandwidth_db(m)
        total = m.sum()
        centroid = float(m @ freqs / total) if total > 0 else math.nan
        out.append(NeuronProfile(i, k, float(np.argmax(m) * bin_hz), bw * bin_hz, centroid))
    return out


def mutual_information_bits(joint) -> float:
    """I(X;Y) in bits from a joint count table."""
    joint = np.asarray(joint, dtype=np.float64)
    total = joint.sum()
    if total == 0:
        return 0.0
    p = joint / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / (px @ py)[nz])))


@dataclass
class RouterUsage:
    joint: np.ndarray  # [n_domains, K] counts
    mi_bits: float

    def to_dict(self) -> dict:
        return {"joint": self.joint.tolist(), "mi_bits": self.mi_bits,
                "expert_totals": self.joint.sum(axis=0).tolist()}


def router_usage(model, ds, batch_size: int = 256) -> RouterUsage:
    """Hard-argmax expert per example, cross-tabulated against domain tags."""
    fe = getattr(model, "frontend", None)
    if not isinstance(fe, AdaptiveFrontEnd):
        raise ContractError("router usage needs an adaptive model")
    K = len(fe.experts)
    n_dom = int(ds.domains.max()) + 1 if len(ds) else 1
    joint = np.zeros((n_dom, K), dtype=np.int64)
    for s in range(0, len(ds), batch_size):
        x = ds.waveforms[s:s + batch_size]
        chosen = np.argmax(fe.gates(Tensor(x)).data, axis=1)
        np.add.at(joint, (ds.domains[s:s + batch_size], chosen), 1)
    return RouterUsage(joint, mutual_information_bits(joint))


# ---------------------------------------------------------------------------
# exports


def to_gray(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ValueError("heatmap needs a finite 2-D matrix")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255).astype(np.uint8)


def export_heatmap(matrix, path) -> None:
    """Binary PGM (P5), min-max scaled, first matrix row at the top."""
    px = to_gray(matrix)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w)


def export_kernels_csv(W, path, sr: int = 16000, indices=None) -> None:
    """One kernel per row: neuron index, peak Hz, -3 dB bandwidth Hz, then samples (%.17g)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError(f"kernel matrix must be 2-D, got shape {W.shape}")
    profiles = neuron_profiles(W, sr) if len(W) else []
    indices = range(len(W)) if indices is None else indices
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*CSV_HEADER, *(f"s{i}" for i in range(W.shape[1]))])
        for idx, prof in zip(indices, profiles):
            w.writerow([idx, f"{prof.peak_hz:.17g}", f"{prof.bandwidth_hz:.17g}",
                        *(f"{v:.17g}" for v in prof.kernel)])


def read_kernels_csv(path) -> tuple[list[int], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    n = len(rows[0]) - len(CSV_HEADER)
    idx = [int(r[0]) for r in rows[1:]]
    W = np.array([[float(v) for v in r[len(CSV_HEADER):]] for r in rows[1:]]).reshape(len(idx), n)
    return idx, W


def export_profiles_csv(profiles: list[NeuronProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["neuron", "peak_hz", "bandwidth_hz", "centroid_hz"])
        for p in profiles:
            w.writerow([p.index, f"{p.peak_hz:.17g}", f"{p.bandwidth_hz:.17g}", f"{p.centroid_hz:.17g}"])
