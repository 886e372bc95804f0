"""Classical transforms and filters used as reference oracles.

The DFT here is the naive O(N^2) sum on purpose; no FFT anywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SizeError


@dataclass
class RealSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise SizeError("signal needs at least one sample")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass
class ComplexSpectrum:
    re: np.ndarray
    im: np.ndarray

    @classmethod
    def from_complex(cls, z) -> "ComplexSpectrum":
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)

    def __len__(self):
        return len(self.re)


@dataclass
class Window:
    kind: str
    values: np.ndarray

    def __len__(self):
        return len(self.values)


@dataclass
class CombParams:
    alpha: float
    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"comb delay K must be >= 1, got {self.K}")


def _samples(x) -> np.ndarray:
    if isinstance(x, RealSignal):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def dft_matrix(n: int) -> np.ndarray:
    """E[m, k] = exp(-2j*pi*m*k/n); index products reduced mod n for accuracy."""
    idx = np.arange(n)
    return np.exp(-2j * np.pi * (np.outer(idx, idx) % n) / n)


def dft(x) -> ComplexSpectrum:
    """X[m] = sum_n x[n] exp(-2 pi i n m / N), evaluated directly."""
    s = _samples(x)
    if s.size < 1:
        raise SizeError("dft needs at least one sample")
    return ComplexSpectrum.from_complex(dft_matrix(s.size) @ s)


def dft_rows(rows: np.ndarray, n_out: int | None = None) -> np.ndarray:
    """Naive DFT of every row, optionally zero-padded to ``n_out`` points."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n = rows.shape[1] if n_out is None else n_out
    if n < rows.shape[1]:
        raise SizeError(f"cannot evaluate {rows.shape[1]} samples on {n} points")
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * (np.outer(np.arange(rows.shape[1]), k) % n) / n)
    return rows @ basis


def idft(spec: ComplexSpectrum) -> np.ndarray:
    # Only used to check reconstruction.
    X = spec.to_complex()
    n = X.size
    return (np.conj(dft_matrix(n)) @ X / n).real


def dct1(x) -> np.ndarray:
    """X_k = (x_0 + (-1)^k x_{N-1})/2 + sum_{n=1}^{N-2} x_n cos(pi n k / (N-1))."""
    x = np.asarray(x, dtype=np.float64)
    N = x.size
    if N < 2:
        raise SizeError(f"dct1 needs N >= 2, got {N}")
    k = np.arange(N)
    out = 0.5 * (x[0] + (-1.0) ** k * x[-1])
    if N > 2:
        n = np.arange(1, N - 1)
        out = out + np.cos(np.pi * np.outer(k, n) / (N - 1)) @ x[1:-1]
    return out


def make_window(kind: str, N: int) -> Window:
    if N < 2:
        raise SizeError(f"window length must be >= 2, got {N}")
    n = np.arange(N)
    if kind == "rectangular":
        vals = np.ones(N)
    elif kind == "hann":
        vals = 0.5 * (1 - np.cos(2 * np.pi * n / (N - 1)))
    elif kind == "hamming":
        vals = 0.54 - 0.46 * np.cos(2 * np.pi * n / (N - 1))
    else:
        raise ConfigError(f"unknown window kind {kind!r}")
    return Window(kind, vals)


def _check_frames(x: np.ndarray, window: Window, hop: int) -> int:
    if hop <= 0:
        raise ConfigError(f"hop must be positive, got {hop}")
    N = len(window)
    if N > x.size:
        raise SizeError(f"window length {N} exceeds signal length {x.size}")
    return (x.size - N) // hop + 1


def stft(x, window: Window, hop: int) -> list[ComplexSpectrum]:
    """Frame t is dft(window * x[t*hop : t*hop+N]); partial trailing frames are dropped."""
    s = _samples(x)
    n_frames = _check_frames(s, window, hop)
    N = len(window)
    E = dft_matrix(N)
    return [ComplexSpectrum.from_complex(E @ (window.values * s[t * hop:t * hop + N]))
            for t in range(n_frames)]


def stft_via_filterbank(x, window: Window, hop: int, k: int) -> np.ndarray:
    """Bin ``k`` of the STFT computed as a band-pass filter output.

    The signal is demodulated by exp(-j w_k n), convolved with the flipped
    window and sampled at the frame starts. Demodulating with the absolute
    sample index adds a phase exp(-j w_k t hop) relative to the frame-local
    DFT, which is removed before returning.
    """
    s = _samples(x)
    n_frames = _check_frames(s, window, hop)
    N = len(window)
    w_k = 2 * np.pi * k / N
    n = np.arange(s.size)
    demod = s * np.exp(-1j * w_k * n)
    filtered = np.convolve(demod, window.values[::-1])
    starts = np.arange(n_frames) * hop
    # full-convolution index t*hop + N - 1 is sum_m demod[t*hop + m] * w[m]
    return filtered[starts + N - 1] * np.exp(1j * w_k * starts)


def comb_magnitude_response(p: CombParams, nbins: int) -> tuple[np.ndarray, np.ndarray]:
    """|1 + alpha exp(-j w K)| on ``nbins`` uniform frequencies spanning [0, pi]."""
    if nbins < 2:
        raise SizeError(f"nbins must be >= 2, got {nbins}")
    w = np.linspace(0.0, np.pi, nbins)
    return w, np.abs(1 + p.alpha * np.exp(-1j * w * p.K))


def peak_bin(mags, one_sided: bool = False) -> int:
    """Index of the largest magnitude, lowest index on ties.

    With ``one_sided`` the search is restricted to bins [0, len/2].
    """
    m = np.asarray(mags, dtype=np.float64)
    if m.size == 0:
        raise SizeError("peak_bin of an empty sequence")
    if one_sided:
        m = m[:m.size // 2 + 1]
    return int(np.argmax(m))
