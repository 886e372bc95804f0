"""Built-in oracle checks: transform identities and gradient checks on every op and model kind."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dsp
from . import tensor as T
from .frontends import Model, ModelConfig
from .tensor import GradCheckResult, grad_check

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def check_dft(n_signals: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_signals):
        x = rng.standard_normal(int(rng.integers(1, 65)))
        mags = dsp.dft(x).magnitude()
        e = float(np.sum(x ** 2))
        worst = max(worst, abs(e - float(np.sum(mags ** 2)) / len(x)) / e)
    fixture = np.abs(dsp.dft([0.0, 1.0, 0.0, -1.0]).magnitude() - [0, 2, 0, 2]).max()
    dct = float(np.abs(dsp.dct1([1.0, 1.0, 1.0]) - [2.0, 0.0, 0.0]).max())
    ok = worst < 1e-9 and fixture < 1e-12 and dct < 1e-15
    return CheckResult("dft", ok, f"parseval max rel err {worst:.2e}, fixture err {fixture:.2e}, dct1 err {dct:.1e}")


def check_stft_identity(n_triples: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_triples):
        N = int(rng.integers(2, 40))
        x = rng.standard_normal(int(rng.integers(N, 200)))
        w = dsp.make_window(str(rng.choice(["rectangular", "hann", "hamming"])), N)
        hop = int(rng.integers(1, N + 3))
        frames = np.array([f.to_complex() for f in dsp.stft(x, w, hop)])
        for k in range(N):
            worst = max(worst, float(np.abs(dsp.stft_via_filterbank(x, w, hop, k) - frames[:, k]).max()))
    return CheckResult("stft_filterbank", worst < 1e-9, f"max abs err {worst:.2e} over {n_triples} triples")


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict]]:
    """Scalar-valued probes exercising each differentiable op."""
    w = rng.standard_normal(4)
    tgt = rng.standard_normal(4)
    return {
        "affine": (lambda p: T.sum_all(T.scale(T.affine(p["W"], p["x"], p["b"]), 1.0)),
                   {"W": rng.standard_normal((3, 5)), "x": rng.standard_normal(5), "b": rng.standard_normal(3)}),
        "relu": (lambda p: T.sum_all(T.relu(p["x"])),
                 {"x": rng.choice([-1, 1], 6) * rng.uniform(0.1, 1, 6)}),
        "conv1d_same": (lambda p: T.sum_all(T.relu(T.conv1d_same(p["x"], p["h"]))),
                        {"x": rng.standard_normal(12), "h": rng.standard_normal((2, 5))}),
        "pool_max": (lambda p: T.sum_all(T.pool_over_time(p["Y"], "max")), {"Y": rng.standard_normal((3, 7))}),
        "pool_avg": (lambda p: T.sum_all(T.pool_over_time(p["Y"], "avg")), {"Y": rng.standard_normal((3, 7))}),
        "log_compress": (lambda p: T.sum_all(T.log_compress(p["v"], 1e-5)), {"v": rng.uniform(0.01, 2, 5)}),
        "softmax": (lambda p: T.sum_all(T.affine(w[None, :], T.softmax(p["x"]), np.zeros(1))),
                    {"x": rng.standard_normal(4)}),
        "mix": (lambda p: T.sum_all(T.affine(w[None, :], T.mix(p["g"], [p["e0"], p["e1"]]), np.zeros(1))),
                {"g": rng.uniform(0, 1, 2), "e0": rng.standard_normal(4), "e1": rng.standard_normal(4)}),
        "add": (lambda p: T.sum_all(T.relu(T.add(p["a"], p["b"]))),
                {"a": rng.standard_normal(4) + 2, "b": rng.standard_normal(4)}),
        "cross_entropy": (lambda p: T.cross_entropy(p["z"], np.array([1, 0, 2])), {"z": rng.standard_normal((3, 4))}),
        "huber": (lambda p: T.huber(p["y"], tgt, 0.5), {"y": tgt + rng.choice([-1, 1], 4) * rng.uniform(0.05, 2, 4)}),
    }


def check_ops(n_points: int = 100, seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (fn, point) in op_cases(np.random.default_rng(seed)).items():
        res = grad_check(fn, point, n_points=n_points, seed=seed)
        out.append(CheckResult(f"grad:{name}", res.max_rel_error < GRAD_TOL, _fmt(res)))
    return out


def small_model_configs() -> dict[str, ModelConfig]:
    base = dict(n_classes=5, input_len=48, seed=3)
    return {
        "multiplicative": ModelConfig(kind="multiplicative", n_kernels=8, **base),
        "conv": ModelConfig(kind="conv", n_kernels=4, filter_len=9, **base),
        "adaptive": ModelConfig(kind="adaptive", n_kernels=4, filter_len=9, n_experts=2, router_hidden=6, **base),
    }


def model_grad_check(model: Model, x: np.ndarray, y: np.ndarray, n_points: int = 100,
                     seed: int = 0) -> GradCheckResult:
    """Central-difference check of the full cross-entropy loss w.r.t. every model parameter."""
    params = model.parameters

    def fn(p):
        saved = {k: params[k].tensor for k in params}
        try:
            for k in params:
                params[k].tensor = p[k]
            return T.cross_entropy(model(x), y)
        finally:
            for k, t in saved.items():
                params[k].tensor = t

    return grad_check(fn, model.state(), n_points=n_points, seed=seed)


def check_models(n_points: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, cfg in small_model_configs().items():
        model = Model(cfg)
        x = rng.standard_normal((3, cfg.input_len))
        y = rng.integers(0, cfg.n_classes, 3)
        res = model_grad_check(model, x, y, n_points, seed)
        out.append(CheckResult(f"grad_model:{name}", res.max_rel_error < GRAD_TOL, _fmt(res)))
    return out


def _fmt(res: GradCheckResult) -> str:
    return f"max rel err {res.max_rel_error:.2e} at {res.worst} ({res.n_checked} coords)"


def run_all(seed: int = 0) -> list[CheckResult]:
    return [check_dft(seed=seed), check_stft_identity(seed=seed), *check_ops(seed=seed), *check_models(seed=seed)]
