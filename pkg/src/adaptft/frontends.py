"""Learnable front-ends, the sparse router and the classifier head."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, SizeError
from .tensor import Parameter, Tensor


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Anything holding named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")


class MultiplicativeFrontEnd(Module):
    """relu(W x + b): each row of W is one learned kernel over the input frame."""

    def __init__(self, n_kernels: int, frame_len: int, rng: np.random.Generator):
        self.W = Parameter("W", Tensor(_uniform_init(rng, (n_kernels, frame_len), frame_len), True))
        self.b = Parameter("b", Tensor(_uniform_init(rng, (n_kernels,), frame_len), True))

    @property
    def n_features(self) -> int:
        return self.W.shape[0]

    @property
    def input_len(self) -> int:
        return self.W.shape[1]

    def kernels(self) -> np.ndarray:
        return self.W.data

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.input_len:
            raise DimensionError(f"input length {x.shape[-1]} != front-end length {self.input_len}")
        return T.relu(T.affine(self.W.tensor, x, self.b.tensor))


class ConvFrontEnd(Module):
    """log(pool_t |x * h_m| + eps) for a bank of odd-length filters h_m."""

    def __init__(self, n_filters: int, filter_len: int, rng: np.random.Generator,
                 pool: str = "max", eps: float = 1e-5):
        if filter_len % 2 == 0:
            raise ConfigError(f"filter length must be odd, got {filter_len}")
        if n_filters < 1:
            raise ConfigError("need at least one filter")
        if pool not in ("max", "avg"):
            raise ConfigError(f"unknown pool mode {pool!r}")
        self.filters = Parameter("filters", Tensor(
            _uniform_init(rng, (n_filters, filter_len), filter_len), True))
        self.pool = pool
        self.eps = eps

    @property
    def n_features(self) -> int:
        return self.filters.shape[0]

    def kernels(self) -> np.ndarray:
        return self.filters.data

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] < self.filters.shape[1]:
            raise SizeError(f"input length {x.shape[-1]} shorter than filter length {self.filters.shape[1]}")
        y = T.conv1d_same(x, self.filters.tensor)
        return T.log_compress(T.pool_over_time(y, self.pool), self.eps)


class SparseRouter(Module):
    """Three affine layers (relu between) followed by softmax(alpha * softmax(.))."""

    def __init__(self, input_len: int, n_experts: int, rng: np.random.Generator,
                 hidden: int = 256, alpha: float = 100.0):
        self.l0 = _Affine(hidden, input_len, rng)
        self.l1 = _Affine(hidden, hidden, rng)
        self.l2 = _Affine(n_experts, hidden, rng)
        self.alpha = alpha

    @property
    def n_experts(self) -> int:
        return self.l2.W.shape[0]

    def logits(self, x) -> Tensor:
        h = T.relu(self.l0(x))
        h = T.relu(self.l1(h))
        return self.l2(h)

    def __call__(self, x) -> Tensor:
        return double_softmax(self.logits(x), self.alpha)


class _Affine(Module):
    def __init__(self, n_out: int, n_in: int, rng: np.random.Generator):
        self.W = Parameter("W", Tensor(_uniform_init(rng, (n_out, n_in), n_in), True))
        self.b = Parameter("b", Tensor(_uniform_init(rng, (n_out,), n_in), True))

    def __call__(self, x) -> Tensor:
        return T.affine(self.W.tensor, x, self.b.tensor)


def double_softmax(x_sr, alpha: float) -> Tensor:
    """Gate weights softmax(alpha * softmax(x_sr)).

    The inner softmax bounds the scaled logits to [0, alpha], so this cannot
    overflow for any finite router output.
    """
    return T.softmax(T.scale(T.softmax(x_sr), alpha))


class AdaptiveFrontEnd(Module):
    """Router-weighted combination of K same-kind expert front-ends."""

    def __init__(self, experts: list, router: SparseRouter):
        if not experts:
            raise ConfigError("adaptive front-end needs at least one expert")
        dims = {e.n_features for e in experts}
        if len(dims) != 1:
            raise ConfigError(f"expert feature dimensions differ: {sorted(dims)}")
        if router.n_experts != len(experts):
            raise ConfigError(f"router has {router.n_experts} outputs for {len(experts)} experts")
        self.experts = list(experts)
        self.router = router
        self.forced_gates: np.ndarray | None = None
        self.hard = False
        self.last_gates: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return self.experts[0].n_features

    def gates(self, x) -> Tensor:
        if self.forced_gates is not None:
            g = np.broadcast_to(self.forced_gates, x.shape[:-1] + (len(self.experts),))
            return Tensor(np.array(g))
        return self.router(x)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        gates = self.gates(x)
        self.last_gates = gates.data
        if self.hard:
            # inference-only: one-hot on the argmax expert
            onehot = np.zeros_like(gates.data)
            np.put_along_axis(onehot, np.argmax(gates.data, axis=-1)[..., None], 1.0, axis=-1)
            gates = Tensor(onehot)
        return T.mix(gates, [e(x) for e in self.experts])


class ClassifierHead(Module):
    def __init__(self, n_classes: int, n_features: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            W, b = np.zeros((n_classes, n_features)), np.zeros(n_classes)
        else:
            W = _uniform_init(rng, (n_classes, n_features), n_features)
            b = _uniform_init(rng, (n_classes,), n_features)
        self.W = Parameter("W", Tensor(W, True))
        self.b = Parameter("b", Tensor(b, True))

    def __call__(self, features) -> Tensor:
        features = T.as_tensor(features)
        if features.shape[-1] != self.W.shape[1]:
            raise DimensionError(f"head expects {self.W.shape[1]} features, got {features.shape[-1]}")
        return T.affine(self.W.tensor, features, self.b.tensor)


@dataclass
class ModelConfig:
    kind: str = "multiplicative"  # multiplicative | conv | adaptive
    n_classes: int = 79
    input_len: int = 640
    n_kernels: int = 512
    filter_len: int = 401
    pool: str = "max"
    eps: float = 1e-5
    expert_kind: str = "conv"
    n_experts: int = 2
    alpha: float = 100.0
    router_hidden: int = 256
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Model(Module):
    """A front-end followed by a linear classifier head."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.frontend = build_frontend(cfg, rng)
        self.head = ClassifierHead(cfg.n_classes, self.frontend.n_features, rng)
        self._params = {name: p for name, p in self.named_parameters()}
        for name, p in self._params.items():
            p.id = name

    @property
    def parameters(self) -> dict[str, Parameter]:
        return self._params

    @property
    def is_adaptive(self) -> bool:
        return isinstance(self.frontend, AdaptiveFrontEnd)

    def features(self, x) -> Tensor:
        return self.frontend(x)

    def __call__(self, x) -> Tensor:
        return self.head(self.frontend(x))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter sets differ: {sorted(missing)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.tensor.data = arr.copy()


def build_frontend(cfg: ModelConfig, rng: np.random.Generator):
    if cfg.kind == "multiplicative":
        return MultiplicativeFrontEnd(cfg.n_kernels, cfg.input_len, rng)
    if cfg.kind == "conv":
        return ConvFrontEnd(cfg.n_kernels, cfg.filter_len, rng, cfg.pool, cfg.eps)
    if cfg.kind == "adaptive":
        if cfg.expert_kind not in ("multiplicative", "conv"):
            raise ConfigError(f"unknown expert kind {cfg.expert_kind!r}")
        sub = ModelConfig(**{**cfg.to_dict(), "kind": cfg.expert_kind})
        experts = [build_frontend(sub, rng) for _ in range(cfg.n_experts)]
        router = SparseRouter(cfg.input_len, cfg.n_experts, rng, cfg.router_hidden, cfg.alpha)
        return AdaptiveFrontEnd(experts, router)
    raise ConfigError(f"unknown model kind {cfg.kind!r}")
