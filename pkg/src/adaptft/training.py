"""Adam, the training loop, evaluation and checkpoint persistence."""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .frontends import Model, ModelConfig
from .synth import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ADCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    loss: str = "cross_entropy"  # cross_entropy | huber
    huber_delta: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    task: str = "pitch"

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in ("cross_entropy", "huber"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k}: shape {g.shape} != parameter {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** state.t)
        vhat = v / (1 - beta2 ** state.t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    router_usage: list[int] | None = None


@dataclass
class Metrics:
    loss: float
    accuracy: float
    n: int
    router_usage: list[int] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    model: ModelConfig
    train: TrainConfig
    params: dict[str, np.ndarray]
    history: list[EpochMetrics] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)

    def build_model(self) -> Model:
        m = Model(self.model)
        m.load_state(self.params)
        return m

    def config_block(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "history": [asdict(h) for h in self.history], "extra": self.extra}


def _f32(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float32).astype(np.float64) for k, v in state.items()}


def compute_loss(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> T.Tensor:
    return loss_from_logits(model(x), y, cfg)


def loss_from_logits(logits: T.Tensor, y: np.ndarray, cfg: TrainConfig) -> T.Tensor:
    if cfg.loss == "cross_entropy":
        return T.cross_entropy(logits, y)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    return T.huber(T.softmax(logits), onehot, cfg.huber_delta)


def _batches(n: int, batch: int):
    for s in range(0, n, batch):
        yield slice(s, min(s + batch, n))


def evaluate_model(model: Model, ds: Dataset, cfg: TrainConfig | None = None,
                   batch_size: int = 256) -> Metrics:
    cfg = cfg or TrainConfig()
    if model.cfg.n_classes != ds.label_arity:
        raise ConfigError(f"model has {model.cfg.n_classes} classes, dataset arity is {ds.label_arity}")
    total, correct = 0.0, 0
    usage = np.zeros(model.cfg.n_experts, dtype=np.int64) if model.is_adaptive else None
    for sl in _batches(len(ds), batch_size):
        x, y = ds.waveforms[sl], ds.labels[sl]
        logits = model(x)
        loss = loss_from_logits(logits, y, cfg)
        total += float(loss.data) * len(y)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
        if usage is not None:
            usage += np.bincount(np.argmax(model.frontend.last_gates, axis=1), minlength=len(usage))
    return Metrics(total / len(ds), correct / len(ds), len(ds),
                   None if usage is None else usage.tolist())


def evaluate(ckpt: Checkpoint, ds: Dataset) -> Metrics:
    """Loss and accuracy of a checkpoint on a dataset; parameters are not touched."""
    if ckpt.model.n_classes != ds.label_arity or ckpt.model.input_len != ds.waveforms.shape[1]:
        raise FormatError(
            f"checkpoint expects {ckpt.model.n_classes} classes x {ckpt.model.input_len} samples, "
            f"dataset has {ds.label_arity} x {ds.waveforms.shape[1]}")
    return evaluate_model(ckpt.build_model(), ds, ckpt.train)


def train(model_cfg: ModelConfig, cfg: TrainConfig, train_set: Dataset, val_set: Dataset,
          callback=None) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Minibatch Adam training; returns the best-validation checkpoint and per-epoch metrics."""
    if model_cfg.n_classes != train_set.label_arity or model_cfg.n_classes != val_set.label_arity:
        raise ConfigError(f"model has {model_cfg.n_classes} classes, datasets have "
                          f"{train_set.label_arity}/{val_set.label_arity}")
    model = Model(model_cfg)
    params = model.parameters
    arrays = {k: p.data for k, p in params.items()}
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochMetrics] = []
    best, best_acc = _f32(model.state()), -1.0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        running, seen = 0.0, 0
        for sl in _batches(len(order), cfg.batch_size):
            idx = order[sl]
            loss = compute_loss(model, train_set.waveforms[idx], train_set.labels[idx], cfg)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = T.backward(loss, params.values())
            adam_step(arrays, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            running += float(loss.data) * len(idx)
            seen += len(idx)
        val = evaluate_model(model, val_set, cfg)
        em = EpochMetrics(epoch, running / seen, val.loss, val.accuracy, val.router_usage)
        history.append(em)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", epoch, em.train_loss,
                 em.val_loss, em.val_accuracy)
        if callback is not None:
            callback(em)
        if val.accuracy > best_acc:
            best_acc, best = val.accuracy, _f32(model.state())

    return Checkpoint(model_cfg, cfg, best, history), history


# ---------------------------------------------------------------------------
# checkpoint file: "ADCK", u32 version, u32 json length, json, then parameters


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    block = json.dumps(ckpt.config_block(), sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(block)), block]
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name])
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    data = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _take(raw: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(raw):
        raise FormatError(f"checkpoint truncated while reading {what}: need {n} bytes at offset {pos}, "
                          f"file has {len(raw)}")
    return raw[pos:pos + n], pos + n


def parse_checkpoint(raw: bytes) -> Checkpoint:
    magic, pos = _take(raw, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic: found {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    head, pos = _take(raw, pos, 8, "header")
    version, n_block = struct.unpack("<II", head)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version: found {version}, expected {CHECKPOINT_VERSION}")
    block, pos = _take(raw, pos, n_block, "config block")
    try:
        meta = json.loads(block)
    except ValueError as exc:
        raise FormatError(f"corrupt config block: {exc}") from None
    params = {}
    while pos < len(raw):
        b, pos = _take(raw, pos, 4, "parameter id length")
        key, pos = _take(raw, pos, struct.unpack("<I", b)[0], "parameter id")
        b, pos = _take(raw, pos, 4, "rank")
        rank = struct.unpack("<I", b)[0]
        b, pos = _take(raw, pos, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", b)
        b, pos = _take(raw, pos, 4 * int(np.prod(dims, dtype=np.int64)), "payload")
        params[key.decode("utf-8")] = np.frombuffer(b, dtype="<f4").astype(np.float64).reshape(dims)
    ckpt = Checkpoint(ModelConfig(**meta["model"]), TrainConfig(**meta["train"]), params,
                      [EpochMetrics(**h) for h in meta.get("history", [])], version, meta.get("extra", {}))
    expected = set(Model(ckpt.model).parameters)
    if expected != set(params):
        raise FormatError(f"checkpoint parameters {sorted(params)} do not match model {sorted(expected)}")
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
