"""Dense float64 tensors with a small reverse-mode differentiation engine.

Only the operations needed by the front-ends are provided. Most of them
accept an optional leading batch axis so a minibatch can go through one
graph instead of one graph per example.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError, SizeError


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 array. ``grad`` is filled in by
    :func:`backward` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "op", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = op
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)


@dataclass
class Parameter:
    id: str
    tensor: Tensor
    trainable: bool = True

    @classmethod
    def create(cls, id: str, data, trainable: bool = True) -> "Parameter":
        return cls(id, Tensor(data, requires_grad=trainable), trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.shape


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


def _node(data, op, parents, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=parents,
                  backward_fn=backward_fn if req else None)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


# ---------------------------------------------------------------------------
# operations


def affine(W, x, b) -> Tensor:
    """y = W x + b, with ``x`` of shape [N] or [B, N]."""
    W, x, b = as_tensor(W), as_tensor(x), as_tensor(b)
    if W.data.ndim != 2 or b.data.ndim != 1 or x.data.ndim not in (1, 2):
        raise DimensionError(
            f"affine expects W [M,N], x [N] or [B,N], b [M]; got W{W.shape}, x{x.shape}, b{b.shape}")
    M, N = W.shape
    if x.shape[-1] != N or b.shape[0] != M:
        raise DimensionError(f"affine shape mismatch: W{W.shape} vs x{x.shape}, b{b.shape}")
    out = x.data @ W.data.T + b.data

    def bw(g):
        if W.requires_grad:
            W.grad += np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data
        if x.requires_grad:
            x.grad += g @ W.data
        if b.requires_grad:
            b.grad += g if g.ndim == 1 else g.sum(axis=0)

    return _node(out, "affine", (W, x, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        x.grad += g * mask

    return _node(np.where(mask, x.data, 0.0), "relu", (x,), bw)


def conv1d_same(x, h) -> Tensor:
    """Zero-padded 'same' cross-correlation (no kernel flip).

    ``x`` is [N] or [B, N]; ``h`` is [L] or a bank [M, L]. The output shape
    is x's batch axes, then the bank axis if present, then N:
    y[..., n] = sum_k h[k] * x_pad[n + k], with (L-1)/2 zeros on each side.
    """
    x, h = as_tensor(x), as_tensor(h)
    if x.data.ndim not in (1, 2) or h.data.ndim not in (1, 2):
        raise DimensionError(f"conv1d_same expects x [N]/[B,N] and h [L]/[M,L]; got {x.shape}, {h.shape}")
    L = h.shape[-1]
    N = x.shape[-1]
    if L % 2 == 0:
        raise ConfigError(f"kernel length must be odd, got {L}")
    if L > N:
        raise SizeError(f"kernel length {L} exceeds signal length {N}")
    half = (L - 1) // 2
    xb = x.data if x.data.ndim == 2 else x.data[None, :]
    hb = h.data if h.data.ndim == 2 else h.data[None, :]
    padded = np.pad(xb, ((0, 0), (half, half)))
    patches = sliding_window_view(padded, L, axis=1)  # [B, N, L]
    out = np.einsum("bnl,ml->bmn", patches, hb, optimize=True)
    if h.data.ndim == 1:
        out = out[:, 0, :]
    if x.data.ndim == 1:
        out = out[0]

    def bw(g):
        gb = g
        if x.data.ndim == 1:
            gb = gb[None]
        if h.data.ndim == 1:
            gb = gb[:, None, :]
        # gb: [B, M, N]
        if h.requires_grad:
            B, M, _ = gb.shape
            gh = gb.transpose(1, 0, 2).reshape(M, B * N) @ patches.reshape(B * N, L)
            h.grad += gh if h.data.ndim == 2 else gh[0]
        if x.requires_grad:
            spread = np.einsum("bmn,ml->bnl", gb, hb, optimize=True)
            gpad = np.zeros_like(padded)
            for k in range(L):
                gpad[:, k:k + N] += spread[:, :, k]
            gx = gpad[:, half:half + N]
            x.grad += gx if x.data.ndim == 2 else gx[0]

    return _node(out, "conv1d_same", (x, h), bw)


def pool_over_time(Y, mode: str = "max") -> Tensor:
    """Reduce the last axis by max or mean of absolute values."""
    Y = as_tensor(Y)
    if mode not in ("max", "avg"):
        raise ConfigError(f"unknown pool mode {mode!r}")
    if Y.data.ndim == 0 or Y.shape[-1] == 0:
        raise SizeError(f"cannot pool over an empty axis, shape {Y.shape}")
    mag = np.abs(Y.data)
    sign = np.sign(Y.data)
    if mode == "max":
        idx = np.argmax(mag, axis=-1)  # first attaining index
        out = np.take_along_axis(mag, idx[..., None], axis=-1)[..., 0]
    else:
        out = mag.mean(axis=-1)

    def bw(g):
        if mode == "max":
            gy = np.zeros_like(Y.data)
            np.put_along_axis(gy, idx[..., None], g[..., None], axis=-1)
            Y.grad += gy * sign
        else:
            Y.grad += g[..., None] * sign / Y.shape[-1]

    return _node(out, f"pool_{mode}", (Y,), bw)


def log_compress(v, eps: float) -> Tensor:
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    v = as_tensor(v)
    shifted = v.data + eps

    def bw(g):
        v.grad += g / shifted

    return _node(np.log(shifted), "log_compress", (v,), bw)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise SizeError("softmax needs at least one component")
    s = _softmax(x.data)

    def bw(g):
        x.grad += s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _node(s, "softmax", (x,), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x.grad += c * g

    return _node(c * x.data, "scale", (x,), bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, "add", (a, b), bw)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x.grad += np.broadcast_to(g, x.shape)

    return _node(np.asarray(x.data.sum()), "sum", (x,), bw)


def mix(gates, experts: Sequence) -> Tensor:
    """Gate-weighted sum of expert outputs.

    ``gates`` is [K] or [B, K]; each expert output is [M] or [B, M].
    """
    gates = as_tensor(gates)
    experts = [as_tensor(e) for e in experts]
    K = gates.shape[-1]
    if len(experts) != K:
        raise DimensionError(f"{len(experts)} experts for {K} gates")
    shapes = {e.shape for e in experts}
    if len(shapes) != 1:
        raise ConfigError(f"expert feature shapes differ: {sorted(shapes)}")
    stacked = np.stack([e.data for e in experts], axis=-2)  # [..., K, M]
    out = (gates.data[..., None] * stacked).sum(axis=-2)

    def bw(g):
        if gates.requires_grad:
            gates.grad += (stacked * g[..., None, :]).sum(axis=-1)
        for k, e in enumerate(experts):
            _accum(e, gates.data[..., k, None] * g)

    return _node(out, "mix", (gates, *experts), bw)


def cross_entropy(logits, target) -> Tensor:
    """Mean of -log softmax(logits)[target] over the batch."""
    logits = as_tensor(logits)
    t = np.atleast_1d(np.asarray(target))
    z = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    B, C = z.shape
    if t.shape != (B,):
        raise DimensionError(f"{t.shape[0]} targets for {B} logit rows")
    if not np.issubdtype(t.dtype, np.integer):
        raise ContractError("targets must be integer class indices")
    if np.any(t < 0) or np.any(t >= C):
        raise IndexError(f"target out of range [0, {C}): {t[(t < 0) | (t >= C)][:5]}")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = np.mean(lse - z[np.arange(B), t])

    def bw(g):
        d = _softmax(z)
        d[np.arange(B), t] -= 1.0
        d *= g / B
        logits.grad += d if logits.data.ndim == 2 else d[0]

    return _node(np.asarray(loss), "cross_entropy", (logits,), bw)


def huber(pred, target, delta: float = 1.0) -> Tensor:
    """Elementwise-mean Huber loss of residual ``target - pred``."""
    if not delta > 0:
        raise ConfigError(f"delta must be positive, got {delta}")
    pred = as_tensor(pred)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise DimensionError(f"huber shape mismatch: pred{pred.shape} vs target{tgt.shape}")
    r = tgt - pred.data
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta)).mean()
    n = r.size

    def bw(g):
        dr = np.where(quad, r, delta * np.sign(r))
        pred.grad += -g * dr / n

    return _node(np.asarray(loss), "huber", (pred,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter] = ()) -> dict[str, np.ndarray]:
    """Run the reverse pass from a scalar ``loss``.

    Gradients are re-initialised on every call, accumulated across shared
    subexpressions, and returned keyed by parameter id. Parameters that the
    loss does not reach get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    reached = set()
    for node in order:
        node.grad = np.zeros_like(node.data)
        reached.add(id(node))
    params = list(params)
    for p in params:
        if id(p.tensor) not in reached:
            p.tensor.grad = np.zeros_like(p.tensor.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    return {p.id: p.tensor.grad for p in params}


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None
    n_checked: int


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(fn: Callable[[Mapping[str, Tensor]], Tensor], point: Mapping[str, np.ndarray],
               h: float = 1e-5, n_points: int | None = None, seed: int = 0,
               exclude: Callable[[str, tuple[int, ...]], bool] | None = None) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps named tensors to a scalar tensor and must be deterministic.
    With ``n_points`` set, that many coordinates are sampled (seeded)
    instead of checking all of them. ``exclude(name, index)`` drops
    coordinates, e.g. ones sitting on a relu kink.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    params = [Parameter.create(k, v) for k, v in base.items()]
    loss = fn({p.id: p.tensor for p in params})
    grads = backward(loss, params)

    coords = [(k, idx) for k, v in base.items() for idx in np.ndindex(v.shape)]
    if exclude is not None:
        coords = [c for c in coords if not exclude(*c)]
    if n_points is not None and n_points < len(coords):
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), n_points, replace=False))]

    def f_at(name, idx, delta):
        vals = dict(base)
        arr = base[name].copy()
        arr[idx] += delta
        vals[name] = arr
        return float(fn({k: Tensor(v) for k, v in vals.items()}).data)

    worst, worst_err = None, 0.0
    for name, idx in coords:
        numeric = (f_at(name, idx, h) - f_at(name, idx, -h)) / (2 * h)
        err = rel_error(float(grads[name][idx]), numeric)
        if worst is None or err > worst_err:
            worst, worst_err = (name, idx), err
    return GradCheckResult(worst_err, worst, len(coords))
