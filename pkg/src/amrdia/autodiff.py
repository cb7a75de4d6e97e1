"""Reverse-mode automatic differentiation on a small op tape.

Everything is float64.  A :class:`Tensor` wraps a numpy array and
remembers how it was produced; :func:`backward` walks the tape in
reverse topological order and accumulates gradients into the leaf
tensors that requested them.  The op set is deliberately limited to
what the models here need; shapes are validated eagerly so a bad
composition fails at the call site, not inside backward.

Randomness comes from :func:`default_rng`, a seeded numpy Generator
using the PCG64 bit generator.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class MissingGrad(RuntimeError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
) -> Tensor:
    track = any(p.requires_grad or p._parents for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=False, _parents=parents, _backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# Ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        broadcast = False
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1:] == b.shape:
        broadcast = True
    else:
        raise ShapeMismatch(f"add shapes incompatible: {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward_fn(g: np.ndarray):
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if broadcast else g
        return g, gb

    return _result(out, (a, b), backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = a.data * factor

    def backward_fn(g: np.ndarray):
        return (g * factor,)

    return _result(out, (a,), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul shapes differ: {a.shape} * {b.shape}")
    out = a.data * b.data

    def backward_fn(g: np.ndarray):
        return g * b.data, g * a.data

    return _result(out, (a, b), backward_fn)


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_last_dim needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeMismatch(
                f"concat_last_dim leading dims differ: {[p.shape for p in parts]}"
            )
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def backward_fn(g: np.ndarray):
        grads = []
        start = 0
        for w in widths:
            grads.append(g[..., start : start + w])
            start += w
        return tuple(grads)

    return _result(out, tuple(parts), backward_fn)


def slice_last_dim(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis; inverse of concat_last_dim."""
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise ShapeMismatch(f"slice {start}:{stop} outside width {width}")
    out = a.data[..., start:stop].copy()

    def backward_fn(g: np.ndarray):
        da = np.zeros_like(a.data)
        da[..., start:stop] = g
        return (da,)

    return _result(out, (a,), backward_fn)


def transpose_last_two(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeMismatch(f"transpose_last_two needs ndim >= 2, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def backward_fn(g: np.ndarray):
        return (np.swapaxes(g, -1, -2),)

    return _result(out, (a,), backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    original = a.shape

    def backward_fn(g: np.ndarray):
        return (g.reshape(original),)

    return _result(out, (a,), backward_fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; stable for inputs of magnitude 100."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), backward_fn)


def gelu(a: Tensor) -> Tensor:
    """Smooth feed-forward nonlinearity (tanh form)."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g: np.ndarray):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        return (g * local,)

    return _result(out, (a,), backward_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward_fn(g: np.ndarray):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _result(out, (a, gain, bias), backward_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of ``table`` for an integer id array of any shape."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexOutOfRange(
            f"ids outside table with {table.shape[0]} rows"
        )
    out = table.data[idx]

    def backward_fn(g: np.ndarray):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dtable,)

    return _result(out, (table,), backward_fn)


def row_gather(a: Tensor, ids) -> Tensor:
    """``out[i, j] = a[i, ids[i, j]]`` for a matrix of per-row column ids."""
    idx = np.asarray(ids, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"row_gather got {a.shape} with ids {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexOutOfRange(f"column ids outside width {a.shape[1]}")
    rows = np.arange(a.shape[0])[:, None]
    out = a.data[rows, idx]

    def backward_fn(g: np.ndarray):
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, idx), g)
        return (da,)

    return _result(out, (a,), backward_fn)


def row_scatter(a: Tensor, ids, size: int) -> Tensor:
    """``out[i, r] = sum of a[i, j] over j with ids[i, j] == r``.

    The adjoint of :func:`row_gather`; used to pool attention weights by
    relation id.
    """
    idx = np.asarray(ids, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != a.shape:
        raise ShapeMismatch(f"row_scatter got {a.shape} with ids {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexOutOfRange(f"ids outside scatter size {size}")
    rows = np.arange(a.shape[0])[:, None]
    out = np.zeros((a.shape[0], size), dtype=np.float64)
    np.add.at(out, (rows, idx), a.data)

    def backward_fn(g: np.ndarray):
        return (g[rows, idx],)

    return _result(out, (a,), backward_fn)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-probability of ``target`` under softmax of ``logits``."""
    if logits.data.ndim != 1:
        raise ShapeMismatch(f"cross_entropy expects a vector, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise IndexOutOfRange(f"target {target} outside vocab {logits.shape[0]}")
    log_probs = _log_softmax_rows(logits.data[None, :])[0]
    out = np.asarray(-log_probs[target])

    def backward_fn(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[target] -= 1.0
        return (grad * g,)

    return _result(out, (logits,), backward_fn)


def cross_entropy_sum(logits: Tensor, targets) -> Tensor:
    """Sum of per-row cross-entropies for a (T, V) logit matrix."""
    idx = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeMismatch(
            f"cross_entropy_sum got logits {logits.shape} targets {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise IndexOutOfRange(f"targets outside vocab {logits.shape[1]}")
    log_probs = _log_softmax_rows(logits.data)
    rows = np.arange(idx.shape[0])
    out = np.asarray(-log_probs[rows, idx].sum())

    def backward_fn(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, idx] -= 1.0
        return (grad * g,)

    return _result(out, (logits,), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of grad-requiring leaves.

    Repeated calls keep accumulating; callers reset via
    :meth:`ParamStore.zero_grad`.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            existing = grads.get(id(parent))
            if existing is None:
                # Own the accumulator: views (and g itself, passed through
                # by add) must not be mutated in place later.
                grads[id(parent)] = pg.copy() if (pg.base is not None or pg is g) else pg
            else:
                existing += pg


# ---------------------------------------------------------------------------
# Parameters, initialization, optimizer


def default_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single source of randomness here."""
    return np.random.Generator(np.random.PCG64(seed))


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


class ParamStore:
    """Named trainable tensors with insertion order preserved."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_coordinates(self) -> int:
        return sum(p.data.size for p in self._params.values())


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            raise MissingGrad(f"parameter {name!r} has no gradient")
        total += float((p.grad**2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for _, p in params.items():
            p.grad *= factor
    return norm


@dataclass
class AdamState:
    """First/second moment buffers and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdamState":
        state = cls()
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place; gradients are untouched."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        if p.grad is None:
            raise MissingGrad(f"parameter {name!r} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g**2
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Finite-difference oracle


def grad_check(
    fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-4,
) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    Returns the worst relative error over every parameter coordinate,
    with the relative error denominator floored at 1e-8.  ``fn`` must be
    deterministic.
    """
    params.zero_grad()
    loss = fn(params)
    backward(loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise MissingGrad(f"parameter {name!r} got no gradient from fn")
        analytic[name] = p.grad.copy()
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            loss_plus = fn(params).item()
            flat[i] = original - h
            loss_minus = fn(params).item()
            flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst
