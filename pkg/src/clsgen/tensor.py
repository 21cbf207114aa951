"""Small reverse-mode autodiff over numpy arrays.

Tensors wrap an ``np.ndarray`` and are never mutated by ops. Recording happens
only while a :class:`Tape` is active and at least one input requires a
gradient, so the forward arithmetic is the same code path in both modes.

Two precisions are used in practice: ``float64`` for gradient checks and
metric oracles, ``float32`` for training. Ops keep the dtype of their inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

HIGH = np.float64
STANDARD = np.float32

# Additive mask value; finite so the finiteness check never trips on masks.
MASK_VALUE = -1e9

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class DetachedError(RuntimeError):
    """Raised when backprop is requested for a node that is not on the tape."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(HIGH)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A trainable leaf. The optimizer is the only writer, via :meth:`assign`."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, requires_grad: bool = True):
        super().__init__(np.array(data, copy=True), requires_grad=requires_grad, name=name)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"assign: {value.shape} into {self.data.shape}")
        self.data = value


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive ops for one forward/backward pass.

    Use as a context manager; ops executed inside are recorded in order.
    A tape is single-threaded and meant to be used for one training step.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []
        self._producer: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self._producer[id(output)] = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._producer

    def gradient(self, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
        return backprop(loss, self, params)


def active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _check(op: str, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite values in output of shape {out.shape}")
    return out


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable) -> Tensor:
    _check(op, out)
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs and tape is not None)
    if tape is not None and needs:
        tape.record(op, inputs, result, backward)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead > 0 else grad


def _trailing_compatible(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may drop leading dimensions (bias-style)."""
    _trailing_compatible("add", a, b)

    def backward(g):
        return g, (_unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", (a, b), a.data + b.data, backward)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may drop leading dimensions."""
    _trailing_compatible("mul", a, b)

    def backward(g):
        return g * b.data, _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or equal-rank batched operands."""
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), p, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        if not gain.requires_grad:
            return gx, None, None
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _emit("layer_norm", (x, gain, bias), out, backward)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit("gelu", (a,), out, backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    if weight.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {weight.shape[0]} rows")

    def backward(g):
        return (_scatter_rows(ids.reshape(-1), g.reshape(-1, weight.shape[1]), weight.data),)

    return _emit("embedding", (weight,), weight.data[ids], backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` may drop leading dims."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape and a.shape[a.ndim - mask.ndim:] != mask.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs input {a.shape}")
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _emit("masked_fill", (a,), out, lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: training mode requires an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _emit("dropout", (a,), a.data * keep, lambda g: (g * keep,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    shapes = [t.shape for t in tensors]
    ax = axis % tensors[0].ndim
    base = [s[:ax] + s[ax + 1:] for s in shapes]
    if any(b != base[0] for b in base):
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([s[ax] for s in shapes])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _emit("concat", tuple(tensors), out, backward)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing (slice, gather)."""
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: bad index for shape {a.shape}: {exc}") from None

    basic = _is_basic(index)

    def backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _emit("slice", (a,), np.array(out), backward)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _scatter_rows(ids: np.ndarray, rows: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Sum ``rows`` into a zero table shaped like ``like`` at row ``ids``."""
    out = np.zeros_like(like)
    if ids.size == 0:
        return out
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    uniq, start = np.unique(sorted_ids, return_index=True)
    out[uniq] = np.add.reduceat(rows[order], start, axis=0)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", (a,), out, backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is ``(n, k)``; ``weights`` defaults to ``1/n`` (a plain mean).
    Uses max-subtraction for stability.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if k < 2:
        raise ShapeError(f"cross_entropy: need at least 2 classes, got {k}")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"cross_entropy: target out of range [0, {k})")
    w = np.full(n, 1.0 / max(n, 1)) if weights is None else np.asarray(weights, dtype=float)
    w = w.astype(logits.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    nll = lse - z[rows, targets]
    out = np.asarray((w * nll).sum(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (w * g)[:, None],)

    return _emit("cross_entropy", (logits,), out, backward)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Loss for a single logit vector and class index."""
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: expected 1-D logits, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"softmax_cross_entropy: target {target} out of range [0, {logits.shape[0]})")
    return cross_entropy(reshape(logits, (1, -1)), [target])


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def backprop(loss: Tensor, tape: Tape, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of scalar ``loss`` for each of ``params``.

    Parameters with no path to ``loss`` get a zero array.
    """
    params = list(params)
    if loss.data.size != 1:
        raise ShapeError(f"backprop: loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        if any(loss is p for p in params):
            return [np.ones_like(p.data) if p is loss else np.zeros_like(p.data) for p in params]
        raise DetachedError("backprop: loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [grads.get(id(p), np.zeros_like(p.data)).astype(p.dtype, copy=False) for p in params]


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (slow by design)."""
    x = np.array(x, dtype=HIGH, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
