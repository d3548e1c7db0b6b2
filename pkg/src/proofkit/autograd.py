"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every operation that involves a tensor with ``requires_grad=True`` records a
node holding its inputs and a closure computing input gradients from the
output gradient. :func:`backward` sorts the reachable graph topologically and
replays the closures once each, summing gradients that arrive along several
paths.

Shapes follow numpy broadcasting for elementwise ops; gradients are summed back
to the input shape.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
PROB_FLOOR = 1e-12
MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class UsageError(RuntimeError):
    """The tape or optimizer was used outside its contract."""


class ConfigError(ValueError):
    """A layer configuration cannot be applied to the given input."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _not_scalar(t: Tensor) -> float:
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that stops operations from being recorded."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape replay
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate buffers are
    released after use so the graph can be garbage collected.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    if p <= 0 or rng is None:
        return x
    if p >= 1:
        raise ConfigError("dropout probability must be < 1")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv1d_bank(x: Tensor, kernels: Sequence[tuple[int, Tensor]]) -> Tensor:
    """Length-preserving 1-D convolutions concatenated on the feature axis.

    ``x`` is ``(L, d_in)`` or ``(B, L, d_in)``; each kernel is ``(k, W)`` with
    ``W`` of shape ``(k, d_in, f)``. Zero padding is ``(k-1)//2`` on the left
    and the remainder on the right, so even widths lean right.
    """
    outs = []
    for k, w in kernels:
        outs.append(_conv1d_same(x, int(k), w))
    return outs[0] if len(outs) == 1 else concat(outs, axis=-1)


def _conv1d_same(x: Tensor, k: int, w: Tensor) -> Tensor:
    if k < 1:
        raise ConfigError(f"kernel size must be >= 1, got {k}")
    if w.ndim != 3 or w.shape[0] != k or w.shape[1] != x.shape[-1]:
        raise ConfigError(f"kernel weights {w.shape} do not fit width {k} over input {x.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, L, d = xd.shape
    left = (k - 1) // 2
    right = k - 1 - left
    if k > L + left + right:
        raise ConfigError(f"kernel size {k} exceeds padded length {L + left + right}")
    xp = np.zeros((B, L + k - 1, d), dtype=DTYPE)
    xp[:, left:left + L] = xd
    cols = np.stack([xp[:, o:o + L] for o in range(k)], axis=2).reshape(B, L, k * d)
    wd = w.data.reshape(k * d, -1)
    out = cols @ wd

    def bw(g):
        g3 = g[None] if squeeze else g
        gw = np.tensordot(cols, g3, axes=([0, 1], [0, 1])).reshape(w.shape)
        gcols = (g3 @ wd.T).reshape(B, L, k, d)
        gxp = np.zeros_like(xp)
        for o in range(k):
            gxp[:, o:o + L] += gcols[:, :, o]
        gx = gxp[:, left:left + L]
        return (gx[0] if squeeze else gx), gw

    return _make(out[0] if squeeze else out, (x, w), bw, "conv1d")


# ---------------------------------------------------------------------------
# normalisations and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, eps: float = 1e-9) -> Tensor:
    """Normalise the last axis to mean 0 / variance 1 (no scale or shift)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw, "layer_norm")


def cross_entropy(y_true, y_pred: Tensor) -> Tensor:
    """``-sum(y_true * log(y_pred))`` with predictions clamped below at 1e-12."""
    yt = y_true.data if isinstance(y_true, Tensor) else np.asarray(y_true, dtype=DTYPE)
    if yt.shape != y_pred.shape:
        raise ShapeError(f"cross_entropy shape mismatch: {yt.shape} vs {y_pred.shape}")
    p = np.maximum(y_pred.data, PROB_FLOOR)
    val = -np.sum(yt * np.log(p))

    def bw(g):
        gp = -yt / p
        gp = np.where(y_pred.data < PROB_FLOOR, 0.0, gp)
        return (g * gp,)

    return _make(np.array(val), (y_pred,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# optimisation and initialisation
# ---------------------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the stream is fixed by numpy's documented PCG64."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def seeded_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                requires_grad: bool = True) -> Tensor:
    """Xavier-uniform draw in ``[-sqrt(6/(fan_in+fan_out)), +bound]``."""
    if fan_in <= 0 or fan_out <= 0:
        raise ConfigError("fan_in and fan_out must be positive")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0,
             state: dict | None = None) -> None:
    """In-place ``p -= lr * grad`` followed by zeroing the gradients.

    With ``momentum > 0`` a velocity buffer per parameter is kept in ``state``.
    """
    if lr < 0:
        raise UsageError("learning rate must be non-negative")
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p!r} has no gradient buffer")
        step = p.grad
        if momentum:
            if state is None:
                raise UsageError("momentum needs a state dict")
            v = state.get(id(p))
            v = step.copy() if v is None else momentum * v + step
            state[id(p)] = v
            step = v
        p.data -= lr * step
        p.grad = np.zeros_like(p.data)


def adam_step(params: Iterable[Tensor], lr: float, state: dict, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, then gradients are zeroed like :func:`sgd_step`."""
    if lr < 0:
        raise UsageError("learning rate must be non-negative")
    t = state["t"] = state.get("t", 0) + 1
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p!r} has no gradient buffer")
        m, v = state.get(("m", id(p))), state.get(("v", id(p)))
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * p.grad
        v = beta2 * v + (1 - beta2) * p.grad * p.grad
        state[("m", id(p))], state[("v", id(p))] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = np.zeros_like(p.data)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def numerical_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``t.data``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-5) -> float:
    """Largest relative error between taped and finite-difference gradients."""
    for p in params:
        p.zero_grad()
    backward(f())
    worst = 0.0
    for p in params:
        num = numerical_grad(lambda: f().item(), p, eps)
        ana = p.grad
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst


def custom_op(data, parents: Sequence[Tensor], backward, op: str = "custom") -> Tensor:
    """Record a fused operation whose ``backward(g)`` returns one gradient per parent."""
    return _make(np.asarray(data, dtype=DTYPE), tuple(parents), backward, op)
