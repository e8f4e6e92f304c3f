"""Dense tensors with reverse-mode automatic differentiation.

Deliberately small: exactly the operator set the progressive network and
the recurrent confidence controller need, on top of numpy. Storage is
float32 by default; tests build float64 tensors when they need exact
accumulation for oracle comparisons.

Every op validates shapes up front and checks its output for NaN/Inf so
numerical blow-ups surface at the op that produced them instead of three
layers later.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericsError(ArithmeticError):
    """An op produced NaN or Inf."""


class MissingGradientError(RuntimeError):
    """An optimizer step was asked for before gradients were populated."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")


def _as_array(data, dtype=None) -> np.ndarray:
    # np.asarray with order="C" keeps 0-d shapes, unlike ascontiguousarray
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
    return np.asarray(arr, dtype=dtype, order="C")


@dataclass
class TapeNode:
    """One recorded primitive op: inputs, output, and its vjp."""

    op: str
    inputs: tuple
    output: "Tensor"
    grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered op record; replaying it in reverse yields all gradients."""

    nodes: list = field(default_factory=list)

    def replay_backward(self, seed: "Tensor", seed_grad: np.ndarray) -> None:
        seed.grad = seed_grad
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            for inp, g in zip(node.inputs, node.grad_fn(out_grad)):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.data.shape:
                    raise ShapeError(
                        f"{node.op} backward produced grad of shape {g.shape} "
                        f"for input of shape {inp.data.shape}"
                    )
                if inp.grad is None:
                    inp.grad = g.astype(inp.data.dtype, copy=True)
                else:
                    inp.grad += g


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        _ensure_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self) -> None:
        """Reverse-mode pass from this scalar through the recorded tape.

        Gradients accumulate into .grad; optimizer steps clear them.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        self.build_tape().replay_backward(self, np.ones_like(self.data))

    def build_tape(self) -> Tape:
        """Topologically ordered op list reachable from this tensor."""
        order: list = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t._node)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                stack.append((inp, False))
        return Tape(order)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the network code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


class Parameter:
    """Trainable tensor plus its SGD momentum buffer."""

    __slots__ = ("tensor", "momentum")

    def __init__(self, data, dtype=DEFAULT_DTYPE):
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype)
        self.momentum = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        if value.shape != self.tensor.data.shape:
            raise ShapeError(
                f"parameter shape {self.tensor.data.shape} cannot take value of shape {value.shape}"
            )
        self.tensor.data = value.astype(self.tensor.data.dtype, copy=True)

    @property
    def shape(self):
        return self.tensor.data.shape


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _make(op: str, out_data: np.ndarray, inputs: tuple, grad_fn) -> Tensor:
    _ensure_finite(out_data, op)
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = requires
    out.grad = None
    out._node = TapeNode(op, inputs, out, grad_fn) if requires else None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), grad_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", out, (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make("mul", out, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", out, (a, b), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = np.ascontiguousarray(x.data.reshape(shape))

    def grad_fn(g):
        return (g.reshape(x.data.shape),)

    return _make("reshape", out, (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), grad_fn)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True),)

    return _make("sum", out, (x,), grad_fn)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=True),)

    return _make("mean", out, (x,), grad_fn)


def tabs(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def grad_fn(g):
        return (g * np.sign(x.data),)

    return _make("abs", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _make("relu", out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data.reshape(-1)
    flat = np.empty_like(d)
    pos = d >= 0
    flat[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    flat[~pos] = e / (1.0 + e)
    out = flat.reshape(x.data.shape)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), grad_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (x,), grad_fn)


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: scales by 1/(1-rate) at train time, identity at eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng for determinism")
    keep = (rng.random(x.data.shape) >= rate).astype(x.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    out = x.data * keep * scale

    def grad_fn(g):
        return (g * keep * scale,)

    return _make("dropout", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OCKK kernels, floor arithmetic."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OCKK weights")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be >= 0, got {pad}")
    n, c, h, width = x.data.shape
    o, cw, kh, kw = w.data.shape
    if kh != kw:
        raise ShapeError("conv2d kernels must be square")
    k = kh
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if k > h + 2 * pad or k > width + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}x{width + 2 * pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (width + 2 * pad - k) // stride + 1

    if pad > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # (N, C, Ho, Wo, K, K)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    cols = np.ascontiguousarray(cols)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(o, c, k, k)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros((n, c, h + 2 * pad, width + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j, :, :]
        gx = gxp[:, :, pad : pad + h, pad : pad + width] if pad > 0 else gxp
        return np.ascontiguousarray(gx), gw

    return _make("conv2d", out, (x, w), grad_fn)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d expects NCHW input")
    n, c, h, w = x.data.shape
    if kernel > h + 2 * pad or kernel > w + 2 * pad:
        raise ShapeError("pool kernel larger than padded input")
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    if pad > 0:
        # -inf padding keeps the max over real pixels
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x.data
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :].reshape(n, c, ho, wo, kernel * kernel)
    flat_idx = windows.argmax(axis=-1)  # first max wins ties: deterministic
    out = np.take_along_axis(windows, flat_idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        ki, kj = np.divmod(flat_idx, kernel)
        oi = np.arange(ho)[None, None, :, None] * stride
        oj = np.arange(wo)[None, None, None, :] * stride
        rows = (oi + ki).ravel()
        cols_ = (oj + kj).ravel()
        nn = np.repeat(np.arange(n), c * ho * wo)
        cc = np.tile(np.repeat(np.arange(c), ho * wo), n)
        np.add.at(gxp, (nn, cc, rows, cols_), g.ravel())
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad > 0 else gxp
        return (np.ascontiguousarray(gx),)

    return _make("max_pool2d", out, (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW input")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(g.dtype, copy=True),)

    return _make("global_avg_pool", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-shifted."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects (N, classes) logits")
    labels = np.asarray(labels)
    n, classes = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must be in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    out = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def grad_fn(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make("cross_entropy", out, (logits,), grad_fn)
