"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires grad the
output records its parents and a backward closure, plus a monotonically
increasing sequence number. :func:`backward` collects the reachable ops into
a :class:`Tape` ordered by that number and replays it in reverse, so each op
runs exactly once after all of its consumers.

Broadcasting in elementwise ops is deliberately narrow: a scalar (size-1)
operand against any tensor, or two identically shaped tensors. Anything else
has to go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "exp",
    "log",
    "sign",
    "matmul",
    "softmax",
    "log_softmax",
    "conv2d",
    "sum",
    "mean",
    "amax",
    "argsort_desc",
    "topk",
    "gather",
    "take_along_axis",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "stack",
    "upsample_nearest",
    "backward",
]

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._seq = -1

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; scale by a float")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method aliases ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return amax(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data``; wire up the backward rule if any parent needs grad."""
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._seq = next(_seq)

        def _bw(g: np.ndarray) -> None:
            for p, pg in zip(parents, backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64, copy=True).reshape(p.shape)
                else:
                    p.grad += pg.reshape(p.shape)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    # t was the scalar operand
    return np.asarray(g.sum()).reshape(t.shape)


def _out_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 and b.size == 1:
        return a.shape if a.ndim >= b.ndim else b.shape
    return b.shape if a.size == 1 else a.shape


def _scalar_aware(x: Tensor, shape) -> np.ndarray:
    return x.data if x.shape == shape else x.data.reshape(())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    shape = _out_shape(a, b)
    data = (_scalar_aware(a, shape) + _scalar_aware(b, shape)).reshape(shape)
    return _make(data, (a, b), "add", lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    shape = _out_shape(a, b)
    data = (_scalar_aware(a, shape) - _scalar_aware(b, shape)).reshape(shape)
    return _make(data, (a, b), "sub", lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    shape = _out_shape(a, b)
    ad, bd = _scalar_aware(a, shape), _scalar_aware(b, shape)
    data = (ad * bd).reshape(shape)
    return _make(data, (a, b), "mul",
                 lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), "exp", lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), "log", lambda g: (g / x,))


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) == 0; its derivative is zero almost everywhere."""
    return _make(np.sign(a.data), (a,), "sign", lambda g: (np.zeros_like(g),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched with identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ValueError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _make(A @ B, (a, b), "matmul",
                 lambda g: (g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), "softmax", _bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("log_softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), "log_softmax", lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an (C_out, C_in, kh, kw) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(f"conv2d: kernel expects {ci} input channels, input has {c}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :ho, :wo]          # n, c, ho, wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(co, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph:ph + h, pw:pw + w]
        return dx, dk

    return _make(np.ascontiguousarray(out), (x, kernel), "conv2d", _bw)


# ---------------------------------------------------------------------------
# reductions and indexing


def _check_axis(x: Tensor, axis) -> None:
    if axis is None:
        return
    axes = axis if isinstance(axis, tuple) else (axis,)
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ValueError(f"axis {a} out of range for shape {x.shape}")


def _expand(g: np.ndarray, x: Tensor, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_axis(x, axis)
    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum",
                 lambda g: (_expand(g, x, axis, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis(x, axis)
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // data.size
    return _make(data, (x,), "mean", lambda g: (_expand(g, x, axis, keepdims) / count,))


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximal entry."""
    _check_axis(x, axis)
    if axis is None:
        flat = int(np.argmax(x.data))
        data = np.asarray(x.data.reshape(-1)[flat])

        def _bw(g):
            d = np.zeros(x.size)
            d[flat] = float(np.asarray(g).reshape(-1)[0])
            return (d,)

        return _make(data.reshape((1,) * x.ndim) if keepdims else data, (x,), "amax", _bw)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    data = np.take_along_axis(x.data, idx, axis)

    def _bw_axis(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        d = np.zeros_like(x.data)
        np.put_along_axis(d, idx, gk, axis)
        return (d,)

    return _make(data if keepdims else np.squeeze(data, axis), (x,), "amax", _bw_axis)


def argsort_desc(x, axis: int = -1) -> np.ndarray:
    """Descending argsort; ties keep ascending original index (stable)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    # stable ascending sort of the negation == stable descending sort
    return np.argsort(-arr, axis=axis, kind="stable")


def topk(x, k: int, axis: int = -1) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    extent = arr.shape[axis]
    if not 0 <= k <= extent:
        raise ValueError(f"topk: k={k} exceeds extent {extent}")
    order = argsort_desc(arr, axis)
    return np.take(order, np.arange(k), axis=axis)


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select slices of ``x`` along ``axis`` by a 1-D integer index."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather: index must be one-dimensional")
    extent = x.shape[axis]
    if idx.size and (idx.min() < -extent or idx.max() >= extent):
        raise IndexError(f"gather: index out of bounds for extent {extent}")

    def _bw(g):
        d = np.zeros_like(x.data)
        np.add.at(d, (slice(None),) * (axis % x.ndim) + (idx,), g)
        return (d,)

    return _make(np.take(x.data, idx, axis=axis), (x,), "gather", _bw)


def take_along_axis(x: Tensor, index, axis: int) -> Tensor:
    """Batched gather with :func:`numpy.take_along_axis` semantics."""
    idx = np.asarray(index, dtype=np.intp)
    extent = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise IndexError(f"take_along_axis: index out of bounds for extent {extent}")
    data = np.take_along_axis(x.data, idx, axis)

    def _bw(g):
        d = np.zeros_like(x.data)
        full = np.broadcast_to(idx, g.shape)
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis % x.ndim] = full
        np.add.at(d, tuple(grids), g)
        return (d,)

    return _make(data, (x,), "take_along_axis", _bw)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                 lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(x.data, shape).copy()
    lead = len(shape) - x.ndim

    def _bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(data, (x,), "broadcast_to", _bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def _bw(g):
        return np.split(g, bounds, axis=axis)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, "concat", _bw)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]

    def _bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return _make(np.stack([t.data for t in ts], axis=axis), ts, "stack", _bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    f = int(factor)
    if f == 1:
        return x
    data = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)

    def _bw(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // f, f, w // f, f).sum(axis=(-3, -1)),)

    return _make(data, (x,), "upsample_nearest", _bw)


# ---------------------------------------------------------------------------
# backward


@dataclass
class Tape:
    """Recorded ops reachable from one output, in recording order."""

    ops: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack_ = [out]
        while stack_:
            t = stack_.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack_.extend(t._parents)
        found.sort(key=lambda t: t._seq)
        return cls(found)

    def replay(self) -> None:
        for t in reversed(self.ops):
            if t.grad is not None:
                t._backward(t.grad)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on everything reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any tensor requiring grad")
    tape = Tape.from_output(loss)
    seed = np.ones(loss.shape)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    tape.replay()
    return tape
