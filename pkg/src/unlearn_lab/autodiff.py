"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op records a :class:`Node` on its output tensor. Node ids come from a
global monotonic counter, so sorting the nodes reachable from a loss by id
recovers the order in which they were appended; ``backward`` walks that order
in reverse.

Gradients accumulate additively into leaf tensors (``requires_grad`` and no
producing node) until :func:`zero_grad` or ``Tensor.zero_grad`` resets them.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# next() on a count is atomic under the GIL, so ids stay unique across threads
_node_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference only, per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "_retain")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        op = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by forward op '{op}'")
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.node = Node(next(_node_ids), op, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Nodes reachable from a root, in append (topological) order."""

    nodes: list[Node] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.id)
        return cls([t.node for t in found], found)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.outputs):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._retain:
            _accumulate(t, g)
        node = t.node
        with np.errstate(all="ignore"):  # non-finite results are reported below
            in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if not np.all(np.isfinite(ig)):
                raise FloatingPointError(
                    f"non-finite gradient from node {node.id} ('{node.op}')"
                )
            if inp.node is None:
                _accumulate(inp, ig)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), "log", lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), (a,), "clamp_min", lambda g: (g * mask,))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    if a.ndim <= 1:
        return a
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):  # _make reports non-finite output
        out = ad @ bd
    return _make(out, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def softmax(a: Tensor) -> Tensor:
    _check_last_axis(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (a,), "softmax",
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    _check_last_axis(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (a,), "log_softmax",
                 lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def _check_last_axis(a: Tensor) -> None:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax over an empty final axis (shape {a.shape})")


def grad_reverse(x: Tensor, scale: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    if scale < 0:
        raise ValueError(f"reversal scale must be nonnegative, got {scale}")
    k = -float(scale)
    return _make(x.data, (x,), "grad_reverse", lambda g: (g * k,))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# --------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation. ``x`` is [C,H,W] or [B,C,H,W]; kernels [F,C,kh,kw]."""
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects [B,]C,H,W input and F,C,kh,kw kernels, "
                         f"got {x.shape} and {kernels.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    F, Ck, kh, kw = kernels.shape
    if Ck != C or kh > H or kw > W:
        raise ShapeError(f"conv2d: kernels {kernels.shape} incompatible with input {x.shape}")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    wd = kernels.data
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: rows are (b, ho, wo), columns are (c, i, j)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = wd.reshape(F, C * kh * kw)
    with np.errstate(over="ignore", invalid="ignore"):  # _make reports non-finite output
        out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    def bw(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        dw = (gmat.T @ cols).reshape(F, C, kh, kw)
        dxo = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
            dx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + stride * (Ho - 1) + 1:stride,
                       j:j + stride * (Wo - 1) + 1:stride] += dcols[i, j]
            dxo = dx if batched else dx[0]
        if bias is None:
            return dxo, dw
        return dxo, dw, g4.sum(axis=(0, 2, 3))

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(np.ascontiguousarray(out), inputs, "conv2d", bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling; trailing rows/cols are dropped."""
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"max_pool2d expects [B,]C,H,W input, got {x.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"pool size {size} larger than input {x.shape}")
    crop = xd[:, :, :Ho * size, :Wo * size]
    win = crop.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, Ho, Wo, size * size)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]
    if not batched:
        out = out[0]

    def bw(g):
        g4 = g if batched else g[None]
        dwin = np.zeros((B, C, Ho, Wo, size * size))
        np.put_along_axis(dwin, idx, g4[..., None], axis=-1)
        dcrop = dwin.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros_like(xd)
        dx[:, :, :Ho * size, :Wo * size] = dcrop.reshape(B, C, Ho * size, Wo * size)
        return (dx if batched else dx[0],)

    return _make(out, (x,), "max_pool2d", bw)
