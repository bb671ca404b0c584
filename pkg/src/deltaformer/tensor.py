"""Dense float64 tensors with a reverse-mode differentiation tape.

A :class:`Tensor` owns a numpy buffer. Operations on tensors that require
gradients attach a :class:`Node` to their result; the node keeps only the
arrays its backward rule needs and links to the parents' nodes, never to the
parents' buffers. Dropping an intermediate tensor therefore frees its buffer
unless a backward rule captured it, which is what makes the allocation
counter a faithful picture of peak memory.
"""
from __future__ import annotations

import contextlib
import math
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPE = np.float64


class AllocationCounter:
    """Counts bytes of tensor buffers alive at once.

    Only root buffers are counted (views share memory with their base).
    ``reset`` starts a new generation; releases of buffers tracked in an
    earlier generation are ignored so ``live_bytes`` never goes negative.
    """

    def __init__(self) -> None:
        self.enabled = False
        self._generation = 0
        self._tracked: dict[int, int] = {}
        self.live_bytes = 0
        self.peak_bytes = 0
        self.total_allocations = 0

    def reset(self) -> None:
        self._generation += 1
        self._tracked = {}
        self.live_bytes = 0
        self.peak_bytes = 0
        self.total_allocations = 0

    def track(self, arr: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return arr
        root = arr
        while isinstance(root.base, np.ndarray):
            root = root.base
        key = id(root)
        if key in self._tracked:
            return arr
        n = int(root.nbytes)
        self._tracked[key] = n
        self.live_bytes += n
        self.total_allocations += 1
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        weakref.finalize(root, self._release, key, n, self._generation)
        return arr

    def _release(self, key: int, n: int, generation: int) -> None:
        if generation != self._generation:
            return
        if self._tracked.pop(key, None) is not None:
            self.live_bytes -= n

    def snapshot(self) -> dict:
        return {
            "live_bytes": self.live_bytes,
            "peak_bytes": self.peak_bytes,
            "total_allocations": self.total_allocations,
        }


COUNTER = AllocationCounter()


@contextlib.contextmanager
def profiling():
    """Enable and reset the global allocation counter for the enclosed block."""
    prev = COUNTER.enabled
    COUNTER.reset()
    COUNTER.enabled = True
    try:
        yield COUNTER
    finally:
        COUNTER.enabled = prev


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """One entry of the differentiation tape."""

    __slots__ = ("parents", "backward", "leaf", "op")

    def __init__(self, parents, backward, leaf=None, op=""):
        self.parents: tuple[Node | None, ...] = parents
        self.backward: Callable | None = backward
        self.leaf = leaf
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = COUNTER.track(arr)
        self.grad: np.ndarray | None = None
        self.name = name
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        if self.requires_grad:
            self.node = Node((), None, leaf=weakref.ref(self), op="leaf")

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

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
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(
            tuple(p.node if p.requires_grad else None for p in parents),
            backward,
            op=op,
        )
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (unbroadcast(g, sa) if needs[0] else None,
                unbroadcast(g, sb) if needs[1] else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (unbroadcast(g, sa) if needs[0] else None,
                unbroadcast(-g, sb) if needs[1] else None)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (unbroadcast(g * bd, ad.shape) if needs[0] else None,
                unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g, needs):
        ga = unbroadcast(g / bd, ad.shape) if needs[0] else None
        gb = unbroadcast(-g * ad / (bd * bd), bd.shape) if needs[1] else None
        return ga, gb

    return _make(ad / bd, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(exponent)

    def backward(g, needs):
        return (g * p * ad ** (p - 1.0),)

    return _make(ad ** p, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g, needs):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def backward(g, needs):
        return (g / ad,)

    return _make(np.log(ad), (a,), backward, "log")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g, needs):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward, "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))

    def backward(g, needs):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(0.5 * x * (1.0 + t), (a,), backward, "gelu")


# -- reductions and shape --------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g, needs):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g, needs):
        return (unbroadcast(g, old),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g, needs):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index], dtype=DTYPE), (a,), backward, "getitem")


# -- linear algebra and normalization ---------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    # (..., k) @ (k, n): fold the leading axes into one GEMM
    flat = bd.ndim == 2 and ad.ndim > 2

    def backward(g, needs):
        if flat:
            k, n = bd.shape
            ga = (g.reshape(-1, n) @ bd.T).reshape(ad.shape) if needs[0] else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if needs[1] else None
            return ga, gb
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if needs[0] else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if needs[1] else None
        return ga, gb

    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[1])
    else:
        out = ad @ bd
    return _make(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError(f"softmax received non-finite logits (shape {x.shape})")
    z = xd - xd.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z

    def backward(g, needs):
        gs = g * out
        gs -= out * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last dim {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = COUNTER.track(xc * rstd)
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g, needs):
        gx = ggamma = gbeta = None
        if needs[0]:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            ggamma = (g * xhat).sum(axis=lead)
        if needs[2]:
            gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target)
    return mean(diff * diff)


# -- reverse pass -----------------------------------------------------------

def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from each reached leaf tensor to its accumulated gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss does not depend on any tensor that requires gradients")
    grads: dict[int, np.ndarray] = {id(loss.node): COUNTER.track(np.ones_like(loss.data))}
    reached: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(loss.node)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.leaf is not None:
            t = node.leaf()
            if t is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                COUNTER.track(t.grad)
                reached[t] = t.grad
            continue
        needs = tuple(p is not None for p in node.parents)
        for p, pg in zip(node.parents, node.backward(g, needs)):
            if p is None or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = COUNTER.track(grads[key] + pg)
            else:
                grads[key] = COUNTER.track(pg)
        del g
    return reached


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
