"""Dense float64 tensors with reverse-mode automatic differentiation.

A deliberately small engine: every differentiable operation builds one graph
node holding a closure that scatters the output gradient back to its parents.
``Tensor.backward`` runs an iterative topological walk (no recursion, so long
unrolled graphs are fine), accumulates gradients with ``+=``, then frees the
graph. Calling backward twice on the same graph is an error; parameters are
leaves and survive for the next step.

Everything is float64 unless ``set_default_dtype`` says otherwise. Gradient
checks run against central finite differences, which is why the default stays
at 64 bits.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64

# Grad mode is per-thread: actor threads act under no_grad while the learner
# thread builds its graph concurrently.
_GRAD_STATE = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar backward, double backward)."""


class EmptyWindowError(ValueError):
    """A softmax row has no unmasked entry: empty attention window."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (acting / evaluation)."""
    prev = is_grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
    return np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""
        self._done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._done = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out._op = ""
        return out

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff --------------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor with no graph attached")
        if self._done:
            raise GraphError("backward() already ran on this graph; rebuild it before calling again")

        # Iterative post-order topological sort.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._backward is not None:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            # grad None means no child propagated anything into this node
            # (e.g. it only feeds a zero-width attention window), so its
            # contribution to every parent is exactly zero.
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._done = True
            node._backward = None
            node._parents = ()

    # -- operator overloads ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        req = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req}{grad}, op={self._op!r})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise binary ops -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._node(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._node(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._node(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._node(data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._node(-a.data, (a,), backward, "neg")


# -- matmul ----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._node(data, (a, b), backward, "matmul")


# -- elementwise unary ops --------------------------------------------------------


def relu(a) -> Tensor:
    a = _wrap(a)
    keep = a.data > 0
    data = np.where(keep, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * keep)

    return Tensor._node(data, (a,), backward, "relu")


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return Tensor._node(data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor._node(data, (a,), backward, "log")


def tanh(a) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return Tensor._node(data, (a,), backward, "tanh")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return Tensor._node(data, (a,), backward, "sigmoid")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 strictly inside the interval, 0 outside."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * inside)

    return Tensor._node(data, (a,), backward, "clamp")


# -- reductions --------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(np.asarray(g), a.shape, axis, keepdims).copy())

    return Tensor._node(np.asarray(data), (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )

    def backward(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(np.asarray(g), a.shape, axis, keepdims) / count)

    return Tensor._node(np.asarray(data), (a,), backward, "mean")


# -- shape ops ---------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor._node(data, (a,), backward, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return Tensor._node(data, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._node(data, tuple(tensors), backward, "concat")


def index(a, idx) -> Tensor:
    """Basic indexing (ints and slices); backward scatters into zeros.

    Basic indexing never selects the same element twice, so plain += is a
    correct scatter.
    """
    a = _wrap(a)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            # the output array is at least 1-d even for scalar picks, so the
            # incoming gradient may carry an extra unit dimension
            full[idx] += np.reshape(g, np.shape(full[idx]))
            a._accumulate(full)

    return Tensor._node(np.ascontiguousarray(data), (a,), backward, "index")


def gather_lastdim(a, idx: np.ndarray) -> Tensor:
    """out[..., j] = a[..., idx[..., j]] with integer ``idx`` of matching rank."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"gather index shape {idx.shape} does not match {a.shape}")
    data = np.take_along_axis(a.data, idx, axis=-1)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            flat_full = full.reshape(-1, a.shape[-1])
            flat_idx = idx.reshape(-1, idx.shape[-1])
            flat_g = g.reshape(-1, idx.shape[-1])
            rows = np.arange(flat_full.shape[0])[:, None]
            np.add.at(flat_full, (rows, flat_idx), flat_g)
            a._accumulate(full)

    return Tensor._node(data, (a,), backward, "gather")


def embedding(table, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]; backward scatter-adds into the table."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)

    return Tensor._node(data, (table,), backward, "embedding")


# -- structured ops -----------------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """2-d valid convolution (cross-correlation), NCHW layout, stride 1 only."""
    x, w = _wrap(x), _wrap(w)
    if stride != 1:
        raise ShapeError("conv2d supports stride 1 only")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if kh > H or kw > W:
        raise ShapeError(f"kernel {w.shape} larger than input {x.shape}")
    OH, OW = H - kh + 1, W - kw + 1
    data = np.zeros((B, O, OH, OW), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x.data[:, :, i:i + OH, j:j + OW]
            data += np.einsum("bchw,oc->bohw", patch, w.data[:, :, i, j])
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        if b.shape != (O,):
            raise ShapeError(f"conv2d bias shape {b.shape}, expected ({O},)")
        data += b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + OH, j:j + OW] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j])
            x._accumulate(gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = x.data[:, :, i:i + OH, j:j + OW]
                    gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch)
            w._accumulate(gw)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._node(data, tuple(parents), backward, "conv2d")


def dropout(x, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    x = _wrap(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.uniform(x.shape) >= p) / (1.0 - p)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor._node(x.data * mask, (x,), backward, "dropout")


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last dimension with learned gain and bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm params must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gh - m1 - xhat * m2) * inv)

    return Tensor._node(data, (x, gain, bias), backward, "layernorm")


# Exponent guard for entries outside the softmax support; their forward weight is
# exactly zero either way, the cap only keeps the mask-gradient finite.
_MASKED_EXP_CAP = 50.0


def softmax_lastdim(x, mask=None, empty_ok: bool = False) -> Tensor:
    """Masked, renormalized softmax over the last dimension.

    out_r = mask_r * exp(x_r) / sum_q mask_q * exp(x_q)

    The mask is part of the graph: gradients flow into both ``x`` and ``mask``.
    Stabilization subtracts the per-row max over the unmasked support only, so
    masked entries with large logits cannot starve the support of precision.
    Rows whose support is empty (all mask entries zero, or zero width) raise
    unless ``empty_ok``, in which case the row's output is all zeros.
    """
    x = _wrap(x)
    has_mask = mask is not None
    if has_mask:
        mask = _wrap(mask)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != input shape {x.shape}")
        m = mask.data
        support = m > 0.0
    else:
        m = None
        support = np.ones(x.shape, dtype=bool)

    if x.shape[-1] == 0:
        active = np.zeros(x.shape[:-1] + (1,), dtype=bool)
    else:
        active = support.any(axis=-1, keepdims=True)
    if not active.all() and not empty_ok:
        raise EmptyWindowError("empty attention window: a softmax row has no unmasked entry")

    if x.shape[-1] == 0:
        data = np.zeros_like(x.data)
        parents = (x, mask) if has_mask else (x,)
        return Tensor._node(data, parents, lambda g: None, "softmax")

    c = np.where(support, x.data, -np.inf).max(axis=-1, keepdims=True)
    c = np.where(active, c, 0.0)
    arg = x.data - c
    if has_mask:
        arg = np.where(support, arg, np.minimum(arg, _MASKED_EXP_CAP))
    e = np.exp(arg)
    w = e * m if has_mask else e
    s = w.sum(axis=-1, keepdims=True)
    safe_s = np.where(active, s, 1.0)
    data = np.where(active, w / safe_s, 0.0)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        if x.requires_grad:
            x._accumulate(np.where(active, data * (g - dot), 0.0))
        if has_mask and mask.requires_grad:
            mask._accumulate(np.where(active, e * (g - dot) / safe_s, 0.0))

    parents = (x, mask) if has_mask else (x,)
    return Tensor._node(data, parents, backward, "softmax")


def log_softmax_lastdim(x) -> Tensor:
    """Numerically stable log softmax over the last dimension."""
    x = _wrap(x)
    c = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - c
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def backward(g):
        if x.requires_grad:
            x._accumulate(g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return Tensor._node(data, (x,), backward, "log_softmax")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)
