"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs require gradients while
it is active (``with Tape() as tape: ...``).  ``tape.backward(root)`` walks
the recorded nodes once, in reverse insertion order, and accumulates
gradients into the ``grad`` field of leaf tensors.  Intermediate gradients
are discarded.

Broadcasting is intentionally limited to equal shapes and scalar-with-tensor;
row-wise bias addition has its own operation (:func:`bias_add`).
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "UsageError",
    "BoundsError",
    "Tensor",
    "Tape",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "as_tensor",
    "matmul",
    "conv2d",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "square",
    "sqrt",
    "sum",
    "mean",
    "max_pool2d",
    "reshape",
    "flatten",
    "getitem",
    "concat",
    "transpose",
    "bias_add",
    "outer",
    "frobenius_norm_sq",
    "cosine_similarity",
    "cross_entropy",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(RuntimeError):
    """The tape was used in a way the engine does not support."""


class BoundsError(IndexError):
    """A slice or index falls outside the tensor."""


_DTYPE = {"value": np.dtype(np.float32)}
_local = threading.local()


def get_default_dtype() -> np.dtype:
    return _DTYPE["value"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE["value"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default floating precision."""
    old = _DTYPE["value"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE["value"] = old


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array with optional gradient tracking.

    Parameters
    ----------
    data : array_like
        Values; copied into a fresh C-contiguous buffer.
    requires_grad : bool
        Mark as a leaf whose gradient should be accumulated by backward.
    dtype : numpy dtype, optional
        Defaults to the module-wide precision (float32 unless changed).
    """

    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else get_default_dtype(), order="C")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        # Takes ownership of ``arr`` without copying.
        t = cls.__new__(cls)
        arr = np.asarray(arr, order="C")  # ascontiguousarray would turn 0-d into 1-d
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = name
        t._node = None
        return t

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

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def strides(self) -> tuple[int, ...]:
        """Row-major strides in elements (not bytes)."""
        out, acc = [], 1
        for extent in reversed(self.shape):
            out.append(acc)
            acc *= extent
        return tuple(reversed(out))

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("op", "inputs", "backward", "out_ref")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], backward: Callable, out: Tensor):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        # weak, so tensor -> node -> tensor is not a cycle and activations
        # are freed by refcount instead of waiting for the cyclic collector
        self.out_ref = weakref.ref(out)


class Tape:
    """Append-only record of differentiable operations.

    One tape per training step; tapes are not shared between threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def _record(self, node: _Node) -> None:
        if self._consumed:
            raise UsageError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def leaves(self) -> list[Tensor]:
        """Distinct gradient-requiring leaves referenced by recorded nodes."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.is_leaf:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> list[Tensor]:
        """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

        Returns the leaves that received a gradient.
        """
        if self._consumed:
            raise UsageError("backward() called twice on the same tape without reset()")
        if root.size != 1:
            raise UsageError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {}
        touched: dict[int, Tensor] = {}
        if root._node is None:
            if root.requires_grad:
                _accumulate_leaf(root, np.ones_like(root.data))
                return [root]
            return []
        grads[id(root)] = np.ones_like(root.data) if seed is None else np.asarray(seed, root.dtype)
        for node in reversed(self.nodes):
            out = node.out_ref()
            g = None if out is None else grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate_leaf(inp, ig)
                    touched[id(inp)] = inp
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
        return list(touched.values())


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, requires_grad=needs)
    if needs:
        node = _Node(op, tuple(inputs), backward, res)
        res._node = node
        tape._record(node)
    return res


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return _make("sub", out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, a) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, a) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, b) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(a.dtype)
    return _make("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

# A tall fixed matrix times a few columns is memory bound, and BLAS gemm with
# n=2..8 runs well below gemv speed.  Row blocks that stay in cache are
# multiplied one column at a time instead.
_TALL_SIZE = 1 << 22
_TALL_COLS = 8
_TALL_BLOCK = 512


def _tall_mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    cols = [np.ascontiguousarray(b[:, j]) for j in range(b.shape[1])]
    for i in range(0, a.shape[0], _TALL_BLOCK):
        blk = a[i:i + _TALL_BLOCK]
        for j, c in enumerate(cols):
            out[i:i + _TALL_BLOCK, j] = blk @ c
    return out


def _tall_tmm(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``a.T @ g`` for tall ``a`` and a few columns of ``g``."""
    acc = np.zeros((g.shape[1], a.shape[1]), dtype=np.result_type(a, g))
    cols = [np.ascontiguousarray(g[:, j]) for j in range(g.shape[1])]
    for i in range(0, a.shape[0], _TALL_BLOCK):
        blk = a[i:i + _TALL_BLOCK]
        for j, c in enumerate(cols):
            acc[j] += c[i:i + _TALL_BLOCK] @ blk
    return acc.T


def matmul(a, b) -> Tensor:
    """Matrix product for ``[m,k] @ [k,n]`` and ``[m,k] @ [k]``.

    Gradients are only formed for operands that require them; a large fixed
    left operand therefore costs one extra product in backward, not two.
    """
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise DimensionError(f"matmul expects 2-D @ 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    tall = bd.ndim == 2 and 1 < bd.shape[1] <= _TALL_COLS and ad.size >= _TALL_SIZE
    out = _tall_mm(ad, bd) if tall else ad @ bd

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, bd) if bd.ndim == 1 else g @ bd.T
        if b.requires_grad:
            gb = _tall_tmm(ad, g) if tall else ad.T @ g
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def outer(a, b) -> Tensor:
    """Outer product of two vectors."""
    a, b = _pair(a, b)
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionError(f"outer expects vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd if a.requires_grad else None, g.T @ ad if b.requires_grad else None)

    return _make("outer", np.outer(ad, bd), (a, b), backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along axis 1 (``[N, C, ...] + [C]``)."""
    x, b = _pair(x, b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match axis 1 of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    return _make("bias_add", x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=red)))


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.

    ``x`` is ``[N, C, H, W]``, ``k`` is ``[O, C, kh, kw]``; output extent is
    ``(H + 2 pad - kh) // stride + 1``.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {k.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if kh > h + 2 * pad or kw > w + 2 * pad or ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output extent non-positive for input {x.shape}, kernel {k.shape}, pad {pad}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # columns laid out (C*kh*kw, N*ho*wo): runs along the output width stay contiguous
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    kmat = k.data.reshape(o, -1)
    out = (kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.shape != (o,):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({o},)")
        out = out + bias.data.reshape(1, o, 1, 1)
    inputs = (x, k) if bias is None else (x, k, bias)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gk = (g2 @ cols.T).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[2:], dtype=np.result_type(g, kmat))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _make("conv2d", out, inputs, backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == size); ragged edges are dropped."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"max_pool2d window {size} larger than input {x.shape}")
    xr = x.data[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gr = np.zeros(xr.shape, dtype=g.dtype)
        np.put_along_axis(gr, arg[..., None], g[..., None], axis=-1)
        gr = gr.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        if gr.shape[2:] != (h, w):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, :, :ho * size, :wo * size] = gr
            gr = full
        return (gr,)

    return _make("max_pool2d", out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    old = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor, start: int = 1) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def _check_index(shape: tuple[int, ...], index) -> None:
    idx = index if isinstance(index, tuple) else (index,)
    if len([i for i in idx if i is not Ellipsis and i is not None]) > len(shape):
        raise BoundsError(f"too many indices for shape {shape}")
    for dim, item in zip(shape, idx):
        if isinstance(item, (int, np.integer)):
            if not -dim <= item < dim:
                raise BoundsError(f"index {item} out of range for extent {dim}")
        elif isinstance(item, slice):
            if item.step not in (None, 1):
                continue
            for bound in (item.start, item.stop):
                if bound is not None and not -dim <= bound <= dim:
                    raise BoundsError(f"slice {item} out of range for extent {dim}")
            start = 0 if item.start is None else item.start
            if start >= dim and dim > 0:
                raise BoundsError(f"slice {item} selects nothing from extent {dim}")


def getitem(a: Tensor, index) -> Tensor:
    """Basic indexing (ints and slices) with bounds checking."""
    _check_index(a.shape, index)
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=np.result_type(g, dtype))
        full[index] = g
        return (full,)

    return _make("slice", np.array(out), (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def frobenius_norm_sq(a: Tensor) -> Tensor:
    x = a.data
    return _make("frobenius_norm_sq", np.asarray((x * x).sum()), (a,), lambda g: (2.0 * g * x,))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors of equal length."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shape mismatch {a.shape} vs {b.shape}")
    x, y = a.data.ravel(), b.data.ravel()
    nx, ny = np.sqrt(x @ x), np.sqrt(y @ y)
    cos = (x @ y) / (nx * ny)

    def backward(g):
        ga = g * (y / (nx * ny) - cos * x / (nx * nx)) if a.requires_grad else None
        gb = g * (x / (nx * ny) - cos * y / (ny * ny)) if b.requires_grad else None
        return (None if ga is None else ga.reshape(a.shape), None if gb is None else gb.reshape(b.shape))

    return _make("cosine_similarity", np.asarray(cos, dtype=a.dtype), (a, b), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy with integer labels (fused log-softmax)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64).ravel()
    n, c = logits.shape
    if y.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} rows but {y.shape[0]} labels")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _make("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), backward)
