"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float64 for verification, float32 for
training).  Operations record a graph of vector-Jacobian closures;
``backward`` walks it in reverse topological order and accumulates
gradients on every leaf created with ``requires_grad=True``.

Determinism contract: all kernels reduce in a fixed order (numpy / BLAS),
so two runs over identical inputs produce bit-identical outputs.  Any
kernel that produces a NaN or Inf raises ``NumericsError`` while finite
checks are enabled.  Tensors are safe to share read-only; gradient
accumulators belong to a single training thread.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericsError, ShapeError

_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return np.dtype(_DEFAULT_DTYPE)


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-kernel NaN/Inf detection (on by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            arr = data.data
        else:
            arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NumericsError("tensor constructed with non-finite values")

    # -- shape/introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(arr) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._vjp = None
    return t


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=dtype))


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def _result(data: np.ndarray, parents, vjp) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericsError("kernel produced non-finite values")
    out = _wrap(data)
    if _GRAD_ENABLED and any(_needs(p) for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if _needs(a) else None,
                _unbroadcast(g, b.shape) if _needs(b) else None)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if _needs(a) else None,
                _unbroadcast(-g, b.shape) if _needs(b) else None)

    return _result(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if _needs(a) else None,
                _unbroadcast(g * a.data, b.shape) if _needs(b) else None)

    return _result(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if _needs(a) else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if _needs(b) else None
        return ga, gb

    return _result(a.data / b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    c = float(exponent)
    return _result(a.data ** c, (a,), lambda g: (g * c * a.data ** (c - 1.0),))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _result(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _result(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _result(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _result(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _result(0.5 * x * (1.0 + th), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sin(a: Tensor) -> Tensor:
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def maximum_const(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) with the gradient routed to ``a`` on ties."""
    mask = a.data >= floor
    return _result(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


# -- reductions and shape ----------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,),
                   lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if _needs(t) else None for p, t in zip(pieces, tensors))

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index], (a,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 on both operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from err

    def vjp(g):
        ga = gb = None
        if _needs(a):
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if _needs(b):
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _result(out_data, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ w + b."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear width mismatch: {x.shape} @ {w.shape}")
    out_data = np.matmul(x.data, w.data)
    if b is not None:
        out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gx = gw = gb = None
        if _needs(x):
            gx = np.matmul(g, w.data.T)
        if _needs(w):
            gw = np.matmul(x.data.reshape(-1, x.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        if b is not None and _needs(b):
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out_data, parents, vjp)


# -- neural-network kernels --------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _result(out_data, (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    if a.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least 2 features on the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (a,), vjp)


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(dh)) v over per-head token axes.

    Shapes: q [..., Sq, dh], k/v [..., Sk, dh].  The joint softmax runs over
    the full key axis, so callers control conditioning purely through what
    they concatenate into k and v.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention shapes inconsistent: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, k.data.swapaxes(-1, -2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out_data = np.matmul(weights, v.data)

    def vjp(g):
        gq = gk = gv = None
        if _needs(v):
            gv = np.matmul(weights.swapaxes(-1, -2), g)
        if _needs(q) or _needs(k):
            gw = np.matmul(g, v.data.swapaxes(-1, -2))
            gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
            if _needs(q):
                gq = np.matmul(gs, k.data) * scale
            if _needs(k):
                gk = np.matmul(gs.swapaxes(-1, -2), q.data) * scale
        return gq, gk, gv

    return _result(out_data, (q, k, v), vjp)


def _pair(x):
    return (x, x) if isinstance(x, int) else tuple(x)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """Batched 2-D cross-correlation.

    x [B, C, H, W], w [O, C, kh, kw]; output extent per axis is
    floor((H + 2p - kh) / stride) + 1.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    bsz, cin, hin, win = x.shape
    cout, cw, kh, kw = w.shape
    if cw != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cw}")
    hout = (hin + 2 * ph - kh) // sh + 1
    wout = (win + 2 * pw - kw) // sw + 1
    if hout <= 0 or wout <= 0 or kh > hin + 2 * ph or kw > win + 2 * pw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit padded input {hin + 2 * ph}x{win + 2 * pw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]  # [B, C, Ho, Wo, kh, kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * hout * wout, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out_data = cols @ wmat.T
    if b is not None:
        out_data = out_data + b.data
    out_data = out_data.reshape(bsz, hout, wout, cout).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(bsz * hout * wout, cout)
        gx = gw = gb = None
        if _needs(w):
            gw = (cols.T @ gm).T.reshape(w.shape)
        if b is not None and _needs(b):
            gb = gm.sum(axis=0)
        if _needs(x):
            gcols = (gm @ wmat).reshape(bsz, hout, wout, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + hin, pw:pw + win] if (ph or pw) else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out_data, parents, vjp)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup; gradients scatter-add back into the table."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table of {table.shape[0]} rows")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), vjp)


# -- backward ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate reverse-mode gradients of a scalar loss onto all leaves.

    Repeated calls without zeroing add into existing ``grad`` buffers.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in visited:
                stack.append((p, False))

    # First insertion may alias a vjp output (several parents can receive the
    # same array object), so in-place accumulation is only safe on buffers we
    # allocated ourselves.
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = {id(loss)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        owned.discard(id(node))
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not _needs(parent):
                    continue
                key = id(parent)
                if key not in grads:
                    grads[key] = pg
                elif key in owned:
                    grads[key] += pg
                else:
                    grads[key] = grads[key] + pg
                    owned.add(key)
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g


# -- binary tensor file ------------------------------------------------------

_MAGIC = b"VTOT"
_TAG_FOR_DTYPE = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("uint8"): 3}
_DTYPE_FOR_TAG = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}


def write_tensor(f, arr: np.ndarray) -> None:
    """Write one array in the tensor binary format (magic VTOT)."""
    arr = np.asarray(arr)
    # ascontiguousarray promotes rank 0 to rank 1, so restore the shape.
    arr = np.ascontiguousarray(arr).reshape(arr.shape)
    if arr.dtype not in _TAG_FOR_DTYPE:
        raise ValueError(f"unsupported dtype for tensor file: {arr.dtype}")
    close = False
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        f = open(f, "wb")
        close = True
    try:
        f.write(_MAGIC)
        f.write(bytes([_TAG_FOR_DTYPE[arr.dtype], arr.ndim]))
        for extent in arr.shape:
            f.write(int(extent).to_bytes(8, "little"))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    finally:
        if close:
            f.close()


def read_tensor(f) -> np.ndarray:
    """Read one array written by ``write_tensor``."""
    close = False
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        f = open(f, "rb")
        close = True
    try:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad tensor file magic {magic!r}")
        tag, rank = f.read(1)[0], f.read(1)[0]
        if tag not in _DTYPE_FOR_TAG:
            raise ValueError(f"unknown dtype tag {tag}")
        shape = tuple(int.from_bytes(f.read(8), "little") for _ in range(rank))
        dtype = _DTYPE_FOR_TAG[tag]
        count = int(np.prod(shape)) if shape else 1
        payload = f.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise ValueError("truncated tensor payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        return arr.astype(dtype.newbyteorder("="), copy=True)
    finally:
        if close:
            f.close()
