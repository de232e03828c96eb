"""Dense tensors with reverse-mode automatic differentiation.

Design contract:
  * float32 storage everywhere in production paths; float64 graphs are
    supported so tests can run high-precision finite-difference oracles.
  * leaf gradients accumulate across repeated backward() calls; the caller
    zeroes them explicitly (``zero_grads``).  Intermediate gradients are
    transient per call.
  * reductions run in sequential index-ascending order, so a given graph
    produces bit-identical results run to run.
  * single-threaded per graph; distinct graphs may live on distinct
    threads with no shared mutable state.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import AllMaskedRow, NonScalarLoss, ShapeMismatch

_grad_state = threading.local()

Accum = Callable[["Tensor", np.ndarray], None]


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager disabling graph construction (inference mode)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data if dtype is None or data.dtype == dtype else data.astype(dtype)
        else:
            self.data = np.asarray(data, dtype=dtype or np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # --- introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=None)

    # --- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=None)


def _check_dtypes(a: Tensor, b: Tensor):
    if a.data.dtype != b.data.dtype:
        raise ShapeMismatch(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=None)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    out_data = a.data + b.data

    def backward_fn(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    out_data = a.data - b.data

    def backward_fn(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, -_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    out_data = a.data * b.data

    def backward_fn(g, accum):
        accum(a, _unbroadcast(g * b.data, a.shape))
        accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward_fn)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward_fn(g, accum):
        accum(a, g * (a.data > 0))

    return _make(out_data, (a,), backward_fn)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_np(a.data)

    def backward_fn(g, accum):
        accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(g, accum):
        accum(a, g * out_data)

    return _make(out_data, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward_fn(g, accum):
        accum(a, g / a.data)

    return _make(out_data, (a,), backward_fn)


# --- structural -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward_fn(g, accum):
        accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward_fn)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward_fn(g, accum):
        accum(a, np.swapaxes(g, ax1, ax2))

    return _make(out_data, (a,), backward_fn)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; adjoint adds into the slice."""
    out_data = np.array(a.data[key], copy=True)

    def backward_fn(g, accum):
        buf = np.zeros_like(a.data)
        buf[key] += g
        accum(a, buf)

    return _make(out_data, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward_fn(g, accum):
        offset = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            accum(t, g[tuple(sl)])
            offset += s

    return _make(out_data, tuple(tensors), backward_fn)


def index_select(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a table; adjoint scatter-adds per index."""
    idx = np.asarray(idx)
    out_data = np.array(table.data[idx], copy=True)

    def backward_fn(g, accum):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        accum(table, buf)

    return _make(out_data, (table,), backward_fn)


# --- reductions -------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g, accum):
        gb = g
        if axis is not None and not keepdims:
            gb = np.expand_dims(gb, axis)
        accum(a, np.broadcast_to(gb, a.shape))

    return _make(np.asarray(out_data, dtype=a.dtype), (a,), backward_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g, accum):
        gb = g
        if axis is not None and not keepdims:
            gb = np.expand_dims(gb, axis)
        accum(a, np.broadcast_to(gb, a.shape) / a.dtype.type(n))

    return _make(np.asarray(out_data, dtype=a.dtype), (a,), backward_fn)


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dims differ: {a.shape} @ {b.shape}")
    _check_dtypes(a, b)
    out_data = np.matmul(a.data, b.data)

    def backward_fn(g, accum):
        accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out_data, (a, b), backward_fn)


# --- normalization / attention ------------------------------------------------


def softmax_last(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax over the last axis.

    ``mask`` is boolean, broadcastable to ``a.shape``; True marks allowed
    positions, which is the only place weight can land.  Raises
    AllMaskedRow if some row has no allowed position.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise AllMaskedRow("softmax row with every position masked")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    z = np.exp(x - m)
    out_data = (z / z.sum(axis=-1, keepdims=True)).astype(a.dtype, copy=False)

    def backward_fn(g, accum):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backward_fn)


def softmax_rows(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax of a matrix (softmax_last restricted to 2-D)."""
    if a.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax_last(a, mask)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward_fn(g, accum):
        gxhat = g * gain.data
        accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        accum(bias, g.reshape(-1, d).sum(axis=0))
        mean_g = gxhat.mean(axis=-1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
        accum(a, inv * (gxhat - mean_g - xhat * mean_gx))

    return _make(out_data, (a, gain, bias), backward_fn)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Single-head attention: softmax(q kᵀ / sqrt(d)) v.

    ``mask[i, j]`` True means query i may attend key j; masked positions
    get exactly zero weight.  A fully masked query row raises AllMaskedRow.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatch("scaled_dot_attention expects matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / float(np.sqrt(q.shape[1]))
    scores = mul(matmul(q, swapaxes(k, 0, 1)), scale)
    weights = softmax_last(scores, mask)
    return matmul(weights, v)


def substitute(a: Tensor, values: np.ndarray) -> Tensor:
    """Identity-gradient value substitution (straight-through estimator).

    Forward takes ``values`` verbatim; backward passes the incoming
    gradient to ``a`` unchanged.  Shapes must agree.
    """
    values = np.asarray(values, dtype=a.dtype)
    if values.shape != a.shape:
        raise ShapeMismatch(f"substitute: {values.shape} vs {a.shape}")

    def backward_fn(g, accum):
        accum(a, g)

    return _make(np.array(values, copy=True), (a,), backward_fn)


def bce_with_logits(s: Tensor, y) -> Tensor:
    """Per-element binary cross-entropy on logits, in stable form.

    loss = max(s, 0) - s*y + log(1 + exp(-|s|));  y is a constant target.
    """
    y = np.asarray(y, dtype=s.dtype)
    x = s.data
    out_data = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward_fn(g, accum):
        accum(s, g * (_sigmoid_np(x) - y))

    return _make(out_data, (s,), backward_fn)


# --- convolution ---------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    """(B,H,W,C) -> (B,OH,OW,KH,KW,C) patch gather."""
    b, _, _, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, :, ki, kj, :] = x[:, ki:ki + stride * oh:stride,
                                         kj:kj + stride * ow:stride, :]
    return cols


def _col2im(cols: np.ndarray, stride: int, pad: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col; overlapping patches sum in (ki, kj) order."""
    b, oh, ow, kh, kw, c = cols.shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki:ki + stride * oh:stride,
                kj:kj + stride * ow:stride, :] += cols[:, :, :, ki, kj, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, pad: int) -> Tensor:
    """NHWC convolution; weight layout (KH, KW, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D x and w, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeMismatch(f"conv2d channels: x has {x.shape[-1]}, w expects {cin}")
    bsz, h, wdt, _ = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wdt + 2 * pad - kw) // stride + 1
    cols = _im2col(x.data, kh, kw, stride, pad, oh, ow)
    flat = cols.reshape(bsz * oh * ow, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = flat @ wmat
    if b is not None:
        out_data = out_data + b.data
    out_data = out_data.reshape(bsz, oh, ow, cout)

    def backward_fn(g, accum):
        gflat = g.reshape(bsz * oh * ow, cout)
        accum(w, (flat.T @ gflat).reshape(w.shape))
        if b is not None:
            accum(b, gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ wmat.T).reshape(bsz, oh, ow, kh, kw, cin)
            accum(x, _col2im(gcols, stride, pad, h, wdt))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward_fn)


def conv2d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor],
                     stride: int, pad: int) -> Tensor:
    """Transposed NHWC convolution; weight layout (KH, KW, Cin, Cout).

    Output spatial size is (in - 1) * stride + KH - 2 * pad.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d_transpose expects 4-D x and w, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeMismatch(f"conv2d_transpose channels: x has {x.shape[-1]}, w expects {cin}")
    bsz, h, wdt, _ = x.shape
    out_h = (h - 1) * stride + kh - 2 * pad
    out_w = (wdt - 1) * stride + kw - 2 * pad
    xflat = x.data.reshape(bsz * h * wdt, cin)
    wmat = w.data.reshape(kh * kw, cin, cout).transpose(1, 0, 2).reshape(cin, kh * kw * cout)
    cols = (xflat @ wmat).reshape(bsz, h, wdt, kh, kw, cout)
    out_data = _col2im(cols, stride, pad, out_h, out_w)
    if b is not None:
        out_data = out_data + b.data

    def backward_fn(g, accum):
        gcols = _im2col(g, kh, kw, stride, pad, h, wdt)
        gcols_flat = gcols.reshape(bsz * h * wdt, kh * kw * cout)
        accum(x, (gcols_flat @ wmat.T).reshape(bsz, h, wdt, cin))
        gw = (xflat.T @ gcols_flat).reshape(cin, kh * kw, cout)
        accum(w, gw.transpose(1, 0, 2).reshape(w.shape))
        if b is not None:
            accum(b, g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward_fn)


# --- backward -------------------------------------------------------------------


def backward(loss: Tensor):
    """Populate .grad for every requires_grad leaf reachable from loss.

    Each graph node is visited exactly once (reverse topological order).
    Intermediate gradients live only for the duration of the call; leaf
    gradients accumulate across calls until zeroed by the caller.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def accum(t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        key = id(t)
        if key in grads:
            grads[key] += g
        else:
            grads[key] = np.array(g, dtype=t.data.dtype, copy=True)

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, accum)
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
