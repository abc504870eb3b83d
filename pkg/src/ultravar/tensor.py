"""Dense float32 tensors with tape-based reverse-mode autodiff.

Values are stored as row-major float32 numpy arrays; reductions accumulate
in float64 before casting back.  Differentiable operations record themselves
on the active :class:`Tape` (a ``with`` context); running without an active
tape gives plain, allocation-light inference.

Every operation checks its output for NaN/Inf and raises
:class:`~ultravar.errors.NumericError` instead of propagating non-finite
values.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special

from .errors import DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "matmul",
    "conv2d",
    "layer_norm",
    "gelu",
    "relu",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "bilinear_resize",
    "upsample_nearest",
    "gather_rows",
    "concat",
    "reshape",
    "transpose",
    "clamp",
    "detach",
]

_ACTIVE_TAPES: list["Tape"] = []

def _quiet(fn):
    """Run an op with numpy FP warnings silenced; the finiteness check on
    every op output raises instead."""
    def wrapped(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fn(*args, **kwargs)
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by '{op}'")
    return arr


def _f32(arr) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=np.float32)


class Tensor:
    """Dense array with optional gradient buffer.

    ``requires_grad`` marks leaves created by the user; tensors produced by
    recorded operations inherit it from their inputs.  ``grad`` is populated
    by :func:`backward` and always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(_f32(data), "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (each delegates to a recorded op) --------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


class Tape:
    """Ordered record of executed differentiable operations.

    Nodes are appended in execution order, which is topological by
    construction; :func:`backward` traverses them once, in reverse.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> None:
        self._nodes.append((out, inputs, grad_fn))


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Wrap an op result; record it if a tape is active and grads flow."""
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(_f32(data), op)
    out.grad = None
    needs = bool(_ACTIVE_TAPES) and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        _ACTIVE_TAPES[-1].record(out, inputs, grad_fn)
    return out


@_quiet
def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse traversal populating ``grad`` for every requires_grad tensor."""
    if loss.size != 1:
        raise DimensionError("backward expects a scalar loss")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, grad_fn in reversed(tape._nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        if out.requires_grad:
            out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(inputs, grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = _f32(gi)
            prev = pending.get(id(inp))
            pending[id(inp)] = gi if prev is None else prev + gi
            keep[id(inp)] = inp
    for tid, g in pending.items():
        leaf = keep[tid]
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient down to the pre-broadcast shape (float64 accumulation)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting semantics)
# ---------------------------------------------------------------------------

@_quiet
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), grad_fn)


@_quiet
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make("sub", a.data - b.data, (a, b), grad_fn)


@_quiet
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make("mul", a.data * b.data, (a, b), grad_fn)


@_quiet
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", a.data / b.data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

@_quiet
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", out, (x,), grad_fn)


@_quiet
def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    n = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / np.float32(n),)

    return _make("mean", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

@_quiet
def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _make("reshape", x.data.reshape(shape), (x,), grad_fn)


@_quiet
def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _make("transpose", np.transpose(x.data, axes), (x,), grad_fn)


@_quiet
def take(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters into zeros."""
    x = as_tensor(x)

    def grad_fn(g):
        gx = np.zeros(x.shape, dtype=np.float32)
        gx[key] = g
        return (gx,)

    return _make("take", x.data[key], (x,), grad_fn)


@_quiet
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), grad_fn)


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same values, no graph connection."""
    return Tensor(np.array(as_tensor(x).data, copy=True))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

@_quiet
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics (ndim >= 2 operands)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64))

    def grad_fn(g):
        g64 = g.astype(np.float64)
        ga = np.matmul(g64, np.swapaxes(b.data, -1, -2).astype(np.float64))
        gb = np.matmul(np.swapaxes(a.data, -1, -2).astype(np.float64), g64)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), grad_fn)


@_quiet
def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array (embedding)."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("gather_rows index out of range")

    def grad_fn(g):
        gt = np.zeros(table.shape, dtype=np.float32)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make("gather_rows", table.data[idx], (table,), grad_fn)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

_INV_SQRT2 = np.float64(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = np.float64(1.0 / np.sqrt(2.0 * np.pi))


@_quiet
def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _make("relu", np.maximum(x.data, 0.0), (x,), grad_fn)


@_quiet
def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU: x * Phi(x)."""
    x = as_tensor(x)
    x64 = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + _special.erf(x64 * _INV_SQRT2))

    def grad_fn(g):
        pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT2PI
        return ((cdf + x64 * pdf).astype(np.float32) * g,)

    return _make("gelu", x64 * cdf, (x,), grad_fn)


@_quiet
def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data.astype(np.float64)))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g):
        return ((out * (1.0 - out)).astype(np.float32) * g,)

    return _make("sigmoid", out, (x,), grad_fn)


@_quiet
def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _make("clamp", np.clip(x.data, lo, hi), (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalization / attention / loss
# ---------------------------------------------------------------------------

@_quiet
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm parameters must have shape ({d},), got "
            f"{gamma.shape} / {beta.shape}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv

    def grad_fn(g):
        g64 = g.astype(np.float64)
        gxn = g64 * gamma.data.astype(np.float64)
        gx = inv * (gxn - gxn.mean(axis=-1, keepdims=True)
                    - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        axes = tuple(range(x.ndim - 1))
        ggamma = (g64 * xn).sum(axis=axes)
        gbeta = g64.sum(axis=axes)
        return gx, ggamma, gbeta

    return _make("layer_norm", xn * gamma.data + beta.data,
                 (x, gamma, beta), grad_fn)


@_quiet
def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries get exactly zero mass.

    ``mask`` is a boolean array broadcastable to ``x.shape``, True where
    attention is allowed.  Handling the mask inside the op keeps -inf scores
    out of tensor storage.
    """
    x = as_tensor(x)
    x64 = x.data.astype(np.float64)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise NumericError("softmax row with no allowed entries")
        x64 = np.where(mask, x64, -np.inf)
    m = x64.max(axis=-1, keepdims=True)
    e = np.exp(x64 - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        dot = (g64 * out).sum(axis=-1, keepdims=True)
        return (out * (g64 - dot),)

    return _make("softmax", out, (x,), grad_fn)


@_quiet
def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows, stabilized by max
    subtraction."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects (N, V) logits")
    n, v = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise DimensionError(f"targets must have shape ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("cross-entropy target out of range")
    x64 = logits.data.astype(np.float64)
    m = x64.max(axis=-1, keepdims=True)
    e = np.exp(x64 - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x64 - m - np.log(z)
    loss = -logp[np.arange(n), targets].mean()

    def grad_fn(g):
        p = e / z
        p[np.arange(n), targets] -= 1.0
        return (p * (float(g) / n),)

    return _make("softmax_cross_entropy", loss, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

@_quiet
def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation convolution on (B, C, H, W) input.

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects x(B,C,H,W) and w(O,C,kh,kw)")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: {cin} vs {cin_w}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError("conv2d kernel larger than padded input")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
                ).astype(np.float64)
    w64 = w.data.astype(np.float64)
    out = np.zeros((bsz, cout, oh, ow), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
            out += np.einsum("bcij,oc->boij", xs, w64[:, :, u, v])
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv2d bias must have shape ({cout},)")
        out += b.data.reshape(1, cout, 1, 1)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        gw = np.zeros_like(w64)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                sl = (slice(None), slice(None),
                      slice(u, u + stride * oh, stride),
                      slice(v, v + stride * ow, stride))
                gw[:, :, u, v] = np.einsum("boij,bcij->oc", g64, xp[sl])
                gxp[sl] += np.einsum("boij,oc->bcij", g64, w64[:, :, u, v])
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        if b is None:
            return gx, gw
        return gx, gw, g64.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, grad_fn)


@_quiet
def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of the two trailing axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def grad_fn(g):
        h, wd = x.shape[-2], x.shape[-1]
        gr = g.reshape(*x.shape[:-2], h, factor, wd, factor)
        return (gr.sum(axis=(-3, -1), dtype=np.float64),)

    return _make("upsample_nearest", out, (x,), grad_fn)


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense align-corners-false bilinear interpolation matrix (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


@_quiet
def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable align-corners-false bilinear resize of ``(..., h, w)``."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize output dims must be >= 1")
    if x.ndim < 2:
        raise DimensionError("bilinear_resize expects at least 2 dims")
    h, wd = x.shape[-2], x.shape[-1]
    mh = _resize_matrix(h, out_h)
    mw = _resize_matrix(wd, out_w)
    out = np.einsum("oh,...hw,pw->...op", mh, x.data.astype(np.float64), mw)

    def grad_fn(g):
        return (np.einsum("oh,...op,pw->...hw", mh, g.astype(np.float64), mw),)

    return _make("bilinear_resize", out, (x,), grad_fn)
