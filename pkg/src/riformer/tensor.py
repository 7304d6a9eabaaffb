"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

Only the kernels the backbone and its losses actually need are provided:
elementwise arithmetic, per-sample group normalization (one group), valid-count
average pooling, strided convolution for patch embedding, channel-wise linear
maps, GELU, softmax / log-softmax, reductions, and batched matmul for the
relation matrices. No general broadcasting beyond scalars and per-channel
vectors, no higher-order gradients, no devices other than CPU.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf


class NumericsError(ArithmeticError):
    """A kernel produced (or received) a non-finite value."""


class ShapeError(ValueError):
    """Operand shapes violate a kernel's contract."""


class TapeError(RuntimeError):
    """Misuse of the recording tape (double backward, unrecorded tensor)."""


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


def _check_finite(arr: np.ndarray, what: str = "kernel output") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")


class Tensor:
    """A dense float32 array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        _check_finite(self.data, "tensor data")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are allowed on either side.
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


class Tape:
    """Records kernel applications for one reverse pass.

    Recording order equals forward execution order; `backward` may run once per
    recording unless `reset` is called. Tensors created while no tape is active
    are constants as far as autodiff is concerned.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._nodes.append((out, inputs, backward_fn))

    def reset(self) -> None:
        self._nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` on every recorded tensor with requires_grad set."""
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass; call reset()")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self._nodes}
        if id(loss) not in produced:
            raise TapeError("loss was not produced under this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.requires_grad and key not in produced:
                    leaves[key] = inp
        # Leaves accumulate into the persistent buffer; intermediates are dropped.
        for key, leaf in leaves.items():
            acc = grads[key].astype(np.float32)
            leaf.grad = acc if leaf.grad is None else leaf.grad + acc


_ACTIVE_TAPES: list[Tape] = []


def _tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _apply(out_data: np.ndarray,
           inputs: Sequence,
           backward_fn: Callable) -> Tensor:
    """Wrap a kernel result, recording on the active tape when needed."""
    _check_finite(out_data)
    out = Tensor.__new__(Tensor)
    out.data = _f32(out_data)
    out.grad = None
    tensors = tuple(t for t in inputs if isinstance(t, Tensor))
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        tape._record(out, tensors, backward_fn)
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor) -> None:
    """Run the reverse pass of the innermost active tape."""
    tape = _tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _coerce(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else _f32(x)


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic (same-shape, scalar, or per-channel broadcast)

def add(a, b) -> Tensor:
    da, db = _coerce(a), _coerce(b)
    _broadcast_ok(da, db)
    sa, sb = da.shape, db.shape
    return _apply(da + db, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    da, db = _coerce(a), _coerce(b)
    _broadcast_ok(da, db)
    sa, sb = da.shape, db.shape
    return _apply(da - db, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    da, db = _coerce(a), _coerce(b)
    _broadcast_ok(da, db)
    sa, sb = da.shape, db.shape
    return _apply(da * db, (a, b),
                  lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)))


def div(a, b) -> Tensor:
    da, db = _coerce(a), _coerce(b)
    _broadcast_ok(da, db)
    sa, sb = da.shape, db.shape
    return _apply(da / db, (a, b),
                  lambda g: (_unbroadcast(g / db, sa),
                             _unbroadcast(-g * da / (db * db), sb)))


def pow_const(a: Tensor, p: float) -> Tensor:
    da = _coerce(a)
    return _apply(da ** p, (a,), lambda g: (g * p * da ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(_coerce(a))
    return _apply(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    da = _coerce(a)
    return _apply(np.log(da), (a,), lambda g: (g / da,))


def sqrt(a: Tensor) -> Tensor:
    da = _coerce(a)
    out = np.sqrt(da)
    return _apply(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# Shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    da = _coerce(a)
    old = da.shape
    return _apply(da.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    da = _coerce(a)
    inv = np.argsort(axes)
    return _apply(np.transpose(da, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [_coerce(t) for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]
    return _apply(np.concatenate(datas, axis=axis), tuple(tensors),
                  lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# Reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    da = _coerce(a)
    shape = da.shape

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _apply(da.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    da = _coerce(a)
    n = da.size
    shape = da.shape
    return _apply(da.mean(), (a,),
                  lambda g: (np.broadcast_to(g / n, shape).copy(),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise mean of squared differences (Frobenius norm over count)."""
    da, db = _coerce(a), _coerce(b)
    if da.shape != db.shape:
        raise ShapeError(f"mse shape mismatch: {da.shape} vs {db.shape}")
    diff = da.astype(np.float64) - db.astype(np.float64)
    n = diff.size
    out = np.float32((diff * diff).sum() / n)
    return _apply(out, (a, b),
                  lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product."""
    da, db = _coerce(a), _coerce(b)
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul inner dims: {da.shape} @ {db.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(db, -1, -2)
        gb = np.swapaxes(da, -1, -2) @ g
        return (_unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape))

    return _apply(da @ db, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(N, C) @ (K, C)^T + (K,) -- the classifier head."""
    dx, dw, dbias = _coerce(x), _coerce(w), _coerce(b)
    if dx.ndim != 2 or dw.ndim != 2 or dx.shape[1] != dw.shape[1]:
        raise ShapeError(f"linear: x {dx.shape}, w {dw.shape}")

    def bwd(g):
        return (g @ dw, g.T @ dx, g.sum(axis=0))

    return _apply(dx @ dw.T + dbias, (x, w, b), bwd)


def channel_linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-location channel map, i.e. 1x1 convolution: (N,C,H,W) -> (N,D,H,W)."""
    dx, dw = _coerce(x), _coerce(w)
    if dx.ndim != 4 or dw.ndim != 2 or dw.shape[1] != dx.shape[1]:
        raise ShapeError(f"channel_linear: x {dx.shape}, w {dw.shape}")
    out = np.einsum("nchw,dc->ndhw", dx, dw, optimize=True)
    if b is not None:
        out = out + _coerce(b)[None, :, None, None]

    def bwd(g):
        gx = np.einsum("ndhw,dc->nchw", g, dw, optimize=True)
        gw = np.einsum("ndhw,nchw->dc", g, dx, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return _apply(out, inputs, bwd)


# ---------------------------------------------------------------------------
# Normalization

def group_norm_1(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over all C*H*W elements, per-channel affine.

    Matches GroupNorm with a single group: statistics are computed per sample
    across channels and spatial positions, then each channel is scaled by
    gamma and shifted by beta.
    """
    dx, dg, dbeta = _coerce(x), _coerce(gamma), _coerce(beta)
    if dx.ndim != 4:
        raise ShapeError(f"group_norm_1 expects 4-D input, got {dx.shape}")
    c = dx.shape[1]
    if dg.shape != (c,) or dbeta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if eps < 0:
        raise ValueError("eps must be non-negative")

    # statistics in float64 for stability; normalization in float32 for speed
    mu64 = dx.mean(axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    sq64 = (dx * dx).mean(axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    var = np.maximum(sq64 - mu64 * mu64, 0.0)
    istd = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = (dx - mu64.astype(np.float32)) * istd
    out = dg[None, :, None, None] * xhat + dbeta[None, :, None, None]

    def bwd(g):
        m = dx[0].size
        dxhat = g * dg[None, :, None, None]
        mean_dxhat = dxhat.mean(axis=(1, 2, 3), keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
        gx = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        del m
        return (gx, gg, gb)

    return _apply(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Pooling

def _box_sum(x: np.ndarray, k: int) -> np.ndarray:
    """Sum over centered kxk windows clipped to the image, via integral image."""
    p = (k - 1) // 2
    h, w = x.shape[-2:]
    s = np.zeros(x.shape[:-2] + (h + 1, w + 1), dtype=np.float64)
    s[..., 1:, 1:] = np.cumsum(np.cumsum(x.astype(np.float64), axis=-2), axis=-1)
    i = np.arange(h)
    j = np.arange(w)
    r1 = np.maximum(i - p, 0)
    r2 = np.minimum(i + p, h - 1) + 1
    c1 = np.maximum(j - p, 0)
    c2 = np.minimum(j + p, w - 1) + 1
    return (s[..., r2[:, None], c2[None, :]] - s[..., r1[:, None], c2[None, :]]
            - s[..., r2[:, None], c1[None, :]] + s[..., r1[:, None], c1[None, :]])


def _window_counts(h: int, w: int, k: int) -> np.ndarray:
    p = (k - 1) // 2
    i = np.arange(h)
    j = np.arange(w)
    rows = np.minimum(i + p, h - 1) - np.maximum(i - p, 0) + 1
    cols = np.minimum(j + p, w - 1) - np.maximum(j - p, 0) + 1
    return rows[:, None].astype(np.float64) * cols[None, :]


def avg_pool_same(x: Tensor, k: int) -> Tensor:
    """Same-size sliding mean; boundary windows average valid elements only."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {k}")
    dx = _coerce(x)
    if dx.ndim != 4:
        raise ShapeError(f"avg_pool_same expects 4-D input, got {dx.shape}")
    if k == 1:
        return _apply(dx.copy(), (x,), lambda g: (g,))
    h, w = dx.shape[-2:]
    counts = _window_counts(h, w, k)
    out = _box_sum(dx, k) / counts

    def bwd(g):
        # out[p] = sum_{q in win(p)} x[q] / cnt(p); window membership is
        # symmetric for centered windows, so the adjoint is a box sum of g/cnt.
        return (_box_sum(g / counts, k),)

    return _apply(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Convolution (patch embedding only: small k, stride >= 1, replicate padding)

def _conv_index(n: int, k: int, stride: int, pad: int) -> np.ndarray:
    out_n = (n + 2 * pad - k) // stride + 1
    idx = (np.arange(out_n) * stride - pad)[:, None] + np.arange(k)[None, :]
    return np.clip(idx, 0, n - 1)  # replicate padding keeps constant maps constant


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int) -> Tensor:
    """Strided dense convolution with edge-replicate padding."""
    dx, dw, dbias = _coerce(x), _coerce(w), _coerce(b)
    if dx.ndim != 4 or dw.ndim != 4:
        raise ShapeError(f"conv2d: x {dx.shape}, w {dw.shape}")
    cout, cin, kh, kw = dw.shape
    if dx.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: {dx.shape[1]} vs {cin}")
    if kh != kw:
        raise ShapeError("conv2d supports square kernels only")
    n, _, h, wdt = dx.shape
    ri = _conv_index(h, kh, stride, pad)      # (out_h, k)
    ci = _conv_index(wdt, kw, stride, pad)    # (out_w, k)
    patches = dx[:, :, ri[:, None, :, None], ci[None, :, None, :]]
    # patches: (N, C, out_h, out_w, k, k)
    out = np.einsum("nchwij,dcij->ndhw", patches, dw, optimize=True)
    out = out + dbias[None, :, None, None]

    def bwd(g):
        gw = np.einsum("ndhw,nchwij->dcij", g, patches, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gp = np.einsum("ndhw,dcij->nchwij", g, dw, optimize=True)
        gx = np.zeros_like(dx, dtype=np.float64)
        np.add.at(gx, (slice(None), slice(None),
                       ri[:, None, :, None], ci[None, :, None, :]), gp)
        return (gx, gw, gb)

    return _apply(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# Activations and probability kernels

_SQRT_2 = np.float64(np.sqrt(2.0))
_INV_SQRT_2PI = np.float64(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    # float32 throughout: the exact erf form, and this is the hottest kernel
    dx = _coerce(x)
    phi = np.float32(0.5) * (np.float32(1.0)
                             + erf(dx * np.float32(1.0 / _SQRT_2)))
    out = dx * phi

    def bwd(g):
        pdf = np.exp(np.float32(-0.5) * dx * dx) * np.float32(_INV_SQRT_2PI)
        return (g * (phi + dx * pdf),)

    return _apply(out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension."""
    dx = _coerce(x).astype(np.float64)
    z = dx - dx.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _apply(out, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last dimension."""
    dx = _coerce(x).astype(np.float64)
    z = dx - dx.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _apply(out, (x,), bwd)


def global_spatial_mean(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) mean over spatial positions."""
    dx = _coerce(x)
    if dx.ndim != 4:
        raise ShapeError(f"global_spatial_mean expects 4-D input, got {dx.shape}")
    n, c, h, w = dx.shape
    return _apply(dx.mean(axis=(2, 3)), (x,),
                  lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w),
                                             dx.shape).copy(),))


def kl_div(log_p: Tensor, log_q: Tensor) -> Tensor:
    """KL(p || q) from log-probabilities, averaged over the batch (first dim).

    Gradient flows into `log_q` only; `log_p` is treated as the (frozen)
    reference distribution, which is how a distillation target is used.
    """
    dlp, dlq = _coerce(log_p), _coerce(log_q)
    if dlp.shape != dlq.shape:
        raise ShapeError(f"kl_div shape mismatch: {dlp.shape} vs {dlq.shape}")
    p = np.exp(dlp.astype(np.float64))
    n = dlp.shape[0]
    out = (p * (dlp - dlq)).sum() / n

    def bwd(g):
        return (None, -g * p / n)

    return _apply(out, (log_p, log_q), bwd)


def drop_path(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Stochastic depth: zero whole samples, rescale survivors."""
    if rate <= 0.0:
        return x
    dx = _coerce(x)
    keep = 1.0 - rate
    mask = (rng.random(dx.shape[0]) < keep).astype(np.float64) / keep
    mask = mask.reshape((-1,) + (1,) * (dx.ndim - 1))
    return _apply(dx * mask, (x,), lambda g: (g * mask,))
