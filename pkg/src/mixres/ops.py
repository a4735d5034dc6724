"""Differentiable operations: exactly what the model and loss require.

Every op validates shapes, computes the forward result in the input dtype,
and records a vector-Jacobian rule onto the active tape. Broadcasting is
restricted to exact-shape and scalar operands; anything else is a shape
error, not a silent expansion.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import bufferpool as pool
from .tensor import Tensor, active_tape, record

PROB_FLOOR = 1e-5  # lower clamp on softmax probabilities; bounds the loss at -ln(1e-5)

_INV_SQRT2 = float(1.0 / math.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / math.sqrt(2.0 * math.pi))
_INV_SQRTPI = 5.6418958354775628695e-1

# conv2d keeps its patch matrix for backward below this size, else rebuilds it
_COLS_CACHE_BYTES = 96 * 1024 * 1024


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed dtypes not supported: {sorted(str(d) for d in dtypes)}")


# ---------------------------------------------------------------------------
# elementwise group
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly or one side is scalar."""
    _check_same_dtype(a, b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    if a.shape == b.shape:
        buf = pool.take(a.shape, a.dtype)
        np.add(a.data, b.data, out=buf)
        out = Tensor(buf)
    else:
        out = Tensor(a.data + b.data)

    def vjp(g, needed):
        ga = _reduce_to(g, a.shape) if needed[0] else None
        gb = _reduce_to(g, b.shape) if needed[1] else None
        return ga, gb

    return record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly or one side is scalar."""
    _check_same_dtype(a, b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def vjp(g, needed):
        ga = _reduce_to(g * b_data, a.shape) if needed[0] else None
        gb = _reduce_to(g * a_data, b.shape) if needed[1] else None
        return ga, gb

    return record(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.dtype))

    def vjp(g, needed):
        return (g * np.asarray(s, dtype=g.dtype),) if needed[0] else (None,)

    return record(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    """Reduce every element to one scalar tensor."""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        return (np.full(a.shape, g, dtype=a.dtype),)

    return record(out, (a,), vjp)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient back to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype)


# ---------------------------------------------------------------------------
# activations and classifier head
# ---------------------------------------------------------------------------

# Rational approximations for erf/erfc (W. J. Cody 1969, as in netlib CALERF).
# Evaluated in the input dtype: float64 agrees with libm to ~1e-15, float32
# is exact to f32 resolution, and both run on numpy's vectorized exp instead
# of a scalar special-function loop.
_ERF_A = (3.16112374387056560e0, 1.13864154151050156e2, 3.77485237685302021e2)
_ERF_A4, _ERF_A5 = 3.20937758913846947e3, 1.85777706184603153e-1
_ERF_B = (2.36012909523441209e1, 2.44024637934444173e2, 1.28261652607737228e3)
_ERF_B4 = 2.84423683343917062e3
_ERFC_C = (5.64188496988670089e-1, 8.88314979438837594e0, 6.61191906371416295e1,
           2.98635138197400131e2, 8.81952221241769090e2, 1.71204761263407058e3,
           2.05107837782607147e3)
_ERFC_C8, _ERFC_C9 = 1.23033935479799725e3, 2.15311535474403846e-8
_ERFC_D = (1.57449261107098347e1, 1.17693950891312499e2, 5.37181101862009858e2,
           1.62138957456669019e3, 3.29079923573345963e3, 4.36261909014324716e3,
           3.43936767414372164e3)
_ERFC_D8 = 1.23033935480374942e3
_ERFC_P = (3.05326634961232344e-1, 3.60344899949804439e-1, 1.25781726111229246e-1,
           1.60837851487422766e-2)
_ERFC_P5, _ERFC_P6 = 6.58749161529837803e-4, 1.63153871373020978e-2
_ERFC_Q = (2.56852019228982242e0, 1.87295284992346047e0, 5.27905102951428412e-1,
           6.05183413124413191e-2)
_ERFC_Q5 = 2.33520497626869185e-3


def _rational(t: np.ndarray, head: float, coeffs_num, tail_num: float,
              coeffs_den, tail_den: float) -> np.ndarray:
    """Evaluate head*t... Horner pair in place; returns num/den."""
    num = head * t
    den = t.copy()
    for a, b in zip(coeffs_num, coeffs_den):
        num += a
        num *= t
        den += b
        den *= t
    num += tail_num
    den += tail_den
    num /= den
    return num


def erf(x: np.ndarray) -> np.ndarray:
    """Vectorized error function, elementwise over any float array."""
    scalar_in = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x))
    y = np.abs(x)
    # small |x|: erf directly from a rational in x^2
    small = _rational(x * x, _ERF_A5, _ERF_A, _ERF_A4, _ERF_B, _ERF_B4)
    small *= x
    # mid |x|: erfc = exp(-y^2) * rational(y)
    erfc_val = _rational(y, _ERFC_C9, _ERFC_C, _ERFC_C8, _ERFC_D, _ERFC_D8)
    expy2 = np.exp(-y * y)
    erfc_val *= expy2
    big = y > 4.0
    if big.any():
        # large |x|: erfc = exp(-y^2)/y * (1/sqrt(pi) - rational(1/y^2))
        yb = y[big]
        w = 1.0 / (yb * yb)
        r = _rational(w, _ERFC_P6, _ERFC_P, _ERFC_P5, _ERFC_Q, _ERFC_Q5)
        r *= w
        np.subtract(_INV_SQRTPI, r, out=r)
        r *= expy2[big]
        r /= yb
        erfc_val[big] = r
    signed = np.where(x < 0, erfc_val - 1.0, 1.0 - erfc_val)
    out = np.where(y <= 0.46875, small, signed)
    return out[0] if scalar_in else out


def _gelu_grad_numpy(xd: np.ndarray, g: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
    return (g * (cdf + xd * pdf)).astype(xd.dtype, copy=False)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF.

    float32 tensors go through the fused compiled kernel when one is
    available; the numpy path is the reference and the fallback.
    """
    from . import _ckernels
    xd = x.data
    fast = _ckernels.gelu_fwd_f32(xd)
    if fast is not None:
        out = Tensor(fast)

        def vjp_fast(g, needed):
            if not needed[0]:
                return (None,)
            gx = _ckernels.gelu_bwd_f32(xd, g)
            return (gx if gx is not None else _gelu_grad_numpy(xd, g),)

        return record(out, (x,), vjp_fast)

    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor((xd * cdf).astype(x.dtype, copy=False))

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return ((g * (cdf + xd * pdf)).astype(x.dtype, copy=False),)

    return record(out, (x,), vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: x[N,F] @ weight[K,F]^T + bias[K]."""
    _check_same_dtype(x, weight, *((bias,) if bias is not None else ()))
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear: expected 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: feature mismatch, input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g, needed):
        gx = g @ weight.data if needed[0] else None
        gw = g.T @ x.data if needed[1] else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=0) if needed[2] else None
        return gx, gw, gb

    return record(out, inputs, vjp)


def global_avg_pool(x: Tensor, channels_last: bool = False) -> Tensor:
    """Per-channel spatial mean: [N,C,H,W] (or [N,H,W,C]) -> [N,C]."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    if channels_last:
        n, h, w, c = x.shape
        spatial_axes = (1, 2)
    else:
        n, c, h, w = x.shape
        spatial_axes = (2, 3)
    out = Tensor(x.data.mean(axis=spatial_axes, dtype=x.dtype))

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        scaled = g / np.asarray(h * w, dtype=g.dtype)
        expanded = scaled[:, None, None, :] if channels_last else scaled[:, :, None, None]
        return (np.broadcast_to(expanded, x.shape),)

    return record(out, (x,), vjp)


def log_softmax_clamped(logits: Tensor) -> Tensor:
    """Row softmax, probabilities clamped to [1e-5, 1], then natural log.

    Outputs always lie in [ln(1e-5), 0]. The clamp acts as a gradient gate:
    entries whose probability was pushed up to the floor get zero gradient
    through the clamp.
    """
    if logits.ndim != 2:
        raise ValueError(f"log_softmax_clamped: expected [N,K] logits, got {logits.shape}")
    if logits.shape[1] < 2:
        raise ValueError("log_softmax_clamped: need at least 2 classes")
    z = logits.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    clamped = np.clip(p, PROB_FLOOR, 1.0)
    out = Tensor(np.log(clamped).astype(logits.dtype, copy=False))
    gate = p >= PROB_FLOOR

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        dp = np.where(gate, g / clamped, 0.0).astype(logits.dtype, copy=False)
        gx = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        return (gx.astype(logits.dtype, copy=False),)

    return record(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, channels_last: bool = False) -> Tensor:
    """Cross-correlation with [O,C,kh,kw] filters.

    The input is [N,C,H,W], or [N,H,W,C] with ``channels_last`` (the layout
    the model uses internally; weights are layout-independent). Output sizes
    follow the floor convention: windows that do not fit are dropped.

    float32 inputs go through an im2col + GEMM path; float64 inputs use a
    shifted-accumulation path whose per-element summation order equals the
    naive six-loop convolution, so results are bit-exact against it.
    """
    _check_same_dtype(x, weight, *((bias,) if bias is not None else ()))
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    if channels_last:
        n, h, w, c = x.shape
    else:
        n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cw}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    from .errors import ConfigError
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ConfigError(
            f"conv2d: input {h}x{w} with kernel {kh}x{kw}, stride {stride}, padding {padding} "
            f"does not produce a positive output size")

    if padding > 0:
        if channels_last:
            xp = pool.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
            xp[:, padding:padding + h, padding:padding + w, :] = x.data
        else:
            xp = pool.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
            xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data

    # patch rows flatten as (kh, kw, c); the weight matrix matches that order
    w_mat = weight.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    if x.dtype == np.float64:
        y = _conv_forward_ordered(xp, weight.data, stride, h_out, w_out, channels_last)
        cols2d = None
    else:
        cols2d = _im2col_2d(xp, kh, kw, stride, h_out, w_out, channels_last)
        y2d = pool.take((n * h_out * w_out, o), x.dtype)
        np.matmul(cols2d, w_mat.T, out=y2d)
        y4 = y2d.reshape(n, h_out, w_out, o)
        if channels_last:
            y = y4
        else:
            y = pool.take((n, o, h_out, w_out), x.dtype)
            np.copyto(y, y4.transpose(0, 3, 1, 2))
    if bias is not None:
        y += (bias.data[None, None, None, :] if channels_last
              else bias.data[None, :, None, None])
    out = Tensor(y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    if active_tape() is None or not any(t.requires_grad for t in inputs):
        cols2d = None  # nothing will run backward; drop the patch matrix
    elif cols2d is not None and cols2d.nbytes > _COLS_CACHE_BYTES:
        cols2d = None
    # with the patch matrix cached, backward never touches the padded input
    xp_shape = xp.shape
    xp_saved = None if cols2d is not None else xp
    del xp

    def vjp(g, needed, cols_saved=cols2d):
        gx = gw = gb = None
        if needed[0] or needed[1]:
            if channels_last and g.flags.c_contiguous:
                g2d = g.reshape(n * h_out * w_out, o)
            else:
                g2d = pool.take((n * h_out * w_out, o), g.dtype)
                src = g if channels_last else g.transpose(0, 2, 3, 1)
                np.copyto(g2d.reshape(n, h_out, w_out, o), src)
            if needed[1]:
                cols = cols_saved
                if cols is None:
                    cols = _im2col_2d(xp_saved, kh, kw, stride, h_out, w_out, channels_last)
                gw = (g2d.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
                gw = np.ascontiguousarray(gw, dtype=weight.dtype)
            if needed[0]:
                gcols = pool.take((n * h_out * w_out, w_mat.shape[1]), g.dtype)
                np.matmul(g2d, w_mat, out=gcols)
                gxp = _col2im_2d(gcols, xp_shape, kh, kw, stride, h_out, w_out, channels_last)
                if padding > 0:
                    view = (gxp[:, padding:-padding, padding:-padding, :] if channels_last
                            else gxp[:, :, padding:-padding, padding:-padding])
                    # contiguous result: downstream passes avoid strided access
                    contig = pool.take(view.shape, view.dtype)
                    np.copyto(contig, view)
                    gxp = contig
                gx = gxp
        if bias is not None and needed[2]:
            gb = g.sum(axis=(0, 1, 2) if channels_last else (0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return record(out, inputs, vjp)


def _im2col_2d(xp: np.ndarray, kh: int, kw: int, stride: int,
               h_out: int, w_out: int, channels_last: bool) -> np.ndarray:
    """Patch matrix (N*Ho*Wo, kh*kw*C); rows are GEMM-ready."""
    if channels_last:
        n, _, _, c = xp.shape
        if kh == 1 and kw == 1 and stride == 1 and xp.flags.c_contiguous:
            return xp.reshape(n * h_out * w_out, c)  # pure view, no copy
        sn, sh, sw, sc = xp.strides
        patches = np.lib.stride_tricks.as_strided(
            xp,
            shape=(n, h_out, w_out, kh, kw, c),
            strides=(sn, stride * sh, stride * sw, sh, sw, sc),
            writeable=False,
        )
    else:
        n, c = xp.shape[:2]
        sn, sc, sh, sw = xp.strides
        patches = np.lib.stride_tricks.as_strided(
            xp,
            shape=(n, h_out, w_out, kh, kw, c),
            strides=(sn, stride * sh, stride * sw, sh, sw, sc),
            writeable=False,
        )
    cols = pool.take((n * h_out * w_out, kh * kw * c), xp.dtype)
    np.copyto(cols.reshape(n, h_out, w_out, kh, kw, c), patches)
    return cols


def _col2im_2d(gcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int,
               h_out: int, w_out: int, channels_last: bool) -> np.ndarray:
    """Scatter-add patch gradients back onto the (padded) input."""
    n = xp_shape[0]
    c = xp_shape[3] if channels_last else xp_shape[1]
    if channels_last:
        if kh == 1 and kw == 1 and stride == 1 and xp_shape[1:3] == (h_out, w_out):
            return gcols.reshape(xp_shape)
        gxp = pool.zeros(xp_shape, dtype=gcols.dtype)
        g6 = gcols.reshape(n, h_out, w_out, kh, kw, c)
        for u in range(kh):
            for v in range(kw):
                gxp[:, u:u + stride * h_out:stride, v:v + stride * w_out:stride, :] += \
                    g6[:, :, :, u, v, :]
        return gxp
    if kh == 1 and kw == 1 and stride == 1 and xp_shape[2:] == (h_out, w_out):
        out = pool.take(xp_shape, gcols.dtype)
        np.copyto(out, gcols.reshape(n, h_out, w_out, c).transpose(0, 3, 1, 2))
        return out
    gxp = pool.zeros(xp_shape, dtype=gcols.dtype)
    g6 = gcols.reshape(n, h_out, w_out, kh, kw, c)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += \
                g6[:, :, :, u, v, :].transpose(0, 3, 1, 2)
    return gxp


def _conv_forward_ordered(xp: np.ndarray, w: np.ndarray, stride: int,
                          h_out: int, w_out: int, channels_last: bool) -> np.ndarray:
    """Accumulate one (c, u, v) term at a time, in that nesting order.

    Each output element receives its addends in the same sequence as the
    naive loop, which makes float64 results reproducible against it.
    """
    if channels_last:
        xp = xp.transpose(0, 3, 1, 2)
    n = xp.shape[0]
    o, c, kh, kw = w.shape
    y = np.zeros((n, o, h_out, w_out), dtype=xp.dtype)
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                window = xp[:, ci, u:u + stride * h_out:stride, v:v + stride * w_out:stride]
                y += window[:, None] * w[None, :, ci, u, v, None, None]
    return y.transpose(0, 2, 3, 1) if channels_last else y


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance updated in train mode."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                 train: bool, eps: float = 1e-5, momentum: float = 0.1,
                 channels_last: bool = False) -> Tensor:
    """Channel-wise batch normalization over [N,C,H,W] (or [N,H,W,C]).

    Train mode normalizes by the batch statistics and folds them into the
    running estimates; eval mode reads the running estimates and leaves
    them untouched.
    """
    _check_same_dtype(x, gamma, beta)
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d: expected 4-d input, got {x.shape}")
    if channels_last:
        n, h, w, c = x.shape
        reduce_axes = (0, 1, 2)
        bc = (None, None, None, slice(None))  # per-channel vector broadcast
    else:
        n, c, h, w = x.shape
        reduce_axes = (0, 2, 3)
        bc = (None, slice(None), None, None)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batch_norm2d: gamma/beta shape {gamma.shape}/{beta.shape} does not match {c} channels")
    if running.mean.shape != (c,):
        raise ValueError(f"batch_norm2d: running stats cover {running.mean.shape[0]} channels, input has {c}")
    count = n * h * w
    # channels-last activations reduce as one fused (count, c) pass
    flat = channels_last and x.data.flags.c_contiguous
    if train:
        if count < 2:
            raise ValueError("batch_norm2d: train mode needs at least 2 values per channel")
        if flat:
            x2d = x.data.reshape(count, c)
            mean = x2d.mean(axis=0, dtype=x.dtype)
            sq = np.einsum("ij,ij->j", x2d, x2d, dtype=x.dtype) / np.asarray(count, dtype=x.dtype)
            var = np.maximum(sq - mean * mean, 0.0)
        else:
            mean = x.data.mean(axis=reduce_axes, dtype=x.dtype)
            diff = x.data - mean[bc]
            var = np.mean(diff * diff, axis=reduce_axes, dtype=x.dtype)
        running.mean[...] = (1.0 - momentum) * running.mean + momentum * mean
        running.var[...] = (1.0 - momentum) * running.var + momentum * var
    else:
        mean = running.mean.astype(x.dtype, copy=False)
        var = running.var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xn = pool.take(x.shape, x.dtype)
    np.subtract(x.data, mean[bc], out=xn)
    xn *= inv_std[bc]
    y = pool.take(x.shape, x.dtype)
    np.multiply(xn, gamma.data[bc], out=y)
    y += beta.data[bc]
    out = Tensor(y)

    def vjp(g, needed):
        if flat:
            if not g.flags.c_contiguous:
                gc = pool.take(g.shape, g.dtype)
                np.copyto(gc, g)
                g = gc
            g2d = g.reshape(count, c)
            gbeta = g2d.sum(axis=0, dtype=x.dtype)
            ggamma = np.einsum("ij,ij->j", g2d, xn.reshape(count, c), dtype=x.dtype)
        else:
            gbeta = g.sum(axis=reduce_axes, dtype=x.dtype)
            ggamma = (g * xn).sum(axis=reduce_axes, dtype=x.dtype)
        gx = None
        if needed[0]:
            coeff = (gamma.data * inv_std)[bc]
            if train:
                inv_count = np.asarray(1.0 / count, dtype=x.dtype)
                gx = pool.take(x.shape, x.dtype)
                np.subtract(g, (gbeta * inv_count)[bc], out=gx)
                tmp = pool.take(x.shape, x.dtype)
                np.multiply(xn, (ggamma * inv_count)[bc], out=tmp)
                gx -= tmp
                gx *= coeff
            else:
                gx = pool.take(x.shape, x.dtype)
                np.multiply(g, coeff, out=gx)
        return (gx,
                ggamma if needed[1] else None,
                gbeta if needed[2] else None)

    return record(out, (x, gamma, beta), vjp)
