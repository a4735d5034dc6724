"""Finite-difference gradient oracle and the randomized per-op check suite."""

from __future__ import annotations

import zlib
from typing import Callable, Optional

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward

# Per-dtype check settings: probe size and maximum relative error.
FD_EPS = {np.dtype(np.float32): 1e-2, np.dtype(np.float64): 1e-5}
REL_TOL = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float) -> Tensor:
    """Central-difference gradient of a scalar function, element by element."""
    if eps <= 0:
        raise ValueError(f"finite_diff_grad: eps must be positive, got {eps}")
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = _as_scalar(f(x))
        flat[i] = orig - eps
        f_minus = _as_scalar(f(x))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))


def _as_scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    """Max absolute deviation, normalized by the oracle's largest magnitude."""
    denom = max(float(np.max(np.abs(g_fd))), 1e-8)
    return float(np.max(np.abs(g_ad.astype(np.float64) - g_fd.astype(np.float64))) / denom)


def check_op_grads(forward: Callable[..., Tensor], tensors: list[Tensor],
                   eps: float, corrupt: bool = False) -> float:
    """Compare backward() grads against finite differences for one call.

    ``forward(*tensors)`` must produce a scalar tensor. Returns the worst
    relative error over all inputs. ``corrupt`` perturbs the autodiff
    result, serving as the negative control for the suite itself.
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = forward(*tensors)
    backward(tape, loss)
    worst = 0.0
    for idx, t in enumerate(tensors):
        assert t.grad is not None, "input did not receive a gradient"
        g_ad = t.grad.copy()
        if corrupt:
            g_ad = g_ad + 0.5

        def rerun(_t, i=idx):
            return forward(*tensors)

        g_fd = finite_diff_grad(rerun, t, eps).data
        worst = max(worst, relative_error(g_ad, g_fd))
    return worst


# ---------------------------------------------------------------------------
# randomized trials, one builder per differentiable op
# ---------------------------------------------------------------------------

def _rand(rng: np.random.Generator, shape, dtype, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype), requires_grad=True)


def _weighted_sum(out: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum_all(ops.mul(out, Tensor(r.astype(out.dtype))))


def _trial_conv2d(rng, dtype, eps, corrupt):
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    channels_last = bool(rng.integers(0, 2))
    h = k + stride * int(rng.integers(1, 4))
    h_out = (h + 2 * padding - k) // stride + 1
    x_shape = (n, h, h, c) if channels_last else (n, c, h, h)
    x = _rand(rng, x_shape, dtype)
    w = _rand(rng, (o, c, k, k), dtype)
    b = _rand(rng, (o,), dtype)
    r_shape = (n, h_out, h_out, o) if channels_last else (n, o, h_out, h_out)
    r = rng.standard_normal(r_shape)

    def f(xx, ww, bb):
        return _weighted_sum(
            ops.conv2d(xx, ww, bb, stride=stride, padding=padding,
                       channels_last=channels_last), r)

    return check_op_grads(f, [x, w, b], eps, corrupt)


def _trial_batch_norm2d(rng, dtype, eps, corrupt):
    n, c, h = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
    channels_last = bool(rng.integers(0, 2))
    shape = (n, h, h, c) if channels_last else (n, c, h, h)
    x = _rand(rng, shape, dtype)
    gamma = _rand(rng, (c,), dtype, 0.5, 1.5)
    beta = _rand(rng, (c,), dtype)
    r = rng.standard_normal(shape)

    def f(xx, gg, bb):
        running = ops.RunningStats(c, dtype=dtype)
        return _weighted_sum(ops.batch_norm2d(xx, gg, bb, running, train=True,
                                              channels_last=channels_last), r)

    return check_op_grads(f, [x, gamma, beta], eps, corrupt)


def _trial_gelu(rng, dtype, eps, corrupt):
    x = _rand(rng, (int(rng.integers(3, 20)),), dtype, -2.0, 2.0)
    r = rng.standard_normal(x.shape)
    return check_op_grads(lambda xx: _weighted_sum(ops.gelu(xx), r), [x], eps, corrupt)


def _trial_log_softmax_clamped(rng, dtype, eps, corrupt):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 11))
    # keep probabilities well above the clamp floor so the check stays smooth
    x = _rand(rng, (n, k), dtype, -2.0, 2.0)
    r = rng.standard_normal((n, k))
    return check_op_grads(lambda xx: _weighted_sum(ops.log_softmax_clamped(xx), r), [x], eps, corrupt)


def _trial_linear(rng, dtype, eps, corrupt):
    n, f_in, k = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    x = _rand(rng, (n, f_in), dtype)
    w = _rand(rng, (k, f_in), dtype)
    b = _rand(rng, (k,), dtype)
    r = rng.standard_normal((n, k))
    return check_op_grads(lambda xx, ww, bb: _weighted_sum(ops.linear(xx, ww, bb), r), [x, w, b], eps, corrupt)


def _trial_global_avg_pool(rng, dtype, eps, corrupt):
    n, c, h = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    channels_last = bool(rng.integers(0, 2))
    x = _rand(rng, (n, h, h, c) if channels_last else (n, c, h, h), dtype)
    r = rng.standard_normal((n, c))
    return check_op_grads(
        lambda xx: _weighted_sum(ops.global_avg_pool(xx, channels_last=channels_last), r),
        [x], eps, corrupt)


def _trial_add(rng, dtype, eps, corrupt):
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    a, b = _rand(rng, shape, dtype), _rand(rng, shape, dtype)
    r = rng.standard_normal(shape)
    return check_op_grads(lambda aa, bb: _weighted_sum(ops.add(aa, bb), r), [a, b], eps, corrupt)


def _trial_mul(rng, dtype, eps, corrupt):
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    a, b = _rand(rng, shape, dtype), _rand(rng, shape, dtype)
    r = rng.standard_normal(shape)
    return check_op_grads(lambda aa, bb: _weighted_sum(ops.mul(aa, bb), r), [a, b], eps, corrupt)


def _trial_scale(rng, dtype, eps, corrupt):
    shape = (int(rng.integers(1, 6)),)
    a = _rand(rng, shape, dtype)
    s = float(rng.uniform(-2.0, 2.0))
    r = rng.standard_normal(shape)
    return check_op_grads(lambda aa: _weighted_sum(ops.scale(aa, s), r), [a], eps, corrupt)


def _trial_sum_all(rng, dtype, eps, corrupt):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    a = _rand(rng, shape, dtype)
    return check_op_grads(lambda aa: ops.sum_all(aa), [a], eps, corrupt)


OP_TRIALS = {
    "conv2d": _trial_conv2d,
    "batch_norm2d": _trial_batch_norm2d,
    "gelu": _trial_gelu,
    "log_softmax_clamped": _trial_log_softmax_clamped,
    "linear": _trial_linear,
    "global_avg_pool": _trial_global_avg_pool,
    "add": _trial_add,
    "mul": _trial_mul,
    "scale": _trial_scale,
    "sum_all": _trial_sum_all,
}


def run_suite(op_names: Optional[list[str]] = None, trials_per_dtype: int = 50,
              seed: int = 0, corrupt_op: Optional[str] = None) -> dict:
    """Run randomized finite-difference checks for each op at f32 and f64.

    Returns {op: {"f32": worst_rel_err, "f64": ..., "passed": bool}}.
    ``corrupt_op`` deliberately breaks that op's autodiff result so the
    suite's failure path can be exercised.
    """
    names = list(OP_TRIALS) if op_names is None else op_names
    unknown = [nm for nm in names if nm not in OP_TRIALS]
    if unknown:
        raise ValueError(f"unknown op(s): {', '.join(unknown)}; known: {', '.join(OP_TRIALS)}")
    results = {}
    for name in names:
        trial = OP_TRIALS[name]
        report = {"passed": True}
        for dtype in (np.dtype(np.float32), np.dtype(np.float64)):
            # zlib.crc32 is stable across processes, unlike hash()
            rng = np.random.default_rng([seed, zlib.crc32(name.encode()), dtype.itemsize])
            worst = 0.0
            for _ in range(trials_per_dtype):
                worst = max(worst, trial(rng, dtype, FD_EPS[dtype], corrupt_op == name))
            key = "f32" if dtype == np.float32 else "f64"
            report[key] = worst
            if worst >= REL_TOL[dtype]:
                report["passed"] = False
        results[name] = report
    return results
