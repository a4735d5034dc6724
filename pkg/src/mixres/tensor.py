"""Reverse-mode autodiff core: tensors, the recording tape, and backward().

The engine is deliberately small: ops live in :mod:`mixres.ops` and record
one node per call onto the thread-local active tape. Replaying the tape in
reverse propagates gradients, accumulating additively across fan-out.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Data is a row-major numpy array, float32 unless constructed otherwise.
    ``grad``, when populated, always matches ``data``'s shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: its output, inputs, and a vector-Jacobian rule.

    ``vjp(grad_out, needed)`` returns one gradient array (or None) per input,
    computing only the entries where ``needed`` is True.
    """

    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tape:
    """Ordered record of ops; inputs of every node precede it.

    Used as a context manager: ops executed inside the ``with`` block are
    recorded, one tape per training thread.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Mark ``out`` as differentiable and record the op if a tape is active."""
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.nodes.append(TapeNode(out, inputs, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out. Leaf tensors (never
    produced by a recorded op) also accumulate across repeated backward
    calls; use ``zero_grad`` between optimizer steps.
    """
    if loss.shape != ():
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        node.out.grad = g_out
        needed = tuple(t.requires_grad for t in node.inputs)
        in_grads = node.vjp(g_out, needed)
        for t, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            key = id(t)
            prev = grads.get(key)
            # Out-of-place accumulation: vjp results may alias each other
            # or g_out, so the stored buffers are never mutated.
            grads[key] = g if prev is None else prev + g
    for node in tape.nodes:
        for t in node.inputs:
            key = id(t)
            if key in produced:
                continue
            g = grads.pop(key, None)
            if g is not None and t.requires_grad:
                t.accumulate_grad(g)
    if id(loss) not in produced and loss.requires_grad and id(loss) in grads:
        loss.accumulate_grad(grads[id(loss)])
