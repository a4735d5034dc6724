"""Recycled output buffers for the training hot path.

Training allocates the same handful of multi-megabyte arrays every batch;
letting them bounce through the allocator costs page faults and cache
refills. The pool keeps issued buffers registered and hands one out again
only when its refcount proves the pool holds the sole remaining reference,
so reuse can never alias live data. Purely an optimization: ``take`` always
succeeds (falling back to a fresh allocation) and correctness never
depends on recycling.
"""

from __future__ import annotations

import os
import sys
import threading
from collections import deque

import numpy as np

# buffers larger than the cap are never pooled; total pooled bytes bounded.
# The cap must exceed roughly twice one training step's working set or the
# pool evicts exactly the buffers the next step would have reused.
_MIN_BYTES = 1 << 16
_MAX_POOL_BYTES = int(os.environ.get("MIXRES_POOL_BYTES", 4096 * 1024 * 1024))

_local = threading.local()


def _entries() -> deque:
    entries = getattr(_local, "entries", None)
    if entries is None:
        entries = deque()
        _local.entries = entries
        _local.total = 0
    return entries


def take(shape, dtype=np.float32) -> np.ndarray:
    """An array of the requested shape with arbitrary contents.

    The result is a view of a pooled byte buffer; it stays registered and
    becomes reusable once every external reference (including views) dies.
    """
    dtype = np.dtype(dtype)
    need = int(np.prod(shape)) * dtype.itemsize
    if need < _MIN_BYTES or need > _MAX_POOL_BYTES:
        return np.empty(shape, dtype=dtype)
    entries = _entries()
    for _ in range(len(entries)):
        buf = entries[0]
        entries.rotate(-1)
        # free == referenced only by the deque slot, the local name, and
        # getrefcount's argument binding: exactly 3
        if buf.nbytes >= need and sys.getrefcount(buf) == 3:
            return buf[:need].view(dtype).reshape(shape)
    buf = np.empty(_round_up(need), dtype=np.uint8)
    entries.append(buf)
    _local.total += buf.nbytes
    while _local.total > _MAX_POOL_BYTES and len(entries) > 1:
        victim = entries.popleft()
        _local.total -= victim.nbytes
    return buf[:need].view(dtype).reshape(shape)


def zeros(shape, dtype=np.float32) -> np.ndarray:
    out = take(shape, dtype)
    out.fill(0)
    return out


def _round_up(nbytes: int) -> int:
    # size-class rounding so close shapes share buffers
    block = 1 << 20
    return (nbytes + block - 1) // block * block


def clear() -> None:
    _local.entries = deque()
    _local.total = 0
