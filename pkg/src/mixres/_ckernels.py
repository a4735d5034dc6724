"""Optional compiled kernels: build _kernels.c on first use, verify, cache.

Everything degrades gracefully to the numpy implementations when no C
compiler is available or the self-check fails, so the compiled path is a
pure speedup, never a requirement. Set MIXRES_NO_CKERNELS=1 to disable.
"""

from __future__ import annotations

import ctypes
import hashlib
import os
import subprocess
from pathlib import Path
from typing import Optional

import numpy as np

_f32p = ctypes.POINTER(ctypes.c_float)
_lib = None
_tried = False


def _cache_dir() -> Path:
    root = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(root) / "mixres"


def _build(src: Path, out: Path) -> bool:
    cmd = ["cc", "-O3", "-march=native", "-ffast-math", "-fopenmp",
           "-shared", "-fPIC", "-o", str(out), str(src), "-lm"]
    try:
        subprocess.run(cmd, check=True, capture_output=True, timeout=120)
        return True
    except (OSError, subprocess.SubprocessError):
        return False


def _self_check(lib) -> bool:
    """The compiled gelu must agree with the numpy path on a probe array."""
    from . import ops
    x = np.linspace(-6, 6, 10_001).astype(np.float32)
    y = np.empty_like(x)
    lib.mixres_gelu_fwd_f32(x.ctypes.data_as(_f32p), y.ctypes.data_as(_f32p),
                            ctypes.c_int64(x.size))
    cdf = 0.5 * (1.0 + ops.erf(x * float(1.0 / np.sqrt(2.0))))
    return bool(np.max(np.abs(y - x * cdf)) < 1e-5)


def load() -> Optional[ctypes.CDLL]:
    global _lib, _tried
    if _tried:
        return _lib
    _tried = True
    if os.environ.get("MIXRES_NO_CKERNELS"):
        return None
    src = Path(__file__).with_name("_kernels.c")
    if not src.is_file():
        return None
    digest = hashlib.sha256(src.read_bytes()).hexdigest()[:16]
    so_path = _cache_dir() / f"kernels-{digest}.so"
    if not so_path.is_file():
        so_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = so_path.with_suffix(f".{os.getpid()}.tmp")
        if not _build(src, tmp):
            return None
        os.replace(tmp, so_path)
    try:
        lib = ctypes.CDLL(str(so_path))
    except OSError:
        return None
    for name in ("mixres_gelu_fwd_f32", "mixres_gelu_bwd_f32"):
        fn = getattr(lib, name, None)
        if fn is None:
            return None
        fn.restype = None
    lib.mixres_gelu_fwd_f32.argtypes = [_f32p, _f32p, ctypes.c_int64]
    lib.mixres_gelu_bwd_f32.argtypes = [_f32p, _f32p, _f32p, ctypes.c_int64]
    if not _self_check(lib):
        return None
    _lib = lib
    return _lib


def gelu_fwd_f32(x: np.ndarray) -> Optional[np.ndarray]:
    lib = load()
    if lib is None or x.dtype != np.float32 or not x.flags.c_contiguous:
        return None
    from . import bufferpool
    y = bufferpool.take(x.shape, np.float32)
    lib.mixres_gelu_fwd_f32(x.ctypes.data_as(_f32p), y.ctypes.data_as(_f32p),
                            ctypes.c_int64(x.size))
    return y


def gelu_bwd_f32(x: np.ndarray, g: np.ndarray) -> Optional[np.ndarray]:
    lib = load()
    if lib is None or x.dtype != np.float32 or not x.flags.c_contiguous:
        return None
    from . import bufferpool
    if g.dtype != np.float32 or not g.flags.c_contiguous:
        gc = bufferpool.take(g.shape, np.float32)
        np.copyto(gc, g)
        g = gc
    gx = bufferpool.take(x.shape, np.float32)
    lib.mixres_gelu_bwd_f32(x.ctypes.data_as(_f32p), g.ctypes.data_as(_f32p),
                            gx.ctypes.data_as(_f32p), ctypes.c_int64(x.size))
    return gx
