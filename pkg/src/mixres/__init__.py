"""Desk-scale CIFAR-10 training: pre-activation GELU ResNet with mixup.

Subsystems: a small reverse-mode autodiff engine (:mod:`tensor`, :mod:`ops`),
CIFAR-10 binary data handling (:mod:`data`), augmentation (:mod:`augment`),
the mixed cross-entropy loss (:mod:`losses`), the model (:mod:`resnet`),
SGD + cosine annealing (:mod:`optim`), the training loop (:mod:`trainer`),
hyperband sweeps (:mod:`sweep`), and the ``mixres`` CLI (:mod:`cli`).
"""

import ctypes
import os


def _tune_allocator() -> None:
    """Keep freed large buffers on the heap instead of returning them to the OS.

    Training allocates and frees tens of multi-megabyte temporaries per
    step; with glibc defaults each round trip pays mmap + page-fault costs
    that dominate elementwise math. Set MIXRES_NO_MALLOC_TUNING=1 to skip.
    """
    if os.environ.get("MIXRES_NO_MALLOC_TUNING"):
        return
    try:
        libc = ctypes.CDLL(None)
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(2**31 - 1))   # M_TRIM_THRESHOLD
        libc.mallopt(ctypes.c_int(-2), ctypes.c_int(1 << 29))     # M_TOP_PAD
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(2**31 - 1))   # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass  # non-glibc platform; purely a performance tweak


def _tune_blas_threads() -> None:
    """Pin BLAS to one thread unless the user chose a count explicitly.

    The training step interleaves many small GEMMs with elementwise passes;
    OpenBLAS worker threads spin-wait after every call and starve everything
    in between, which costs far more than single-threaded GEMMs lose.
    Honors OPENBLAS_NUM_THREADS / OMP_NUM_THREADS when already set.
    """
    if os.environ.get("OPENBLAS_NUM_THREADS") or os.environ.get("OMP_NUM_THREADS"):
        return
    import numpy  # ensure the BLAS backing numpy is loaded

    paths = []
    libs_dir = os.path.join(os.path.dirname(os.path.dirname(numpy.__file__)), "numpy.libs")
    if os.path.isdir(libs_dir):
        paths += [os.path.join(libs_dir, f) for f in os.listdir(libs_dir) if "openblas" in f]
    try:
        with open("/proc/self/maps") as fh:
            paths += [line.split()[-1] for line in fh
                      if "openblas" in line and line.rstrip().endswith(".so")]
    except OSError:
        pass
    for path in dict.fromkeys(paths):
        try:
            lib = ctypes.CDLL(path)
        except OSError:
            continue
        for sym in ("scipy_openblas_set_num_threads64_", "openblas_set_num_threads64_",
                    "openblas_set_num_threads"):
            fn = getattr(lib, sym, None)
            if fn is not None:
                fn(ctypes.c_int(1))
                return


_tune_allocator()
_tune_blas_threads()

from .tensor import Tape, Tensor, backward  # noqa: E402

__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"
