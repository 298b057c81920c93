"""Backend selection for the per-pixel kernels.

The compiled Cython module is used when it was built; otherwise (or when
``INCSEG_PURE_PYTHON=1`` is set) the numpy fallback is loaded. ``BACKEND``
names whichever one is active.
"""
import importlib
import os

import numpy as np

_FALLBACK = "incseg._kernels_py"
_COMPILED = "incseg._kernels"


def load_backend(name):
    """Return the kernel module for ``"compiled"`` or ``"python"``."""
    if name == "compiled":
        return importlib.import_module(_COMPILED)
    if name == "python":
        return importlib.import_module(_FALLBACK)
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        load_backend("compiled")
    except ImportError:
        pass
    else:
        names.insert(0, "compiled")
    return names


if os.environ.get("INCSEG_PURE_PYTHON", "") not in ("", "0"):
    _impl = load_backend("python")
    BACKEND = "python"
else:
    try:
        _impl = load_backend("compiled")
        BACKEND = "compiled"
    except ImportError:
        _impl = load_backend("python")
        BACKEND = "python"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _u8(a):
    return np.ascontiguousarray(a, dtype=np.uint8)


def hard_ce(probs, labels, in_set, ignore, floor, impl=None):
    impl = impl or _impl
    return impl.hard_ce(_f64(probs), _i64(labels), _u8(in_set), int(ignore), float(floor))


def soft_ce(probs, targets, channels, mask, floor, impl=None):
    impl = impl or _impl
    return impl.soft_ce(_f64(probs), _f64(targets), _i64(channels), _u8(mask), float(floor))


def confusion(counts, gt_rows, pred_rows, impl=None):
    impl = impl or _impl
    if counts.dtype != np.int64 or not counts.flags.c_contiguous:
        raise TypeError("counts must be a C-contiguous int64 array")
    impl.confusion(counts, _i64(gt_rows), _i64(pred_rows))
    return counts


def gated_argmax(probs, novel, tau, ignore, impl=None):
    impl = impl or _impl
    return impl.gated_argmax(_f64(probs), _u8(novel), float(tau), int(ignore))
