"""Convolution kernel backend selection.

The compiled Cython kernels are used when importable; otherwise the numpy
implementation is used.  Set ``PROLAD_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
im2col = _pykernels.im2col
col2im = _pykernels.col2im

if os.environ.get("PROLAD_KERNELS", "auto") != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _ckernels.im2col
        col2im = _ckernels.col2im


def use_backend(name):
    """Switch the active kernel backend at runtime ("cython" or "python")."""
    global BACKEND, im2col, col2im
    if name == "python":
        BACKEND, im2col, col2im = "python", _pykernels.im2col, _pykernels.col2im
    elif name == "cython":
        from . import _ckernels

        BACKEND, im2col, col2im = "cython", _ckernels.im2col, _ckernels.col2im
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
