"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is. Set ``XFLOW_PURE_PYTHON=1`` to force the fallback.
"""
import os

from xflow import _pykernels

NAME = "python"
kernels = _pykernels

if os.environ.get("XFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from xflow import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        NAME = "cython"


def im2col(x, kh, kw):
    return kernels.im2col(x, kh, kw)


def col2im(cols, channels, height, width, kh, kw):
    return kernels.col2im(cols, channels, height, width, kh, kw)


def maxpool2x2(x):
    return kernels.maxpool2x2(x)


def maxpool2x2_backward(grad, idx):
    return kernels.maxpool2x2_backward(grad, idx)
