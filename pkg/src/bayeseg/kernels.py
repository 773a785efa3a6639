"""Backend selection for the convolution kernels.

The compiled Cython extension is used when it has been built; otherwise the
pure-numpy implementation is used. Set ``BAYESEG_PURE_PYTHON=1`` to force the
fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_im2col = _kernels_py.im2col
_col2im = _kernels_py.col2im

if os.environ.get("BAYESEG_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as _ext
    except ImportError:  # extension not built
        _ext = None
    if _ext is not None:
        BACKEND = "cython"
        _im2col = _ext.im2col
        _col2im = _ext.col2im


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x[N,C,H,W]`` into columns ``[N, C*kh*kw, OH*OW]``."""
    return _im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    """Scatter-add columns back into an ``[N,C,H,W]`` array of ``shape``."""
    _, c, h, w = shape
    return _col2im(np.ascontiguousarray(cols, dtype=np.float64), c, h, w, kh, kw, stride, pad)


def backends():
    """Map of available backend name -> (im2col, col2im)."""
    out = {"python": (_kernels_py.im2col, _kernels_py.col2im)}
    try:
        from . import _kernels as ext
        out["cython"] = (ext.im2col, ext.col2im)
    except ImportError:
        pass
    return out
