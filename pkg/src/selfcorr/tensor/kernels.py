"""Hot convolution kernels, compiled when available.

Set ``SELFCORR_PURE_PYTHON=1`` before import to force the numpy fallback.
``BACKEND`` names the implementation actually in use.
"""
import os

from . import _kernels_py

if os.environ.get("SELFCORR_PURE_PYTHON") == "1":
    _impl = None
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = None

if _impl is None:
    BACKEND = "numpy"
    _impl = _kernels_py
else:
    BACKEND = "cython"


def im2col(x, kh, kw, stride, pad):
    """Unfold an NCHW array into a ``(C*kh*kw, N*Ho*Wo)`` column matrix."""
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to NCHW."""
    return _impl.col2im(cols, n, c, h, w, kh, kw, stride, pad)
