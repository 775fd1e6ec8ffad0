"""Kernel backend selection.

The compiled extension ``tssg._ckernels`` is used when it imports; otherwise
the numpy implementations in ``tssg._kernels_py`` take over. Set
``TSSG_BACKEND=python`` (or ``cython``) to force a choice.
"""
import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_requested = os.environ.get("TSSG_BACKEND", "auto").lower()
if _requested not in ("auto", "cython", "python"):
    raise ImportError(f"TSSG_BACKEND must be auto, cython or python, got {_requested!r}")

_impl = _kernels_py
BACKEND = "python"
if _requested != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError as exc:
        if _requested == "cython":
            raise
        logger.debug("compiled kernels unavailable (%s); using numpy fallback", exc)

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2 = _impl.maxpool2x2
unpool2x2 = _impl.unpool2x2
unpool2x2_gather = _impl.unpool2x2_gather
interval_gradient_lines = _impl.interval_gradient_lines
rescale_lines = _impl.rescale_lines

__all__ = [
    "BACKEND",
    "im2col3x3",
    "col2im3x3",
    "maxpool2x2",
    "unpool2x2",
    "unpool2x2_gather",
    "interval_gradient_lines",
    "rescale_lines",
]
