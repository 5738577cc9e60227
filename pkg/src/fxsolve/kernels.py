"""Select the integer kernel backend at import time.

The compiled extension is used when it was built; set ``FXSOLVE_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("FXSOLVE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

requantize_shift = _impl.requantize_shift
block_multiply = _impl.block_multiply
stencil_conv = _impl.stencil_conv
