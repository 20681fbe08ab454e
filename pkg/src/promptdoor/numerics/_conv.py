"""Selects the convolution kernel backend at import time.

The compiled extension is used when it was built; otherwise the numpy
implementation takes over. Set ``PROMPTDOOR_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from . import _conv_py

BACKEND = "python"
im2col = _conv_py.im2col
col2im = _conv_py.col2im

if os.environ.get("PROMPTDOOR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _kernels.im2col
        col2im = _kernels.col2im
