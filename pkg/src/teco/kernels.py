"""Backend selection for the convolution kernels.

The compiled extension is preferred. Set ``TECO_PURE_PYTHON=1`` to force the
numpy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("TECO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"
im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
