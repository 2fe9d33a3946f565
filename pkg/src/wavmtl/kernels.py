"""Backend selection for the hot numeric kernels (conv windows, GELU).

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Setting ``WAVMTL_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("WAVMTL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

unfold1d = _impl.unfold1d
fold1d = _impl.fold1d
gelu = _impl.gelu
