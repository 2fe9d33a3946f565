"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``.

Both modules expose the same functions with the same semantics; ``kernels``
picks one at import time.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf


def unfold1d(x, kernel, stride):
    """Gather sliding windows of a channels-last signal.

    ``x`` has shape (B, L, C). Returns a contiguous (B, L_out, kernel*C)
    array whose row ``t`` holds ``x[:, t*stride : t*stride+kernel, :]``
    flattened in (k, c) order.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    b, length, c = x.shape
    l_out = (length - kernel) // stride + 1
    sb, sl, sc = x.strides
    view = as_strided(x, shape=(b, l_out, kernel, c),
                      strides=(sb, sl * stride, sl, sc), writeable=False)
    return np.ascontiguousarray(view.reshape(b, l_out, kernel * c))


def fold1d(cols, length, kernel, stride):
    """Adjoint of :func:`unfold1d`: scatter-add windows back to (B, L, C)."""
    cols = np.asarray(cols, dtype=np.float64)
    b, l_out, kc = cols.shape
    c = kc // kernel
    out = np.zeros((b, length, c))
    windows = cols.reshape(b, l_out, kernel, c)
    stop = stride * (l_out - 1) + 1
    for k in range(kernel):
        out[:, k:k + stop:stride, :] += windows[:, :, k, :]
    return out


def gelu(x):
    """Exact GELU of ``x`` and its derivative."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x * 0.7071067811865476))
    return x * cdf, cdf + x * 0.3989422804014327 * np.exp(-0.5 * x * x)
