"""Pure-numpy im2col / col2im for 3-D convolution.

Used when the compiled ``_kernels`` extension is unavailable. Both backends
accumulate ``col2im`` contributions in the same (kt, kh, kw) order, so their
results are bitwise identical.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col3d(xpad, kernel, stride, out_size):
    n, c = xpad.shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_size
    s = xpad.strides
    view = as_strided(
        xpad,
        shape=(n, c, kt, kh, kw, to, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[4], s[2] * st, s[3] * sh, s[4] * sw),
        writeable=False,
    )
    return view.reshape(n, c * kt * kh * kw, to * ho * wo)


def col2im3d(cols, xpad_shape, kernel, stride, out_size):
    n, c = xpad_shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_size
    dx = np.zeros(xpad_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kt, kh, kw, to, ho, wo)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                dx[:, :, a:a + st * to:st, b:b + sh * ho:sh, d:d + sw * wo:sw] += cols[:, :, a, b, d]
    return dx
