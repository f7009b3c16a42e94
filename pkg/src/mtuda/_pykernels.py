"""Pure-numpy convolution kernels (fallback when the compiled module is absent).

Both backends share one contract: ``im2col`` lays out patches as rows ordered
``(n, oh, ow)`` with columns ordered ``(c, ki, kj)``, and ``col2im`` adds patch
gradients back in descending ``(ki, kj)`` order per element, so the two backends agree
bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    g = cols.reshape(n, ho, wo, c, kh, kw)
    gp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            gp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        gp = gp[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(gp)
