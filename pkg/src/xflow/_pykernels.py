"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw):
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # [N, C, Ho, Wo, kh, kw]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, channels, height, width, kh, kw):
    n = cols.shape[0]
    ho, wo = height - kh + 1, width - kw + 1
    patches = cols.reshape(n, channels, kh, kw, ho, wo)
    out = np.zeros((n, channels, height, width))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += patches[:, :, i, j]
    return out


def _windows(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2x2(x):
    win = _windows(x)
    idx = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx):
    n, c, ho, wo = grad.shape
    win = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
