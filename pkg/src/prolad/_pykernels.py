"""Pure-numpy im2col / col2im, used when the compiled extension is unavailable."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """Unfold a padded input into an (N, C, kh, kw, Ho, Wo) patch array."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def col2im(cols, hp, wp, stride):
    """Fold an (N, C, kh, kw, Ho, Wo) patch array back, summing overlaps, into (N, C, hp, wp)."""
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out
