# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for strided 2-D convolution on float64 NCHW arrays."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    """Unfold a padded input into an (N, C, kh, kw, Ho, Wo) patch array."""
    cdef Py_ssize_t n_img = xp.shape[0], n_ch = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.empty((n_img, n_ch, kh, kw, ho, wo), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t n, c, i, j, y, x
    with nogil:
        for n in range(n_img):
            for c in range(n_ch):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(ho):
                            for x in range(wo):
                                cols[n, c, i, j, y, x] = xp[n, c, i + y * stride, j + x * stride]
    return out


def col2im(const double[:, :, :, :, :, ::1] cols, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t stride):
    """Fold an (N, C, kh, kw, Ho, Wo) patch array back, summing overlaps, into (N, C, hp, wp)."""
    cdef Py_ssize_t n_img = cols.shape[0], n_ch = cols.shape[1]
    cdef Py_ssize_t kh = cols.shape[2], kw = cols.shape[3]
    cdef Py_ssize_t ho = cols.shape[4], wo = cols.shape[5]
    out = np.zeros((n_img, n_ch, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, i, j, y, x
    with nogil:
        for n in range(n_img):
            for c in range(n_ch):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(ho):
                            for x in range(wo):
                                dx[n, c, i + y * stride, j + x * stride] += cols[n, c, i, j, y, x]
    return out
