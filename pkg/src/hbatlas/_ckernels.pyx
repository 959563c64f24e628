# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled multilinear interpolation kernels (2-D and 3-D)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline void _axis(double p, Py_ssize_t n, bint wrap,
                       Py_ssize_t* i0, Py_ssize_t* i1, double* t, double* inside) noexcept nogil:
    cdef double fl, q
    cdef Py_ssize_t k
    if wrap:
        fl = floor(p)
        t[0] = p - fl
        k = (<Py_ssize_t> fl) % n
        if k < 0:
            k += n
        i0[0] = k
        i1[0] = (k + 1) % n
        inside[0] = 1.0
    else:
        if p >= 0.0 and p <= n - 1:
            inside[0] = 1.0
        else:
            inside[0] = 0.0
        q = p
        if q < 0.0:
            q = 0.0
        elif q > n - 1:
            q = n - 1
        k = <Py_ssize_t> floor(q)
        if k > n - 2:
            k = n - 2
        if k < 0:
            k = 0
        i0[0] = k
        i1[0] = k + 1 if k + 1 < n else n - 1
        t[0] = q - k


def _interp2(const double[:, :, ::1] img, const double[:, :, ::1] pos, bint wrap,
             double[:, ::1] vals, double[:, :, ::1] grads, bint do_grad):
    cdef Py_ssize_t B = img.shape[0], n0 = img.shape[1], n1 = img.shape[2]
    cdef Py_ssize_t K = pos.shape[2]
    cdef Py_ssize_t b, k, a0, a1, b0, b1
    cdef double t0, t1, in0, in1, v00, v01, v10, v11
    with nogil:
        for b in range(B):
            for k in range(K):
                _axis(pos[b, 0, k], n0, wrap, &a0, &a1, &t0, &in0)
                _axis(pos[b, 1, k], n1, wrap, &b0, &b1, &t1, &in1)
                v00 = img[b, a0, b0]
                v01 = img[b, a0, b1]
                v10 = img[b, a1, b0]
                v11 = img[b, a1, b1]
                vals[b, k] = ((1 - t0) * ((1 - t1) * v00 + t1 * v01)
                              + t0 * ((1 - t1) * v10 + t1 * v11))
                if do_grad:
                    grads[b, 0, k] = in0 * ((1 - t1) * (v10 - v00) + t1 * (v11 - v01))
                    grads[b, 1, k] = in1 * ((1 - t0) * (v01 - v00) + t0 * (v11 - v10))


def _interp3(const double[:, :, :, ::1] img, const double[:, :, ::1] pos, bint wrap,
             double[:, ::1] vals, double[:, :, ::1] grads, bint do_grad):
    cdef Py_ssize_t B = img.shape[0], n0 = img.shape[1], n1 = img.shape[2], n2 = img.shape[3]
    cdef Py_ssize_t K = pos.shape[2]
    cdef Py_ssize_t b, k, a0, a1, b0, b1, c0, c1
    cdef double t0, t1, t2, in0, in1, in2
    cdef double v000, v001, v010, v011, v100, v101, v110, v111
    cdef double x00, x01, x10, x11, y0, y1
    with nogil:
        for b in range(B):
            for k in range(K):
                _axis(pos[b, 0, k], n0, wrap, &a0, &a1, &t0, &in0)
                _axis(pos[b, 1, k], n1, wrap, &b0, &b1, &t1, &in1)
                _axis(pos[b, 2, k], n2, wrap, &c0, &c1, &t2, &in2)
                v000 = img[b, a0, b0, c0]
                v001 = img[b, a0, b0, c1]
                v010 = img[b, a0, b1, c0]
                v011 = img[b, a0, b1, c1]
                v100 = img[b, a1, b0, c0]
                v101 = img[b, a1, b0, c1]
                v110 = img[b, a1, b1, c0]
                v111 = img[b, a1, b1, c1]
                x00 = (1 - t2) * v000 + t2 * v001
                x01 = (1 - t2) * v010 + t2 * v011
                x10 = (1 - t2) * v100 + t2 * v101
                x11 = (1 - t2) * v110 + t2 * v111
                y0 = (1 - t1) * x00 + t1 * x01
                y1 = (1 - t1) * x10 + t1 * x11
                vals[b, k] = (1 - t0) * y0 + t0 * y1
                if do_grad:
                    grads[b, 0, k] = in0 * (y1 - y0)
                    grads[b, 1, k] = in1 * ((1 - t0) * (x01 - x00) + t0 * (x11 - x10))
                    grads[b, 2, k] = in2 * (
                        (1 - t0) * ((1 - t1) * (v001 - v000) + t1 * (v011 - v010))
                        + t0 * ((1 - t1) * (v101 - v100) + t1 * (v111 - v110)))


def interp(img, pos, wrap=False, grad=False):
    """Sample ``img (B, *N)`` at ``pos (B, d, K)``; optionally the positional gradient."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    B = img.shape[0]
    d = img.ndim - 1
    K = pos.shape[2]
    vals = np.empty((B, K))
    grads = np.empty((B, d, K) if grad else (1, d, 1))
    if d == 2:
        _interp2(img, pos, wrap, vals, grads, grad)
    elif d == 3:
        _interp3(img, pos, wrap, vals, grads, grad)
    else:
        raise ValueError("only 2-D and 3-D grids are supported")
    if grad:
        return vals, grads
    return vals
