# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused float32 optimizer kernels.

Every operation is evaluated in single precision in the same order as the
NumPy fallback in :mod:`gradmirror.kernels`; the extension is built with
``-ffp-contract=off`` so no multiply-add is fused and both paths agree bit
for bit.
"""

from libc.math cimport sqrtf


def adamw_update(float[::1] p, const float[::1] graw, float[::1] m, float[::1] v,
                 float scale, float lr, float b1, float omb1, float b2, float omb2,
                 float bc1, float bc2, float eps, float wd):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float g, mi, vi, mhat, vhat, upd
    if graw.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adamw_update: array lengths differ")
    with nogil:
        for i in range(n):
            g = graw[i] * scale
            mi = b1 * m[i] + omb1 * g
            vi = b2 * v[i] + omb2 * (g * g)
            m[i] = mi
            v[i] = vi
            mhat = mi / bc1
            vhat = vi / bc2
            upd = mhat / (sqrtf(vhat) + eps) + wd * p[i]
            p[i] = p[i] - lr * upd


def sgd_update(float[::1] p, const float[::1] graw, float[::1] vel,
               float scale, float lr, float momentum):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float g, vi
    if graw.shape[0] != n or vel.shape[0] != n:
        raise ValueError("sgd_update: array lengths differ")
    with nogil:
        for i in range(n):
            g = graw[i] * scale
            vi = momentum * vel[i] + g
            vel[i] = vi
            p[i] = p[i] - lr * vi
