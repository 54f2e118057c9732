# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backend for the grouped dilated causal convolution.

Same contracts as ``tpcnet.kernels.reference``; plain C loops over
[B, G, Y, C, k, T] with the causal zero-padding expressed as an index
guard instead of a materialised padded array.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] filters, int dilation):
    cdef Py_ssize_t b = x.shape[0], g = x.shape[1], c = x.shape[2], t = x.shape[3]
    cdef Py_ssize_t gf = filters.shape[0], y = filters.shape[1], k = filters.shape[3]
    cdef cnp.ndarray[double, ndim=4] out = np.zeros((b, g, y, t), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t ib, ig, iy, ic, ij, it, tau, fg
    cdef double acc
    for ib in range(b):
        for ig in range(g):
            fg = 0 if gf == 1 else ig
            for iy in range(y):
                for it in range(t):
                    acc = 0.0
                    for ij in range(k):
                        tau = it - dilation * ij
                        if tau < 0:
                            break
                        for ic in range(c):
                            acc += filters[fg, iy, ic, ij] * x[ib, ig, ic, tau]
                    o[ib, ig, iy, it] += acc
    return out


def conv_backward_input(double[:, :, :, ::1] grad_out, double[:, :, :, ::1] filters, int dilation):
    cdef Py_ssize_t b = grad_out.shape[0], g = grad_out.shape[1], y = grad_out.shape[2], t = grad_out.shape[3]
    cdef Py_ssize_t gf = filters.shape[0], c = filters.shape[2], k = filters.shape[3]
    cdef cnp.ndarray[double, ndim=4] gx = np.zeros((b, g, c, t), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t ib, ig, iy, ic, ij, it, tau, fg
    cdef double go
    for ib in range(b):
        for ig in range(g):
            fg = 0 if gf == 1 else ig
            for iy in range(y):
                for it in range(t):
                    go = grad_out[ib, ig, iy, it]
                    if go == 0.0:
                        continue
                    for ij in range(k):
                        tau = it - dilation * ij
                        if tau < 0:
                            break
                        for ic in range(c):
                            gxv[ib, ig, ic, tau] += filters[fg, iy, ic, ij] * go
    return gx


def conv_backward_filters(double[:, :, :, ::1] grad_out, double[:, :, :, ::1] x,
                          int dilation, int k, bint shared):
    cdef Py_ssize_t b = grad_out.shape[0], g = grad_out.shape[1], y = grad_out.shape[2], t = grad_out.shape[3]
    cdef Py_ssize_t c = x.shape[2]
    cdef Py_ssize_t gout = 1 if shared else g
    cdef cnp.ndarray[double, ndim=4] gfil = np.zeros((gout, y, c, k), dtype=np.float64)
    cdef double[:, :, :, ::1] gv = gfil
    cdef Py_ssize_t ib, ig, iy, ic, ij, it, tau, og
    cdef double go
    for ib in range(b):
        for ig in range(g):
            og = 0 if shared else ig
            for iy in range(y):
                for it in range(t):
                    go = grad_out[ib, ig, iy, it]
                    if go == 0.0:
                        continue
                    for ij in range(k):
                        tau = it - dilation * ij
                        if tau < 0:
                            break
                        for ic in range(c):
                            gv[og, iy, ic, ij] += go * x[ib, ig, ic, tau]
    return gfil
