# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled valid-convolution kernels.

Hot inner loops of the toolkit: every model forward/backward during attack
iterations funnels through these three routines. Inner loops run along
contiguous output/input rows so the compiler can vectorize them, and each
output element is owned by exactly one thread, keeping results bitwise
independent of the OpenMP worker count.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange

BACKEND_NAME = "cython"


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] kernel, int stride):
    cdef Py_ssize_t b = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = kernel.shape[0], kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    out_arr = np.zeros((b, co, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, o, c, i, j, p, q
    cdef double kv

    for n in prange(b, nogil=True, schedule='static'):
        for o in range(co):
            for c in range(ci):
                for p in range(kh):
                    for q in range(kw):
                        kv = kernel[o, c, p, q]
                        for i in range(oh):
                            for j in range(ow):
                                out[n, o, i, j] += kv * x[n, c, i * stride + p, j * stride + q]
    return out_arr


def conv2d_backward_input(double[:, :, :, ::1] grad_out, double[:, :, :, ::1] kernel,
                          int stride, int in_h, int in_w):
    cdef Py_ssize_t b = grad_out.shape[0], co = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2], ow = grad_out.shape[3]
    cdef Py_ssize_t ci = kernel.shape[1], kh = kernel.shape[2], kw = kernel.shape[3]
    grad_arr = np.zeros((b, ci, in_h, in_w), dtype=np.float64)
    cdef double[:, :, :, ::1] grad_in = grad_arr
    cdef Py_ssize_t n, o, c, i, j, p, q
    cdef double kv

    # one thread owns each batch row, so accumulation order is fixed
    for n in prange(b, nogil=True, schedule='static'):
        for o in range(co):
            for c in range(ci):
                for p in range(kh):
                    for q in range(kw):
                        kv = kernel[o, c, p, q]
                        for i in range(oh):
                            for j in range(ow):
                                grad_in[n, c, i * stride + p, j * stride + q] += kv * grad_out[n, o, i, j]
    return grad_arr


def conv2d_backward_kernel(double[:, :, :, ::1] grad_out, double[:, :, :, ::1] x,
                           int stride, int kh, int kw):
    cdef Py_ssize_t b = grad_out.shape[0], co = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2], ow = grad_out.shape[3]
    cdef Py_ssize_t ci = x.shape[1]
    grad_arr = np.zeros((co, ci, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] grad_k = grad_arr
    cdef Py_ssize_t n, o, c, i, j, p, q
    cdef double acc

    for o in prange(co, nogil=True, schedule='static'):
        for c in range(ci):
            for p in range(kh):
                for q in range(kw):
                    acc = 0.0
                    for n in range(b):
                        for i in range(oh):
                            for j in range(ow):
                                acc = acc + grad_out[n, o, i, j] * x[n, c, i * stride + p, j * stride + q]
                    grad_k[o, c, p, q] = acc
    return grad_arr
