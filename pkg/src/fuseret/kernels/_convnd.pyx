# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct convolution kernels.

Same contract as fuseret.kernels.reference: inputs pre-padded, C-contiguous,
float32 or float64. Loops are ordered so the innermost index walks the last
(contiguous) axis of the written array.
"""

import numpy as np

cimport cython

ctypedef fused floating:
    float
    double


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (wi - kw) // stride + 1
    if floating is float:
        out_np = np.zeros((n, k, ho, wo), dtype=np.float32)
    else:
        out_np = np.zeros((n, k, ho, wo), dtype=np.float64)
    cdef floating[:, :, :, ::1] y = out_np
    cdef Py_ssize_t b, o, ci, i, j, oh, ow
    cdef floating wv
    with nogil:
        for b in range(n):
            for o in range(k):
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[o, ci, i, j]
                            for oh in range(ho):
                                for ow in range(wo):
                                    y[b, o, oh, ow] += wv * x[b, ci, oh * stride + i, ow * stride + j]
    return out_np


def conv2d_grad_input(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] w,
                      int stride, Py_ssize_t h, Py_ssize_t wi):
    cdef Py_ssize_t n = gy.shape[0], k = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    if floating is float:
        out_np = np.zeros((n, c, h, wi), dtype=np.float32)
    else:
        out_np = np.zeros((n, c, h, wi), dtype=np.float64)
    cdef floating[:, :, :, ::1] gx = out_np
    cdef Py_ssize_t b, o, ci, i, j, oh, ow
    cdef floating wv
    with nogil:
        for b in range(n):
            for ci in range(c):
                for o in range(k):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[o, ci, i, j]
                            for oh in range(ho):
                                for ow in range(wo):
                                    gx[b, ci, oh * stride + i, ow * stride + j] += wv * gy[b, o, oh, ow]
    return out_np


def conv2d_grad_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] gy,
                       int stride, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t k = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    if floating is float:
        out_np = np.zeros((k, c, kh, kw), dtype=np.float32)
    else:
        out_np = np.zeros((k, c, kh, kw), dtype=np.float64)
    cdef floating[:, :, :, ::1] gw = out_np
    cdef Py_ssize_t b, o, ci, i, j, oh, ow
    cdef floating acc
    with nogil:
        for o in range(k):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        acc = 0
                        for b in range(n):
                            for oh in range(ho):
                                for ow in range(wo):
                                    acc += x[b, ci, oh * stride + i, ow * stride + j] * gy[b, o, oh, ow]
                        gw[o, ci, i, j] = acc
    return out_np


def conv3d_forward(floating[:, :, :, :, ::1] x, floating[:, :, :, :, ::1] w, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], d = x.shape[2], h = x.shape[3], wi = x.shape[4]
    cdef Py_ssize_t k = w.shape[0], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t do = (d - kd) // stride + 1
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (wi - kw) // stride + 1
    if floating is float:
        out_np = np.zeros((n, k, do, ho, wo), dtype=np.float32)
    else:
        out_np = np.zeros((n, k, do, ho, wo), dtype=np.float64)
    cdef floating[:, :, :, :, ::1] y = out_np
    cdef Py_ssize_t b, o, ci, a, i, j, od, oh, ow
    cdef floating wv
    with nogil:
        for b in range(n):
            for o in range(k):
                for ci in range(c):
                    for a in range(kd):
                        for i in range(kh):
                            for j in range(kw):
                                wv = w[o, ci, a, i, j]
                                for od in range(do):
                                    for oh in range(ho):
                                        for ow in range(wo):
                                            y[b, o, od, oh, ow] += wv * x[
                                                b, ci, od * stride + a, oh * stride + i, ow * stride + j
                                            ]
    return out_np


def conv3d_grad_input(floating[:, :, :, :, ::1] gy, floating[:, :, :, :, ::1] w,
                      int stride, Py_ssize_t d, Py_ssize_t h, Py_ssize_t wi):
    cdef Py_ssize_t n = gy.shape[0], k = gy.shape[1]
    cdef Py_ssize_t do = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]
    cdef Py_ssize_t c = w.shape[1], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    if floating is float:
        out_np = np.zeros((n, c, d, h, wi), dtype=np.float32)
    else:
        out_np = np.zeros((n, c, d, h, wi), dtype=np.float64)
    cdef floating[:, :, :, :, ::1] gx = out_np
    cdef Py_ssize_t b, o, ci, a, i, j, od, oh, ow
    cdef floating wv
    with nogil:
        for b in range(n):
            for ci in range(c):
                for o in range(k):
                    for a in range(kd):
                        for i in range(kh):
                            for j in range(kw):
                                wv = w[o, ci, a, i, j]
                                for od in range(do):
                                    for oh in range(ho):
                                        for ow in range(wo):
                                            gx[
                                                b, ci, od * stride + a, oh * stride + i, ow * stride + j
                                            ] += wv * gy[b, o, od, oh, ow]
    return out_np


def conv3d_grad_weight(floating[:, :, :, :, ::1] x, floating[:, :, :, :, ::1] gy,
                       int stride, Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t k = gy.shape[1], do = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]
    if floating is float:
        out_np = np.zeros((k, c, kd, kh, kw), dtype=np.float32)
    else:
        out_np = np.zeros((k, c, kd, kh, kw), dtype=np.float64)
    cdef floating[:, :, :, :, ::1] gw = out_np
    cdef Py_ssize_t b, o, ci, a, i, j, od, oh, ow
    cdef floating acc
    with nogil:
        for o in range(k):
            for ci in range(c):
                for a in range(kd):
                    for i in range(kh):
                        for j in range(kw):
                            acc = 0
                            for b in range(n):
                                for od in range(do):
                                    for oh in range(ho):
                                        for ow in range(wo):
                                            acc += x[
                                                b, ci, od * stride + a, oh * stride + i, ow * stride + j
                                            ] * gy[b, o, od, oh, ow]
                            gw[o, ci, a, i, j] = acc
    return out_np
