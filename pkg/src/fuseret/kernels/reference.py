"""Numpy convolution kernels (im2col + matmul).

Fallback backend used when the compiled extension is unavailable. Inputs are
expected pre-padded and C-contiguous; padding and bias live in the caller so
both backends share one contract:

    conv2d_forward(x[N,C,H,W], w[K,C,kh,kw], stride)        -> y[N,K,Ho,Wo]
    conv2d_grad_input(gy, w, stride, H, W)                  -> gx[N,C,H,W]
    conv2d_grad_weight(x, gy, stride, kh, kw)               -> gw[K,C,kh,kw]

and the analogous conv3d_* trio with a leading depth axis.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows2d(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _windows3d(x: np.ndarray, kd: int, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, d, h, w = x.shape
    do = (d - kd) // stride + 1
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sd, sh, sw = x.strides
    return as_strided(
        x,
        shape=(n, c, do, ho, wo, kd, kh, kw),
        strides=(sn, sc, sd * stride, sh * stride, sw * stride, sd, sh, sw),
        writeable=False,
    )


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n, c, _, _ = x.shape
    k, _, kh, kw = w.shape
    win = _windows2d(x, kh, kw, stride)
    _, _, ho, wo, _, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    y = cols @ w.reshape(k, c * kh * kw).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))


def conv2d_grad_input(gy: np.ndarray, w: np.ndarray, stride: int, h: int, w_in: int) -> np.ndarray:
    n, k, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gy_mat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    gcols = (gy_mat @ w.reshape(k, c * kh * kw)).reshape(n, ho, wo, c, kh, kw)
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # n, c, kh, kw, ho, wo
    gx = np.zeros((n, c, h, w_in), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
    return gx


def conv2d_grad_weight(x: np.ndarray, gy: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    n, c, _, _ = x.shape
    _, k, ho, wo = gy.shape
    win = _windows2d(x, kh, kw, stride)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    gy_mat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    return np.ascontiguousarray((gy_mat.T @ cols).reshape(k, c, kh, kw))


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n, c, _, _, _ = x.shape
    k, _, kd, kh, kw = w.shape
    win = _windows3d(x, kd, kh, kw, stride)
    _, _, do, ho, wo, _, _, _ = win.shape
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * do * ho * wo, c * kd * kh * kw)
    y = cols @ w.reshape(k, c * kd * kh * kw).T
    return np.ascontiguousarray(y.reshape(n, do, ho, wo, k).transpose(0, 4, 1, 2, 3))


def conv3d_grad_input(
    gy: np.ndarray, w: np.ndarray, stride: int, d: int, h: int, w_in: int
) -> np.ndarray:
    n, k, do, ho, wo = gy.shape
    _, c, kd, kh, kw = w.shape
    gy_mat = gy.transpose(0, 2, 3, 4, 1).reshape(n * do * ho * wo, k)
    gcols = (gy_mat @ w.reshape(k, c * kd * kh * kw)).reshape(n, do, ho, wo, c, kd, kh, kw)
    gcols = gcols.transpose(0, 4, 5, 6, 7, 1, 2, 3)  # n, c, kd, kh, kw, do, ho, wo
    gx = np.zeros((n, c, d, h, w_in), dtype=gy.dtype)
    for a in range(kd):
        for i in range(kh):
            for j in range(kw):
                gx[
                    :,
                    :,
                    a : a + stride * do : stride,
                    i : i + stride * ho : stride,
                    j : j + stride * wo : stride,
                ] += gcols[:, :, a, i, j]
    return gx


def conv3d_grad_weight(
    x: np.ndarray, gy: np.ndarray, stride: int, kd: int, kh: int, kw: int
) -> np.ndarray:
    n, c, _, _, _ = x.shape
    _, k, do, ho, wo = gy.shape
    win = _windows3d(x, kd, kh, kw, stride)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * do * ho * wo, c * kd * kh * kw)
    gy_mat = gy.transpose(0, 2, 3, 4, 1).reshape(n * do * ho * wo, k)
    return np.ascontiguousarray((gy_mat.T @ cols).reshape(k, c, kd, kh, kw))
