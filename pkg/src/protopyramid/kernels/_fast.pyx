# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv / pool kernels. Parallel over independent output slices only,
so results are reproducible run to run."""

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport prange

BACKEND = "cython"

ctypedef fused real:
    float
    double


def conv2d_forward(x, k, int stride, int padding):
    cin = x.shape[1]
    if cin != k.shape[1]:
        raise ValueError(
            f"conv2d: input has {cin} channels but kernel expects {k.shape[1]}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x)
    k = np.ascontiguousarray(k)
    return _conv_fwd(x, k, stride)


def _conv_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] k, int stride):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], hp = x.shape[2], wp = x.shape[3]
    cdef Py_ssize_t cout = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out_arr = np.zeros((b, cout, ho, wo), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, o, c, y, xx, dy, dx
    cdef real acc
    for i in prange(b, nogil=True, schedule="static"):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc = acc + x[i, c, y * stride + dy, xx * stride + dx] * k[o, c, dy, dx]
                    out[i, o, y, xx] = acc
    return out_arr


def conv2d_backward_input(grad_out, k, x_shape, int stride, int padding):
    grad_out = np.ascontiguousarray(grad_out)
    k = np.ascontiguousarray(k)
    b, cin, h, w = x_shape
    gx = _conv_bwd_in(grad_out, k, h + 2 * padding, w + 2 * padding, stride)
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w].copy()
    return gx


def _conv_bwd_in(real[:, :, :, ::1] g, real[:, :, :, ::1] k, Py_ssize_t hp, Py_ssize_t wp, int stride):
    cdef Py_ssize_t b = g.shape[0], cout = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t cin = k.shape[1], kh = k.shape[2], kw = k.shape[3]
    gx_arr = np.zeros((b, cin, hp, wp), dtype=np.asarray(g).dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t i, o, c, y, xx, dy, dx
    for i in prange(b, nogil=True, schedule="static"):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                gx[i, c, y * stride + dy, xx * stride + dx] += g[i, o, y, xx] * k[o, c, dy, dx]
    return gx_arr


def conv2d_backward_kernel(grad_out, x, k_shape, int stride, int padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x)
    grad_out = np.ascontiguousarray(grad_out)
    gk = np.zeros(k_shape, dtype=grad_out.dtype)
    _conv_bwd_k(grad_out, x, gk, stride)
    return gk


def _conv_bwd_k(real[:, :, :, ::1] g, real[:, :, :, ::1] x, real[:, :, :, ::1] gk, int stride):
    cdef Py_ssize_t b = g.shape[0], cout = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t cin = gk.shape[1], kh = gk.shape[2], kw = gk.shape[3]
    cdef Py_ssize_t i, o, c, y, xx, dy, dx
    cdef real acc
    for o in prange(cout, nogil=True, schedule="static"):
        for c in range(cin):
            for dy in range(kh):
                for dx in range(kw):
                    acc = 0
                    for i in range(b):
                        for y in range(ho):
                            for xx in range(wo):
                                acc = acc + g[i, o, y, xx] * x[i, c, y * stride + dy, xx * stride + dx]
                    gk[o, c, dy, dx] = acc


def maxpool2d_forward(x, int window, int stride):
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    if h % stride or w % stride or window != stride:
        raise ValueError(
            f"maxpool2d: extents ({h},{w}) not divisible by stride {stride}"
        )
    x = np.ascontiguousarray(x)
    out = np.empty((x.shape[0], x.shape[1], h // stride, w // stride), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.int64)
    _pool_fwd(x, out, arg, window, stride)
    return out, arg


def _pool_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] out, cnp.int64_t[:, :, :, ::1] arg, int window, int stride):
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1], ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t i, j, y, xx, dy, dx, best
    cdef real v, m
    for i in prange(b, nogil=True, schedule="static"):
        for j in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best = 0
                    m = x[i, j, y * stride, xx * stride]
                    for dy in range(window):
                        for dx in range(window):
                            v = x[i, j, y * stride + dy, xx * stride + dx]
                            if v > m:
                                m = v
                                best = dy * window + dx
                    out[i, j, y, xx] = m
                    arg[i, j, y, xx] = best


def maxpool2d_backward(grad_out, argmax, x_shape, int window, int stride):
    grad_out = np.ascontiguousarray(grad_out)
    gx = np.zeros(x_shape, dtype=grad_out.dtype)
    _pool_bwd(grad_out, argmax, gx, window, stride)
    return gx


def _pool_bwd(real[:, :, :, ::1] g, cnp.int64_t[:, :, :, ::1] arg, real[:, :, :, ::1] gx, int window, int stride):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t i, j, y, xx, a
    for i in prange(b, nogil=True, schedule="static"):
        for j in range(c):
            for y in range(ho):
                for xx in range(wo):
                    a = arg[i, j, y, xx]
                    gx[i, j, y * stride + a // window, xx * stride + a % window] += g[i, j, y, xx]
