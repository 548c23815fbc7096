# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled max-plus window kernels; mirrors haarnet._kernels_py exactly."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport INFINITY

cnp.import_array()


def dilate_forward(floating[:, :, :, ::1] fp, floating[:, :, ::1] hflip, int stride, int ho, int wo):
    cdef Py_ssize_t n = fp.shape[0], c = fp.shape[1], k = hflip.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int32)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef int[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, oy, ox, jy, jx, y0, x0
    cdef floating best, v
    cdef int a
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    y0 = oy * stride
                    for ox in range(wo):
                        x0 = ox * stride
                        best = -INFINITY
                        a = -1
                        for jy in range(k):
                            for jx in range(k):
                                v = fp[b, ch, y0 + jy, x0 + jx] + hflip[ch, jy, jx]
                                if v > best:
                                    best = v
                                    a = <int>(jy * k + jx)
                        out[b, ch, oy, ox] = best
                        arg[b, ch, oy, ox] = a
    return out_arr, arg_arr


def erode_forward(floating[:, :, :, ::1] fp, floating[:, :, ::1] hwin, int stride, int ho, int wo):
    cdef Py_ssize_t n = fp.shape[0], c = fp.shape[1], k = hwin.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int32)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef int[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, oy, ox, jy, jx, y0, x0
    cdef floating best, v
    cdef int a
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    y0 = oy * stride
                    for ox in range(wo):
                        x0 = ox * stride
                        best = INFINITY
                        a = -1
                        for jy in range(k):
                            for jx in range(k):
                                v = fp[b, ch, y0 + jy, x0 + jx] - hwin[ch, jy, jx]
                                if v < best:
                                    best = v
                                    a = <int>(jy * k + jx)
                        out[b, ch, oy, ox] = best
                        arg[b, ch, oy, ox] = a
    return out_arr, arg_arr


def scatter_backward(floating[:, :, :, ::1] grad, int[:, :, :, ::1] arg, int k, int stride, int hp, int wp):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gp_arr = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] gp = gp_arr
    cdef Py_ssize_t b, ch, oy, ox, jy, jx
    cdef int j
    # offset-major order keeps per-cell accumulation order equal to the numpy backend
    with nogil:
        for jy in range(k):
            for jx in range(k):
                j = <int>(jy * k + jx)
                for b in range(n):
                    for ch in range(c):
                        for oy in range(ho):
                            for ox in range(wo):
                                if arg[b, ch, oy, ox] == j:
                                    gp[b, ch, oy * stride + jy, ox * stride + jx] += grad[b, ch, oy, ox]
    return gp_arr
