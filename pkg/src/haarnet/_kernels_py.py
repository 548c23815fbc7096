"""Pure-numpy max-plus window kernels.

Reference backend, always available. The compiled ``_kernels_ext`` module
implements the same functions with the same tie and accumulation order, so
both produce bit-identical arrays.

Input arrays are already padded. ``hflip`` is the structuring element indexed
in window scan order, i.e. ``h`` reversed along both spatial axes for a
dilation and ``h`` itself for an erosion.
"""

import numpy as np


def _window(fp, jy, jx, stride, ho, wo):
    return fp[:, :, jy:jy + stride * (ho - 1) + 1:stride, jx:jx + stride * (wo - 1) + 1:stride]


def dilate_forward(fp, hflip, stride, ho, wo):
    n, c = fp.shape[:2]
    k = hflip.shape[1]
    best = np.full((n, c, ho, wo), -np.inf, dtype=fp.dtype)
    arg = np.full((n, c, ho, wo), -1, dtype=np.int32)
    for jy in range(k):
        for jx in range(k):
            cand = _window(fp, jy, jx, stride, ho, wo) + hflip[:, jy, jx][None, :, None, None]
            better = cand > best
            best = np.where(better, cand, best)
            arg[better] = jy * k + jx
    return best, arg


def erode_forward(fp, hwin, stride, ho, wo):
    n, c = fp.shape[:2]
    k = hwin.shape[1]
    best = np.full((n, c, ho, wo), np.inf, dtype=fp.dtype)
    arg = np.full((n, c, ho, wo), -1, dtype=np.int32)
    for jy in range(k):
        for jx in range(k):
            cand = _window(fp, jy, jx, stride, ho, wo) - hwin[:, jy, jx][None, :, None, None]
            better = cand < best
            best = np.where(better, cand, best)
            arg[better] = jy * k + jx
    return best, arg


def scatter_backward(grad, arg, k, stride, hp, wp):
    n, c, ho, wo = grad.shape
    gp = np.zeros((n, c, hp, wp), dtype=grad.dtype)
    for jy in range(k):
        for jx in range(k):
            hit = np.where(arg == jy * k + jx, grad, 0).astype(grad.dtype, copy=False)
            _window(gp, jy, jx, stride, ho, wo)[...] += hit
    return gp
