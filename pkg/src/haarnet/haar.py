"""Morphological Haar wavelet down-sampling and the multi-modal MHW fusion block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import Activation, ConvLayer, Module
from .morpho import StructuringElement, dilate2d
from .tensor import Function, Tensor, cat, mul, pad_replicate, sigmoid

# rows are the vertical, horizontal and diagonal detail kernels, each a 2x2
# window read in row-major order
DETAIL_KERNELS = np.array(
    [
        [[-1, -1], [1, 1]],
        [[-1, 1], [-1, 1]],
        [[1, -1], [-1, 1]],
    ],
    dtype=np.float32,
)

_FLAT2 = StructuringElement.flat(2)


@dataclass
class HaarSubbands:
    """One decomposition level.

    Attributes:
        approx: ``(N, C, H/2, W/2)`` max-pooled approximation.
        details: ``(N, 3C, H/2, W/2)``; channel ``3c + {0, 1, 2}`` holds the
            vertical, horizontal and diagonal detail of source channel ``c``.
    """

    approx: Tensor
    details: Tensor

    def band(self, name: str) -> np.ndarray:
        """Raw ``(N, C, h, w)`` values of ``"v"``, ``"h"`` or ``"d"``."""
        i = "vhd".index(name)
        return self.details.data[:, i::3]


class _HaarDetails(Function):
    def forward(self, f):
        n, c, h, w = f.shape
        a = f[:, :, 0::2, 0::2]
        b = f[:, :, 0::2, 1::2]
        cc = f[:, :, 1::2, 0::2]
        d = f[:, :, 1::2, 1::2]
        out = np.empty((n, c, 3, h // 2, w // 2), dtype=f.dtype)
        for i, kern in enumerate(DETAIL_KERNELS):
            # same left-to-right order as a scalar window loop
            out[:, :, i] = ((a * kern[0, 0] + b * kern[0, 1]) + cc * kern[1, 0]) + d * kern[1, 1]
        self.shape = f.shape
        return out.reshape(n, 3 * c, h // 2, w // 2)

    def backward(self, g):
        n, c, h, w = self.shape
        g = g.reshape(n, c, 3, h // 2, w // 2)
        gf = np.empty(self.shape, dtype=g.dtype)
        for (dy, dx) in ((0, 0), (0, 1), (1, 0), (1, 1)):
            kv = DETAIL_KERNELS[:, dy, dx]
            gf[:, :, dy::2, dx::2] = g[:, :, 0] * kv[0] + g[:, :, 1] * kv[1] + g[:, :, 2] * kv[2]
        return (gf,)


def haar_forward(f: Tensor) -> HaarSubbands:
    """Split ``f`` into a max approximation and three linear detail bands.

    Odd heights or widths are first extended by replicating the last row or
    column.
    """
    n, c, h, w = f.shape
    if h == 0 or w == 0:
        raise ShapeError("cannot decompose an empty image")
    f = pad_replicate(f, h % 2, w % 2)
    se = _FLAT2 if c == 1 else StructuringElement.flat(2, c)
    approx = dilate2d(f, se, 2, 0)
    return HaarSubbands(approx=approx, details=_HaarDetails.apply(f))


class GateNet(Module):
    """Two 1x1 convolutions with an activation between and a sigmoid on top.

    The final layer starts at zero, so a fresh gate outputs 0.5 everywhere.
    """

    def __init__(self, c_in: int, c_hidden: int, c_out: int, rng: np.random.Generator, morphological: bool = True):
        super().__init__()
        self.conv1 = ConvLayer(c_in, c_hidden, 1, rng)
        bound = 1.0 / math.sqrt(c_in)
        self.conv1.weight.data[...] = rng.uniform(-bound, bound, self.conv1.weight.shape)
        self.act = Activation(c_hidden, morphological)
        self.conv2 = ConvLayer(c_hidden, c_out, 1, rng)
        self.conv2.weight.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return sigmoid(self.conv2(self.act(self.conv1(x))))


class MHWBlock(Module):
    """Gate networks of one Morphological Haar Wavelet fusion step.

    Both gates read the concatenated detail bands of the two modalities, of
    width ``3*c_rgb + 3*c_d``, through a hidden layer of a quarter that width
    (rounded up).
    """

    def __init__(self, c_rgb: int, c_d: int, rng: np.random.Generator, morphological: bool = True):
        super().__init__()
        width = 3 * c_rgb + 3 * c_d
        hidden = math.ceil(width / 4)
        self.c_rgb, self.c_d = c_rgb, c_d
        self.gate_rgb = GateNet(width, hidden, c_rgb, rng, morphological)
        self.gate_d = GateNet(width, hidden, c_d, rng, morphological)

    def __call__(self, f_rgb: Tensor, f_d: Tensor) -> tuple[Tensor, Tensor]:
        return mhw_fuse(f_rgb, f_d, self)


def mhw_fuse(f_rgb: Tensor, f_d: Tensor, block: MHWBlock) -> tuple[Tensor, Tensor]:
    """Down-sample both modalities, each gated by the joint detail bands."""
    if f_rgb.shape[0] != f_d.shape[0] or f_rgb.shape[2:] != f_d.shape[2:]:
        raise ShapeError(f"modalities disagree: {f_rgb.shape} vs {f_d.shape}")
    if f_rgb.shape[1] != block.c_rgb or f_d.shape[1] != block.c_d:
        raise ShapeError("channel counts do not match the MHW block")
    sb_rgb = haar_forward(f_rgb)
    sb_d = haar_forward(f_d)
    phi = cat([sb_rgb.details, sb_d.details])
    out_rgb = mul(sb_rgb.approx, block.gate_rgb(phi))
    out_d = mul(sb_d.approx, block.gate_d(phi))
    return out_rgb, out_d
