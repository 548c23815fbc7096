"""Morphological operators on the max-plus semi-ring.

Conventions used throughout:

* A structuring element ``h`` is a per-channel ``k x k`` kernel stored as a
  ``(C, 1, k, k)`` tensor, indexed by ``z`` in ``{0..k-1}^2`` with its anchor at
  ``(0, 0)``.
* Dilation computes ``g(x) = max_z f(x - z) + h(z)`` and erosion
  ``g(x) = min_z f(x + z) - h(z)``, both channel-wise. Padding cells hold
  ``-inf`` for dilations and ``+inf`` for erosions, so they never win and never
  receive gradient.
* Ties resolve to the first maximiser (minimiser) in row-major scan order of
  the input window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, ShapeError
from .tensor import Function, Tensor, _note_decision, maximum

Padding = int | str | tuple[int, int, int, int]


class StructuringElement:
    """Per-channel additive kernel for dilation and erosion.

    Args:
        values: ``(C, k, k)`` or ``(C, 1, k, k)`` array. ``-inf`` marks
            positions outside the support.
        learnable: Whether the values are trained. Learnable elements must be
            finite.
    """

    def __init__(self, values, learnable: bool = False):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2] != arr.shape[3]:
            raise ShapeError(f"structuring element must be (C, k, k), got {np.shape(values)}")
        if learnable and not np.all(np.isfinite(arr)):
            raise ConfigurationError("learnable structuring elements must be finite")
        self.values = Tensor(arr, requires_grad=learnable)
        self.learnable = learnable

    @classmethod
    def flat(cls, k: int, channels: int = 1, learnable: bool = False) -> "StructuringElement":
        return cls(np.zeros((channels, k, k), dtype=np.float32), learnable=learnable)

    @classmethod
    def delta(cls, k: int, channels: int = 1) -> "StructuringElement":
        v = np.full((channels, k, k), -np.inf, dtype=np.float32)
        v[:, 0, 0] = 0.0
        return cls(v)

    @property
    def size(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def is_identity(self) -> bool:
        """True for a fixed ``delta(1)``, which leaves every signal unchanged."""
        return not self.learnable and self.size == 1 and bool(np.all(self.values.data == 0))

    def __repr__(self) -> str:
        return f"StructuringElement(channels={self.channels}, k={self.size}, learnable={self.learnable})"


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) padding that keeps size for a stride-1 dilation."""
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _resolve_padding(padding: Padding, k: int, erosion: bool) -> tuple[int, int, int, int]:
    if padding == "same":
        lo, hi = same_padding(k)
        if erosion:
            # the adjoint erosion mirrors the dilation's offsets
            lo, hi = hi, lo
        return lo, hi, lo, hi
    if isinstance(padding, (int, np.integer)):
        if padding < 0:
            raise ConfigurationError("padding must be non-negative")
        p = int(padding)
        return p, p, p, p
    pads = tuple(int(p) for p in padding)
    if len(pads) != 4 or min(pads) < 0:
        raise ConfigurationError(f"padding must be int, 'same' or 4 non-negative ints, got {padding}")
    return pads


def _output_size(f_shape, k, stride, pads):
    hp = f_shape[2] + pads[0] + pads[1]
    wp = f_shape[3] + pads[2] + pads[3]
    if hp < k or wp < k:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {hp}x{wp}")
    return hp, wp, (hp - k) // stride + 1, (wp - k) // stride + 1


class _WindowOp(Function):
    erosion = False

    def forward(self, f, h, stride, pads):
        if f.shape[1] != h.shape[0]:
            raise ShapeError(f"structuring element has {h.shape[0]} channels, input has {f.shape[1]}")
        if stride < 1:
            raise ConfigurationError("stride must be a positive integer")
        dtype = np.result_type(f.dtype, h.dtype)
        k = h.shape[2]
        hp, wp, ho, wo = _output_size(f.shape, k, stride, pads)
        fill = np.inf if self.erosion else -np.inf
        fp = np.pad(
            f.astype(dtype, copy=False),
            ((0, 0), (0, 0), pads[:2], pads[2:]),
            constant_values=fill,
        )
        hk = h[:, 0].astype(dtype, copy=False)
        if self.erosion:
            out, arg = kernels.erode_forward(fp, np.ascontiguousarray(hk), stride, ho, wo)
        else:
            out, arg = kernels.dilate_forward(fp, np.ascontiguousarray(hk[:, ::-1, ::-1]), stride, ho, wo)
        _note_decision(arg)
        self.arg, self.k, self.stride, self.pads = arg, k, stride, pads
        self.in_shape, self.padded = f.shape, (hp, wp)
        return out

    def backward(self, g):
        g = np.ascontiguousarray(g)
        k, (hp, wp) = self.k, self.padded
        gf = gh = None
        if self.needs_grad(0):
            gp = kernels.scatter_backward(g, self.arg, k, self.stride, hp, wp)
            top, left = self.pads[0], self.pads[2]
            h, w = self.in_shape[2:]
            gf = np.ascontiguousarray(gp[:, :, top:top + h, left:left + w])
        if self.needs_grad(1):
            c = g.shape[1]
            hit = self.arg >= 0
            bins = (np.arange(c, dtype=np.int64)[None, :, None, None] * (k * k) + self.arg)[hit]
            sums = np.bincount(bins, weights=g[hit], minlength=c * k * k).reshape(c, k, k)
            if self.erosion:
                sums = -sums
            else:
                sums = sums[:, ::-1, ::-1]
            gh = np.ascontiguousarray(sums[:, None]).astype(g.dtype)
        return gf, gh


class _Dilate(_WindowOp):
    erosion = False


class _Erode(_WindowOp):
    erosion = True


def dilate2d(f: Tensor, se: StructuringElement, stride: int = 1, padding: Padding = 0) -> Tensor:
    """Channel-wise max-plus dilation ``max_z f(x - z) + h(z)``.

    Output extent per axis is ``floor((H + pad_before + pad_after - k) / stride) + 1``.
    ``padding="same"`` keeps the size at stride 1 and centres odd kernels.
    """
    pads = _resolve_padding(padding, se.size, erosion=False)
    return _Dilate.apply(f, se.values, stride=stride, pads=pads)


def erode2d(f: Tensor, se: StructuringElement, stride: int = 1, padding: Padding = 0) -> Tensor:
    """Channel-wise min-minus erosion ``min_z f(x + z) - h(z)``.

    With ``padding="same"`` the erosion is the exact adjoint of
    ``dilate2d(..., padding="same")``.
    """
    pads = _resolve_padding(padding, se.size, erosion=True)
    return _Erode.apply(f, se.values, stride=stride, pads=pads)


@dataclass
class MorphActivationParams:
    """Learnable threshold ``h0`` (one per channel) plus the activation's kernel."""

    h0: Tensor
    se: StructuringElement

    @classmethod
    def init(cls, channels: int, kernel_size: int = 1, learn_kernel: bool = False) -> "MorphActivationParams":
        """Start as ReLU: ``h0 = 0`` and, for the fixed kernel, ``delta(1)``."""
        h0 = Tensor(np.zeros((1, channels, 1, 1), dtype=np.float32), requires_grad=True)
        if learn_kernel:
            se = StructuringElement.flat(kernel_size, channels, learnable=True)
        elif kernel_size == 1:
            se = StructuringElement.delta(1, channels)
        else:
            raise ConfigurationError("a fixed activation kernel larger than 1 is not supported")
        return cls(h0=h0, se=se)


def morph_activation(f: Tensor, p: MorphActivationParams) -> Tensor:
    """``max(h0, f ⊞ h)`` per channel; equals ReLU for ``h = delta(1)``, ``h0 = 0``."""
    c = f.shape[1]
    if p.h0.shape != (1, c, 1, 1):
        raise ShapeError(f"h0 has shape {p.h0.shape}, expected (1, {c}, 1, 1)")
    if p.se.channels != c:
        raise ShapeError(f"activation kernel has {p.se.channels} channels, input has {c}")
    x = f if p.se.is_identity else dilate2d(f, p.se, 1, "same")
    return maximum(p.h0, x)


class _Place(Function):
    def forward(self, f, factor):
        n, c, h, w = f.shape
        self.factor = factor
        out = np.full((n, c, h * factor, w * factor), -np.inf, dtype=f.dtype)
        out[:, :, ::factor, ::factor] = f
        return out

    def backward(self, g):
        return (np.ascontiguousarray(g[:, :, ::self.factor, ::self.factor]),)


def check_upsample(se: StructuringElement, factor: int) -> None:
    """Raise unless ``se`` covers every cell of a ``factor``-spaced grid."""
    if factor < 2:
        raise ConfigurationError("up-sampling factor must be at least 2")
    if not np.all(np.isfinite(se.values.data)):
        raise ConfigurationError("up-sampling structuring element must be finite")
    if se.size < factor:
        raise ConfigurationError(
            f"a {se.size}x{se.size} structuring element leaves cells empty at factor {factor}"
        )


def morph_upsample(f: Tensor, se: StructuringElement, factor: int = 2) -> Tensor:
    """Equidistant morphological up-sampling.

    Input values are placed on a regular ``factor``-spaced grid filled with
    ``-inf`` and then spread by a stride-1 dilation, so output cell
    ``factor*x + r`` is ``max`` over the grid values reachable through ``h``.
    """
    check_upsample(se, factor)
    k = se.size
    grid = _Place.apply(f, factor=factor)
    return dilate2d(grid, se, 1, (k - 1, 0, k - 1, 0))


def closing(f: Tensor, se: StructuringElement) -> Tensor:
    """Dilation followed by the adjoint erosion with the same element."""
    return erode2d(dilate2d(f, se, 1, "same"), se, 1, "same")
