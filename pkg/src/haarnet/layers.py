"""Parameter containers and the linear building blocks (convolution, batch norm)."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, ShapeError
from .morpho import MorphActivationParams, StructuringElement, morph_activation
from .tensor import Function, Tensor, relu


class Module:
    """Minimal parameter container.

    Parameters are discovered from attributes in assignment order: tensors
    with ``requires_grad``, learnable structuring elements, sub-modules and
    lists of sub-modules. Names are dotted attribute paths and therefore stable
    for a given architecture.
    """

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _params_of(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for m in value:
                    if isinstance(m, Module):
                        yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _params_of(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, StructuringElement):
        if value.learnable:
            yield name, value.values
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, list):
        for i, item in enumerate(value):
            yield from _params_of(item, f"{name}.{i}")


def kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


class ConvLayer(Module):
    """2-D convolution parameters.

    Args:
        c_in, c_out: Channel counts.
        k: Square kernel size.
        rng: Generator for Kaiming-style fan-in initialisation.
        stride, dilation, padding: Standard convolution arithmetic; padding is
            zero-filled on all four sides.
        bias: Whether to learn a per-output-channel bias.
    """

    def __init__(self, c_in, c_out, k, rng, stride=1, dilation=1, padding=0, bias=True):
        super().__init__()
        self.weight = Tensor(kaiming(rng, (c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    def __call__(self, f: Tensor) -> Tensor:
        return conv2d(f, self)


class _Conv2d(Function):
    # im2col in channels-last order: window rows are (ky, kx, c) with c innermost
    def forward(self, x, w, b=None, *, stride, dilation, padding):
        n, c, h, wd = x.shape
        o, ci, k, _ = w.shape
        if c != ci:
            raise ShapeError(f"convolution expects {ci} input channels, got {c}")
        dtype = np.result_type(x.dtype, w.dtype, *([] if b is None else [b.dtype]))
        reach = dilation * (k - 1) + 1
        ho = (h + 2 * padding - reach) // stride + 1
        wo = (wd + 2 * padding - reach) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel reach {reach} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}")
        w2 = w.transpose(0, 2, 3, 1).reshape(o, -1).astype(dtype, copy=False)
        hp, wp = h + 2 * padding, wd + 2 * padding
        xp = np.zeros((n, hp, wp, c), dtype=dtype)
        xp[:, padding:padding + h, padding:padding + wd] = x.transpose(0, 2, 3, 1)
        self.meta = (x.shape, w.shape, stride, dilation, padding, ho, wo)
        if k == 1 and stride == 1:
            cols = xp.reshape(-1, c)
        else:
            sn, sh, sw, sc = xp.strides
            view = as_strided(
                xp,
                shape=(n, ho, wo, k, k, c),
                strides=(sn, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
                writeable=False,
            )
            cols = view.reshape(n * ho * wo, k * k * c)
        self.cols, self.w2 = cols, w2
        out = (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        if b is not None:
            out += b.astype(dtype, copy=False)
        return out

    def backward(self, g):
        (n, c, h, wd), (o, _, k, _), stride, dilation, padding, ho, wo = self.meta
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if self.needs_grad(1):
            gw = (g2.T @ self.cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
            gw = np.ascontiguousarray(gw)
        if len(self.inputs) > 2 and self.needs_grad(2):
            gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        if self.needs_grad(0):
            dcols = g2 @ self.w2
            if k == 1 and stride == 1:
                gp = dcols.reshape(n, h + 2 * padding, wd + 2 * padding, c)
            else:
                dcols = dcols.reshape(n, ho, wo, k, k, c)
                gp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        y0, x0 = i * dilation, j * dilation
                        gp[:, y0:y0 + stride * (ho - 1) + 1:stride, x0:x0 + stride * (wo - 1) + 1:stride] += (
                            dcols[:, :, :, i, j]
                        )
            gx = np.ascontiguousarray(gp[:, padding:padding + h, padding:padding + wd].transpose(0, 3, 1, 2))
        return gx, gw, gb


def conv2d(f: Tensor, layer: ConvLayer) -> Tensor:
    """Cross-correlation plus bias, differentiable in input, weights and bias."""
    inputs = (f, layer.weight) if layer.bias is None else (f, layer.weight, layer.bias)
    return _Conv2d.apply(*inputs, stride=layer.stride, dilation=layer.dilation, padding=layer.padding)


class BatchNorm2d(Module):
    """Per-channel batch normalisation with running statistics."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, f: Tensor) -> Tensor:
        return batchnorm2d(f, self, "train" if self.training else "eval")


class _BatchNormTrain(Function):
    def forward(self, x, gamma, beta, *, eps):
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * invstd
        self.xhat, self.invstd, self.gamma = xhat, invstd, gamma
        self.stats = (mean.reshape(-1), var.reshape(-1))
        return gamma * xhat + beta

    def backward(self, g):
        xhat = self.xhat
        m = g.shape[0] * g.shape[2] * g.shape[3]
        gx = None
        if self.needs_grad(0):
            dxhat = g * self.gamma
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (self.invstd / m) * (m * dxhat - s1 - xhat * s2)
        ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        return gx, ggamma, gbeta


class _BatchNormEval(Function):
    def forward(self, x, gamma, beta, *, mean, var, eps):
        invstd = (1.0 / np.sqrt(var + eps)).reshape(1, -1, 1, 1).astype(x.dtype)
        xhat = (x - mean.reshape(1, -1, 1, 1).astype(x.dtype)) * invstd
        self.xhat, self.invstd, self.gamma = xhat, invstd, gamma
        return gamma * xhat + beta

    def backward(self, g):
        gx = g * self.gamma * self.invstd if self.needs_grad(0) else None
        return gx, (g * self.xhat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)


def batchnorm2d(f: Tensor, params: BatchNorm2d, mode: str = "train") -> Tensor:
    """Standardise each channel, then scale by ``gamma`` and shift by ``beta``.

    In ``train`` mode batch statistics are used and the running estimates are
    updated with momentum ``params.momentum`` (unbiased variance); ``eval``
    mode uses the running estimates.
    """
    if mode == "train":
        if f.shape[0] < 2:
            raise ContractError("batch norm in train mode needs a batch of at least 2")
        out = _BatchNormTrain.apply(f, params.gamma, params.beta, eps=params.eps)
        node = out._node
        mean, var = _batch_stats(f.data) if node is None else node.stats
        m = f.shape[0] * f.shape[2] * f.shape[3]
        mom = params.momentum
        params.running_mean = ((1 - mom) * params.running_mean + mom * mean).astype(np.float32)
        params.running_var = ((1 - mom) * params.running_var + mom * var * (m / (m - 1))).astype(np.float32)
        return out
    if mode == "eval":
        return _BatchNormEval.apply(
            f, params.gamma, params.beta, mean=params.running_mean, var=params.running_var, eps=params.eps
        )
    raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")


def _batch_stats(x):
    return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))


class Activation(Module):
    """Either the morphological activation ``max(h0, f ⊞ h)`` or a plain ReLU.

    Args:
        channels: Channel count.
        morphological: Use the learnable morphological form.
        kernel_size, learn_kernel: Kernel options of the morphological form;
            the default learns only the per-channel threshold ``h0``.
    """

    def __init__(self, channels: int, morphological: bool = True, kernel_size: int = 1, learn_kernel: bool = False):
        super().__init__()
        self.morphological = morphological
        if morphological:
            p = MorphActivationParams.init(channels, kernel_size, learn_kernel)
            self.h0 = p.h0
            self.se = p.se

    def __call__(self, f: Tensor) -> Tensor:
        if not self.morphological:
            return relu(f)
        return morph_activation(f, MorphActivationParams(self.h0, self.se))
