"""Attention, ASPP and the miniature dual-stream HaarNet."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError
from .haar import MHWBlock
from .layers import Activation, BatchNorm2d, ConvLayer, Module, batchnorm2d, conv2d
from .morpho import StructuringElement, dilate2d, morph_upsample
from .tensor import Tensor, add, cat, expand, global_avg_pool, mul, sigmoid, upsample_nearest

__all__ = [
    "ASPP",
    "ConvBNAct",
    "HaarNet",
    "HaarNetConfig",
    "SEGate",
    "SqueezeExcite",
    "aspp",
    "haarnet_forward",
    "se_gate",
]


@dataclass
class HaarNetConfig:
    """Architecture and ablation switches of the mini HaarNet.

    ``use_mup``, ``use_mrelu`` and ``use_mhw`` toggle morphological
    up-sampling, morphological activations and MHW down-sampling. With all
    three off the network is a plain dual-stream encoder-decoder with ASPP.
    """

    num_classes: int = 5
    widths: tuple[int, int, int] = (16, 32, 64)
    bottleneck: int = 128
    use_mup: bool = True
    use_mrelu: bool = True
    use_mhw: bool = True
    seed: int = 0
    act_kernel: int = 1
    learn_act_kernel: bool = False
    rgb_channels: int = 3
    depth_channels: int = 1
    aspp_rates: tuple[int, int] = field(default=(2, 4))

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or min(self.widths) < 1 or self.bottleneck < 1:
            raise ConfigurationError("widths must be three positive ints and bottleneck positive")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")


class ConvBNAct(Module):
    """Bias-free convolution, batch norm, activation."""

    def __init__(self, c_in, c_out, k, rng, morphological=True, dilation=1, act_kernel=1, learn_act_kernel=False):
        super().__init__()
        pad = dilation * (k - 1) // 2
        self.conv = ConvLayer(c_in, c_out, k, rng, dilation=dilation, padding=pad, bias=False)
        self.bn = BatchNorm2d(c_out)
        self.act = Activation(c_out, morphological, act_kernel, learn_act_kernel)

    def __call__(self, x: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(x)))


class SqueezeExcite(Module):
    """Global pool, bottleneck of ratio 4, sigmoid: one gate per channel."""

    def __init__(self, channels: int, rng: np.random.Generator, morphological: bool = True):
        super().__init__()
        hidden = max(1, math.ceil(channels / 4))
        self.conv1 = ConvLayer(channels, hidden, 1, rng)
        self.act = Activation(hidden, morphological)
        self.conv2 = ConvLayer(hidden, channels, 1, rng)

    def gate(self, f: Tensor) -> Tensor:
        return sigmoid(self.conv2(self.act(self.conv1(global_avg_pool(f)))))


class SEGate(Module):
    """Separate squeeze-excitation attention for each modality."""

    def __init__(self, c_rgb: int, c_d: int, rng: np.random.Generator, morphological: bool = True):
        super().__init__()
        self.rgb = SqueezeExcite(c_rgb, rng, morphological)
        self.d = SqueezeExcite(c_d, rng, morphological)

    def __call__(self, f_rgb, f_d):
        return se_gate(f_rgb, f_d, self)


def se_gate(f_rgb: Tensor, f_d: Tensor, params: SEGate) -> tuple[Tensor, Tensor]:
    """Scale each modality's channels by its own attention gate."""
    if f_rgb.shape[0] != f_d.shape[0] or f_rgb.shape[2:] != f_d.shape[2:]:
        raise ShapeError(f"modalities disagree: {f_rgb.shape} vs {f_d.shape}")
    return mul(f_rgb, params.rgb.gate(f_rgb)), mul(f_d, params.d.gate(f_d))


class ASPP(Module):
    """Atrous spatial pyramid pooling with 1x1, two dilated 3x3 and an image-pool branch."""

    def __init__(self, c_in, c_out, rng, morphological=True, rates=(2, 4), act_kernel=1, learn_act_kernel=False):
        super().__init__()
        opts = dict(morphological=morphological, act_kernel=act_kernel, learn_act_kernel=learn_act_kernel)
        self.rates = tuple(rates)
        self.branch1 = ConvBNAct(c_in, c_out, 1, rng, **opts)
        self.atrous = [ConvBNAct(c_in, c_out, 3, rng, dilation=r, **opts) for r in self.rates]
        self.pool = ConvBNAct(c_in, c_out, 1, rng, **opts)
        self.project = ConvBNAct(c_out * (2 + len(self.rates)), c_out, 1, rng, **opts)

    def __call__(self, f):
        return aspp(f, self)


def aspp(f: Tensor, params: ASPP) -> Tensor:
    """Concatenate the multi-rate branches and project back to ``c_out`` channels."""
    h, w = f.shape[2:]
    reach = max(params.rates)
    if min(h, w) <= reach:
        raise ConfigurationError(f"ASPP needs spatial extent above its largest rate {reach}, got {h}x{w}")
    branches = [params.branch1(f)]
    branches += [b(f) for b in params.atrous]
    pooled = params.pool(global_avg_pool(f))
    branches.append(expand(pooled, (f.shape[0], pooled.shape[1], h, w)))
    return params.project(cat(branches))


class HaarNet(Module):
    """Dual-stream encoder-decoder for RGB-D segmentation.

    Each modality has a stem and three two-block encoder stages. Between
    stages and after the last one, both streams are halved either by an MHW
    block or by a 2x2 max-plus dilation. The bottleneck concatenates the
    streams, projects to ``bottleneck`` channels and applies ASPP. Three
    decoder steps up-sample, add the attention-gated skips of both streams,
    concatenate and project; a 1x1 head yields per-pixel logits.
    """

    def __init__(self, config: HaarNetConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        m = config.use_mrelu
        opts = dict(morphological=m, act_kernel=config.act_kernel, learn_act_kernel=config.learn_act_kernel)
        w1, w2, w3 = config.widths
        b = config.bottleneck

        self.rgb_stem = ConvBNAct(config.rgb_channels, w1, 3, rng, **opts)
        self.d_stem = ConvBNAct(config.depth_channels, w1, 3, rng, **opts)
        stage_io = [(w1, w1), (w1, w2), (w2, w3)]
        self.rgb_stages = [_Stage(ci, co, rng, opts) for ci, co in stage_io]
        self.d_stages = [_Stage(ci, co, rng, opts) for ci, co in stage_io]
        if config.use_mhw:
            self.mhw = [MHWBlock(w, w, rng, m) for w in (w1, w2, w3)]
        self.fuse = ConvBNAct(2 * w3, b, 1, rng, **opts)
        self.aspp = ASPP(b, b, rng, rates=config.aspp_rates, **opts)
        dec_in = [b, w3, w2]
        if config.use_mup:
            self.up_se = [StructuringElement.flat(2, c, learnable=True) for c in dec_in]
        self.skip_gates = [SEGate(w, w, rng, m) for w in (w3, w2, w1)]
        self.decoder = [ConvBNAct(ci + co, co, 1, rng, **opts) for ci, co in zip(dec_in, (w3, w2, w1))]
        self.head = ConvLayer(w1, config.num_classes, 1, rng)
        self._flat = [StructuringElement.flat(2, w) for w in (w1, w2, w3)]

    def _down(self, level: int, f_rgb: Tensor, f_d: Tensor) -> tuple[Tensor, Tensor]:
        if self.config.use_mhw:
            return self.mhw[level](f_rgb, f_d)
        se = self._flat[level]
        return dilate2d(f_rgb, se, 2, 0), dilate2d(f_d, se, 2, 0)

    def _up(self, level: int, x: Tensor) -> Tensor:
        if self.config.use_mup:
            return morph_upsample(x, self.up_se[level], 2)
        return upsample_nearest(x, 2)

    def __call__(self, rgb: Tensor, depth: Tensor) -> Tensor:
        n, _, h, w = rgb.shape
        if h % 8 or w % 8:
            raise ShapeError(f"height and width must be divisible by 8, got {h}x{w}")
        if depth.shape[0] != n or depth.shape[2:] != (h, w):
            raise ShapeError(f"depth shape {depth.shape} does not match rgb {rgb.shape}")
        x_rgb, x_d = self.rgb_stem(rgb), self.d_stem(depth)
        skips = []
        for level in range(3):
            x_rgb = self.rgb_stages[level](x_rgb)
            x_d = self.d_stages[level](x_d)
            skips.append((x_rgb, x_d))
            x_rgb, x_d = self._down(level, x_rgb, x_d)
        x = self.aspp(self.fuse(cat([x_rgb, x_d])))
        for step in range(3):
            s_rgb, s_d = self.skip_gates[step](*skips[2 - step])
            x = self.decoder[step](cat([self._up(step, x), add(s_rgb, s_d)]))
        return conv2d(x, self.head)


class _Stage(Module):
    def __init__(self, c_in, c_out, rng, opts):
        super().__init__()
        self.blocks = [ConvBNAct(c_in, c_out, 3, rng, **opts), ConvBNAct(c_out, c_out, 3, rng, **opts)]

    def __call__(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


def haarnet_forward(rgb: Tensor, depth: Tensor, config: HaarNetConfig, params: HaarNet) -> Tensor:
    """Logits of shape ``(N, num_classes, H, W)``."""
    if params.config != config:
        raise ConfigurationError("parameters were built for a different configuration")
    return params(rgb, depth)
