"""Finite-difference verification of every differentiable operator.

Each case draws a seeded random point, evaluates a random linear functional of
the operator output in single precision and back-propagates it, then compares
every leaf gradient with :func:`~haarnet.tensor.finite_diff_grad` evaluated in
double precision. The error of a case is the largest absolute deviation over
all leaves divided by the largest gradient magnitude over all leaves.

A point only counts when it is free of ties: every discrete choice the
operator makes (window arg-max, max masks) must be identical in the
single-precision pass and in all perturbed double-precision passes. Otherwise
the case is redrawn from the next sub-seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .haar import MHWBlock, haar_forward, mhw_fuse
from .layers import BatchNorm2d, ConvLayer, batchnorm2d, conv2d
from .morpho import MorphActivationParams, StructuringElement, dilate2d, erode2d, morph_activation, morph_upsample
from .nn import ASPP, aspp
from .tensor import Tensor, backward, finite_diff_grad, mul, no_grad, record_decisions, relative_error
from .tensor import sum as tsum

TOLERANCE = 1e-3
EPS = 1e-3

Builder = Callable[[np.random.Generator], tuple[dict[str, Tensor], Callable[[], object]]]


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _learnable_se(rng, c, k):
    return StructuringElement(rng.standard_normal((c, k, k)), learnable=True)


def _module_leaves(module, prefix=""):
    return {prefix + n: p for n, p in module.named_parameters()}


def _randomise(module, rng, scale=0.5):
    # fresh modules have zero biases and zero final gate layers; a generic point needs neither
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


def _build_dilate(rng):
    k = int(rng.integers(1, 4))
    c = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(k, 7, size=2))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    f, se = _leaf(rng, (1, c, h, w)), _learnable_se(rng, c, k)
    return {"f": f, "h": se.values}, lambda: dilate2d(f, se, stride, pad)


def _build_erode(rng):
    k = int(rng.integers(1, 4))
    c = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(k, 7, size=2))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    f, se = _leaf(rng, (1, c, h, w)), _learnable_se(rng, c, k)
    return {"f": f, "h": se.values}, lambda: erode2d(f, se, stride, pad)


def _build_activation(rng):
    c = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(2, 6, size=2))
    f = _leaf(rng, (1, c, h, w))
    p = MorphActivationParams.init(c, 3, learn_kernel=True) if rng.random() < 0.5 else MorphActivationParams.init(c)
    p.h0.data[...] = rng.standard_normal(p.h0.shape) * 0.5
    leaves = {"f": f, "h0": p.h0}
    if p.se.learnable:
        p.se.values.data[...] = rng.standard_normal(p.se.values.shape) * 0.5
        leaves["h"] = p.se.values
    return leaves, lambda: morph_activation(f, p)


def _build_upsample(rng):
    factor = int(rng.integers(2, 4))
    k = factor + int(rng.integers(0, 2))
    c = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(1, 4, size=2))
    f, se = _leaf(rng, (1, c, h, w)), _learnable_se(rng, c, k)
    return {"f": f, "h": se.values}, lambda: morph_upsample(f, se, factor)


def _build_haar(rng):
    c = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(2, 7, size=2))
    f = _leaf(rng, (1, c, h, w))

    def run():
        sb = haar_forward(f)
        return sb.approx, sb.details

    return {"f": f}, run


def _build_mhw(rng):
    c_rgb, c_d = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = (2 * int(v) for v in rng.integers(1, 3, size=2))
    block = MHWBlock(c_rgb, c_d, rng, morphological=bool(rng.random() < 0.5))
    _randomise(block, rng)
    f_rgb, f_d = _leaf(rng, (1, c_rgb, h, w)), _leaf(rng, (1, c_d, h, w))
    leaves = {"f_rgb": f_rgb, "f_d": f_d, **_module_leaves(block, "block.")}
    return leaves, lambda: mhw_fuse(f_rgb, f_d, block)


def _build_conv(rng):
    k = int(rng.integers(1, 4))
    c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    reach = dilation * (k - 1) + 1
    h, w = (int(v) for v in rng.integers(max(1, reach - 2 * pad), reach + 3, size=2))
    layer = ConvLayer(c_in, c_out, k, rng, stride=stride, dilation=dilation, padding=pad, bias=bool(rng.random() < 0.5))
    _randomise(layer, rng)
    x = _leaf(rng, (int(rng.integers(1, 3)), c_in, h, w))
    return {"x": x, **_module_leaves(layer, "layer.")}, lambda: conv2d(x, layer)


def _build_batchnorm(rng):
    c = int(rng.integers(1, 3))
    n = int(rng.integers(2, 4))
    h, w = (int(v) for v in rng.integers(1, 4, size=2))
    bn = BatchNorm2d(c)
    _randomise(bn, rng)
    bn.running_mean = rng.standard_normal(c).astype(np.float32)
    bn.running_var = rng.uniform(0.5, 2.0, c).astype(np.float32)
    mode = "train" if rng.random() < 0.5 else "eval"
    x = _leaf(rng, (n, c, h, w), 2.0)
    return {"x": x, **_module_leaves(bn, "bn.")}, lambda: batchnorm2d(x, bn, mode)


def _build_aspp(rng):
    # two input channels and a batch of three keep every gradient away from the
    # exact zeros that batch norm's scale invariance produces otherwise
    c_in, c_out = 2, 2
    params = ASPP(c_in, c_out, rng, morphological=bool(rng.random() < 0.5))
    _randomise(params, rng)
    for m in params.modules():
        if isinstance(m, BatchNorm2d):
            m.gamma.data[...] = rng.uniform(0.5, 1.5, m.gamma.shape)
    x = _leaf(rng, (3, c_in, 5, 5))
    return {"x": x, **_module_leaves(params, "aspp.")}, lambda: aspp(x, params)


def _build_cross_entropy(rng):
    from .train import cross_entropy

    n, k = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    h, w = (int(v) for v in rng.integers(1, 4, size=2))
    logits = _leaf(rng, (n, k, h, w), 2.0)
    labels = rng.integers(0, k, size=(n, h, w))
    labels[rng.random((n, h, w)) < 0.2] = -1
    labels.reshape(-1)[0] = 0
    return {"logits": logits}, lambda: cross_entropy(logits, labels, ignore_index=-1)


OPS: dict[str, Builder] = {
    "dilate2d": _build_dilate,
    "erode2d": _build_erode,
    "morph_activation": _build_activation,
    "morph_upsample": _build_upsample,
    "haar_forward": _build_haar,
    "mhw_fuse": _build_mhw,
    "conv2d": _build_conv,
    "batchnorm2d": _build_batchnorm,
    "aspp": _build_aspp,
    "cross_entropy": _build_cross_entropy,
}


@dataclass
class CaseResult:
    op: str
    seed: int
    attempts: int
    error: float
    leaf: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


class _Tie(Exception):
    pass


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def check_case(op: str, seed: int, eps: float = EPS, max_attempts: int = 100) -> CaseResult:
    """Run one seeded case of ``op``, redrawing until the point is tie-free."""
    build = OPS[op]
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        leaves, run = build(rng)
        outs = run()
        outs = outs if isinstance(outs, tuple) else (outs,)
        weights = [Tensor(rng.standard_normal(o.shape)) for o in outs]

        def loss():
            out = run()
            out = out if isinstance(out, tuple) else (out,)
            total = tsum(mul(out[0], weights[0]))
            for o, wt in zip(out[1:], weights[1:]):
                total = total + tsum(mul(o, wt))
            return total

        for t in leaves.values():
            t.grad = None
        with record_decisions() as reference:
            value = loss()
        backward(value)
        analytic = {name: (t.grad if t.grad is not None else np.zeros(t.shape)) for name, t in leaves.items()}
        try:
            numeric = {name: _numeric(loss, t, reference, eps) for name, t in leaves.items()}
        except _Tie:
            continue
        # the gradient with respect to all leaves is one vector; its relative
        # error is measured against the largest entry anywhere in it
        names = list(leaves)
        err = relative_error(
            np.concatenate([analytic[n].ravel() for n in names]),
            np.concatenate([numeric[n].ravel() for n in names]),
        )
        diffs = [np.abs(analytic[n].astype(np.float64) - numeric[n]) for n in names]
        j = int(np.argmax([d.max() for d in diffs]))
        idx = np.unravel_index(int(np.argmax(diffs[j])), diffs[j].shape)
        worst = (err, names[j], tuple(int(i) for i in idx), float(analytic[names[j]][idx]), float(numeric[names[j]][idx]))
        return CaseResult(op, seed, attempt + 1, *worst)
    raise RuntimeError(f"{op}: no tie-free point found for seed {seed} in {max_attempts} draws")


def _numeric(loss, leaf: Tensor, reference, eps) -> np.ndarray:
    stored = leaf.data

    def f(x: Tensor) -> Tensor:
        leaf.data = x.data
        try:
            with no_grad(), record_decisions() as seen:
                out = loss()
        finally:
            leaf.data = stored
        if not _same(seen, reference):
            raise _Tie
        return out

    return finite_diff_grad(f, Tensor._wrap(stored), eps).data


def run_suite(ops=None, cases: int = 100, seed: int = 0, eps: float = EPS) -> dict[str, list[CaseResult]]:
    """``cases`` seeded cases per operator; seeds are ``(seed, op index, case)``."""
    names = list(OPS) if ops is None else list(ops)
    unknown = [n for n in names if n not in OPS]
    if unknown:
        raise KeyError(f"unknown operators: {', '.join(unknown)}")
    results = {}
    for name in names:
        base = list(OPS).index(name)
        results[name] = [check_case(name, seed * 1_000_003 + base * 10_007 + i, eps) for i in range(cases)]
    return results
