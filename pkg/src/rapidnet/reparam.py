"""Structural reparameterization for inference.

Two rewrites, both function-preserving:

* the training-time identity skip around the 7x7 depthwise conv is folded
  into the kernel (center tap += 1), so `x + dw(x)` becomes a single conv;
* every eval-mode BN is folded into the preceding convolution's weight and
  bias, leaving a BN-free graph.

Outer block residuals wrap non-linear paths and are kept as explicit adds.
`reparameterize_model` returns a new model; the input model is not touched.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .blocks import (
    DilatedConvBlock,
    DownsampleBlock,
    HeadBlock,
    InvertedResidualBlock,
    LkFfnBlock,
    MldcBlock,
    StemBlock,
)
from .errors import FusionError, ShapeError, StateError
from .model import RapidNetModel
from .ops import BatchNorm2d, Conv2dLayer, LinearLayer
from .tensor import Rng


@dataclass
class FusionReport:
    fused_skips: int
    folded_bns: int
    max_abs_logit_diff: float


def fuse_identity_into_dw(dw: Conv2dLayer) -> Conv2dLayer:
    """Fold an identity skip into a depthwise conv: fused(x) == x + dw(x).

    Requires a stride-1 depthwise conv with an odd kernel and "same"
    padding, so that the identity map is expressible as a center tap.
    """
    k = dw.kernel_size
    depthwise = dw.groups == dw.in_channels == dw.out_channels
    if not depthwise:
        raise FusionError("identity fusion requires a depthwise conv "
                          f"(groups={dw.groups}, in={dw.in_channels}, out={dw.out_channels})")
    if k % 2 == 0:
        raise FusionError(f"identity fusion requires an odd kernel, got k={k}")
    if dw.stride != 1:
        raise FusionError(f"identity fusion requires stride 1, got stride={dw.stride}")
    if dw.padding != dw.dilation * (k - 1) // 2:
        raise FusionError(f"identity fusion requires same-padding p={dw.dilation * (k - 1) // 2}, "
                          f"got p={dw.padding}")
    w = dw.weight.value.copy()
    w[:, 0, k // 2, k // 2] += 1.0
    b = dw.bias.value.copy() if dw.bias is not None else None
    return Conv2dLayer(w, b, stride=dw.stride, padding=dw.padding,
                       dilation=dw.dilation, groups=dw.groups)


def fold_bn_into_conv(conv: Conv2dLayer, bn: BatchNorm2d) -> Conv2dLayer:
    """Fold eval-mode BN into the preceding conv: folded(x) == bn(conv(x))."""
    if bn.mode != "eval":
        raise StateError("BN must be in eval mode to fold (train-mode statistics "
                         "are input-dependent)")
    if bn.channels != conv.out_channels:
        raise ShapeError(f"BN channels {bn.channels} != conv out_channels {conv.out_channels}")
    scale = bn.gamma.value / np.sqrt(bn.running_var + bn.eps)
    w = conv.weight.value * scale[:, None, None, None]
    b0 = conv.bias.value if conv.bias is not None else 0.0
    b = bn.beta.value + (b0 - bn.running_mean) * scale
    return Conv2dLayer(w.astype(conv.weight.value.dtype), b.astype(conv.weight.value.dtype),
                       stride=conv.stride, padding=conv.padding,
                       dilation=conv.dilation, groups=conv.groups)


def _clone_conv(conv: Conv2dLayer) -> Conv2dLayer:
    b = conv.bias.value.copy() if conv.bias is not None else None
    return Conv2dLayer(conv.weight.value.copy(), b, stride=conv.stride,
                       padding=conv.padding, dilation=conv.dilation, groups=conv.groups)


def _clone_linear(layer: LinearLayer) -> LinearLayer:
    return LinearLayer(layer.weight.value.copy(), layer.bias.value.copy())


class _Counter:
    def __init__(self):
        self.skips = 0
        self.bns = 0

    def fold(self, conv: Conv2dLayer, bn: Optional[BatchNorm2d]) -> Conv2dLayer:
        if bn is None:
            return _clone_conv(conv)
        self.bns += 1
        return fold_bn_into_conv(conv, bn)


def _shell(block):
    out = copy.copy(block)
    out._cache = None
    return out


def _fuse_block(block, counter: _Counter):
    if isinstance(block, StemBlock):
        out = _shell(block)
        out.conv1 = counter.fold(block.conv1, block.bn1)
        out.conv2 = counter.fold(block.conv2, block.bn2)
        out.bn1 = out.bn2 = None
        return out
    if isinstance(block, InvertedResidualBlock):
        out = _shell(block)
        out.expand = counter.fold(block.expand, block.bn1)
        out.dw = counter.fold(block.dw, block.bn2)
        out.project = counter.fold(block.project, block.bn3)
        out.bn1 = out.bn2 = out.bn3 = None
        return out
    if isinstance(block, DownsampleBlock):
        out = _shell(block)
        out.conv = counter.fold(block.conv, block.bn)
        out.bn = None
        return out
    if isinstance(block, MldcBlock):
        out = _shell(block)
        if block.cpe is not None and block.cpe_skip:
            out.cpe = fuse_identity_into_dw(block.cpe)
            counter.skips += 1
        elif block.cpe is not None:
            out.cpe = _clone_conv(block.cpe)
        out.cpe_skip = False
        out.pw_in = counter.fold(block.pw_in, block.bn_in)
        out.branches = [counter.fold(c, b) for c, b in zip(block.branches, block.branch_bns)]
        out.branch_bns = [None] * len(block.branches)
        out.pw_out = counter.fold(block.pw_out, block.bn_out)
        out.bn_in = out.bn_out = None
        return out
    if isinstance(block, LkFfnBlock):
        out = _shell(block)
        out.dw = counter.fold(block.dw, block.bn1)
        out.fc1 = _clone_conv(block.fc1)
        out.fc2 = counter.fold(block.fc2, block.bn2)
        out.bn1 = out.bn2 = None
        return out
    if isinstance(block, DilatedConvBlock):
        out = _shell(block)
        out.mldc = _fuse_block(block.mldc, counter)
        out.ffn = _fuse_block(block.ffn, counter)
        return out
    if isinstance(block, HeadBlock):
        out = _shell(block)
        if block.hidden is None:
            out.fc = _clone_linear(block.fc)
        else:
            out.fc1 = _clone_linear(block.fc1)
            out.fc2 = _clone_linear(block.fc2)
        return out
    raise TypeError(f"cannot fuse block of type {type(block).__name__}")


def reparameterize_model(model: RapidNetModel, *,
                         check_resolution: int = 64) -> tuple:
    """Fuse CPE skips and fold all BN layers; returns (fused_model, report).

    The report records the fusion counts and the max-abs logit difference
    between the source and fused models on a seeded random input at
    `check_resolution`.  Reparameterizing an already-fused model is a no-op
    (zero counts).  The input model must be in eval mode and is not mutated.
    """
    if model.mode != "eval":
        raise StateError("reparameterize_model requires an eval-mode model")
    counter = _Counter()
    stem = _fuse_block(model.stem, counter)
    stages: List[list] = [[_fuse_block(b, counter) for b in stage] for stage in model.stages]
    downs = [_fuse_block(d, counter) for d in model.downsamples]
    head = _fuse_block(model.head, counter)
    fused = RapidNetModel(model.config, stem, stages, downs, head,
                          dtype=model.dtype, fused=True)

    rng = Rng(model.config.seed ^ 0x5EED)
    x = rng.normal((1, 3, check_resolution, check_resolution), dtype=model.dtype)
    diff = float(np.max(np.abs(model.forward(x) - fused.forward(x))))
    report = FusionReport(fused_skips=counter.skips, folded_bns=counter.bns,
                          max_abs_logit_diff=diff)
    return fused, report


def count_batchnorms(model: RapidNetModel) -> int:
    """Number of BatchNorm2d layers reachable in the model structure."""
    return sum(1 for _ in model.iter_batchnorms())


def recalibrate_bn(model: RapidNetModel, x: np.ndarray) -> None:
    """Re-estimate every BN's running statistics on a calibration batch.

    One train-mode pass at momentum 1 sets each running mean/var to the
    activation statistics actually observed under `x`.  A freshly
    initialized network has placeholder statistics that activations drift
    away from layer by layer; recalibrating (or training) restores the
    bounded-activation regime that eval mode and BN folding assume.

    The batch should be large enough that every BN layer sees several
    samples per channel (N * H * W at the deepest stage), or the variance
    estimates degenerate and eval-mode scales blow up.
    """
    bns = list(model.iter_batchnorms())
    saved = [(bn, bn.momentum) for bn in bns]
    for bn in bns:
        bn.momentum = 1.0
    prev_mode = model.mode
    model.set_mode("train")
    try:
        model.forward(x)
    finally:
        model.set_mode(prev_mode)
        for bn, m in saved:
            bn.momentum = m
