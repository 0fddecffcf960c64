"""Static cost and receptive-field analysis.

Per-layer parameter counts, multiply-accumulate (MAC) counts traced through
the actual feature-map shapes at a given input resolution, theoretical
receptive fields, and a JSON-serializable report.

Conventions: 1 MAC = one multiply plus one accumulate; only convolution and
linear layers carry MACs.  BN, activations, residual adds, and pooling are
elementwise work, counted separately (one op per output element) and
reported under `elementwise_ops`.  The theoretical receptive field of a
k x k kernel with dilation d has side length (k - 1) * d + 1; in particular
a 3 x 3 kernel at dilation 3 covers a 7 x 7 field, the full final-stage
feature map of a 224-input network (7 x 7 after 32x reduction), which is
the coverage the dilated mixer's widest branch is sized to reach.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .blocks import (
    DilatedConvBlock,
    DownsampleBlock,
    HeadBlock,
    InvertedResidualBlock,
    LkFfnBlock,
    MldcBlock,
    StemBlock,
)
from .errors import GeometryError
from .model import ModelConfig, RapidNetModel, build_model
from .ops import BatchNorm2d, Conv2dLayer, LinearLayer, out_shape


def layer_trf(k: int, d: int) -> int:
    """Side length of the theoretical receptive field of a k x k kernel at dilation d."""
    if k < 1 or d < 1:
        raise ValueError(f"kernel and dilation must be >= 1, got k={k}, d={d}")
    return (k - 1) * d + 1


def conv_macs(conv: Conv2dLayer, out_h: int, out_w: int, n: int = 1) -> int:
    """MACs of one conv application: k*k*(C_in/groups)*C_out*H_out*W_out per sample."""
    k = conv.kernel_size
    return k * k * (conv.in_channels // conv.groups) * conv.out_channels * out_h * out_w * n


def linear_macs(layer: LinearLayer, n: int = 1) -> int:
    return layer.in_features * layer.out_features * n


@dataclass
class LayerCost:
    name: str
    params: int
    macs: int
    out_shape: List[int]
    k: int
    d: int
    trf: int

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params, "macs": self.macs,
                "out_shape": self.out_shape, "k": self.k, "d": self.d, "trf": self.trf}


@dataclass
class AnalysisReport:
    variant: str
    resolution: int
    total_params: int
    total_macs: int
    composite_rf: int
    elementwise_ops: int
    layers: List[LayerCost]

    @property
    def total_gmacs(self) -> float:
        return round(self.total_macs / 1e9, 3)

    def to_dict(self) -> dict:
        # Stable key order: variant, resolution, total_params, total_gmacs,
        # composite_rf, elementwise_ops, layers.
        return {
            "variant": self.variant,
            "resolution": self.resolution,
            "total_params": self.total_params,
            "total_gmacs": self.total_gmacs,
            "composite_rf": self.composite_rf,
            "elementwise_ops": self.elementwise_ops,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    def to_json(self, indent: Optional[int] = None) -> str:
        return json.dumps(self.to_dict(), indent=indent)


class _Trace:
    """Accumulates layer costs and elementwise counts while walking the model."""

    def __init__(self):
        self.layers: List[LayerCost] = []
        self.elementwise = 0

    def conv(self, name: str, conv: Conv2dLayer, h: int, w: int) -> Tuple[int, int]:
        oh, ow = out_shape(h, w, conv)
        params = conv.weight.value.size + (conv.bias.value.size if conv.bias is not None else 0)
        self.layers.append(LayerCost(
            name=name, params=params, macs=conv_macs(conv, oh, ow),
            out_shape=[1, conv.out_channels, oh, ow],
            k=conv.kernel_size, d=conv.dilation,
            trf=layer_trf(conv.kernel_size, conv.dilation)))
        return oh, ow

    def bn(self, name: str, bn: Optional[BatchNorm2d], c: int, h: int, w: int) -> None:
        if bn is None:
            return
        self.layers.append(LayerCost(name=name, params=2 * c, macs=0,
                                     out_shape=[1, c, h, w], k=1, d=1, trf=1))
        self.elementwise += c * h * w

    def linear(self, name: str, layer: LinearLayer) -> None:
        self.layers.append(LayerCost(
            name=name, params=layer.weight.value.size + layer.bias.value.size,
            macs=linear_macs(layer), out_shape=[1, layer.out_features],
            k=1, d=1, trf=1))

    def ew(self, count: int) -> None:
        self.elementwise += count


def _trace_block(tr: _Trace, name: str, block, h: int, w: int) -> Tuple[int, int]:
    """Append the block's layer costs; returns the output spatial dims."""
    if isinstance(block, StemBlock):
        h, w = tr.conv(f"{name}.conv1", block.conv1, h, w)
        c = block.conv1.out_channels
        tr.bn(f"{name}.bn1", block.bn1, c, h, w)
        tr.ew(c * h * w)  # gelu
        h, w = tr.conv(f"{name}.conv2", block.conv2, h, w)
        c = block.conv2.out_channels
        tr.bn(f"{name}.bn2", block.bn2, c, h, w)
        tr.ew(c * h * w)
        return h, w
    if isinstance(block, InvertedResidualBlock):
        c = block.channels
        tr.conv(f"{name}.expand", block.expand, h, w)
        tr.bn(f"{name}.bn1", block.bn1, 4 * c, h, w)
        tr.ew(4 * c * h * w)
        tr.conv(f"{name}.dw", block.dw, h, w)
        tr.bn(f"{name}.bn2", block.bn2, 4 * c, h, w)
        tr.ew(4 * c * h * w)
        tr.conv(f"{name}.project", block.project, h, w)
        tr.bn(f"{name}.bn3", block.bn3, c, h, w)
        tr.ew(c * h * w)  # residual add
        return h, w
    if isinstance(block, DownsampleBlock):
        h, w = tr.conv(f"{name}.conv", block.conv, h, w)
        tr.bn(f"{name}.bn", block.bn, block.conv.out_channels, h, w)
        return h, w
    if isinstance(block, MldcBlock):
        c = block.channels
        if block.cpe is not None:
            tr.conv(f"{name}.cpe", block.cpe, h, w)
            if block.cpe_skip:
                tr.ew(c * h * w)  # identity skip add
        tr.conv(f"{name}.pw_in", block.pw_in, h, w)
        tr.bn(f"{name}.bn_in", block.bn_in, c, h, w)
        for (bname, conv), bn in zip(
                [(n, l) for n, l in block._layers() if n.startswith("branch_")],
                block.branch_bns):
            tr.conv(f"{name}.{bname}", conv, h, w)
            tr.bn(f"{name}.bn_{bname[-1]}", bn, c, h, w)
        n_branch = len(block.branches)
        tr.ew((n_branch - 1) * c * h * w)  # branch sum
        tr.ew((n_branch if block.gelu_per_branch else 1) * c * h * w)  # gelu
        tr.conv(f"{name}.pw_out", block.pw_out, h, w)
        tr.bn(f"{name}.bn_out", block.bn_out, c, h, w)
        tr.ew(c * h * w)  # outer residual
        return h, w
    if isinstance(block, LkFfnBlock):
        c = block.channels
        tr.conv(f"{name}.dw", block.dw, h, w)
        tr.bn(f"{name}.bn1", block.bn1, c, h, w)
        tr.conv(f"{name}.fc1", block.fc1, h, w)
        tr.ew(4 * c * h * w)  # gelu
        tr.conv(f"{name}.fc2", block.fc2, h, w)
        tr.bn(f"{name}.bn2", block.bn2, c, h, w)
        tr.ew(c * h * w)  # outer residual
        return h, w
    if isinstance(block, DilatedConvBlock):
        h, w = _trace_block(tr, f"{name}.mldc", block.mldc, h, w)
        return _trace_block(tr, f"{name}.ffn", block.ffn, h, w)
    if isinstance(block, HeadBlock):
        c = block.fc.in_features if block.hidden is None else block.fc1.in_features
        tr.ew(c * h * w)  # pooling
        if block.hidden is None:
            tr.linear(f"{name}.fc", block.fc)
        else:
            tr.linear(f"{name}.fc1", block.fc1)
            tr.ew(block.hidden)  # gelu
            tr.linear(f"{name}.fc2", block.fc2)
        return h, w
    raise TypeError(f"cannot trace block of type {type(block).__name__}")


def _trace_model(model: RapidNetModel, resolution: int) -> _Trace:
    if resolution % 32 != 0 or resolution < 32:
        raise GeometryError(f"resolution {resolution} must be a positive multiple of 32")
    tr = _Trace()
    h = w = resolution
    for name, block in model.named_blocks():
        h, w = _trace_block(tr, name, block, h, w)
    return tr


def count_params(model: RapidNetModel) -> int:
    """Total learnable scalars (BN running statistics excluded)."""
    return sum(p.value.size for _, p in model.iter_params())


def count_macs(model: RapidNetModel, resolution: int) -> int:
    """Total conv + linear MACs for one forward pass at resolution x resolution."""
    return sum(layer.macs for layer in _trace_model(model, resolution).layers)


def block_conv_macs(block, h: int, w: int) -> int:
    """MACs of a single block at the given input spatial dims (bench annotation)."""
    tr = _Trace()
    _trace_block(tr, "block", block, h, w)
    return sum(layer.macs for layer in tr.layers)


def chain_rf(layers) -> int:
    """Receptive field of a sequential conv stack given (kernel, dilation, stride) triples."""
    r, j = 1, 1
    for k, d, s in layers:
        r += (layer_trf(k, d) - 1) * j
        j *= s
    return r


def composite_rf(model: RapidNetModel) -> int:
    """Receptive-field side length of the convolutional trunk at the head input.

    Standard recursion: r += (k_eff - 1) * jump, jump *= stride; parallel
    branches contribute their maximum; residual skips never shrink the
    field, so the conv path dominates.  Global pooling and the classifier
    are excluded.
    """
    r, j = 1, 1

    def step(k: int, d: int, stride: int) -> None:
        nonlocal r, j
        r += (layer_trf(k, d) - 1) * j
        j *= stride

    for _, block in model.named_blocks():
        for blk in ([block.mldc, block.ffn] if isinstance(block, DilatedConvBlock)
                    else [block]):
            if isinstance(blk, StemBlock):
                step(3, 1, 2)
                step(3, 1, 2)
            elif isinstance(blk, InvertedResidualBlock):
                step(3, 1, 1)
            elif isinstance(blk, DownsampleBlock):
                step(3, 1, 2)
            elif isinstance(blk, MldcBlock):
                if blk.cpe is not None:
                    step(7, 1, 1)
                grow = max(layer_trf(c.kernel_size, c.dilation) - 1 for c in blk.branches)
                r += grow * j
            elif isinstance(blk, LkFfnBlock):
                step(blk.dw.kernel_size, 1, 1)
    return r


def report(cfg: ModelConfig, resolution: int, model: Optional[RapidNetModel] = None
           ) -> AnalysisReport:
    """Full per-layer cost breakdown of the configured model at a resolution."""
    if model is None:
        model = build_model(cfg)
    tr = _trace_model(model, resolution)
    total_params = sum(layer.params for layer in tr.layers)
    total_macs = sum(layer.macs for layer in tr.layers)
    return AnalysisReport(
        variant=cfg.variant,
        resolution=resolution,
        total_params=total_params,
        total_macs=total_macs,
        composite_rf=composite_rf(model),
        elementwise_ops=tr.elementwise,
        layers=tr.layers,
    )
