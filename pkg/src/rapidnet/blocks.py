"""Composite network blocks: conv stem, inverted residual block, downsample,
multi-level dilated convolution (MLDC) block, large-kernel FFN, and the
classifier head.

Every block follows the same protocol: `forward(x, train=False)` runs the
block (train mode uses batch statistics in BN, updates running estimates,
and records the activations needed for `backward`); `backward(grad_out)`
accumulates parameter gradients and returns the gradient w.r.t. the block
input.  Blocks whose BN layers have been folded away (see `reparam`) carry
`None` in the BN slots and skip normalization.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .errors import GeometryError, ShapeError, StateError
from .ops import (
    BatchNorm2d,
    Conv2dLayer,
    LinearLayer,
    batchnorm_backward,
    batchnorm_forward,
    conv2d,
    conv2d_backward,
    gelu,
    gelu_backward,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
)
from .tensor import Rng, add


def _apply_bn(x: np.ndarray, bn: Optional[BatchNorm2d], train: bool) -> np.ndarray:
    if bn is None:
        return x
    bn.mode = "train" if train else "eval"
    return batchnorm_forward(x, bn)


def _conv_chain_forward(x, conv, bn, act, train, cache):
    """conv -> optional BN -> optional GeLU; appends (x, conv_out, bn_out) to cache."""
    y = conv2d(x, conv)
    z = _apply_bn(y, bn, train)
    out = gelu(z) if act else z
    if cache is not None:
        cache.append((x, y, z))
    return out


def _conv_chain_backward(grad, conv, bn, act, entry):
    x, y, z = entry
    if act:
        grad = gelu_backward(z, grad)
    if bn is not None:
        r = batchnorm_backward(y, bn, grad)
        bn.gamma.accumulate(r.grad_params["gamma"])
        bn.beta.accumulate(r.grad_params["beta"])
        grad = r.grad_input
    r = conv2d_backward(x, conv, grad)
    conv.weight.accumulate(r.grad_params["weight"])
    if conv.bias is not None:
        conv.bias.accumulate(r.grad_params["bias"])
    return r.grad_input


class _Block:
    """Shared cache plumbing for the concrete blocks."""

    def __init__(self):
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a "
                             "preceding train-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def _bn_slots(self):
        return [(name, layer) for name, layer in self._layers() if isinstance(layer, BatchNorm2d)]

    def named_params(self):
        for name, layer in self._layers():
            if layer is None:
                continue
            for pname, p in layer.named_params():
                yield f"{name}.{pname}", p

    def named_buffers(self):
        for name, layer in self._layers():
            if isinstance(layer, BatchNorm2d):
                for bname, buf in layer.named_buffers():
                    yield f"{name}.{bname}", buf


class StemBlock(_Block):
    """Two stride-2 3x3 conv+BN+GeLU stages; reduces resolution 4x."""

    def __init__(self, in_channels: int, out_channels: int, *,
                 rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        if out_channels % 2 != 0:
            raise ShapeError(f"stem output channels must be even, got {out_channels}")
        mid = out_channels // 2
        self.conv1 = Conv2dLayer.create(in_channels, mid, 3, stride=2, padding=1,
                                        bias=False, rng=rng, dtype=dtype)
        self.bn1: Optional[BatchNorm2d] = BatchNorm2d.create(mid, dtype=dtype)
        self.conv2 = Conv2dLayer.create(mid, out_channels, 3, stride=2, padding=1,
                                        bias=False, rng=rng, dtype=dtype)
        self.bn2: Optional[BatchNorm2d] = BatchNorm2d.create(out_channels, dtype=dtype)

    def _layers(self):
        return [("conv1", self.conv1), ("bn1", self.bn1),
                ("conv2", self.conv2), ("bn2", self.bn2)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"stem expects a 4-D input, got {x.shape}")
        if x.shape[2] % 4 != 0 or x.shape[3] % 4 != 0:
            raise GeometryError(f"stem input resolution {x.shape[2]}x{x.shape[3]} "
                                "must be divisible by 4")
        cache: Optional[list] = [] if train else None
        h = _conv_chain_forward(x, self.conv1, self.bn1, True, train, cache)
        h = _conv_chain_forward(h, self.conv2, self.bn2, True, train, cache)
        if train:
            self._cache = cache
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        c1, c2 = self._take_cache()
        g = _conv_chain_backward(grad_out, self.conv2, self.bn2, True, c2)
        return _conv_chain_backward(g, self.conv1, self.bn1, True, c1)


class InvertedResidualBlock(_Block):
    """1x1 expand (ratio 4) -> 3x3 depthwise -> 1x1 project, residual around all."""

    def __init__(self, channels: int, *, rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        hidden = 4 * channels
        self.expand = Conv2dLayer.create(channels, hidden, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1: Optional[BatchNorm2d] = BatchNorm2d.create(hidden, dtype=dtype)
        self.dw = Conv2dLayer.create(hidden, hidden, 3, padding=1, groups=hidden,
                                     bias=False, rng=rng, dtype=dtype)
        self.bn2: Optional[BatchNorm2d] = BatchNorm2d.create(hidden, dtype=dtype)
        self.project = Conv2dLayer.create(hidden, channels, 1, bias=False, rng=rng, dtype=dtype)
        self.bn3: Optional[BatchNorm2d] = BatchNorm2d.create(channels, dtype=dtype)

    @property
    def channels(self) -> int:
        return self.expand.in_channels

    def _layers(self):
        return [("expand", self.expand), ("bn1", self.bn1), ("dw", self.dw),
                ("bn2", self.bn2), ("project", self.project), ("bn3", self.bn3)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        cache: Optional[list] = [] if train else None
        h = _conv_chain_forward(x, self.expand, self.bn1, True, train, cache)
        h = _conv_chain_forward(h, self.dw, self.bn2, True, train, cache)
        h = _conv_chain_forward(h, self.project, self.bn3, False, train, cache)
        if train:
            self._cache = cache
        return add(x, h)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        c1, c2, c3 = self._take_cache()
        g = _conv_chain_backward(grad_out, self.project, self.bn3, False, c3)
        g = _conv_chain_backward(g, self.dw, self.bn2, True, c2)
        g = _conv_chain_backward(g, self.expand, self.bn1, True, c1)
        return grad_out + g


class DownsampleBlock(_Block):
    """Stride-2 3x3 conv + BN; halves resolution, changes channel width."""

    def __init__(self, in_channels: int, out_channels: int, *,
                 rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2dLayer.create(in_channels, out_channels, 3, stride=2, padding=1,
                                       bias=False, rng=rng, dtype=dtype)
        self.bn: Optional[BatchNorm2d] = BatchNorm2d.create(out_channels, dtype=dtype)

    def _layers(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        cache: Optional[list] = [] if train else None
        h = _conv_chain_forward(x, self.conv, self.bn, False, train, cache)
        if train:
            self._cache = cache
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        (c1,) = self._take_cache()
        return _conv_chain_backward(grad_out, self.conv, self.bn, False, c1)


MIXER_MODES = ("mldc", "sldc", "conv3x3", "pointwise")


class MldcBlock(_Block):
    """Spatial mixer block: reparameterizable 7x7 depthwise conv (with
    training-time identity skip), pointwise conv + BN, parallel dilated
    branches summed under one GeLU, pointwise conv + BN, outer residual.

    `mixer_mode` selects the branch set: "mldc" (two dilated convs), "sldc"
    (one dilated conv), "conv3x3" (one regular 3x3), "pointwise" (one 1x1).
    """

    def __init__(self, channels: int, *, dilations=(2, 3), kernel: int = 3,
                 mixer_mode: str = "mldc", use_cpe: bool = True,
                 gelu_per_branch: bool = False,
                 rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        if mixer_mode not in MIXER_MODES:
            raise ValueError(f"unknown mixer_mode {mixer_mode!r}")
        self.mixer_mode = mixer_mode
        self.gelu_per_branch = gelu_per_branch
        if use_cpe:
            self.cpe: Optional[Conv2dLayer] = Conv2dLayer.create(
                channels, channels, 7, padding=3, groups=channels, bias=True,
                rng=rng, dtype=dtype)
        else:
            self.cpe = None
        self.cpe_skip = use_cpe  # identity skip around the CPE; cleared by fusion
        self.pw_in = Conv2dLayer.create(channels, channels, 1, bias=False, rng=rng, dtype=dtype)
        self.bn_in: Optional[BatchNorm2d] = BatchNorm2d.create(channels, dtype=dtype)

        if mixer_mode == "mldc":
            specs = [(kernel, dilations[0]), (kernel, dilations[1])]
        elif mixer_mode == "sldc":
            specs = [(kernel, dilations[0])]
        elif mixer_mode == "conv3x3":
            specs = [(3, 1)]
        else:  # pointwise
            specs = [(1, 1)]
        self.branches: List[Conv2dLayer] = []
        self.branch_bns: List[Optional[BatchNorm2d]] = []
        for k, d in specs:
            self.branches.append(Conv2dLayer.create(
                channels, channels, k, padding=d * (k - 1) // 2, dilation=d,
                bias=False, rng=rng, dtype=dtype))
            self.branch_bns.append(BatchNorm2d.create(channels, dtype=dtype))

        self.pw_out = Conv2dLayer.create(channels, channels, 1, bias=False, rng=rng, dtype=dtype)
        self.bn_out: Optional[BatchNorm2d] = BatchNorm2d.create(channels, dtype=dtype)

    @property
    def channels(self) -> int:
        return self.pw_in.in_channels

    def _layers(self):
        layers = [("cpe", self.cpe), ("pw_in", self.pw_in), ("bn_in", self.bn_in)]
        for i, (conv, bn) in enumerate(zip(self.branches, self.branch_bns)):
            tag = chr(ord("a") + i)
            layers.append((f"branch_{tag}", conv))
            layers.append((f"bn_{tag}", bn))
        layers += [("pw_out", self.pw_out), ("bn_out", self.bn_out)]
        return layers

    def forward(self, x: np.ndarray, train: bool = False,
                cpe_skip: Optional[bool] = None) -> np.ndarray:
        if x.shape[1] != self.channels:
            raise ShapeError(f"input has {x.shape[1]} channels, block expects {self.channels}")
        skip = self.cpe_skip if cpe_skip is None else cpe_skip
        cache: Optional[list] = [] if train else None

        if self.cpe is not None:
            c = conv2d(x, self.cpe)
            y = add(x, c) if skip else c
        else:
            y = x
        t = _conv_chain_forward(y, self.pw_in, self.bn_in, False, train, cache)

        branch_outs = []
        for conv, bn in zip(self.branches, self.branch_bns):
            branch_outs.append(_conv_chain_forward(t, conv, bn, self.gelu_per_branch,
                                                   train, cache))
        pre = branch_outs[0]
        for b in branch_outs[1:]:
            pre = add(pre, b)
        z = pre if self.gelu_per_branch else gelu(pre)

        u = _conv_chain_forward(z, self.pw_out, self.bn_out, False, train, cache)
        if train:
            self._cache = (x, skip, pre, cache)
        return add(x, u)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x, skip, pre, chain = self._take_cache()
        n_branch = len(self.branches)
        g = _conv_chain_backward(grad_out, self.pw_out, self.bn_out, False, chain[-1])
        if not self.gelu_per_branch:
            g = gelu_backward(pre, g)
        grad_t = None
        for i in range(n_branch - 1, -1, -1):
            gi = _conv_chain_backward(g, self.branches[i], self.branch_bns[i],
                                      self.gelu_per_branch, chain[1 + i])
            grad_t = gi if grad_t is None else grad_t + gi
        g = _conv_chain_backward(grad_t, self.pw_in, self.bn_in, False, chain[0])
        if self.cpe is not None:
            r = conv2d_backward(x, self.cpe, g)
            self.cpe.weight.accumulate(r.grad_params["weight"])
            if self.cpe.bias is not None:
                self.cpe.bias.accumulate(r.grad_params["bias"])
            g = r.grad_input + g if skip else r.grad_input
        return grad_out + g


class LkFfnBlock(_Block):
    """Large-kernel FFN: 7x7 depthwise conv + BN, then a two-layer pointwise
    MLP (expansion 4) with GeLU; outer residual."""

    def __init__(self, channels: int, *, large_kernel: bool = True,
                 rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        k = 7 if large_kernel else 1
        hidden = 4 * channels
        self.dw = Conv2dLayer.create(channels, channels, k, padding=(k - 1) // 2,
                                     groups=channels, bias=False, rng=rng, dtype=dtype)
        self.bn1: Optional[BatchNorm2d] = BatchNorm2d.create(channels, dtype=dtype)
        self.fc1 = Conv2dLayer.create(channels, hidden, 1, bias=True, rng=rng, dtype=dtype)
        self.fc2 = Conv2dLayer.create(hidden, channels, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2: Optional[BatchNorm2d] = BatchNorm2d.create(channels, dtype=dtype)

    @property
    def channels(self) -> int:
        return self.dw.in_channels

    def _layers(self):
        return [("dw", self.dw), ("bn1", self.bn1), ("fc1", self.fc1),
                ("fc2", self.fc2), ("bn2", self.bn2)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.channels:
            raise ShapeError(f"input has {x.shape[1]} channels, block expects {self.channels}")
        cache: Optional[list] = [] if train else None
        h = _conv_chain_forward(x, self.dw, self.bn1, False, train, cache)
        h = _conv_chain_forward(h, self.fc1, None, True, train, cache)
        h = _conv_chain_forward(h, self.fc2, self.bn2, False, train, cache)
        if train:
            self._cache = cache
        return add(x, h)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        c1, c2, c3 = self._take_cache()
        g = _conv_chain_backward(grad_out, self.fc2, self.bn2, False, c3)
        g = _conv_chain_backward(g, self.fc1, None, True, c2)
        g = _conv_chain_backward(g, self.dw, self.bn1, False, c1)
        return grad_out + g


class DilatedConvBlock(_Block):
    """MLDC block followed by the large-kernel FFN; shape preserving."""

    def __init__(self, mldc: MldcBlock, ffn: LkFfnBlock):
        super().__init__()
        self.mldc = mldc
        self.ffn = ffn

    def named_params(self):
        for name, p in self.mldc.named_params():
            yield f"mldc.{name}", p
        for name, p in self.ffn.named_params():
            yield f"ffn.{name}", p

    def named_buffers(self):
        for name, b in self.mldc.named_buffers():
            yield f"mldc.{name}", b
        for name, b in self.ffn.named_buffers():
            yield f"ffn.{name}", b

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.ffn.forward(self.mldc.forward(x, train), train)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return self.mldc.backward(self.ffn.backward(grad_out))


class HeadBlock(_Block):
    """Global average pooling followed by the classifier MLP.

    With `hidden` set, the head is fc1 -> GeLU -> fc2; otherwise a single
    linear layer maps pooled features to class logits.
    """

    def __init__(self, channels: int, num_classes: int, *, hidden: Optional[int] = None,
                 rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        if hidden is None:
            self.fc = LinearLayer.create(channels, num_classes, rng=rng, dtype=dtype)
            self.fc1 = self.fc2 = None
        else:
            self.fc = None
            self.fc1 = LinearLayer.create(channels, hidden, rng=rng, dtype=dtype)
            self.fc2 = LinearLayer.create(hidden, num_classes, rng=rng, dtype=dtype)

    @property
    def num_classes(self) -> int:
        return (self.fc or self.fc2).out_features

    def _layers(self):
        if self.hidden is None:
            return [("fc", self.fc)]
        return [("fc1", self.fc1), ("fc2", self.fc2)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        pooled = global_avg_pool(x)
        if self.hidden is None:
            logits = linear(pooled, self.fc)
            if train:
                self._cache = (x, pooled)
        else:
            h = linear(pooled, self.fc1)
            a = gelu(h)
            logits = linear(a, self.fc2)
            if train:
                self._cache = (x, pooled, h, a)
        return logits

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        cache = self._take_cache()
        if self.hidden is None:
            x, pooled = cache
            r = linear_backward(pooled, self.fc, grad_out)
            self.fc.weight.accumulate(r.grad_params["weight"])
            self.fc.bias.accumulate(r.grad_params["bias"])
            g = r.grad_input
        else:
            x, pooled, h, a = cache
            r2 = linear_backward(a, self.fc2, grad_out)
            self.fc2.weight.accumulate(r2.grad_params["weight"])
            self.fc2.bias.accumulate(r2.grad_params["bias"])
            g = gelu_backward(h, r2.grad_input)
            r1 = linear_backward(pooled, self.fc1, g)
            self.fc1.weight.accumulate(r1.grad_params["weight"])
            self.fc1.bias.accumulate(r1.grad_params["bias"])
            g = r1.grad_input
        return global_avg_pool_backward(x, g)


# ---------------------------------------------------------------------------
# eval-mode functional wrappers


def stem_forward(x: np.ndarray, stem: StemBlock) -> np.ndarray:
    return stem.forward(x)


def irb_forward(x: np.ndarray, block: InvertedResidualBlock) -> np.ndarray:
    return block.forward(x)


def downsample_forward(x: np.ndarray, block: DownsampleBlock) -> np.ndarray:
    return block.forward(x)


def mldc_forward(x: np.ndarray, block: MldcBlock, mode: str = "train") -> np.ndarray:
    """Run the MLDC block with the identity skip active ("train") or already
    folded into the depthwise kernel ("fused")."""
    if mode not in ("train", "fused"):
        raise ValueError(f"mode must be 'train' or 'fused', got {mode!r}")
    return block.forward(x, cpe_skip=(mode == "train"))


def lkffn_forward(x: np.ndarray, block: LkFfnBlock) -> np.ndarray:
    return block.forward(x)


def dcb_forward(x: np.ndarray, block: DilatedConvBlock) -> np.ndarray:
    return block.forward(x)


def head_forward(x: np.ndarray, head: HeadBlock) -> np.ndarray:
    return head.forward(x)
