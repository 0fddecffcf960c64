"""Forward and backward primitives: 2-D convolution (stride/padding/dilation/
groups), batch normalization, GeLU, pooling, linear layers, and softmax
cross-entropy.

Two convolution paths exist on purpose: `conv2d` lowers to im2col plus a
batched matrix multiply, while `conv2d_naive` is an explicit-loop reference
used as the oracle in tests.  Backward functions recompute what they need
from (input, layer, grad_out); there is no autograd graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .errors import GeometryError, LabelError, ShapeError, StateError
from .tensor import Rng

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Param:
    """A learnable tensor together with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad: Optional[np.ndarray] = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


@dataclass
class GradResult:
    """Gradient of a scalar objective w.r.t. a layer's input and parameters."""

    grad_input: np.ndarray
    grad_params: Dict[str, np.ndarray] = field(default_factory=dict)


class Conv2dLayer:
    """2-D convolution layer.

    weight: [out_channels, in_channels/groups, k, k]; optional bias
    [out_channels].  `groups == in_channels == out_channels` is the
    depthwise case.  Dilation spreads the kernel taps `dilation` pixels
    apart; dilation 1 is a regular convolution.
    """

    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray] = None, *,
                 stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1):
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError(f"conv weight must be [out, in/groups, k, k], got {weight.shape}")
        if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
            raise ValueError("stride/dilation/groups must be >= 1 and padding >= 0")
        out_channels = weight.shape[0]
        in_channels = weight.shape[1] * groups
        if out_channels % groups != 0 or in_channels % groups != 0:
            raise ShapeError(f"groups={groups} must divide in={in_channels} and out={out_channels}")
        if bias is not None and bias.shape != (out_channels,):
            raise ShapeError(f"bias shape {bias.shape} != ({out_channels},)")
        self.weight = Param(weight)
        self.bias = Param(bias) if bias is not None else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    @classmethod
    def create(cls, in_channels: int, out_channels: int, kernel_size: int, *,
               stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1,
               bias: bool = True, rng: Optional[Rng] = None,
               dtype=np.float32) -> "Conv2dLayer":
        """He-normal (fan-out) initialized layer; zero weights when rng is None."""
        if in_channels % groups != 0:
            raise ShapeError(f"groups={groups} must divide in_channels={in_channels}")
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            fan_out = out_channels * kernel_size * kernel_size // groups
            w = rng.normal(shape, std=math.sqrt(2.0 / fan_out), dtype=dtype)
        b = np.zeros(out_channels, dtype=dtype) if bias else None
        return cls(w, b, stride=stride, padding=padding, dilation=dilation, groups=groups)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def named_params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class BatchNorm2d:
    """Per-channel batch normalization over (N, H, W).

    `mode` is "train" (normalize with batch statistics and update the running
    estimates) or "eval" (normalize with the running estimates only).
    Running variance uses the biased batch estimate so that running and batch
    statistics coincide once converged.
    """

    def __init__(self, gamma: np.ndarray, beta: np.ndarray,
                 running_mean: np.ndarray, running_var: np.ndarray, *,
                 eps: float = 1e-5, momentum: float = 0.1, mode: str = "eval"):
        c = gamma.shape[0]
        for name, arr in (("beta", beta), ("running_mean", running_mean),
                          ("running_var", running_var)):
            if arr.shape != (c,):
                raise ShapeError(f"{name} shape {arr.shape} != ({c},)")
        if np.any(running_var < 0):
            raise ValueError("running_var must be >= 0 elementwise")
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {momentum}")
        self.gamma = Param(gamma)
        self.beta = Param(beta)
        self.running_mean = running_mean
        self.running_var = running_var
        self.eps = eps
        self.momentum = momentum
        self.mode = mode

    @classmethod
    def create(cls, channels: int, *, eps: float = 1e-5, momentum: float = 0.1,
               dtype=np.float32) -> "BatchNorm2d":
        return cls(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype),
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   eps=eps, momentum=momentum)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def named_params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class LinearLayer:
    """Fully connected layer: y = x @ weight.T + bias."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"inconsistent linear shapes: weight {weight.shape}, bias {bias.shape}")
        self.weight = Param(weight)
        self.bias = Param(bias)

    @classmethod
    def create(cls, in_features: int, out_features: int, *,
               rng: Optional[Rng] = None, dtype=np.float32) -> "LinearLayer":
        """Normal(0, 0.02) initialized weight, zero bias."""
        if rng is None:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            w = rng.normal((out_features, in_features), std=0.02, dtype=dtype)
        return cls(w, np.zeros(out_features, dtype=dtype))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def named_params(self):
        yield "weight", self.weight
        yield "bias", self.bias


# ---------------------------------------------------------------------------
# convolution


def effective_kernel(kernel_size: int, dilation: int) -> int:
    """Side length of the kernel footprint once dilation gaps are included."""
    return (kernel_size - 1) * dilation + 1


def out_shape(h: int, w: int, conv: Conv2dLayer) -> Tuple[int, int]:
    """Output spatial dims of `conv` applied to an h x w input."""
    k_eff = effective_kernel(conv.kernel_size, conv.dilation)
    oh = (h + 2 * conv.padding - k_eff) // conv.stride + 1
    ow = (w + 2 * conv.padding - k_eff) // conv.stride + 1
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"no valid output for input {h}x{w} with k={conv.kernel_size} "
            f"d={conv.dilation} s={conv.stride} p={conv.padding}")
    return oh, ow


def _check_conv_input(x: np.ndarray, conv: Conv2dLayer) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D (N,C,H,W), got {x.shape}")
    if x.shape[1] != conv.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {conv.in_channels}")


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """Gather kernel taps into [N, C, k, k, oh, ow]; out-of-bounds taps are zero."""
    n, c, _, _ = x.shape
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        i0 = i * dilation
        for j in range(k):
            j0 = j * dilation
            col[:, :, i, j] = x[:, :, i0:i0 + stride * oh:stride, j0:j0 + stride * ow:stride]
    return col


def _col2im(col: np.ndarray, h: int, w: int, stride: int, padding: int,
            dilation: int) -> np.ndarray:
    """Scatter-add [N, C, k, k, oh, ow] tap gradients back onto the input plane."""
    n, c, k, _, oh, ow = col.shape
    # slack rows/cols keep the strided slices in bounds; cropped afterwards
    img = np.zeros((n, c, h + 2 * padding + stride, w + 2 * padding + stride),
                   dtype=col.dtype)
    for i in range(k):
        i0 = i * dilation
        for j in range(k):
            j0 = j * dilation
            img[:, :, i0:i0 + stride * oh:stride, j0:j0 + stride * ow:stride] += col[:, :, i, j]
    return img[:, :, padding:padding + h, padding:padding + w]


def conv2d(x: np.ndarray, conv: Conv2dLayer) -> np.ndarray:
    """Optimized convolution: im2col + batched matmul. Zero padding."""
    _check_conv_input(x, conv)
    n, c, h, w = x.shape
    oh, ow = out_shape(h, w, conv)
    k, g = conv.kernel_size, conv.groups
    cg = c // g
    og = conv.out_channels // g
    col = _im2col(x, k, conv.stride, conv.padding, conv.dilation, oh, ow)
    col = col.reshape(n, g, cg * k * k, oh * ow)
    wmat = conv.weight.value.reshape(g, og, cg * k * k)
    out = np.matmul(wmat, col).reshape(n, conv.out_channels, oh, ow)
    if conv.bias is not None:
        out += conv.bias.value[None, :, None, None]
    return out


def conv2d_naive(x: np.ndarray, conv: Conv2dLayer) -> np.ndarray:
    """Reference convolution: explicit loops with dilation offsets, no layout tricks."""
    _check_conv_input(x, conv)
    n, c, h, w = x.shape
    oh, ow = out_shape(h, w, conv)
    k, g, s, p, d = conv.kernel_size, conv.groups, conv.stride, conv.padding, conv.dilation
    cg = c // g
    og = conv.out_channels // g
    wv = conv.weight.value
    out = np.zeros((n, conv.out_channels, oh, ow), dtype=x.dtype)
    for bn in range(n):
        for gi in range(g):
            for oc in range(og):
                oc_abs = gi * og + oc
                for oy in range(oh):
                    for ox in range(ow):
                        acc = 0.0
                        for ky in range(k):
                            iy = oy * s - p + ky * d
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox * s - p + kx * d
                                if ix < 0 or ix >= w:
                                    continue
                                for ic in range(cg):
                                    acc += x[bn, gi * cg + ic, iy, ix] * wv[oc_abs, ic, ky, kx]
                        out[bn, oc_abs, oy, ox] = acc
    if conv.bias is not None:
        out += conv.bias.value[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, conv: Conv2dLayer, grad_out: np.ndarray) -> GradResult:
    """Gradients of sum(grad_out * conv2d(x)) w.r.t. input, weight, and bias."""
    _check_conv_input(x, conv)
    n, c, h, w = x.shape
    oh, ow = out_shape(h, w, conv)
    if grad_out.shape != (n, conv.out_channels, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != {(n, conv.out_channels, oh, ow)}")
    k, g = conv.kernel_size, conv.groups
    cg = c // g
    og = conv.out_channels // g
    col = _im2col(x, k, conv.stride, conv.padding, conv.dilation, oh, ow)
    col = col.reshape(n, g, cg * k * k, oh * ow)
    go = grad_out.reshape(n, g, og, oh * ow)

    grad_w = np.matmul(go, col.transpose(0, 1, 3, 2)).sum(axis=0)
    grads = {"weight": grad_w.reshape(conv.weight.shape)}
    if conv.bias is not None:
        grads["bias"] = grad_out.sum(axis=(0, 2, 3))

    wmat = conv.weight.value.reshape(g, og, cg * k * k)
    gcol = np.matmul(wmat.transpose(0, 2, 1), go)
    gcol = gcol.reshape(n, c, k, k, oh, ow)
    grad_x = _col2im(gcol, h, w, conv.stride, conv.padding, conv.dilation)
    return GradResult(grad_x, grads)


# ---------------------------------------------------------------------------
# batch normalization


def _check_bn_input(x: np.ndarray, bn: BatchNorm2d) -> None:
    if x.ndim != 4 or x.shape[1] != bn.channels:
        raise ShapeError(f"BN expects (N,{bn.channels},H,W) input, got {x.shape}")


def _batch_stats(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def batchnorm_forward(x: np.ndarray, bn: BatchNorm2d) -> np.ndarray:
    _check_bn_input(x, bn)
    if bn.mode == "train":
        mean, var = _batch_stats(x)
        m = bn.momentum
        bn.running_mean = ((1.0 - m) * bn.running_mean + m * mean).astype(x.dtype)
        bn.running_var = ((1.0 - m) * bn.running_var + m * var).astype(x.dtype)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    scale = (bn.gamma.value * inv_std)[None, :, None, None]
    shift = (bn.beta.value - bn.gamma.value * mean * inv_std)[None, :, None, None]
    return x * scale + shift


def batchnorm_backward(x: np.ndarray, bn: BatchNorm2d, grad_out: np.ndarray) -> GradResult:
    """Train-mode BN gradients w.r.t. input, gamma, beta."""
    if bn.mode != "train":
        raise StateError("batchnorm_backward requires train mode; eval BN is an affine map "
                         "(fold it into the preceding convolution instead)")
    _check_bn_input(x, bn)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    mean, var = _batch_stats(x)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * bn.gamma.value[None, :, None, None]
    mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    grad_x = inv_std[None, :, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return GradResult(grad_x, {"gamma": grad_gamma, "beta": grad_beta})


# ---------------------------------------------------------------------------
# activations / pooling / linear / loss


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GeLU x * Phi(x) via erf (not the tanh approximation)."""
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def gelu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x), chained with grad_out."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
    return grad_out * (cdf + x * pdf)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean over (H, W): [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"grad_out shape {grad_out.shape} != ({n}, {c})")
    return np.broadcast_to(grad_out[:, :, None, None] / x.dtype.type(h * w), x.shape).copy()


def linear(x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"linear expects (N, {layer.in_features}) input, got {x.shape}")
    return x @ layer.weight.value.T + layer.bias.value[None, :]


def linear_backward(x: np.ndarray, layer: LinearLayer, grad_out: np.ndarray) -> GradResult:
    if grad_out.shape != (x.shape[0], layer.out_features):
        raise ShapeError(f"grad_out shape {grad_out.shape} != ({x.shape[0]}, {layer.out_features})")
    return GradResult(
        grad_out @ layer.weight.value,
        {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)},
    )


def softmax_cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy with log-sum-exp stabilization.

    Returns (loss, grad_logits) with grad = (softmax - one_hot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D (N, classes), got {logits.shape}")
    n, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= classes:
        raise LabelError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad = (grad / n).astype(logits.dtype)
    return loss, grad
