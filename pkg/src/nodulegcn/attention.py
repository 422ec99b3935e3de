"""Convolutional block attention: channel attention followed by spatial attention.

Channel weights come from a shared two-layer MLP fed by global average- and
max-pooled descriptors; spatial weights come from a 7x7 convolution over the
channel-pooled mean/max maps. Both stages scale the feature map elementwise
and keep its shape, so the block drops into any backbone position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    add,
    conv2d,
    global_pool,
    matmul,
    mul,
    reduce_max,
    relu,
    reshape,
    sigmoid,
    stack,
    tmean,
    transpose2d,
)


@dataclass
class CBAMParams:
    """Weights for one attention block over C channels.

    w0/w1 form the shared channel MLP (C -> C/r -> C), used by both the
    avg- and max-pooled paths; spatial_kernel is a single-output convolution
    over the stacked [avg, max] channel-pooled maps.
    """

    w0: Tensor              # (C/r, C)
    b0: Tensor              # (C/r,)
    w1: Tensor              # (C, C/r)
    b1: Tensor              # (C,)
    spatial_kernel: Tensor  # (1, 2, k, k)
    spatial_bias: Tensor    # (1,)
    reduction: int

    @property
    def channels(self):
        return self.w1.shape[0]

    def tensors(self):
        return [self.w0, self.b0, self.w1, self.b1, self.spatial_kernel, self.spatial_bias]

    def named(self, prefix="cbam"):
        names = ("w0", "b0", "w1", "b1", "spatial_kernel", "spatial_bias")
        return [(f"{prefix}.{n}", t) for n, t in zip(names, self.tensors())]


def init_cbam(channels, reduction=8, kernel_size=7, rng=None, dtype=np.float32):
    """Fan-in-uniform weights, zero biases."""
    if channels % reduction != 0:
        raise ConfigError(
            f"CBAM reduction {reduction} must divide channel count {channels}"
        )
    if kernel_size % 2 != 1:
        raise ConfigError(f"CBAM spatial kernel must be odd, got {kernel_size}")
    rng = rng or np.random.default_rng(0)
    hidden = channels // reduction

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(
            rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True
        )

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return CBAMParams(
        w0=uniform((hidden, channels), channels),
        b0=zeros((hidden,)),
        w1=uniform((channels, hidden), hidden),
        b1=zeros((channels,)),
        spatial_kernel=uniform((1, 2, kernel_size, kernel_size), 2 * kernel_size**2),
        spatial_bias=zeros((1,)),
        reduction=reduction,
    )


def _as_batched(f):
    if f.ndim == 3:
        return reshape(f, (1,) + f.shape), True
    if f.ndim == 4:
        return f, False
    raise DimensionError(f"attention expects (B,)C,H,W input, got shape {f.shape}")


def channel_attention(f, p):
    """Per-channel sigmoid gate from pooled descriptors through the shared MLP.

    Returns (weights, refined): weights has shape (C,) or (B,C); refined
    matches f.
    """
    fb, squeeze = _as_batched(f)
    c = fb.shape[1]
    if p.channels != c:
        raise DimensionError(
            f"channel_attention: feature map has {c} channels, params expect {p.channels}"
        )

    def mlp(v):  # v: (B, C)
        h = relu(add(matmul(v, transpose2d(p.w0)), p.b0))
        return add(matmul(h, transpose2d(p.w1)), p.b1)

    avg = global_pool(fb, "avg")
    mx = global_pool(fb, "max")
    weights = sigmoid(add(mlp(avg), mlp(mx)))
    refined = mul(fb, reshape(weights, (fb.shape[0], c, 1, 1)))
    if squeeze:
        return reshape(weights, (c,)), reshape(refined, f.shape)
    return weights, refined


def spatial_attention(f, p):
    """Per-pixel sigmoid gate from channel-pooled maps through a kxk conv.

    Returns (weights, refined): weights has shape (H,W) or (B,H,W).
    """
    fb, squeeze = _as_batched(f)
    b, _, h, w = fb.shape
    avg_map = tmean(fb, axis=1)
    max_map = reduce_max(fb, axis=1)
    stacked = stack([avg_map, max_map], axis=1)  # (B, 2, H, W)
    k = p.spatial_kernel.shape[-1]
    logits = conv2d(stacked, p.spatial_kernel, stride=1, pad=k // 2)
    logits = add(logits, reshape(p.spatial_bias, (1, 1, 1)))
    weights = sigmoid(reshape(logits, (b, h, w)))
    refined = mul(fb, reshape(weights, (b, 1, h, w)))
    if squeeze:
        return reshape(weights, (h, w)), reshape(refined, f.shape)
    return weights, refined


def cbam(f, p, channel=True, spatial=True):
    """Channel attention first, then spatial attention on its output."""
    out = f
    if channel:
        _, out = channel_attention(out, p)
    if spatial:
        _, out = spatial_attention(out, p)
    return out
