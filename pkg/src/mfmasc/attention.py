"""Squeeze-and-Excitation and CBAM attention blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Conv2dParams, LinearParams, conv2d, init_conv, init_linear, linear
from .tensor import Tensor


@dataclass
class SEParams:
    fc1: LinearParams  # C -> C/r
    fc2: LinearParams  # C/r -> C
    reduction: int = 4

    @property
    def channels(self) -> int:
        return self.fc1.weight.shape[1]


@dataclass
class CBAMParams:
    fc1: LinearParams  # shared channel MLP, C -> C/r
    fc2: LinearParams  # C/r -> C
    spatial: Conv2dParams  # 2 -> 1, k x k, padding (k-1)/2
    reduction: int = 4

    @property
    def channels(self) -> int:
        return self.fc1.weight.shape[1]


# Gate layers use the 1/sqrt(fan_in) bound: with the rectifier gain the
# max-pooled descriptors push the sigmoids into saturation at init.
GATE_INIT_SLOPE = 5**0.5


def _check_reduction(channels: int, reduction: int) -> None:
    if reduction < 1 or channels % reduction:
        raise ConfigError(f"channel count {channels} is not divisible by reduction {reduction}")


def init_se(rng: np.random.Generator, channels: int, reduction: int = 4, dtype=np.float32) -> SEParams:
    _check_reduction(channels, reduction)
    hidden = channels // reduction
    return SEParams(
        init_linear(rng, channels, hidden, dtype, GATE_INIT_SLOPE),
        init_linear(rng, hidden, channels, dtype, GATE_INIT_SLOPE),
        reduction,
    )


def init_cbam(
    rng: np.random.Generator, channels: int, reduction: int = 4, kernel: int = 7, dtype=np.float32
) -> CBAMParams:
    _check_reduction(channels, reduction)
    if kernel % 2 == 0:
        raise ConfigError(f"CBAM spatial kernel must be odd, got {kernel}")
    hidden = channels // reduction
    pad = (kernel - 1) // 2
    return CBAMParams(
        init_linear(rng, channels, hidden, dtype, GATE_INIT_SLOPE),
        init_linear(rng, hidden, channels, dtype, GATE_INIT_SLOPE),
        init_conv(rng, 2, 1, (kernel, kernel), padding=(pad, pad), dtype=dtype, slope=GATE_INIT_SLOPE),
        reduction,
    )


def _check_channels(x: Tensor, channels: int, who: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{who}: expected (N,{channels},T,F), got {x.shape}")


def se_gate(x: Tensor, p: SEParams) -> Tensor:
    """Channel gates of shape (N, C, 1, 1)."""
    _check_channels(x, p.channels, "se_block")
    n, c = x.shape[:2]
    squeezed = T.mean(x, axes=(2, 3))
    s = T.sigmoid(linear(T.relu(linear(squeezed, p.fc1)), p.fc2))
    return T.reshape(s, (n, c, 1, 1))


def se_block(x: Tensor, p: SEParams) -> Tensor:
    return x * se_gate(x, p)


def _mlp(v: Tensor, p: CBAMParams) -> Tensor:
    return linear(T.relu(linear(v, p.fc1)), p.fc2)


def channel_gate(x: Tensor, p: CBAMParams) -> Tensor:
    _check_channels(x, p.channels, "cbam_channel")
    n, c = x.shape[:2]
    avg = T.mean(x, axes=(2, 3))
    mx = T.max_(x, axes=(2, 3))
    return T.reshape(T.sigmoid(_mlp(avg, p) + _mlp(mx, p)), (n, c, 1, 1))


def spatial_gate(x: Tensor, p: CBAMParams) -> Tensor:
    """Spatial gates of shape (N, 1, T, F) from channel-pooled saliency."""
    if x.ndim != 4:
        raise ShapeError(f"cbam_spatial expects (N,C,T,F), got {x.shape}")
    pooled = T.concat([T.mean(x, axes=1, keepdims=True), T.max_(x, axes=1, keepdims=True)], axis=1)
    return T.sigmoid(conv2d(pooled, p.spatial))


def cbam_channel(x: Tensor, p: CBAMParams) -> Tensor:
    return x * channel_gate(x, p)


def cbam_spatial(x: Tensor, p: CBAMParams) -> Tensor:
    return x * spatial_gate(x, p)


def cbam(x: Tensor, p: CBAMParams) -> Tensor:
    return cbam_spatial(cbam_channel(x, p), p)
