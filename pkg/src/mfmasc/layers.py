"""Layer primitives: convolution, pooling, batch norm, linear, MFM, softmax.

Every op is a single tape node with a hand-written backward rule.  Inputs
are NCHW; here H is time frames and W is frequency bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import Tensor, _make


@dataclass
class Conv2dParams:
    weight: Tensor  # (out, in, k_t, k_f)
    bias: Tensor
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if min(self.weight.shape[2:]) < 1 or min(self.stride) < 1:
            raise ContractError("kernel and stride extents must be >= 1")
        if min(self.padding) < 0:
            raise ContractError("padding must be non-negative")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({self.weight.shape[0]},)")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ContractError("batchnorm eps must be positive")
        if not 0 < self.momentum < 1:
            raise ContractError("batchnorm momentum must lie in (0, 1)")


@dataclass
class LinearParams:
    weight: Tensor  # (out_dim, in_dim)
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"linear weight {self.weight.shape} / bias {self.bias.shape} mismatch")


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32,
                    slope: float = 0.0) -> np.ndarray:
    """Uniform fan-in init, bound ``sqrt(6 / ((1 + slope^2) fan_in))``.

    ``slope = 0`` is the rectifier gain; ``slope = sqrt(5)`` gives the
    gentler bound ``1 / sqrt(fan_in)``.
    """
    bound = math.sqrt(6.0 / ((1.0 + slope**2) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_conv(rng, c_in, c_out, kernel, stride=(1, 1), padding=(0, 0), dtype=np.float32,
              slope: float = 0.0) -> Conv2dParams:
    fan_in = c_in * kernel[0] * kernel[1]
    w = kaiming_uniform(rng, (c_out, c_in, *kernel), fan_in, dtype, slope)
    b = rng.uniform(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in), size=c_out).astype(dtype)
    return Conv2dParams(Tensor(w, grad_tracked=True), Tensor(b, grad_tracked=True), tuple(stride), tuple(padding))


def init_linear(rng, d_in, d_out, dtype=np.float32, slope: float = 0.0) -> LinearParams:
    w = kaiming_uniform(rng, (d_out, d_in), d_in, dtype, slope)
    b = rng.uniform(-1 / math.sqrt(d_in), 1 / math.sqrt(d_in), size=d_out).astype(dtype)
    return LinearParams(Tensor(w, grad_tracked=True), Tensor(b, grad_tracked=True))


def init_batchnorm(channels, dtype=np.float32) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels, dtype), grad_tracked=True),
        beta=Tensor(np.zeros(channels, dtype), grad_tracked=True),
        running_mean=Tensor(np.zeros(channels, dtype)),
        running_var=Tensor(np.ones(channels, dtype)),
    )


# ---------------------------------------------------------------------------
# shape formulas


def conv_out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def pool_out_extent(n: int, k: int, s: int, ceil_mode: bool, p: int = 0) -> int:
    span = n + 2 * p - k
    out = (-(-span // s) if ceil_mode else span // s) + 1
    # the last window must start inside the input or left padding
    if ceil_mode and (out - 1) * s >= n + p:
        out -= 1
    return out


# ---------------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-D cross-correlation plus bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,T,F), got {x.shape}")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {p.in_channels}")
    k = p.out_channels
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    ho = conv_out_extent(h, kh, sh, ph)
    wo = conv_out_extent(w, kw, sw, pw)
    if ho < 1:
        raise ShapeError(f"conv2d: time extent {h} too small for kernel {kh} (pad {ph})")
    if wo < 1:
        raise ShapeError(f"conv2d: frequency extent {w} too small for kernel {kw} (pad {pw})")

    xd, wd = x.data, p.weight.data
    w2 = wd.reshape(k, c * kh * kw)
    pointwise = kh == kw == 1 and sh == sw == 1 and ph == pw == 0
    if pointwise:
        cols = xd.reshape(n, c, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
        win = _windows(xp, kh, kw, sh, sw, ho, wo)  # (N,C,Ho,Wo,kh,kw)
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w2, cols)
    out += p.bias.data[None, :, None]
    out = out.reshape(n, k, ho, wo)

    def bw(g):
        g2 = g.reshape(n, k, ho * wo)
        gb = g2.sum(axis=(0, 2))
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if not x.grad_tracked:
            return None, gw, gb
        dcols = np.matmul(w2.T, g2)  # (N, C*kh*kw, Ho*Wo)
        if pointwise:
            gx = dcols.reshape(n, c, h, w)
        else:
            dcols = dcols.reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    return _make("conv2d", out, (x, p.weight, p.bias), bw)


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x: Tensor, kernel=(2, 2), stride=(2, 2), ceil_mode: bool = True) -> Tensor:
    """Max pooling; overhanging ceil-mode windows see -inf padding.

    Ties within a window send the gradient to the first element in
    row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N,C,T,F), got {x.shape}")
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    if h < 1 or w < 1:
        raise ShapeError(f"maxpool2d: empty spatial extent {x.shape}")
    ho = pool_out_extent(h, kh, sh, ceil_mode)
    wo = pool_out_extent(w, kw, sw, ceil_mode)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than kernel {kernel}")
    need_h = (ho - 1) * sh + kh
    need_w = (wo - 1) * sw + kw
    xd = x.data
    if need_h > h or need_w > w:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, max(0, need_h - h)), (0, max(0, need_w - w))), constant_values=-np.inf)

    if (kh, kw) == (sh, sw):
        # non-overlapping windows: compare the kh*kw strided sub-grids directly
        grids = [xd[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] for i in range(kh) for j in range(kw)]
        out = grids[0].copy()
        for grid in grids[1:]:
            np.maximum(out, grid, out=out)
    else:
        flat = _windows(xd, kh, kw, sh, sw, ho, wo).reshape(n, c, ho, wo, kh * kw)
        out = flat.max(axis=-1)

    def bw(g):
        gxp = np.zeros(xd.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(kh):
            for j in range(kw):
                view = xd[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
                hit = view == out
                hit &= ~taken
                taken |= hit
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += g * hit
        return (gxp[:, :, :h, :w],)

    return _make("maxpool2d", np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# batch norm


def batchnorm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel batch normalization over (N, T, F).

    In training mode the running statistics on ``p`` are replaced with
    momentum-blended values (unbiased variance, as is conventional).
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects (N,C,T,F), got {x.shape}")
    n, c, h, w = x.shape
    if c != p.gamma.shape[0]:
        raise ShapeError(f"batchnorm: input has {c} channels, params have {p.gamma.shape[0]}")
    xd = x.data
    gamma = p.gamma.data[None, :, None, None]
    beta = p.beta.data[None, :, None, None]
    m = n * h * w
    if training:
        if m < 2:
            raise ContractError(f"batchnorm: training needs N*T*F >= 2, got {m}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = p.momentum
        p.running_mean = Tensor(((1 - mom) * p.running_mean.data + mom * mu).astype(xd.dtype))
        p.running_var = Tensor(((1 - mom) * p.running_var.data + mom * var * m / (m - 1)).astype(xd.dtype))
    else:
        mu = p.running_mean.data
        var = p.running_var.data
    inv = (1.0 / np.sqrt(var + p.eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma + beta

    def bw(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        if training:
            gx = (gamma * inv[None, :, None, None] / m) * (
                m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None]
            )
        else:
            gx = g * (gamma * inv[None, :, None, None])
        return gx, gg, gb

    return _make("batchnorm", out, (x, p.gamma, p.beta), bw)


# ---------------------------------------------------------------------------
# dense layers and activations


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {p.weight.shape}")
    xd, wd = x.data, p.weight.data
    out = xd @ wd.T + p.bias.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make("linear", out, (x, p.weight, p.bias), bw)


def mfm(x: Tensor) -> Tensor:
    """Max Feature Map: elementwise max of the two channel halves.

    Works on (N, 2M, T, F) maps and (N, 2M) vectors.  Ties go to the first
    half.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"mfm expects rank 2 or 4, got {x.shape}")
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"mfm: channel extent {c} is odd")
    half = c // 2
    a, b = x.data[:, :half], x.data[:, half:]

    def bw(g):
        gx = np.empty(x.shape, dtype=g.dtype)
        first = a >= b
        np.multiply(g, first, out=gx[:, :half])
        np.logical_not(first, out=first)
        np.multiply(g, first, out=gx[:, half:])
        return (gx,)

    return _make("mfm", np.maximum(a, b), (x,), bw)


def flatten(x: Tensor) -> Tensor:
    n = x.shape[0]
    src = x.shape
    return _make("flatten", x.data.reshape(n, -1), (x,), lambda g: (g.reshape(src),))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax expects (N,C), got {x.shape}")
    s = _softmax(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make("softmax", s, (x,), bw)


def cross_entropy_soft(logits: Tensor, targets: Tensor) -> Tensor:
    """Batch mean of ``-sum_c t_c log softmax(z)_c`` for probability targets."""
    if logits.ndim != 2 or logits.shape != targets.shape:
        raise ShapeError(f"cross_entropy_soft: logits {logits.shape} vs targets {targets.shape}")
    t = targets.data.astype(logits.dtype, copy=False)
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1) > 1e-5):
        raise ContractError("cross_entropy_soft: target rows must be non-negative and sum to 1")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = np.asarray(-(t * logp).sum() / n, dtype=z.dtype)

    def bw(g):
        return (g * (np.exp(logp) - t) / n, None)

    return _make("cross_entropy_soft", loss, (logits, targets), bw)
