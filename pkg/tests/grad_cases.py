"""Gradient-check instances for every differentiable layer op.

``cases(rng, dtype)`` returns ``{op: (fn, arrays, options)}`` for
:func:`helpers.grad_errors`.  The error metric is elementwise relative, so
an entry whose true gradient is near zero can fail on rounding alone.  The
instances are therefore built so that every gradient entry is a sum of
same-signed terms, or is bounded away from zero by construction.  Max
selections are kept clear of ties.  The same construction serves binary64
and binary32.
"""

import numpy as np

from helpers import well_conditioned
from mfmasc import attention as A
from mfmasc import layers as L
from mfmasc.tensor import Tensor

SE_SHAPES = [(2, 4, 1, 2), (2, 4), (2,), (4, 2), (4,)]
CBAM_SHAPES = SE_SHAPES + [(1, 2, 3, 3), (1,)]


def conv_fn(x, w, b):
    return L.conv2d(x, L.Conv2dParams(w, b, (1, 1), (1, 0)))


def linear_fn(x, w, b):
    return L.linear(x, L.LinearParams(w, b))


def bn_fn(training):
    def f(x, g, b):
        p = L.init_batchnorm(3, x.dtype)
        p.gamma, p.beta = g, b
        p.running_mean = Tensor(np.full(3, 0.2, x.dtype))
        p.running_var = Tensor(np.full(3, 1.5, x.dtype))
        return L.batchnorm(x, p, training)

    return f


def se_fn(x, w1, b1, w2, b2):
    return A.se_block(x, A.SEParams(L.LinearParams(w1, b1), L.LinearParams(w2, b2), 2))


def cbam_fn(x, w1, b1, w2, b2, cw, cb):
    p = A.CBAMParams(L.LinearParams(w1, b1), L.LinearParams(w2, b2), L.Conv2dParams(cw, cb, padding=(1, 1)), 2)
    return A.cbam(x, p)


def softmax_ce_fn(t):
    return lambda z: L.cross_entropy_soft(z, Tensor(t))


def bn_train_instance(rng, dtype):
    """Batch and output weights for a training-mode batchnorm check.

    The input gradient is the output weights with their per-channel mean
    and x-hat component removed.  Each channel holds +/- pairs, and the
    weights are a pair-constant sign pattern ``d`` (already free of both
    components) plus a mean and an x-hat part.  So every input-gradient
    entry has magnitude gamma/sigma, and gamma and beta still get non-zero
    gradients.  A small spread makes gamma/sigma large against the
    rounding of the O(1) outputs.  The channel offset stays small because
    rounding of the batch mean is scaled by the sum of the weights.
    """
    n, c, t, f = 2, 3, 3, 4
    m = n * t * f
    x = np.empty((c, m))
    w = np.empty((c, m))
    for ch in range(c):
        a = rng.uniform(0.03, 0.15, m // 2)
        vals = np.concatenate([a, -a])
        signs = rng.permutation(np.repeat([1.0, -1.0], m // 4))
        d = np.concatenate([signs, signs])
        order = rng.permutation(m)
        vals, d = vals[order], d[order]
        xhat = vals / np.sqrt(np.mean(vals**2))
        x[ch] = vals + rng.uniform(-0.1, 0.1)
        w[ch] = d + rng.choice([-1, 1]) * rng.uniform(0.5, 1.0) + rng.uniform(0.5, 1.0) * xhat
    to_nchw = lambda v: v.reshape(c, n, t, f).transpose(1, 0, 2, 3).astype(dtype)  # noqa: E731
    arrays = [to_nchw(x), rng.uniform(0.5, 1.5, c).astype(dtype), rng.uniform(-1, 1, c).astype(dtype)]
    return arrays, {"weights": to_nchw(w)}


def half_logits(rng, n, c):
    """Logits where class 0 has probability near 1/2 in every row."""
    z = rng.uniform(-0.3, 0.3, (n, c))
    z[:, 0] = np.log(np.exp(z[:, 1:]).sum(axis=1)) + rng.uniform(-0.3, 0.3, n)
    return z


def softmax_instance(rng, dtype, n=3, c=3):
    """Logits and output weights for a softmax check.

    With output weights ``(3, .5, .5)`` the gradient entry j is
    ``p_j (w_j - sum_k w_k p_k)``, which stays clear of zero when p_0 is
    near 1/2.  Few classes keep every p_j large against output rounding.
    """
    z = half_logits(rng, n, c)
    weights = np.array([3.0] + [0.5] * (c - 1))
    return [z.astype(dtype)], {"weights": weights}


def cases(rng, dtype):
    pos = lambda shape, low=0.2, high=1.0: well_conditioned(rng, shape, dtype, low, high)  # noqa: E731
    perm = lambda k, shape, scale: (rng.permutation(k).reshape(shape) / scale).astype(dtype)  # noqa: E731

    # CBAM: distinct values keep the spatial max tie-free and channel 0
    # always wins the channel-wise max
    cb_x = ((rng.permutation(16).reshape(2, 4, 1, 2) + 8) / 24).astype(dtype)
    cb_x[:, 0] += 1.0
    se = [pos(s) for s in SE_SHAPES]
    targets = np.zeros((2, 3), dtype)
    targets[:, 0] = 1
    return {
        "conv2d": (conv_fn, [pos((2, 2, 6, 5)), pos((3, 2, 3, 3)), pos((3,))], {}),
        "maxpool2d": (L.maxpool2d, [perm(70, (1, 2, 5, 7), 7.0)], {}),
        "batchnorm(train)": (bn_fn(True), *bn_train_instance(rng, dtype)),
        # x above the running mean: the gamma gradient is a positive sum
        "batchnorm(eval)": (bn_fn(False), [pos((2, 3, 3, 4), 0.7, 1.5), pos((3,)), pos((3,))], {}),
        "linear": (linear_fn, [pos((3, 4)), pos((2, 4)), pos((2,))], {}),
        "mfm": (L.mfm, [perm(48, (2, 4, 2, 3), 5.0)], {}),
        # small first-layer weights keep the sigmoids in their linear range;
        # larger second-layer weights carry a usable gradient back to them.
        # For CBAM the two MLP branches add up, so a negative second bias
        # re-centres the channel gate.
        "se_block": (se_fn, [se[0], se[1] * 0.2, se[2] * 0.2, se[3], se[4] * 0.5], {}),
        "cbam": (cbam_fn, [cb_x] + [pos(s) * k for s, k in zip(CBAM_SHAPES[1:], (0.3, 0.3, 0.5, -0.5, 0.3, 0.3))], {}),
        "softmax": (L.softmax, *softmax_instance(rng, dtype)),
        # one-hot targets on a class with p near 1/2: every entry of
        # (softmax - t) / N stays clear of zero and the loss stays small
        "cross_entropy_soft": (softmax_ce_fn(targets), [half_logits(rng, 2, 3).astype(dtype)], {}),
    }
