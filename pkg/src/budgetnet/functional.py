"""Differentiable primitives with hand-written backward passes.

All kernels are dtype-preserving: training runs them in float32, gradient
checks in float64. Images use the NCHW layout.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from budgetnet.errors import ConfigError, DataError, DegenerateError


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x, weight, stride, padding):
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    f = weight.shape[2]
    if f < 1 or weight.shape[3] != f:
        raise ConfigError(f"conv2d: weight must be square, got {weight.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d: stride must be >= 1 and padding >= 0")
    if x.shape[2] + 2 * padding < f or x.shape[3] + 2 * padding < f:
        raise ConfigError(f"conv2d: kernel {f} larger than padded input {x.shape[2:]}")


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, f, stride, ho, wo):
    # (N, C, Ho, Wo, F, F) view, no copy
    win = sliding_window_view(xp, (f, f), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d_forward(x, weight, stride=1, padding=0):
    """Cross-correlation without bias. ``weight`` is (Cout, Cin, F, F)."""
    _check_conv(x, weight, stride, padding)
    f = weight.shape[2]
    ho = conv_output_size(x.shape[2], f, stride, padding)
    wo = conv_output_size(x.shape[3], f, stride, padding)
    return _correlate(_pad(x, padding), weight, stride, ho, wo)


def _im2col(xp, f, stride, ho, wo):
    # (N, C*F*F, Ho*Wo); rows follow weight.reshape(Cout, -1), width stays innermost
    win = _windows(xp, f, stride, ho, wo).transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(win).reshape(xp.shape[0], -1, ho * wo)


def _correlate(xp, weight, stride, ho, wo):
    cols = _im2col(xp, weight.shape[2], stride, ho, wo)
    out = np.matmul(weight.reshape(weight.shape[0], -1), cols)
    return out.reshape(xp.shape[0], weight.shape[0], ho, wo)


def conv2d_backward(grad_out, x, weight, stride=1, padding=0):
    _check_conv(x, weight, stride, padding)
    n, c, h, w = x.shape
    f = weight.shape[2]
    ho = conv_output_size(h, f, stride, padding)
    wo = conv_output_size(w, f, stride, padding)
    if grad_out.shape != (n, weight.shape[0], ho, wo):
        raise ConfigError(f"conv2d_backward: grad_out shape {grad_out.shape} != {(n, weight.shape[0], ho, wo)}")
    cols = _im2col(_pad(x, padding), f, stride, ho, wo)
    go = grad_out.reshape(n, weight.shape[0], ho * wo)
    grad_weight = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)

    # grad_input is a stride-1 correlation of the zero-dilated grad_out with the
    # flipped kernel, channels swapped; only the rows that land inside x are built
    g = np.zeros((n, weight.shape[0], h + 2 * padding + f - 1, w + 2 * padding + f - 1),
                 dtype=np.result_type(grad_out, weight))
    g[:, :, f - 1 : f - 1 + (ho - 1) * stride + 1 : stride, f - 1 : f - 1 + (wo - 1) * stride + 1 : stride] = grad_out
    g = g[:, :, padding : padding + h + f - 1, padding : padding + w + f - 1]
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _correlate(g, flipped, 1, h, w), grad_weight


def conv2d_forward_direct(x, weight, stride=1, padding=0):
    """Nested-loop reference convolution; slow, used as a test oracle."""
    _check_conv(x, weight, stride, padding)
    n, _, h, w = x.shape
    cout, _, f, _ = weight.shape
    ho = conv_output_size(h, f, stride, padding)
    wo = conv_output_size(w, f, stride, padding)
    xp = _pad(x, padding)
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, weight))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + f, j * stride : j * stride + f]
                    out[b, o, i, j] = np.sum(patch * weight[o])
    return out


class BatchNormState:
    """Per-channel affine parameters and running statistics of a batch norm."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        if not 0.0 < momentum <= 1.0:
            raise ConfigError("batch norm momentum must be in (0, 1]")
        if eps <= 0:
            raise ConfigError("batch norm eps must be positive")
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    @property
    def channels(self):
        return self.gamma.shape[0]


def batchnorm_forward(x, state):
    """Returns ``(out, cache)``. In training mode also updates the running stats.

    Running variance uses the unbiased batch variance.
    """
    n, c, h, w = x.shape
    if c != state.channels:
        raise ConfigError(f"batchnorm: input has {c} channels, state has {state.channels}")
    g = state.gamma.reshape(1, c, 1, 1)
    b = state.beta.reshape(1, c, 1, 1)
    if not state.training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        return (g * xhat + b).astype(x.dtype, copy=False), None
    m = n * h * w
    if m < 2:
        raise DegenerateError("batchnorm: training needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    xc = x - mean.reshape(1, c, 1, 1)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = xc * inv_std.reshape(1, c, 1, 1)
    mom = state.momentum
    state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
    state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    return (g * xhat + b).astype(x.dtype, copy=False), (xhat, inv_std, state.gamma)


def batchnorm_backward(grad_out, cache):
    """Gradient of the training-mode normalisation, batch statistics included."""
    xhat, inv_std, gamma = cache
    if grad_out.shape != xhat.shape:
        raise ConfigError("batchnorm_backward: grad_out shape mismatch")
    n, c, h, w = xhat.shape
    m = n * h * w
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std / m).reshape(1, c, 1, 1)
    grad_input = scale * (
        m * grad_out - grad_beta.reshape(1, c, 1, 1) - xhat * grad_gamma.reshape(1, c, 1, 1)
    )
    return grad_input.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def linear_forward(x, weight, bias):
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight + bias


def linear_backward(grad_out, x, weight):
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def avgpool_forward(x, kernel):
    n, c, h, w = x.shape
    if kernel < 1 or h % kernel or w % kernel:
        raise ConfigError(f"avgpool: kernel {kernel} does not divide input {h}x{w}")
    k = kernel
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def avgpool_backward(grad_out, kernel):
    k = kernel
    g = grad_out / (k * k)
    return np.repeat(np.repeat(g, k, axis=2), k, axis=3)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # derivative at exactly 0 is taken as 0
    return grad_out * (x > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, s):
    """``s`` is the forward output."""
    return grad_out * s * (1 - s)


def dropout_mask(shape, p, rng, dtype=np.float32):
    """Inverted-dropout mask: 0 with probability ``p``, else ``1/(1-p)``."""
    keep = rng.random(shape) >= p
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - p), dtype=dtype)


def dropout_forward(x, p, rng=None, training=True):
    """Returns ``(out, mask)``; ``mask`` is None when the op is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    mask = dropout_mask(x.shape, p, rng, x.dtype)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    if mask is None:
        return grad_out
    return grad_out * mask


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(n)
    loss = float(np.mean(lse - z[idx, labels]))
    grad = np.exp(z - lse[:, None])
    grad[idx, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
