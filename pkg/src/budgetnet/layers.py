"""Stateful layers wrapping the functional kernels.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Tensor.grad`` during ``backward``.
"""

import numpy as np

from budgetnet import functional as F
from budgetnet.errors import ConfigError
from budgetnet.tensor import Tensor


class Layer:
    training = True

    def parameters(self):
        return []

    def buffers(self):
        """Non-trainable persistent arrays as ``(name, array)`` pairs."""
        return []

    def set_training(self, mode):
        self.training = mode


class Conv2d(Layer):
    def __init__(self, name, in_channels, out_channels, kernel, stride=1, padding=None, dtype=np.float32):
        if padding is None:
            padding = (kernel - 1) // 2
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype), f"{name}.weight")

    def parameters(self):
        return [self.weight]

    def forward(self, x):
        self._x = x
        return F.conv2d_forward(x, self.weight.data, self.stride, self.padding)

    def backward(self, grad):
        gx, gw = F.conv2d_backward(grad, self._x, self.weight.data, self.stride, self.padding)
        self.weight.accumulate(gw)
        self._x = None
        return gx


class BatchNorm2d(Layer):
    def __init__(self, name, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.name = name
        self.state = F.BatchNormState(channels, momentum, eps, dtype)
        self.gamma = Tensor(self.state.gamma, f"{name}.gamma")
        self.beta = Tensor(self.state.beta, f"{name}.beta")
        # share storage so optimiser updates are seen by the kernel
        self.state.gamma = self.gamma.data
        self.state.beta = self.beta.data

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.state.running_mean),
                (f"{self.name}.running_var", self.state.running_var)]

    def set_training(self, mode):
        self.training = mode
        self.state.training = mode

    def forward(self, x):
        out, self._cache = F.batchnorm_forward(x, self.state)
        return out

    def backward(self, grad):
        gx, gg, gb = F.batchnorm_backward(grad, self._cache)
        self.gamma.accumulate(gg)
        self.beta.accumulate(gb)
        self._cache = None
        return gx


class Linear(Layer):
    def __init__(self, name, in_features, out_features, dtype=np.float32):
        self.weight = Tensor(np.zeros((in_features, out_features), dtype=dtype), f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return F.linear_forward(x, self.weight.data, self.bias.data)

    def backward(self, grad):
        gx, gw, gb = F.linear_backward(grad, self._x, self.weight.data)
        self.weight.accumulate(gw)
        self.bias.accumulate(gb)
        self._x = None
        return gx


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return F.relu(x)

    def backward(self, grad):
        return F.relu_backward(grad, self._x)


class Dropout(Layer):
    def __init__(self, p, rng=None):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x):
        out, self._mask = F.dropout_forward(x, self.p, self.rng, self.training)
        return out

    def backward(self, grad):
        return F.dropout_backward(grad, self._mask)


class SqueezeExcitation(Layer):
    """Channel gating: global mean -> fc -> relu -> fc -> sigmoid -> rescale.

    ``force_excitation`` is a test hook; when set, the learned gate is
    replaced by that constant.
    """

    def __init__(self, name, channels, ratio=16, dtype=np.float32):
        if ratio < 1 or channels % ratio:
            raise ConfigError(f"se_ratio {ratio} does not divide {channels} channels")
        hidden = channels // ratio
        self.fc1 = Linear(f"{name}.fc1", channels, hidden, dtype)
        self.fc2 = Linear(f"{name}.fc2", hidden, channels, dtype)
        self.force_excitation = None

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()

    def forward(self, x):
        n, c, h, w = x.shape
        if self.force_excitation is not None:
            self._x, self._e = x, None
            return x * x.dtype.type(self.force_excitation)
        squeeze = x.mean(axis=(2, 3))
        self._z1 = self.fc1.forward(squeeze)
        e = F.sigmoid(self.fc2.forward(F.relu(self._z1)))
        self._x, self._e = x, e
        return x * e.reshape(n, c, 1, 1)

    def backward(self, grad):
        x, e = self._x, self._e
        if e is None:
            return grad * grad.dtype.type(self.force_excitation)
        n, c, h, w = x.shape
        gx = grad * e.reshape(n, c, 1, 1)
        ge = (grad * x).sum(axis=(2, 3))
        gz2 = F.sigmoid_backward(ge, e)
        ga1 = self.fc2.backward(gz2)
        gsq = self.fc1.backward(F.relu_backward(ga1, self._z1))
        gx += (gsq / (h * w)).reshape(n, c, 1, 1)
        self._x = self._e = self._z1 = None
        return gx


class BasicBlock(Layer):
    """conv-bn-relu-conv-bn [-se] [-dropout] + shortcut, then relu."""

    def __init__(self, name, in_channels, out_channels, kernel, skip_kernel, stride=1,
                 se_ratio=None, dropout_p=0.0, rng=None, dtype=np.float32):
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, out_channels, kernel, stride, dtype=dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_channels, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(f"{name}.conv2", out_channels, out_channels, kernel, 1, dtype=dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_channels, dtype=dtype)
        self.se = SqueezeExcitation(f"{name}.se", out_channels, se_ratio, dtype) if se_ratio else None
        self.dropout = Dropout(dropout_p, rng) if dropout_p > 0 else None
        if stride != 1 or in_channels != out_channels:
            self.shortcut_conv = Conv2d(f"{name}.shortcut.conv", in_channels, out_channels,
                                        skip_kernel, stride, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(f"{name}.shortcut.bn", out_channels, dtype=dtype)
        else:
            self.shortcut_conv = self.shortcut_bn = None
        self.relu_out = ReLU()

    @property
    def has_projection(self):
        return self.shortcut_conv is not None

    def _children(self):
        main = [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2]
        if self.se is not None:
            main.append(self.se)
        if self.dropout is not None:
            main.append(self.dropout)
        return main

    def parameters(self):
        params = []
        for layer in self._children():
            params += layer.parameters()
        if self.has_projection:
            params += self.shortcut_conv.parameters() + self.shortcut_bn.parameters()
        return params

    def buffers(self):
        bufs = self.bn1.buffers() + self.bn2.buffers()
        if self.has_projection:
            bufs += self.shortcut_bn.buffers()
        return bufs

    def set_training(self, mode):
        self.training = mode
        for layer in self._children():
            layer.set_training(mode)
        if self.has_projection:
            self.shortcut_bn.set_training(mode)

    def forward(self, x):
        out = x
        for layer in self._children():
            out = layer.forward(out)
        short = self.shortcut_bn.forward(self.shortcut_conv.forward(x)) if self.has_projection else x
        return self.relu_out.forward(out + short)

    def backward(self, grad):
        g = self.relu_out.backward(grad)
        gmain = g
        for layer in reversed(self._children()):
            gmain = layer.backward(gmain)
        if self.has_projection:
            gshort = self.shortcut_conv.backward(self.shortcut_bn.backward(g))
        else:
            gshort = g
        return gmain + gshort
