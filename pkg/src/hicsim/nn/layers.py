"""Layers of the desk-scale network engine.

Tensors are float64, NHWC for images and ``(batch, features)`` otherwise.
Dense and conv2d layers delegate their matrix products to a weight backend
(analog crossbar, fixed-point shadow, or float baseline); everything else runs
digitally at full precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..crossbar import col2im, conv_output_size, im2col
from ..hybridweight import NOISY

TRAIN = "train"
EVAL = "eval"
CALIBRATE = "calibrate"


@dataclass
class Context:
    """Per-pass settings shared by all layers."""

    t: float = 0.0
    mode: str = NOISY
    bn_mode: str = TRAIN
    labels: np.ndarray | None = None
    need_input_grad: dict = field(default_factory=dict)


class Layer:
    kind = ""
    uses_crossbar = False

    def output_shape(self, *input_shapes):
        return input_shapes[0]

    def forward(self, inputs: list, ctx: Context) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, ctx: Context) -> list:
        raise NotImplementedError

    def digital_params(self) -> dict:
        """Full-precision trainable parameters as ``name -> (value, grad)``."""
        return {}


class CrossbarLayer(Layer):
    uses_crossbar = True
    backend = None

    @property
    def weight_shape(self):
        """``(rows, cols)`` of the lowered matrix, bias row included."""
        return (self.fan_in + int(self.bias), self.out_features)


class Dense(CrossbarLayer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.in_features, self.out_features, self.bias = int(in_features), int(out_features), bias
        self.fan_in = self.in_features

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise ValueError(f"dense expects ({self.in_features},) input, got {shape}")
        return (self.out_features,)

    def forward(self, inputs, ctx):
        (x,) = inputs
        self._x = x
        return self.backend.forward(x, ctx)

    def backward(self, grad, ctx):
        x = self._x
        if self.bias:
            x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        self.backend.grad = x.T @ grad
        if not ctx.need_input_grad.get(id(self), True):
            return [None]
        return [self.backend.backward(grad, ctx)]


class Conv2d(CrossbarLayer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0, bias=False):
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel, self.stride, self.padding, self.bias = int(kernel), int(stride), int(padding), bias
        self.fan_in = self.kernel * self.kernel * self.in_channels
        self.out_features = self.out_channels

    def output_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.in_channels:
            raise ValueError(f"conv2d expects (H, W, {self.in_channels}) input, got {shape}")
        h, w, _ = shape
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ValueError("conv2d output would be empty")
        return (ho, wo, self.out_channels)

    def forward(self, inputs, ctx):
        (x,) = inputs
        b, h, w, _ = x.shape
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)
        cols = im2col(x, self.kernel, self.kernel, self.stride, self.padding)
        self._x_shape, self._cols = x.shape, cols
        y = self.backend.forward(cols, ctx)
        return y.reshape(b, ho, wo, self.out_channels)

    def backward(self, grad, ctx):
        g = grad.reshape(-1, self.out_channels)
        cols = self._cols
        if self.bias:
            cols = np.concatenate([cols, np.ones((cols.shape[0], 1))], axis=1)
        self.backend.grad = cols.T @ g
        if not ctx.need_input_grad.get(id(self), True):
            return [None]
        dcols = self.backend.backward(g, ctx)
        return [col2im(dcols, self._x_shape, self.kernel, self.kernel, self.stride, self.padding)]


class BatchNorm(Layer):
    """Per-channel batch normalization over the last axis."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = int(channels)
        self.momentum, self.eps = momentum, eps
        self.gamma = np.ones(self.channels)
        self.beta = np.zeros(self.channels)
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)
        self.dgamma = np.zeros(self.channels)
        self.dbeta = np.zeros(self.channels)
        self._calib = None

    def output_shape(self, shape):
        if shape[-1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {shape}")
        return shape

    def begin_calibration(self):
        self._calib = [0, np.zeros(self.channels), np.zeros(self.channels)]

    def end_calibration(self):
        n, s, ss = self._calib
        self._calib = None
        if n == 0:
            raise ValueError("no calibration samples seen")
        mean = s / n
        self.running_mean = mean
        self.running_var = np.maximum(ss / n - mean * mean, 0.0)

    def forward(self, inputs, ctx):
        (x,) = inputs
        axes = tuple(range(x.ndim - 1))
        if ctx.bn_mode == EVAL:
            self._cache = None
            return self.gamma * (x - self.running_mean) / np.sqrt(self.running_var + self.eps) + self.beta
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if ctx.bn_mode == CALIBRATE:
            n = x.size // self.channels
            self._calib[0] += n
            self._calib[1] += x.sum(axis=axes)
            self._calib[2] += (x * x).sum(axis=axes)
        else:
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv)
        return self.gamma * xhat + self.beta

    def backward(self, grad, ctx):
        xhat, inv = self._cache
        axes = tuple(range(grad.ndim - 1))
        n = grad.size // self.channels
        self.dbeta = grad.sum(axis=axes)
        self.dgamma = (grad * xhat).sum(axis=axes)
        dxhat = grad * self.gamma
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return [dx]

    def digital_params(self):
        return {"gamma": (self.gamma, self.dgamma), "beta": (self.beta, self.dbeta)}


class ReLU(Layer):
    kind = "relu"

    def forward(self, inputs, ctx):
        (x,) = inputs
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad, ctx):
        return [grad * self._mask]


class ResidualAdd(Layer):
    kind = "residual-add"

    def output_shape(self, *shapes):
        if any(s != shapes[0] for s in shapes):
            raise ValueError(f"residual-add inputs differ in shape: {shapes}")
        return shapes[0]

    def forward(self, inputs, ctx):
        self._n = len(inputs)
        out = inputs[0].copy()
        for x in inputs[1:]:
            out += x
        return out

    def backward(self, grad, ctx):
        return [grad] * self._n


class AvgPool(Layer):
    """Global average pool over the spatial axes."""

    kind = "avgpool"

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ValueError(f"avgpool expects (H, W, C) input, got {shape}")
        return (shape[2],)

    def forward(self, inputs, ctx):
        (x,) = inputs
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad, ctx):
        b, h, w, c = self._shape
        return [np.broadcast_to(grad[:, None, None, :] / (h * w), self._shape).copy()]


class SoftmaxXent(Layer):
    """Softmax cross-entropy, mean over the batch.  Output is the scalar loss."""

    kind = "softmax-xent"

    def output_shape(self, shape):
        return ()

    def forward(self, inputs, ctx):
        (z,) = inputs
        if ctx.labels is None:
            raise ValueError("softmax-xent needs labels")
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self._p = np.exp(logp)
        self._y = np.asarray(ctx.labels)
        return -logp[np.arange(len(self._y)), self._y].mean()

    def backward(self, grad, ctx):
        g = self._p.copy()
        g[np.arange(len(self._y)), self._y] -= 1.0
        return [g * (grad / len(self._y))]
