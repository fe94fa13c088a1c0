"""Quantized and full-precision layers with hand-written backward passes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .quantizer import QuantizerSpec, quantize_array
from .tensor import (
    DTYPE,
    Rng,
    Tensor,
    conv2d,
    conv2d_backward,
    conv2d_rows,
    im2row,
    matmul,
    max_pool2d,
    max_pool2d_backward,
)


class BackwardMode(str, enum.Enum):
    VANILLA = "vanilla"
    CLIPPED = "clipped"
    LOG_TAILED = "log_tailed"
    HARD_TANH = "hard_tanh"


# --------------------------------------------------------------------------
# weight binarization
# --------------------------------------------------------------------------


@dataclass
class BinaryWeightState:
    master: Tensor
    binary: Tensor  # +1/-1, same shape as master
    alpha: Tensor  # one scale per output filter

    def effective(self) -> Tensor:
        """The approximation alpha * B, shaped like the master weights."""
        shape = (-1,) + (1,) * (self.master.ndim - 1)
        return (self.alpha.reshape(shape) * self.binary).astype(DTYPE)


def binarize_weights(master: Tensor) -> BinaryWeightState:
    """B = sign(W) (sign(0) = +1) and alpha = mean |W| per output filter."""
    flat = master.reshape(master.shape[0], -1).astype(np.float64)
    alpha = np.abs(flat).mean(axis=1).astype(DTYPE)
    binary = np.where(master >= 0, 1.0, -1.0).astype(DTYPE)
    return BinaryWeightState(master=master, binary=binary, alpha=alpha)


def packable(spec: QuantizerSpec | None) -> bool:
    return spec is not None and (spec.uniform or spec.m == 1)


def binary_conv2d(
    input: Tensor,
    state: BinaryWeightState,
    stride: int = 1,
    padding: int = 0,
    spec: QuantizerSpec | None = None,
) -> Tensor:
    """Convolution with alpha * B. Routes through packed kernels when ``spec`` allows."""
    if packable(spec):
        from .bitkernels import binary_conv2d_packed

        return binary_conv2d_packed(input, state, spec, stride, padding)
    return conv2d(input, state.effective(), stride, padding)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def hwgq_forward(pre_activations: Tensor, spec: QuantizerSpec) -> Tensor:
    return quantize_array(pre_activations, spec)


def backward_surrogate(x, spec: QuantizerSpec, mode: BackwardMode) -> np.ndarray:
    """The piecewise-linear function whose derivative each backward mode uses."""
    mode = BackwardMode(mode)
    x = np.asarray(x, dtype=np.float64)
    qm = spec.top
    if mode is BackwardMode.VANILLA:
        return np.maximum(x, 0.0)
    if mode is BackwardMode.CLIPPED:
        return np.clip(x, 0.0, qm)
    if mode is BackwardMode.LOG_TAILED:
        tau = qm - 1.0
        tail = qm + np.log(np.maximum(x, qm) - tau)
        return np.where(x > qm, tail, np.maximum(x, 0.0))
    raise ValueError(f"{mode.value} is not a half-wave backward mode")


def hwgq_derivative(x, spec: QuantizerSpec, mode: BackwardMode) -> np.ndarray:
    mode = BackwardMode(mode)
    # compare in float64, as the quantizer does, so all modes agree on which side of q_m x lies
    xd = np.asarray(x, dtype=np.float64)
    qm = spec.top
    pos = xd > 0
    if mode is BackwardMode.VANILLA:
        return pos.astype(DTYPE)
    if mode is BackwardMode.CLIPPED:
        return (pos & (xd <= qm)).astype(DTYPE)
    if mode is BackwardMode.LOG_TAILED:
        tau = qm - 1.0
        tail = 1.0 / (np.maximum(xd, qm) - tau)
        return np.where(xd > qm, tail, pos).astype(DTYPE)
    raise ValueError("hard_tanh is the backward of sign activations, use sign_backward")


def hwgq_backward(
    pre_activations: Tensor, upstream_grad: Tensor, spec: QuantizerSpec, mode: BackwardMode
) -> Tensor:
    if pre_activations.shape != upstream_grad.shape:
        raise ValueError(
            f"shape mismatch: activations {pre_activations.shape}, gradient {upstream_grad.shape}"
        )
    return (upstream_grad * hwgq_derivative(pre_activations, spec, mode)).astype(DTYPE)


def sign_forward(x: Tensor) -> Tensor:
    return np.where(np.asarray(x) >= 0, 1.0, -1.0).astype(DTYPE)


def hard_tanh(x) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)


def sign_backward(x: Tensor, upstream_grad: Tensor) -> Tensor:
    if np.shape(x) != np.shape(upstream_grad):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(upstream_grad)}")
    return (upstream_grad * (np.abs(x) <= 1)).astype(DTYPE)


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9
    cache: tuple | None = field(default=None, repr=False)

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.9) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, DTYPE),
            beta=np.zeros(channels, DTYPE),
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
            epsilon=epsilon,
            momentum=momentum,
        )


def _bn_axes(x: Tensor) -> tuple:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ValueError(f"batch norm expects (N, C) or (N, C, H, W), got {x.shape}")


def _bn_bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm_forward(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    axes = _bn_axes(x)
    if x.shape[1] != state.gamma.shape[0]:
        raise ValueError(f"batch norm has {state.gamma.shape[0]} channels, input {x.shape}")
    xd = x.astype(np.float64)
    if training:
        count = x.size // x.shape[1]
        if count < 2:
            raise ValueError(f"batch norm needs >= 2 values per channel in training, got {count}")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(DTYPE)
        unbiased = var * count / (count - 1)
        state.running_var = (m * state.running_var + (1 - m) * unbiased).astype(DTYPE)
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (xd - _bn_bcast(mean, x.ndim)) * _bn_bcast(inv, x.ndim)
    y = xhat * _bn_bcast(state.gamma.astype(np.float64), x.ndim) + _bn_bcast(
        state.beta.astype(np.float64), x.ndim
    )
    state.cache = (xhat, inv) if training else None
    # float32 in, float32 out; float64 inputs (gradient checks) stay float64
    return y.astype(np.result_type(x.dtype, DTYPE))


def batch_norm_backward(grad: Tensor, state: BatchNormState):
    """Gradients of a training-mode forward w.r.t. (x, gamma, beta)."""
    if state.cache is None:
        raise RuntimeError("batch_norm_backward called without a training-mode forward cache")
    xhat, inv = state.cache
    axes = _bn_axes(grad)
    count = grad.size // grad.shape[1]
    g = grad.astype(np.float64)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * _bn_bcast(state.gamma.astype(np.float64), g.ndim)
    dx = (
        _bn_bcast(inv / count, g.ndim)
        * (
            count * dxhat
            - _bn_bcast(dxhat.sum(axis=axes), g.ndim)
            - xhat * _bn_bcast((dxhat * xhat).sum(axis=axes), g.ndim)
        )
    )
    out = np.result_type(grad.dtype, DTYPE)
    return dx.astype(out), dgamma.astype(out), dbeta.astype(out)


# --------------------------------------------------------------------------
# network layers
# --------------------------------------------------------------------------


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray | None = None
    decay: bool = True


class Layer:
    name = "layer"

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-learned state saved in checkpoints."""
        return {}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        pass


# Training sums in float32 (about twice as fast); evaluation keeps the
# float64-accumulated reference path.
TRAIN_ACC = np.float32


def _he_normal(rng: Rng, shape, fan_in: int) -> np.ndarray:
    w = rng.normal(int(np.prod(shape))) * math.sqrt(2.0 / fan_in)
    return w.reshape(shape).astype(DTYPE)


class Conv2d(Layer):
    def __init__(self, name, cin, cout, k, stride, padding, binary, bias, rng: Rng):
        self.name = name
        self.stride, self.padding = stride, padding
        self.binary = binary
        self.weight = Param(f"{name}.weight", _he_normal(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Param(f"{name}.bias", np.zeros(cout, DTYPE), decay=False) if bias else None
        # quantizer of this layer's input, when known to be packable
        self.input_spec: QuantizerSpec | None = None
        self._x = None
        self._rows = None

    @property
    def state(self) -> BinaryWeightState:
        return binarize_weights(self.weight.value)

    def forward(self, x, training, packed=False):
        self._x = x
        self._rows = None
        if training:
            w = self.state.effective() if self.binary else self.weight.value
            k = w.shape[2]
            self._rows = im2row(x.astype(TRAIN_ACC, copy=False), k, k, self.stride, self.padding)
            y = conv2d_rows(self._rows, w, TRAIN_ACC)
        elif self.binary:
            spec = self.input_spec if packed else None
            y = binary_conv2d(x, self.state, self.stride, self.padding, spec)
        else:
            y = conv2d(x, self.weight.value, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias.value.reshape(1, -1, 1, 1)
        return y

    def backward(self, grad):
        w = self.state.effective() if self.binary else self.weight.value
        gx, gw = conv2d_backward(grad, self._x, w, self.stride, self.padding, TRAIN_ACC, self._rows)
        self._rows = None
        # binary layers: gradient w.r.t. alpha*B goes straight to the master weights
        self.weight.grad = gw
        if self.bias is not None:
            self.bias.grad = grad.sum(axis=(0, 2, 3)).astype(DTYPE)
        return gx

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class Linear(Layer):
    def __init__(self, name, fin, fout, binary, bias, rng: Rng):
        self.name = name
        self.binary = binary
        self.weight = Param(f"{name}.weight", _he_normal(rng, (fout, fin), fin))
        self.bias = Param(f"{name}.bias", np.zeros(fout, DTYPE), decay=False) if bias else None
        self._x = None

    @property
    def state(self) -> BinaryWeightState:
        return binarize_weights(self.weight.value)

    def _w(self):
        return self.state.effective() if self.binary else self.weight.value

    def forward(self, x, training, packed=False):
        self._x = x
        y = matmul(x, self._w().T, TRAIN_ACC if training else np.float64)
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, grad):
        self.weight.grad = matmul(grad.T, self._x, TRAIN_ACC)
        if self.bias is not None:
            self.bias.grad = grad.sum(axis=0).astype(DTYPE)
        return matmul(grad, self._w(), TRAIN_ACC)

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class MaxPool2d(Layer):
    def __init__(self, name, k, stride):
        self.name, self.k, self.stride = name, k, stride
        self._x = None

    def forward(self, x, training, packed=False):
        self._x = x
        return max_pool2d(x, self.k, self.stride)

    def backward(self, grad):
        return max_pool2d_backward(grad, self._x, self.k, self.stride)


class BatchNorm(Layer):
    def __init__(self, name, channels, epsilon=1e-5, momentum=0.9):
        self.name = name
        self.bn = BatchNormState.create(channels, epsilon, momentum)
        self.gamma = Param(f"{name}.gamma", self.bn.gamma, decay=False)
        self.beta = Param(f"{name}.beta", self.bn.beta, decay=False)

    def forward(self, x, training, packed=False):
        self.bn.gamma, self.bn.beta = self.gamma.value, self.beta.value
        return batch_norm_forward(x, self.bn, training)

    def backward(self, grad):
        dx, dg, db = batch_norm_backward(grad, self.bn)
        self.gamma.grad, self.beta.grad = dg, db
        return dx

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.bn.running_mean,
            f"{self.name}.running_var": self.bn.running_var,
        }

    def load_buffers(self, values):
        self.bn.running_mean = values[f"{self.name}.running_mean"].astype(DTYPE)
        self.bn.running_var = values[f"{self.name}.running_var"].astype(DTYPE)


class ReLU(Layer):
    def __init__(self, name):
        self.name = name
        self._x = None

    def forward(self, x, training, packed=False):
        self._x = x
        return np.maximum(x, 0).astype(DTYPE)

    def backward(self, grad):
        return (grad * (self._x > 0)).astype(DTYPE)


class HWGQ(Layer):
    def __init__(self, name, spec: QuantizerSpec, mode: BackwardMode):
        self.name, self.spec, self.mode = name, spec, BackwardMode(mode)
        self._x = None

    def forward(self, x, training, packed=False):
        self._x = x
        return hwgq_forward(x, self.spec)

    def backward(self, grad):
        return hwgq_backward(self._x, grad, self.spec, self.mode)


class Sign(Layer):
    def __init__(self, name):
        self.name = name
        self._x = None

    def forward(self, x, training, packed=False):
        self._x = x
        return sign_forward(x)

    def backward(self, grad):
        return sign_backward(self._x, grad)


class Dropout(Layer):
    def __init__(self, name, p: float):
        self.name, self.p = name, p
        self.rng: Rng | None = None
        self._mask = None

    def forward(self, x, training, packed=False):
        if not training or self.p == 0:
            self._mask = None
            return x
        if self.rng is None:
            raise RuntimeError(f"{self.name}: dropout needs an rng in training mode")
        keep = self.rng.uniform(x.size).reshape(x.shape) >= self.p
        self._mask = (keep / (1.0 - self.p)).astype(DTYPE)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    def __init__(self, name):
        self.name = name
        self._shape = None

    def forward(self, x, training, packed=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(DTYPE)
