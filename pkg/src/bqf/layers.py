"""Composable network layers used by the target networks and the meta-quantizer.

Layers own their parameters as Tensors and expose ``named_params`` for the
optimizer and checkpoint machinery. ``forward`` takes a ``mode`` ("train" or
"eval"); only BatchNorm distinguishes the two. Dense/Conv2D accept an
optional ``weight`` override so a quantizer can substitute soft-binarized
weights while keeping the graph connected to the shadow parameters.
"""

from __future__ import annotations

import numpy as np

from bqf import tensor as T
from bqf.tensor import Tensor


def trunc_normal(shape, std: float, rng: np.random.Generator,
                 clip_sigmas: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Gaussian samples with |x| > clip_sigmas * std redrawn until inside."""
    out = rng.normal(0.0, std, size=shape)
    bound = clip_sigmas * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


def scaled_normal(shape, fan_in: int, rng: np.random.Generator,
                  dtype=np.float32) -> np.ndarray:
    """Standard normal scaled by 1/sqrt(fan_in)."""
    return (rng.normal(0.0, 1.0, size=shape) / np.sqrt(fan_in)).astype(dtype)


class Layer:
    """Base layer: parameter container plus a forward pass."""

    def named_params(self) -> dict[str, Tensor]:
        return {}

    def named_buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (running statistics)."""
        return {}

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, *,
                 rng: np.random.Generator | None = None, init_std: float = 0.05,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = Tensor(trunc_normal((in_dim, out_dim), init_std, rng, dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def named_params(self):
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def forward(self, x: Tensor, mode: str = "train", weight: Tensor | None = None) -> Tensor:
        w = weight if weight is not None else self.W
        if x.shape[-1] != self.in_dim:
            raise T.ShapeError(f"dense: input dim {x.shape[-1]} != {self.in_dim}")
        y = T.matmul(x, w)
        if self.b is not None:
            y = y + self.b
        return y


class Conv2D(Layer):
    """3x3-style convolution; weights stored as (k, k, in_ch, out_ch)."""

    def __init__(self, kernel_size: int, in_channels: int, out_channels: int,
                 stride: int = 1, pad: int = 0, bias: bool = True, *,
                 rng: np.random.Generator | None = None, init_std: float = 0.05,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.kernel_size = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.pad = pad
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        self.W = Tensor(trunc_normal(shape, init_std, rng, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def named_params(self):
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def forward(self, x: Tensor, mode: str = "train", weight: Tensor | None = None) -> Tensor:
        w = weight if weight is not None else self.W
        y = T.conv2d(x, w, stride=self.stride, pad=self.pad)
        if self.b is not None:
            y = y + self.b.reshape(1, self.out_channels, 1, 1)
        return y


class BatchNorm(Layer):
    """Batch normalization over the batch (and spatial dims for NCHW input).

    ``momentum`` is the decay of the running statistics:
    running = momentum * running + (1 - momentum) * batch_stat.
    Train mode normalizes by batch statistics (differentiably, so gradients
    flow through mean/var); eval mode uses the running statistics.
    """

    def __init__(self, features: int, momentum: float = 0.9, eps: float = 1e-5,
                 *, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"batchnorm: momentum must be in (0,1), got {momentum}")
        self.features = features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)

    def named_params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def named_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _param_shape(self, ndim: int):
        if ndim == 2:
            return (1, self.features)
        if ndim == 4:
            return (1, self.features, 1, 1)
        raise T.ShapeError(f"batchnorm: expects 2-D or 4-D input, got ndim={ndim}")

    def forward(self, x: Tensor, mode: str = "train",
                update_running: bool | None = None) -> Tensor:
        ndim = x.data.ndim
        pshape = self._param_shape(ndim)
        axes = (0,) if ndim == 2 else (0, 2, 3)
        g = self.gamma.reshape(pshape)
        b = self.beta.reshape(pshape)
        if mode == "train":
            if x.shape[0] < 2:
                raise ValueError("batchnorm: train mode needs batch size >= 2")
            out, mu, var = T.batchnorm_train(x, g, b, axes, self.eps)
            if update_running is None or update_running:
                m = self.momentum
                self.running_mean[:] = m * self.running_mean + (1 - m) * mu.reshape(-1)
                self.running_var[:] = m * self.running_var + (1 - m) * var.reshape(-1)
            return out
        if mode == "eval":
            rm = Tensor(self.running_mean.reshape(pshape).astype(x.data.dtype))
            rv = Tensor(self.running_var.reshape(pshape).astype(x.data.dtype))
            y = (x - rm) / T.sqrt(rv + self.eps)
            return g * y + b
        raise ValueError(f"batchnorm: unknown mode {mode!r}")


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return T.leaky_relu(x, slope=self.slope)


class PACTQuant(Layer):
    """Activation quantizer with a learnable clip level.

    y = round(clip(x, 0, alpha) * (2^b - 1)/alpha) * alpha/(2^b - 1),
    rounding half away from zero through a straight-through backward.
    Gradients w.r.t. alpha accumulate the upstream gradient where x >= alpha;
    the quantization scale is treated as a constant per forward pass.
    """

    def __init__(self, bits: int, alpha: float = 6.0, *, dtype=np.float32):
        if bits < 1:
            raise ValueError(f"pact: bits must be >= 1, got {bits}")
        if alpha <= 0:
            raise ValueError(f"pact: alpha must be > 0, got {alpha}")
        self.bits = bits
        self.alpha = Tensor(np.asarray([alpha], dtype=dtype), requires_grad=True)

    def named_params(self):
        return {"alpha": self.alpha}

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        alpha = self.alpha
        if float(alpha.data[0]) <= 0:
            raise ValueError("pact: alpha must stay > 0")
        levels = float(2 ** self.bits - 1)
        scale = levels / float(alpha.data[0])  # constant this pass
        xp = T.relu(x)
        clipped = xp - T.relu(xp - alpha.reshape(*([1] * x.data.ndim)))
        return T.round_ste(clipped * scale) * (1.0 / scale)


class AvgPool2x2(Layer):
    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return T.avg_pool2x2(x)


class MaxPool2x2(Layer):
    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return T.max_pool2x2(x)


class Flatten(Layer):
    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        n = x.shape[0]
        return x.reshape(n, int(np.prod(x.shape[1:])))
