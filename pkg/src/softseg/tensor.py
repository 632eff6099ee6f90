"""Dense layer kernels with hand-derived backward passes.

Everything the two predictors need: strided conv, transposed conv, batch
normalization, the three activations, an Adam step, and a finite-difference
gradient checker. Layers follow the forward/backward convention: forward
caches what the backward formula needs, backward returns the input gradient
and stores parameter gradients on the layer (``layer.grads``).

Arrays are float32 NCHW in production; every op is dtype-preserving so the
gradient checker can run the same code in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NonFiniteGradientError, ShapeError

Array = np.ndarray


def check_finite(name: str, a: Array) -> None:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains non-finite values")


class Conv2d:
    """Strided 2D cross-correlation. Weight layout (out, in, kh, kw)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 1, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        fan_in = in_channels * k * k
        scale = math.sqrt(2.0 / fan_in)
        self.weight = (rng.standard_normal((out_channels, in_channels, k, k)) * scale).astype(np.float32)
        self.bias = np.zeros(out_channels, dtype=np.float32)
        self.stride = stride
        self.padding = padding
        self.kernel_size = k
        self.grads: dict[str, Array] = {}
        self._x: Array | None = None

    def params(self) -> dict[str, Array]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Array, train: bool = False) -> Array:
        h, w = x.shape[2], x.shape[3]
        if self.stride > 1 and (h % self.stride or w % self.stride):
            raise ShapeError(f"conv2d stride {self.stride}: spatial dims {h}x{w} not divisible")
        self._x = x
        return kernels.conv2d_forward(x, self.weight.astype(x.dtype, copy=False),
                                      self.bias.astype(x.dtype, copy=False),
                                      self.stride, self.padding)

    def backward(self, gy: Array) -> Array:
        gx, gw, gb = kernels.conv2d_backward(gy, self._x,
                                             self.weight.astype(gy.dtype, copy=False),
                                             self.stride, self.padding)
        self.grads = {"weight": gw, "bias": gb}
        return gx


class Deconv2d:
    """Transposed convolution; adjoint of Conv2d. Weight layout (in, out, kh, kw)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 1, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        fan_in = in_channels * k * k
        scale = math.sqrt(2.0 / fan_in)
        self.weight = (rng.standard_normal((in_channels, out_channels, k, k)) * scale).astype(np.float32)
        self.bias = np.zeros(out_channels, dtype=np.float32)
        self.stride = stride
        self.padding = padding
        self.kernel_size = k
        self.grads: dict[str, Array] = {}
        self._x: Array | None = None

    def params(self) -> dict[str, Array]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Array, train: bool = False) -> Array:
        self._x = x
        return kernels.deconv2d_forward(x, self.weight.astype(x.dtype, copy=False),
                                        self.bias.astype(x.dtype, copy=False),
                                        self.stride, self.padding)

    def backward(self, gy: Array) -> Array:
        gx, gw, gb = kernels.deconv2d_backward(gy, self._x,
                                               self.weight.astype(gy.dtype, copy=False),
                                               self.stride, self.padding)
        self.grads = {"weight": gw, "bias": gb}
        return gx


class BatchNorm2d:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum
        self.grads: dict[str, Array] = {}
        self._cache = None

    def params(self) -> dict[str, Array]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, Array]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Array, train: bool = False, update_stats: bool = True) -> Array:
        n, c, h, w = x.shape
        gamma = self.gamma.astype(x.dtype, copy=False)
        beta = self.beta.astype(x.dtype, copy=False)
        if train:
            m = n * h * w
            if m < 2:
                raise ShapeError("batchnorm train mode needs at least 2 values per channel")
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu[:, None, None]) * inv_std[:, None, None]
            if update_stats:
                unbiased = var * (m / (m - 1))
                self.running_mean += self.momentum * (mu.astype(np.float32) - self.running_mean)
                self.running_var += self.momentum * (unbiased.astype(np.float32) - self.running_var)
            self._cache = ("train", xhat, inv_std)
        else:
            rm = self.running_mean.astype(x.dtype, copy=False)
            rv = self.running_var.astype(x.dtype, copy=False)
            inv_std = 1.0 / np.sqrt(rv + self.eps)
            xhat = (x - rm[:, None, None]) * inv_std[:, None, None]
            self._cache = ("eval", xhat, inv_std)
        return gamma[:, None, None] * xhat + beta[:, None, None]

    def backward(self, gy: Array) -> Array:
        mode, xhat, inv_std = self._cache
        gamma = self.gamma.astype(gy.dtype, copy=False)
        ggamma = (gy * xhat).sum(axis=(0, 2, 3))
        gbeta = gy.sum(axis=(0, 2, 3))
        self.grads = {"gamma": ggamma, "beta": gbeta}
        if mode == "eval":
            return gy * (gamma * inv_std)[:, None, None]
        m = gy.shape[0] * gy.shape[2] * gy.shape[3]
        g_mean = gy.mean(axis=(0, 2, 3))
        gxhat_mean = (gy * xhat).sum(axis=(0, 2, 3)) / m
        gx = (gamma * inv_std)[:, None, None] * (
            gy - g_mean[:, None, None] - xhat * gxhat_mean[:, None, None])
        return gx


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self) -> dict[str, Array]:
        return {}

    def forward(self, x: Array, train: bool = False) -> Array:
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, gy: Array) -> Array:
        return np.where(self._mask, gy, gy.dtype.type(0))


# Keeps saturated sigmoid/tanh outputs strictly inside their open ranges
# (floating point would otherwise round them onto the bounds).
_SAT_MARGIN = 1e-7


class Sigmoid:
    def __init__(self):
        self._y = None

    def params(self) -> dict[str, Array]:
        return {}

    def forward(self, x: Array, train: bool = False) -> Array:
        # Split by sign for overflow-free evaluation.
        pos = x >= 0
        z = np.exp(np.where(pos, -x, x))
        y = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
        self._y = np.clip(y, _SAT_MARGIN, 1.0 - _SAT_MARGIN).astype(x.dtype)
        return self._y

    def backward(self, gy: Array) -> Array:
        return gy * self._y * (1.0 - self._y)


class Tanh:
    def __init__(self):
        self._y = None

    def params(self) -> dict[str, Array]:
        return {}

    def forward(self, x: Array, train: bool = False) -> Array:
        self._y = np.clip(np.tanh(x), -1.0 + _SAT_MARGIN, 1.0 - _SAT_MARGIN).astype(x.dtype)
        return self._y

    def backward(self, gy: Array) -> Array:
        return gy * (1.0 - self._y * self._y)


_ACTIVATIONS = {"relu": ReLU, "sigmoid": Sigmoid, "tanh": Tanh}


def activation(kind: str):
    """Activation layer factory: relu | sigmoid | tanh."""
    try:
        return _ACTIVATIONS[kind]()
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


@dataclass
class AdamState:
    """Adam optimizer state: first/second moments per parameter plus step count."""

    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.99
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: dict[str, Array], grads: dict[str, Array], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Rejects the whole step (no mutation at all) if any gradient is
    non-finite, naming the offending parameter.
    """
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name].astype(np.float32, copy=False)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def clip_global_norm(grads: dict[str, Array], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]

    def __str__(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.per_param.items())]
        lines.append(f"max {self.max_rel_error:.3e} at {self.worst_param}")
        return "\n".join(lines)


def grad_check(loss_and_grads, tensors: dict[str, Array], h: float = 1e-3,
               abs_floor: float = 1e-6, samples_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grads()`` evaluates the model at the current contents of
    ``tensors`` (perturbed in place) and returns ``(loss, grads)`` with one
    gradient array per entry. Checks run in float64; callers upcast their
    parameters first. ``samples_per_tensor`` limits how many coordinates of
    each tensor are probed (all of them when None).
    """
    rng = rng or np.random.default_rng(0)
    _, analytic = loss_and_grads()
    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    for name, t in tensors.items():
        ga = np.asarray(analytic[name], dtype=np.float64)
        flat = t.reshape(-1)
        idx = np.arange(flat.size)
        if samples_per_tensor is not None and flat.size > samples_per_tensor:
            idx = rng.choice(flat.size, size=samples_per_tensor, replace=False)
        err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grads()
            flat[i] = orig - h
            lm, _ = loss_and_grads()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = ga.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            err = max(err, rel)
        per_param[name] = err
        if err >= worst[1]:
            worst = (name, err)
    return GradCheckReport(max_rel_error=worst[1], worst_param=worst[0], per_param=per_param)
