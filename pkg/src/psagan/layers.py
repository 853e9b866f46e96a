"""Parameter containers and the building blocks shared by every network.

Includes convolution layers with optional spectral normalization, the
binomial anti-aliasing downsampler and the self-attention block.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import conv as C
from .tensor import Tensor, matmul, reshape, softmax

DEFAULT_DTYPE = np.float32


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Named, ordered collection of parameters, buffers and child modules.

    Attribute assignment order fixes the parameter order, which keeps
    checkpoints stable across runs.
    """

    training: bool = True

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for name in list(self._buffers):
            self._buffers[name] = np.array(state[prefix + name], dtype=self._buffers[name].dtype)
        for cname, child in self._children.items():
            child._load_buffers(state, f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in m._buffers:
                m._buffers[name] = m._buffers[name].astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


LayerStack = Module


# -- spectral normalization ---------------------------------------------------
@dataclass
class SpectralNormState:
    """Power-iteration state for one weight: left singular vector estimate ``u``."""

    u: np.ndarray
    n_power_iterations: int = 1
    lipschitz_k: float = 1.0
    sigma: float = float("nan")
    degenerate: bool = False

    @classmethod
    def for_weight(cls, weight_shape, rng: np.random.Generator, n_power_iterations: int = 1,
                   lipschitz_k: float = 1.0, dtype=DEFAULT_DTYPE) -> "SpectralNormState":
        u = rng.standard_normal(weight_shape[0])
        return cls(u=(u / np.linalg.norm(u)).astype(dtype), n_power_iterations=n_power_iterations,
                   lipschitz_k=lipschitz_k)


def _unit(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return v / (np.linalg.norm(v) + eps)


def power_iteration(w2: np.ndarray, u: np.ndarray, n_iter: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """Run ``n_iter`` power-iteration steps on a 2-D matrix; returns (u, v, sigma)."""
    v = _unit(w2.T @ u)
    for _ in range(n_iter):
        v = _unit(w2.T @ u)
        u = _unit(w2 @ v)
    return u, v, float(u @ w2 @ v)


def spectral_norm_apply(weight: Tensor, state: SpectralNormState, update: bool = True) -> Tensor:
    """Return ``lipschitz_k * W / sigma_hat(W)`` with sigma_hat from power iteration.

    ``W`` is viewed as (out_features, everything else). The singular-vector
    estimates are constants for differentiation. ``update=False`` reuses the
    stored ``u`` without advancing it.
    """
    w2 = weight.data.reshape(weight.shape[0], -1)
    if not np.any(w2):
        state.degenerate = True
        state.sigma = 0.0
        return weight
    u = state.u.astype(w2.dtype)
    n_iter = state.n_power_iterations if update else 0
    u, v, _ = power_iteration(w2, u, n_iter)
    if update:
        state.u = u
    state.degenerate = False
    w_mat = reshape(weight, w2.shape)
    sigma = matmul(matmul(Tensor(u[None, :]), w_mat), Tensor(v[:, None]))
    state.sigma = float(sigma.data.reshape(-1)[0])
    return weight * (Tensor(np.asarray(state.lipschitz_k, dtype=w2.dtype)) / reshape(sigma, (1,) * weight.ndim))


# -- layers --------------------------------------------------------------------
def he_normal(rng: np.random.Generator, shape, fan_in: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """3x3-style convolution with optional spectral normalization of the kernel."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 padding: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                 spectral_norm: bool = False, bias: bool = True, padding_mode: str = "zeros",
                 n_power_iterations: int = 1, lipschitz_k: float = 1.0, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.padding_mode = padding_mode
        self.weight = Parameter(he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, dtype))
        if bias:
            self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        else:
            self.bias = None
        self.sn: Optional[SpectralNormState] = None
        if spectral_norm:
            self.sn = SpectralNormState.for_weight(self.weight.shape, rng, n_power_iterations,
                                                   lipschitz_k, dtype)
            self.register_buffer("sn_u", self.sn.u)

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        self.sn.u = self._buffers["sn_u"]
        w = spectral_norm_apply(self.weight, self.sn, update=self.training)
        self._buffers["sn_u"] = self.sn.u
        return w

    def forward(self, x: Tensor) -> Tensor:
        return C.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding, self.padding_mode)


class ConvTranspose2d(Conv2d):
    """Transposed convolution; kernel stored as (c_in, c_out, k, k)."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 4, stride: int = 2, padding: int = 1,
                 rng: Optional[np.random.Generator] = None, spectral_norm: bool = False,
                 bias: bool = True, dtype=DEFAULT_DTYPE, **kw):
        super().__init__(c_out, c_in, kernel, stride, padding, rng, spectral_norm, bias=False,
                         dtype=dtype, **kw)
        fan_in = c_in * kernel * kernel / (stride * stride)
        self.weight.data = he_normal(rng if rng is not None else np.random.default_rng(0),
                                     self.weight.shape, fan_in, dtype)
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return C.conv_transpose2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


def binomial_kernel(size: int = 5) -> np.ndarray:
    """Normalized outer product of the binomial row, e.g. [1, 4, 6, 4, 1] for size 5."""
    row = np.array([1.0])
    for _ in range(size - 1):
        row = np.convolve(row, [1.0, 1.0])
    k = np.outer(row, row)
    return k / k.sum()


def blurpool_downsample(x, stride: int = 2, size: int = 5) -> Tensor:
    """Binomial low-pass per channel (reflect-padded) followed by subsampling."""
    x, squeeze = C._batched(x if isinstance(x, Tensor) else Tensor(x))
    n, c, h, w = x.shape
    pad = size // 2
    if h <= pad or w <= pad:
        raise ValueError(f"blurpool needs extents > {pad}, got {(h, w)}")
    flat = reshape(x, (n * c, 1, h, w))
    kernel = Tensor(binomial_kernel(size)[None, None].astype(x.dtype))
    out = C.conv2d(flat, kernel, stride=stride, padding=pad, padding_mode="reflect")
    out = reshape(out, (n, c) + out.shape[2:])
    return C._unbatch(out, squeeze)


class BlurPool(Module):
    def __init__(self, stride: int = 2, size: int = 5):
        super().__init__()
        self.stride, self.size = stride, size

    def forward(self, x: Tensor) -> Tensor:
        return blurpool_downsample(x, self.stride, self.size)


class SelfAttention(Module):
    """Non-local block: ``y = gamma * v(h(x) . softmax(f(x)^T g(x))^T) + x``.

    ``gamma`` starts at zero so the block is an identity at initialization.
    """

    def __init__(self, channels: int, reduction: int = 8, rng: Optional[np.random.Generator] = None,
                 spectral_norm: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        inner = channels // reduction
        rng = rng if rng is not None else np.random.default_rng(0)
        kw = dict(kernel=1, padding=0, rng=rng, spectral_norm=spectral_norm, dtype=dtype)
        self.f = Conv2d(channels, inner, **kw)
        self.g = Conv2d(channels, inner, **kw)
        self.h = Conv2d(channels, inner, **kw)
        self.v = Conv2d(inner, channels, **kw)
        self.gamma = Parameter(np.zeros(1, dtype=dtype))
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        x4, squeeze = C._batched(x)
        n, c, hh, ww = x4.shape
        L = hh * ww
        f = reshape(self.f(x4), (n, -1, L))
        g = reshape(self.g(x4), (n, -1, L))
        h = reshape(self.h(x4), (n, -1, L))
        scores = matmul(f.transpose(0, 2, 1), g)          # (n, L, L)
        attn = softmax(scores, axis=-1)
        self.last_attention = attn.data
        mixed = matmul(h, attn.transpose(0, 2, 1))         # (n, inner, L)
        o = self.v(reshape(mixed, (n, -1, hh, ww)))
        return C._unbatch(self.gamma.reshape(1, 1, 1, 1) * o + x4, squeeze)


def self_attention_forward(x: Tensor, block: SelfAttention) -> Tensor:
    return block(x)
