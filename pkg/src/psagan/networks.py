"""The five networks: U-Net translator, PatchGAN critic, RRDB super-resolver,
super-resolution critic and the SR-PSA circle detector."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np

from . import conv as C
from .layers import (BlurPool, Conv2d, ConvTranspose2d, DEFAULT_DTYPE, Module, Parameter,
                     SelfAttention)
from .tensor import Tensor, concat, leaky_relu, mean, relu, sigmoid

KINDS = ("translator_generator", "patchgan_discriminator", "sr_generator",
         "sr_discriminator", "srpsa_net")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description consumed by :func:`build_network`.

    ``widths`` are per-stage channel counts. For the translator, ``len(widths) - 1``
    is the number of down/up-sampling stages.
    """

    kind: str
    widths: Tuple[int, ...] = (16, 32, 64, 64, 64, 64)
    n_rrdb: int = 4
    growth: int = 8
    attention_stages: int = 3
    attention_reduction: int = 8
    in_channels: int = 1
    spectral_norm: bool = True
    anti_alias: bool = True
    scale: int = 4
    lipschitz_k: float = 1.0
    n_power_iterations: int = 1

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.n_power_iterations < 1:
            raise ValueError("n_power_iterations must be >= 1")
        if self.kind == "translator_generator":
            if len(self.widths) < 2:
                raise ValueError("translator needs at least one down-sampling stage")
            if not 0 <= self.attention_stages <= len(self.widths) - 1:
                raise ValueError("attention_stages exceeds the number of decoder stages")
        if self.kind == "srpsa_net" and len(self.widths) != 5:
            raise ValueError("srpsa_net takes exactly 5 widths (one per 3x3 convolution)")
        if self.kind == "sr_generator" and (self.scale not in (2, 4) or self.n_rrdb < 1):
            raise ValueError("sr_generator supports scale 2 or 4 and at least one RRDB")


DESK_PRESETS = {
    "translator_generator": NetworkSpec("translator_generator", (16, 32, 64, 64, 64, 64)),
    "patchgan_discriminator": NetworkSpec("patchgan_discriminator", (16, 32, 64), in_channels=2),
    "sr_generator": NetworkSpec("sr_generator", (16,), n_rrdb=4, growth=8),
    "sr_discriminator": NetworkSpec("sr_discriminator", (16, 32, 64)),
    "srpsa_net": NetworkSpec("srpsa_net", (16, 32, 32, 32, 32), spectral_norm=False),
}

PAPER_PRESETS = {
    "translator_generator": NetworkSpec("translator_generator", (64, 128, 256, 512, 512, 512, 512, 512, 512)),
    "patchgan_discriminator": NetworkSpec("patchgan_discriminator", (64, 128, 256, 512), in_channels=2),
    "sr_generator": NetworkSpec("sr_generator", (64,), n_rrdb=23, growth=32),
    "sr_discriminator": NetworkSpec("sr_discriminator", (64, 128, 256, 512, 512)),
    "srpsa_net": NetworkSpec("srpsa_net", (32, 64, 64, 128, 128), spectral_norm=False),
}


def preset(kind: str, name: str = "desk", **overrides) -> NetworkSpec:
    table = {"desk": DESK_PRESETS, "paper": PAPER_PRESETS}
    if name not in table:
        raise ValueError(f"unknown preset {name!r}")
    return replace(table[name][kind], **overrides)


class UNetGenerator(Module):
    """Grayscale U-Net with blurpool downsampling and attention in the lowest decoder stages."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        w = spec.widths
        depth = len(w) - 1
        sn = spec.spectral_norm
        kw = dict(rng=rng, lipschitz_k=spec.lipschitz_k)
        self.depth = depth
        self.anti_alias = spec.anti_alias
        self.stem = Conv2d(spec.in_channels, w[0], 3, spectral_norm=sn, **kw)
        # anti-aliased variant: stride-1 conv then blurpool; otherwise a strided conv
        self.down = [Conv2d(w[i], w[i + 1], 3 if spec.anti_alias else 4,
                            stride=1 if spec.anti_alias else 2, padding=1,
                            spectral_norm=sn, **kw) for i in range(depth)]
        self.blur = BlurPool()
        self.up = [ConvTranspose2d(w[i + 1], w[i], 4, 2, 1, **kw) for i in range(depth)]
        self.fuse = [Conv2d(2 * w[i], w[i], 3, **kw) for i in range(depth)]
        # decoder stage i outputs resolution H / 2**i; attention on the smallest ones
        self.attn_levels = tuple(range(1, depth))[::-1][: spec.attention_stages]
        self.attn = [SelfAttention(w[i], min(spec.attention_reduction, w[i]), rng=rng, spectral_norm=sn)
                     for i in self.attn_levels]
        self.head = Conv2d(w[0], 1, 1, padding=0, **kw)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = C._batched(x)
        skips = [leaky_relu(self.stem(x), 0.2)]
        h = skips[0]
        for i in range(self.depth):
            if self.anti_alias:
                h = self.blur(leaky_relu(self.down[i](h), 0.2))
            else:
                h = leaky_relu(self.down[i](h), 0.2)
            skips.append(h)
        attn = dict(zip(self.attn_levels, self.attn))
        for i in reversed(range(self.depth)):
            u = relu(self.up[i](h))
            h = relu(self.fuse[i](concat([u, skips[i]], axis=1)))
            if i in attn:
                h = attn[i](h)
        return C._unbatch(sigmoid(self.head(h)), squeeze)


class PatchDiscriminator(Module):
    """Conditional critic returning a spatial grid of pre-sigmoid scores."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        w = (spec.in_channels,) + tuple(spec.widths)
        sn = spec.spectral_norm
        self.anti_alias = spec.anti_alias
        self.convs = [Conv2d(w[i], w[i + 1], 3 if spec.anti_alias else 4,
                             stride=1 if spec.anti_alias else 2, padding=1,
                             spectral_norm=sn, rng=rng, lipschitz_k=spec.lipschitz_k)
                      for i in range(len(w) - 1)]
        self.blur = BlurPool()
        self.head = Conv2d(w[-1], 1, 3, spectral_norm=sn, rng=rng, lipschitz_k=spec.lipschitz_k)

    def forward(self, condition: Tensor, image: Tensor) -> Tensor:
        h = concat([condition, image], axis=-3)
        for conv in self.convs:
            h = leaky_relu(conv(h), 0.2)
            if self.anti_alias:
                h = self.blur(h)
        return self.head(h)


class DenseBlock(Module):
    def __init__(self, nf: int, gc: int, rng, sn: bool, k: float):
        super().__init__()
        self.convs = [Conv2d(nf + i * gc, gc if i < 4 else nf, 3, rng=rng, spectral_norm=sn,
                             lipschitz_k=k) for i in range(5)]

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for i, conv in enumerate(self.convs):
            out = conv(concat(feats, axis=1) if len(feats) > 1 else x)
            if i < 4:
                feats.append(leaky_relu(out, 0.2))
        return out * 0.2 + x


class RRDB(Module):
    def __init__(self, nf: int, gc: int, rng, sn: bool, k: float):
        super().__init__()
        self.blocks = [DenseBlock(nf, gc, rng, sn, k) for _ in range(3)]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        return h * 0.2 + x


class RRDBGenerator(Module):
    """RRDB trunk with nearest-neighbour upsampling on top of a bilinear skip.

    The learned branch is scaled by ``res_gain`` (initially 0), so an untrained
    network reproduces bilinear interpolation.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        nf, gc, sn, k = spec.widths[0], spec.growth, spec.spectral_norm, spec.lipschitz_k
        kw = dict(rng=rng, spectral_norm=sn, lipschitz_k=k)
        self.scale = spec.scale
        self.first = Conv2d(spec.in_channels, nf, 3, **kw)
        self.trunk = [RRDB(nf, gc, rng, sn, k) for _ in range(spec.n_rrdb)]
        self.trunk_conv = Conv2d(nf, nf, 3, **kw)
        self.ups = [Conv2d(nf, nf, 3, **kw) for _ in range(int(np.log2(spec.scale)))]
        self.hr_conv = Conv2d(nf, nf, 3, **kw)
        self.last = Conv2d(nf, spec.in_channels, 3, **kw)
        self.res_gain = Parameter(np.zeros(1, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        x4, squeeze = C._batched(x)
        feat = self.first(x4)
        h = feat
        for block in self.trunk:
            h = block(h)
        h = self.trunk_conv(h) + feat
        for up in self.ups:
            h = leaky_relu(up(C.upsample_nearest(h, 2)), 0.2)
        residual = self.last(leaky_relu(self.hr_conv(h), 0.2))
        hh, ww = x4.shape[-2:]
        base = C.resize_bilinear(x4, (hh * self.scale, ww * self.scale))
        return C._unbatch(base + self.res_gain.reshape(1, 1, 1, 1) * residual, squeeze)


class SRDiscriminator(Module):
    """Unconditional critic for super-resolved images; spatial pre-sigmoid scores."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        w = (spec.in_channels,) + tuple(spec.widths)
        self.convs = [Conv2d(w[i], w[i + 1], 4, stride=2, padding=1, rng=rng,
                             spectral_norm=spec.spectral_norm, lipschitz_k=spec.lipschitz_k)
                      for i in range(len(w) - 1)]
        self.head = Conv2d(w[-1], 1, 3, rng=rng, spectral_norm=spec.spectral_norm,
                           lipschitz_k=spec.lipschitz_k)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = leaky_relu(conv(h), 0.2)
        return self.head(h)


class SRPSANet(Module):
    """Six convolutions, two 2x2 max-pools; outputs raw (p, x, y, r) maps at 1/4 resolution.

    Call :meth:`predict` for maps with the sigmoid applied to the p channel.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        w = (spec.in_channels,) + tuple(spec.widths)
        self.convs = [Conv2d(w[i], w[i + 1], 3, rng=rng, spectral_norm=spec.spectral_norm)
                      for i in range(5)]
        self.head = Conv2d(w[-1], 4, 1, padding=0, rng=rng)
        self.head.weight.data *= 0.1

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, conv in enumerate(self.convs):
            h = relu(conv(h))
            if i in (1, 2):
                h = C.max_pool2d(h, 2, 2)
        return self.head(h)

    def predict(self, x: Tensor) -> Tensor:
        """Network output with p squashed to [0, 1]; shape (..., 4, H/4, W/4)."""
        raw = self(x)
        p = sigmoid(raw[..., 0:1, :, :])
        return concat([p, raw[..., 1:, :, :]], axis=-3)


_BUILDERS = {
    "translator_generator": UNetGenerator,
    "patchgan_discriminator": PatchDiscriminator,
    "sr_generator": RRDBGenerator,
    "sr_discriminator": SRDiscriminator,
    "srpsa_net": SRPSANet,
}


def build_network(spec: NetworkSpec, seed: int = 0, dtype=DEFAULT_DTYPE) -> Module:
    """Instantiate ``spec`` with parameters drawn deterministically from ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    net = _BUILDERS[spec.kind](spec, rng)
    net.spec = spec
    for m in net.modules():
        if getattr(m, "sn", None) is not None:
            m.sn.n_power_iterations = spec.n_power_iterations
    if dtype != DEFAULT_DTYPE:
        net.astype(dtype)
    return net


class FeatureNet(Module):
    """Frozen random convolution stack.

    ``pooled=False`` returns the last pre-activation feature map (perceptual
    loss); ``pooled=True`` returns globally averaged features (embeddings).
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 32, 32), stride: int = 1,
                 seed: int = 0, in_channels: int = 1, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = np.random.default_rng(seed)
        w = (in_channels,) + tuple(widths)
        pad = 1
        self.convs = [Conv2d(w[i], w[i + 1], 3, stride=stride, padding=pad, rng=rng, dtype=dtype)
                      for i in range(len(widths))]
        for p in self.parameters():
            p.requires_grad = False

    def features(self, x: Tensor) -> Tensor:
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = relu(h)
        return h

    def forward(self, x: Tensor, pooled: bool = False) -> Tensor:
        h = self.features(x)
        return mean(h, axis=(-2, -1)) if pooled else h
