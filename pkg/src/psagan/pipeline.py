"""Patch tiling/stitching and the translation and super-resolution training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .losses import (GanLossConfig, cgan_adversarial, esrgan_generator_loss, relativistic_avg_loss,
                     rmse_loss, bce_with_logits)
from .networks import FeatureNet
from .optim import SUPER_RESOLVER_RATES, TRANSLATOR_RATES, Adam, TturSchedule, ttur_rates
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SR_FACTOR = 4


# -- patches -------------------------------------------------------------------------
def _starts(extent: int, patch: int, stride: int) -> List[int]:
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


def extract_patches(image: np.ndarray, patch_size: int, stride: Optional[int] = None
                    ) -> List[Tuple[np.ndarray, Tuple[int, int]]]:
    """Row-major tiling; the last row/column is anchored to the image edge."""
    stride = stride or patch_size
    h, w = image.shape
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch {patch_size} larger than image {image.shape}")
    return [(image[r:r + patch_size, c:c + patch_size], (r, c))
            for r in _starts(h, patch_size, stride) for c in _starts(w, patch_size, stride)]


def stitch_patches(patches: Sequence[Tuple[np.ndarray, Tuple[int, int]]], out_shape: Tuple[int, int]) -> np.ndarray:
    """Place patches at their offsets, averaging where they overlap."""
    acc = np.zeros(out_shape, dtype=np.float64)
    hits = np.zeros(out_shape, dtype=np.int64)
    for patch, (r, c) in patches:
        ph, pw = patch.shape
        if r < 0 or c < 0 or r + ph > out_shape[0] or c + pw > out_shape[1]:
            raise ValueError(f"patch at {(r, c)} falls outside {out_shape}")
        acc[r:r + ph, c:c + pw] += patch
        hits[r:r + ph, c:c + pw] += 1
    if np.any(hits == 0):
        raise ValueError(f"{int((hits == 0).sum())} output pixels are not covered by any patch")
    return acc / hits


def augment(arrays: Sequence[np.ndarray], k: int) -> List[np.ndarray]:
    """Apply the same one of 8 dihedral transforms (k in 0..7) to every array."""
    out = []
    for a in arrays:
        a = np.rot90(a, k % 4, axes=(-2, -1))
        if k >= 4:
            a = a[..., ::-1]
        out.append(np.ascontiguousarray(a))
    return out


# -- shared training plumbing ------------------------------------------------------------
@dataclass
class GanTrainResult:
    generator: Dict[str, np.ndarray]
    discriminator: Dict[str, np.ndarray]
    history: List[Tuple[int, float, float]] = field(default_factory=list)


def _snapshot(net) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in net.state_dict().items()}


def _batches(rng: np.random.Generator, n: int, batch: int):
    order = rng.permutation(n)
    for start in range(0, n, batch):
        yield np.sort(order[start:start + batch])


def _check_finite(*losses: Tensor, step: int) -> None:
    for loss in losses:
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {step}")


def _stack(images: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
    return np.stack([np.asarray(im, dtype=dtype) for im in images])[:, None]


# -- translator -------------------------------------------------------------------------
@dataclass
class TranslatorConfig:
    epochs: int = 30
    batch: int = 4
    lr_g: float = TRANSLATOR_RATES[0]
    lr_d: float = TRANSLATOR_RATES[1]
    betas: Tuple[float, float] = (0.5, 0.999)
    switch_epoch: Optional[int] = None    # default: half the epochs
    decay_factor: float = 0.5
    decay_every: int = 10
    augment: bool = True
    seed: int = 0
    loss: GanLossConfig = field(default_factory=GanLossConfig)

    def schedule(self) -> TturSchedule:
        switch = self.switch_epoch if self.switch_epoch is not None else self.epochs // 2
        return TturSchedule(self.lr_g, self.lr_d, switch, self.decay_factor, self.decay_every)


def train_translator(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], generator, discriminator,
                     cfg: TranslatorConfig = TranslatorConfig(), registered: bool = True) -> GanTrainResult:
    """Alternating D/G updates on (om, sem) pairs.

    The generator minimises adversarial BCE plus ``lambda_rmse`` times RMSE.
    """
    if not registered:
        raise ValueError("translator training needs registered image pairs")
    for om, sem in pairs:
        if om.shape != sem.shape:
            raise ValueError(f"pair extents differ: {om.shape} vs {sem.shape}")
    rng = np.random.default_rng(cfg.seed)
    om_all, sem_all = _stack([p[0] for p in pairs]), _stack([p[1] for p in pairs])
    opt_g = Adam(generator.parameters(), cfg.lr_g, cfg.betas)
    opt_d = Adam(discriminator.parameters(), cfg.lr_d, cfg.betas)
    schedule = cfg.schedule()
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        lr_g, lr_d = ttur_rates(epoch, schedule)
        opt_g.set_lr(lr_g)
        opt_d.set_lr(lr_d)
        for idx in _batches(rng, len(pairs), cfg.batch):
            om, sem = om_all[idx], sem_all[idx]
            if cfg.augment:
                om, sem = augment((om, sem), int(rng.integers(8)))
            om_t, sem_t = Tensor(om), Tensor(sem)
            generator.train()
            fake = generator(om_t)

            discriminator.train()
            opt_d.zero_grad()
            _, loss_d = cgan_adversarial(discriminator(om_t, sem_t), discriminator(om_t, fake.detach()), cfg.loss)
            loss_d.backward()
            opt_d.step()

            discriminator.eval()
            opt_g.zero_grad()
            loss_g = (bce_with_logits(discriminator(om_t, fake), 1.0)
                      + cfg.loss.lambda_rmse * rmse_loss(fake, sem_t))
            loss_g.backward()
            opt_g.step()
            _check_finite(loss_g, loss_d, step=step)
            step += 1
            history.append((step, loss_g.item(), loss_d.item()))
        logger.info("translator epoch %d lr=(%.2g, %.2g) loss_g=%.4f loss_d=%.4f",
                    epoch + 1, lr_g, lr_d, history[-1][1], history[-1][2])
    generator.eval()
    discriminator.eval()
    return GanTrainResult(_snapshot(generator), _snapshot(discriminator), history)


# -- super-resolver ----------------------------------------------------------------------
@dataclass
class SuperResolverConfig:
    epochs: int = 30
    batch: int = 4
    lr_g: float = SUPER_RESOLVER_RATES[0]
    lr_d: float = SUPER_RESOLVER_RATES[1]
    betas: Tuple[float, float] = (0.9, 0.999)
    switch_epoch: Optional[int] = None
    decay_factor: float = 0.5
    decay_every: int = 10
    augment: bool = True
    seed: int = 0
    featnet_seed: int = 1234
    loss: GanLossConfig = field(default_factory=GanLossConfig)

    def schedule(self) -> TturSchedule:
        switch = self.switch_epoch if self.switch_epoch is not None else self.epochs // 2
        return TturSchedule(self.lr_g, self.lr_d, switch, self.decay_factor, self.decay_every)


def downscale(image: np.ndarray, factor: int = SR_FACTOR) -> np.ndarray:
    """Box-average downscale of a 2-D image whose extents are multiples of ``factor``."""
    h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {image.shape} not divisible by {factor}")
    return np.asarray(image, dtype=np.float64).reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def make_sr_pairs(targets: Sequence[np.ndarray], factor: int = SR_FACTOR) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(downscale(t, factor), np.asarray(t, dtype=np.float64)) for t in targets]


def train_super_resolver(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], generator, discriminator,
                         cfg: SuperResolverConfig = SuperResolverConfig(),
                         featnet: Optional[FeatureNet] = None) -> GanTrainResult:
    """Relativistic-average GAN training on (low, high) pairs with a 4x ratio."""
    for low, high in pairs:
        if high.shape[0] != SR_FACTOR * low.shape[0] or high.shape[1] != SR_FACTOR * low.shape[1]:
            raise ValueError(f"resolution ratio must be {SR_FACTOR}: {low.shape} -> {high.shape}")
    featnet = featnet or FeatureNet(seed=cfg.featnet_seed)
    rng = np.random.default_rng(cfg.seed)
    low_all, high_all = _stack([p[0] for p in pairs]), _stack([p[1] for p in pairs])
    opt_g = Adam(generator.parameters(), cfg.lr_g, cfg.betas)
    opt_d = Adam(discriminator.parameters(), cfg.lr_d, cfg.betas)
    schedule = cfg.schedule()
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        lr_g, lr_d = ttur_rates(epoch, schedule)
        opt_g.set_lr(lr_g)
        opt_d.set_lr(lr_d)
        for idx in _batches(rng, len(pairs), cfg.batch):
            low, high = low_all[idx], high_all[idx]
            if cfg.augment:
                low, high = augment((low, high), int(rng.integers(8)))
            low_t, high_t = Tensor(low), Tensor(high)
            generator.train()
            fake = generator(low_t)

            discriminator.train()
            opt_d.zero_grad()
            _, loss_d = relativistic_avg_loss(discriminator(high_t), discriminator(fake.detach()))
            loss_d.backward()
            opt_d.step()

            discriminator.eval()
            opt_g.zero_grad()
            with no_grad():
                c_real = discriminator(high_t)
            loss_g = esrgan_generator_loss(fake, high_t, (c_real, discriminator(fake)), featnet, cfg.loss)
            loss_g.backward()
            opt_g.step()
            _check_finite(loss_g, loss_d, step=step)
            step += 1
            history.append((step, loss_g.item(), loss_d.item()))
        logger.info("super-resolver epoch %d lr=(%.2g, %.2g) loss_g=%.4f loss_d=%.4f",
                    epoch + 1, lr_g, lr_d, history[-1][1], history[-1][2])
    generator.eval()
    discriminator.eval()
    return GanTrainResult(_snapshot(generator), _snapshot(discriminator), history)


# -- inference ---------------------------------------------------------------------------
def run_network(net, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Evaluate ``net`` on an (n, h, w) stack without recording gradients."""
    net.eval()
    dtype = net.parameters()[0].dtype
    outs = []
    with no_grad():
        for start in range(0, len(images), batch):
            x = np.asarray(images[start:start + batch], dtype=dtype)[:, None]
            outs.append(net(Tensor(x)).data[:, 0])
    return np.concatenate(outs).astype(np.float64)


def translate(om_image: np.ndarray, translator, patch_size: int = 64) -> np.ndarray:
    tiles = extract_patches(np.asarray(om_image, dtype=np.float64), patch_size)
    outs = run_network(translator, np.stack([t for t, _ in tiles]))
    return stitch_patches(list(zip(outs, [o for _, o in tiles])), om_image.shape)


def super_resolve(om_image: np.ndarray, translator, sr_net, patch_size: int = 64) -> np.ndarray:
    """Translate, downscale by 4, super-resolve by 4, stitch; output extents equal input."""
    if translator is None or sr_net is None:
        raise ValueError("super_resolve needs both a translator and a super-resolver")
    if patch_size % SR_FACTOR:
        raise ValueError(f"patch size must be a multiple of {SR_FACTOR}")
    tiles = extract_patches(np.asarray(om_image, dtype=np.float64), patch_size)
    translated = run_network(translator, np.stack([t for t, _ in tiles]))
    low = np.stack([downscale(t) for t in translated])
    high = np.clip(run_network(sr_net, low), 0.0, 1.0)
    return stitch_patches(list(zip(high, [o for _, o in tiles])), om_image.shape)
