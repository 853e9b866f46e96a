"""Training objectives for the translator, the super-resolver and the detector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .tensor import Tensor, _wrap, mean, softplus, sqrt, tabs, tsum

RMSE_EPS = 1e-12


@dataclass(frozen=True)
class GanLossConfig:
    lambda_rmse: float = 5.0
    lambda_rel: float = 0.05
    eta_l1: float = 0.01
    label_smooth: float = 0.9

    def __post_init__(self):
        if min(self.lambda_rmse, self.lambda_rel, self.eta_l1) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.5 < self.label_smooth <= 1.0:
            raise ValueError("label_smooth must lie in (0.5, 1]")


def rmse_loss(generated, target) -> Tensor:
    """sqrt(mean squared difference + eps); eps keeps the gradient finite at zero."""
    generated, target = _wrap(generated), _wrap(target)
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch {generated.shape} vs {target.shape}")
    diff = target - generated
    return sqrt(mean(diff * diff) + RMSE_EPS)


def l1_loss(generated, target) -> Tensor:
    return mean(tabs(_wrap(generated) - _wrap(target)))


def mse_loss(generated, target) -> Tensor:
    d = _wrap(generated) - _wrap(target)
    return mean(d * d)


def bce_with_logits(logits, target: float) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a constant target."""
    logits = _wrap(logits)
    return mean(softplus(logits) - logits * target)


def cgan_adversarial(d_real, d_fake, cfg: GanLossConfig = GanLossConfig()) -> Tuple[Tensor, Tensor]:
    """Conditional GAN losses on PatchGAN logits.

    Returns ``(loss_G, loss_D)``; the discriminator's real target is
    ``cfg.label_smooth``. The caller detaches ``d_fake`` for the D step.
    """
    loss_d = 0.5 * (bce_with_logits(d_real, cfg.label_smooth) + bce_with_logits(d_fake, 0.0))
    loss_g = bce_with_logits(d_fake, 1.0)
    return loss_g, loss_d


def translator_generator_loss(d_fake, generated, target, cfg: GanLossConfig = GanLossConfig()) -> Tensor:
    return bce_with_logits(d_fake, 1.0) + cfg.lambda_rmse * rmse_loss(generated, target)


def relativistic_avg_loss(c_real, c_fake) -> Tuple[Tensor, Tensor]:
    """Relativistic average GAN losses ``(loss_G, loss_D)`` from critic logits."""
    c_real, c_fake = _wrap(c_real), _wrap(c_fake)
    real_vs_fake = c_real - mean(c_fake)
    fake_vs_real = c_fake - mean(c_real)
    loss_d = 0.5 * (bce_with_logits(real_vs_fake, 1.0) + bce_with_logits(fake_vs_real, 0.0))
    loss_g = 0.5 * (bce_with_logits(real_vs_fake, 0.0) + bce_with_logits(fake_vs_real, 1.0))
    return loss_g, loss_d


def perceptual_loss(generated, target, featnet) -> Tensor:
    """Mean absolute difference of the frozen feature net's pre-activation maps."""
    return l1_loss(featnet.features(_wrap(generated)), featnet.features(_wrap(target).detach()))


def esrgan_generator_loss(generated, target, critic_outs, featnet,
                          cfg: GanLossConfig = GanLossConfig()) -> Tensor:
    """perceptual + lambda_rel * relativistic(G side) + eta_l1 * L1.

    ``critic_outs`` is ``(c_real, c_fake)``.
    """
    c_real, c_fake = critic_outs
    adv_g, _ = relativistic_avg_loss(c_real, c_fake)
    return (perceptual_loss(generated, target, featnet) + cfg.lambda_rel * adv_g
            + cfg.eta_l1 * l1_loss(generated, target))


def srpsa_loss(pred, truth, lambda_p: float = 5.0, literal_p_mask: bool = False) -> Tensor:
    """Masked L2 loss over (p, x, y, r) maps, averaged over the four terms.

    ``pred`` and ``truth`` are (..., 4, H, W) with channel order p, x, y, r and
    ``p`` already in [0, 1]. Regression terms average over cells holding a
    ground-truth center and are 0 when there are none. The p term averages
    over the full grid, or over the mask when ``literal_p_mask`` is set.
    """
    pred, truth = _wrap(pred), _wrap(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    mask = (truth.data[..., 0:1, :, :] > 0.5).astype(pred.dtype)
    count = float(mask.sum())
    sq = (pred - truth) * (pred - truth)
    zero = Tensor(np.zeros((), dtype=pred.dtype))
    if count > 0:
        reg = tsum(sq[..., 1:, :, :] * Tensor(mask), axis=(-2, -1))  # (..., 3)
        reg = tsum(reg.reshape(-1, 3), axis=0) * (1.0 / count)
        x_err, y_err, r_err = reg[0], reg[1], reg[2]
    else:
        x_err = y_err = r_err = zero
    p_sq = sq[..., 0:1, :, :]
    if literal_p_mask:
        p_err = lambda_p * tsum(p_sq * Tensor(mask)) * (1.0 / count) if count > 0 else zero
    else:
        p_err = lambda_p * mean(p_sq)
    return (x_err + y_err + r_err + p_err) * 0.25
