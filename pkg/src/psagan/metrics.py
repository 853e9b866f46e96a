"""Paired image quality (PSNR, SSIM) and manifold density/coverage over random embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.signal import convolve2d

from .networks import FeatureNet
from .tensor import Tensor, no_grad

PSNR_INF = float("inf")


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * np.log10(max_val ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than SSIM window {window}")
    w = gaussian_window(window, sigma)[::-1, ::-1]

    def filt(x):
        return convolve2d(x, w, mode="valid")

    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         L: float = 1.0) -> float:
    """Mean Gaussian-windowed SSIM over all fully-contained window positions."""
    return float(ssim_map(a, b, window, sigma, k1, k2, L).mean())


@dataclass
class EmbeddingSet:
    features: np.ndarray
    source: str = "real"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("embeddings must be an N x d matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("embeddings contain non-finite values")

    def __len__(self) -> int:
        return len(self.features)


def make_embedder(seed: int = 0, d: int = 64) -> FeatureNet:
    """Frozen random stack of four stride-2 convolutions, pooled to ``d`` features."""
    return FeatureNet(widths=(16, 32, 64, d), stride=2, seed=seed, dtype=np.float64)


def embed(images: Sequence[np.ndarray], embedder_seed: int = 0, d: int = 64,
          source: str = "real", batch: int = 16) -> EmbeddingSet:
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len({im.shape for im in images}) > 1:
        raise ValueError("embed needs images of uniform extent")
    net = make_embedder(embedder_seed, d)
    rows = []
    with no_grad():
        for start in range(0, len(images), batch):
            x = np.stack(images[start:start + batch])[:, None]
            rows.append(net(Tensor(x), pooled=True).data)
    return EmbeddingSet(np.concatenate(rows) if rows else np.zeros((0, d)), source)


@dataclass(frozen=True)
class ManifoldConfig:
    k: int = 5


class DegenerateManifoldError(ValueError):
    pass


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def knn_radii(real: np.ndarray, k: int) -> np.ndarray:
    """Distance from each real point to its k-th nearest other real point."""
    d = _pairwise(real, real)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, k - 1]


def density_coverage(real: EmbeddingSet, fake: EmbeddingSet,
                     cfg: ManifoldConfig = ManifoldConfig()) -> Tuple[float, float]:
    """k-NN density and coverage of ``fake`` against the manifold of ``real``.

    Balls are closed (membership uses <=). Raises when every real radius is
    zero, since no ball can then be meaningfully formed.
    """
    x, y = real.features, fake.features
    k = cfg.k
    if not (1 <= k < len(x)) or len(y) == 0:
        raise ValueError(f"need 1 <= k < N and a non-empty fake set (k={k}, N={len(x)}, M={len(y)})")
    radii = knn_radii(x, k)
    if np.all(radii == 0):
        raise DegenerateManifoldError("all real embeddings coincide; k-NN radii are zero")
    dist = _pairwise(x, y)   # (N, M)
    inside = dist <= radii[:, None]
    density = inside.sum() / (k * len(y))
    coverage = inside.any(axis=1).mean()
    return float(density), float(coverage)
