"""SR-PSA dense circle detector: target encoding, decoding, multi-scale inference, training.

Coordinates are continuous pixel units of the original image; pixel (row i,
column j) covers [j, j+1) x [i, i+1). The network sees the image box-downscaled
by ``scale_factor`` and predicts one (p, x, y, r) cell per 4x4 input pixels, so
a cell spans ``4 * scale_factor`` original pixels.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .losses import srpsa_loss
from .optim import Adam
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CELL = 4
SCALE_FACTORS = (4, 8)
MAX_RADIUS = 5.0
MIN_RADIUS_CELLS = 0.375
P_THRESH = 0.5


@dataclass(frozen=True)
class CircleAnnotation:
    x: float
    y: float
    r: float
    p: float = 1.0


@dataclass
class DetectionMaps:
    """(p, x, y, r) grids; x/y hold sub-cell offsets, r holds radius / (cell px * max_radius)."""

    p: np.ndarray
    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    scale_factor: int = 4
    max_radius: float = MAX_RADIUS

    @property
    def shape(self) -> Tuple[int, int]:
        return self.p.shape

    def to_array(self, dtype=np.float32) -> np.ndarray:
        return np.stack([self.p, self.x, self.y, self.r]).astype(dtype)

    @classmethod
    def from_array(cls, arr: np.ndarray, scale_factor: int, max_radius: float = MAX_RADIUS) -> "DetectionMaps":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[0], arr[1], arr[2], arr[3], scale_factor, max_radius)


def grid_shape(image_shape: Tuple[int, int], scale_factor: int) -> Tuple[int, int]:
    h, w = image_shape
    return (h // scale_factor) // CELL, (w // scale_factor) // CELL


def rasterize_targets(annotations: Iterable[CircleAnnotation], image_shape: Tuple[int, int],
                      scale_factor: int = 4, max_radius: float = MAX_RADIUS,
                      min_radius_cells: float = 0.0) -> DetectionMaps:
    """Encode circles as single-cell targets; a shared cell keeps the larger radius.

    Only circles whose radius spans ``[min_radius_cells, max_radius]`` grid cells
    become targets at this scale; smaller ones belong to a finer scale, larger
    ones to a coarser one.
    """
    gh, gw = grid_shape(image_shape, scale_factor)
    maps = DetectionMaps(*(np.zeros((gh, gw)) for _ in range(4)), scale_factor=scale_factor,
                         max_radius=max_radius)
    span = CELL * scale_factor
    for a in annotations:
        gx, gy = a.x / span, a.y / span
        cx = min(max(int(np.floor(gx)), 0), gw - 1)
        cy = min(max(int(np.floor(gy)), 0), gh - 1)
        r_code = a.r / span / max_radius
        if not min_radius_cells <= a.r / span <= max_radius:
            continue
        if maps.p[cy, cx] > 0 and maps.r[cy, cx] >= r_code:
            continue
        maps.p[cy, cx] = 1.0
        maps.x[cy, cx] = np.clip(gx - cx, 0.0, np.nextafter(1.0, 0.0))
        maps.y[cy, cx] = np.clip(gy - cy, 0.0, np.nextafter(1.0, 0.0))
        maps.r[cy, cx] = r_code
    return maps


def _local_maxima(p: np.ndarray) -> np.ndarray:
    """Strict 3x3 maxima; among equal neighbours the first in scan order wins."""
    h, w = p.shape
    padded = np.pad(p, 1, constant_values=-np.inf)
    keep = np.ones_like(p, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (p > nb) if earlier else (p >= nb)
    return keep


def decode_detections(maps: DetectionMaps, p_thresh: float = P_THRESH) -> List[CircleAnnotation]:
    p = np.asarray(maps.p, dtype=np.float64)
    span = CELL * maps.scale_factor
    keep = (p > p_thresh) & _local_maxima(p)
    top = np.nextafter(1.0, 0.0)
    out = []
    for cy, cx in zip(*np.nonzero(keep)):
        ox = float(np.clip(maps.x[cy, cx], 0.0, top))
        oy = float(np.clip(maps.y[cy, cx], 0.0, top))
        r_code = float(np.clip(maps.r[cy, cx], 1e-3, 1.0))
        out.append(CircleAnnotation((cx + ox) * span, (cy + oy) * span,
                                    r_code * maps.max_radius * span, float(p[cy, cx])))
    return out


def multiscale_merge(dets_a: Sequence[CircleAnnotation], dets_b: Sequence[CircleAnnotation]) -> List[CircleAnnotation]:
    """Greedy confidence-ordered union; near-coincident circles collapse to the most confident."""
    pool = sorted(list(dets_a) + list(dets_b), key=lambda d: -d.p)
    kept: List[CircleAnnotation] = []
    for d in pool:
        duplicate = any(np.hypot(d.x - k.x, d.y - k.y) < 0.5 * min(d.r, k.r) for k in kept)
        if not duplicate:
            kept.append(d)
    return kept


# -- annotation files -------------------------------------------------------------
def save_annotations(path: Union[str, Path], circles: Iterable[CircleAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "r", "p"])
        for c in circles:
            w.writerow([f"{c.x:.6f}", f"{c.y:.6f}", f"{c.r:.6f}", f"{c.p:.6f}"])


def load_annotations(path: Union[str, Path]) -> List[CircleAnnotation]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["x", "y", "r", "p"]:
            raise ValueError(f"{path}: annotation header must be x,y,r,p")
        return [CircleAnnotation(float(r["x"]), float(r["y"]), float(r["r"]), float(r["p"]))
                for r in reader]


# -- training and inference ----------------------------------------------------------
def downscale_image(image: np.ndarray, factor: int) -> np.ndarray:
    h, w = image.shape
    h2, w2 = (h // (factor * CELL)) * factor * CELL, (w // (factor * CELL)) * factor * CELL
    crop = np.asarray(image[:h2, :w2], dtype=np.float32)
    return crop.reshape(h2 // factor, factor, w2 // factor, factor).mean(axis=(1, 3))


def dihedral(image: np.ndarray, circles: Sequence[CircleAnnotation], k: int
             ) -> Tuple[np.ndarray, List[CircleAnnotation]]:
    """One of the 8 rotations/flips (k in 0..7) applied to an image and its circles."""
    out = [CircleAnnotation(c.x, c.y, c.r, c.p) for c in circles]
    for _ in range(k % 4):
        w = image.shape[1]
        image = np.rot90(image)
        out = [CircleAnnotation(c.y, w - c.x, c.r, c.p) for c in out]
    if k >= 4:
        w = image.shape[1]
        image = image[:, ::-1]
        out = [CircleAnnotation(w - c.x, c.y, c.r, c.p) for c in out]
    return np.ascontiguousarray(image), out


def prepare_scales(samples: Sequence[Tuple[np.ndarray, Sequence[CircleAnnotation]]],
                   scale_factors=SCALE_FACTORS, max_radius: float = MAX_RADIUS,
                   min_radius_cells: float = MIN_RADIUS_CELLS) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Downscaled images (n, 1, h, w) and target maps (n, 4, gh, gw) per scale factor."""
    out = {}
    for sf in scale_factors:
        imgs, targets = [], []
        for image, circles in samples:
            imgs.append(downscale_image(image, sf)[None])
            targets.append(rasterize_targets(circles, image.shape, sf, max_radius, min_radius_cells).to_array())
        out[sf] = (np.stack(imgs).astype(np.float32), np.stack(targets).astype(np.float32))
    return out


@dataclass
class DetectorTrainConfig:
    epochs: int = 30
    batch: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-6
    lambda_p: float = 5.0
    max_radius: float = MAX_RADIUS
    min_radius_cells: float = MIN_RADIUS_CELLS
    scale_factors: Tuple[int, ...] = SCALE_FACTORS
    seed: int = 0
    literal_p_mask: bool = False
    augment: bool = True


@dataclass
class TrainResult:
    state: Dict[str, np.ndarray]
    history: List[Tuple[int, float, float]] = field(default_factory=list)
    best_val: float = float("inf")


def _scale_loss(net, data, idx, cfg) -> Tensor:
    losses = [srpsa_loss(net.predict(Tensor(data[sf][0][idx])), Tensor(data[sf][1][idx]),
                         cfg.lambda_p, cfg.literal_p_mask) for sf in cfg.scale_factors]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def evaluate_detector_loss(net, data, cfg: DetectorTrainConfig, batch: int = 16) -> float:
    n = len(next(iter(data.values()))[0])
    total = 0.0
    with no_grad():
        for start in range(0, n, batch):
            idx = np.arange(start, min(n, start + batch))
            total += _scale_loss(net, data, idx, cfg).item() * len(idx)
    return total / n


def train_detector(train_samples, net, cfg: DetectorTrainConfig = DetectorTrainConfig(),
                   val_samples=None, optimizer: Optional[Adam] = None, log_every: int = 0) -> TrainResult:
    """Fit ``net`` on both scales of every sample; return the best-validation state.

    ``history`` holds (step, train_loss, val_loss) per epoch, with step 0 being
    the initialization.
    """
    if len(train_samples) == 0:
        raise ValueError("empty detector dataset")
    rng = np.random.default_rng(cfg.seed)
    n = len(train_samples)
    n_views = 8 if cfg.augment else 1
    views = [dihedral(image, circles, k) for k in range(n_views) for image, circles in train_samples]
    train = prepare_scales(views, cfg.scale_factors, cfg.max_radius, cfg.min_radius_cells)
    plain = {sf: (imgs[:n], maps[:n]) for sf, (imgs, maps) in train.items()}
    val = prepare_scales(val_samples, cfg.scale_factors, cfg.max_radius, cfg.min_radius_cells) if val_samples else plain
    opt = optimizer or Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    net.train()
    best_val = evaluate_detector_loss(net, val, cfg)
    result = TrainResult(state={k: v.copy() for k, v in net.state_dict().items()}, best_val=best_val)
    result.history.append((0, evaluate_detector_loss(net, plain, cfg), best_val))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        view = rng.integers(n_views, size=n)
        running = 0.0
        for start in range(0, n, cfg.batch):
            chosen = order[start:start + cfg.batch]
            idx = np.sort(chosen + n * view[chosen])
            opt.zero_grad()
            loss = _scale_loss(net, train, idx, cfg)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite detector loss at step {step}")
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            step += 1
        val_loss = evaluate_detector_loss(net, val, cfg)
        result.history.append((step, running / n, val_loss))
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d train %.5f val %.5f", epoch + 1, running / n, val_loss)
        if val_loss < result.best_val:
            result.best_val = val_loss
            result.state = {k: v.copy() for k, v in net.state_dict().items()}
    net.load_state_dict(result.state)
    return result


def predict_maps(net, image: np.ndarray, scale_factor: int, max_radius: float = MAX_RADIUS) -> DetectionMaps:
    small = downscale_image(image, scale_factor)
    with no_grad():
        out = net.predict(Tensor(small[None, None])).data[0]
    return DetectionMaps.from_array(out, scale_factor, max_radius)


def detect(image: np.ndarray, net, p_thresh: float = P_THRESH, scale_factors=SCALE_FACTORS,
           max_radius: float = MAX_RADIUS) -> List[CircleAnnotation]:
    """Run the detector at each downscale and merge the decoded circles."""
    if net is None or not hasattr(net, "predict"):
        raise ValueError("detect needs a loaded SR-PSA network")
    net.eval()
    merged: List[CircleAnnotation] = []
    for sf in scale_factors:
        if min(image.shape) < sf * CELL:
            continue
        merged = multiscale_merge(merged, decode_detections(predict_maps(net, image, sf, max_radius), p_thresh))
    return merged


def match_detections(truth: Sequence[CircleAnnotation], found: Sequence[CircleAnnotation],
                     center_tol: float = 2.0, radius_rel_tol: float = 0.15) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching by center distance under both tolerances."""
    pairs = []
    for i, t in enumerate(truth):
        for j, f in enumerate(found):
            d = np.hypot(t.x - f.x, t.y - f.y)
            if d <= center_tol and abs(f.r - t.r) <= radius_rel_tol * t.r:
                pairs.append((d, i, j))
    pairs.sort()
    used_t, used_f, matches = set(), set(), []
    for _, i, j in pairs:
        if i not in used_t and j not in used_f:
            used_t.add(i)
            used_f.add(j)
            matches.append((i, j))
    return matches
