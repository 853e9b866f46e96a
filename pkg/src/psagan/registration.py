"""Landmark-based affine registration of optical images onto electron-microscope coordinates."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np


class DegenerateLandmarksError(ValueError):
    pass


@dataclass
class AffineTransform:
    """2x3 matrix ``[[a, b, tx], [c, d, ty]]`` mapping source (x, y) to destination."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.linear))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.linear.T + self.matrix[:, 2]

    def inverse(self) -> "AffineTransform":
        if abs(self.determinant) < 1e-12:
            raise DegenerateLandmarksError("affine transform is not invertible")
        inv = np.linalg.inv(self.linear)
        return AffineTransform(np.hstack([inv, -inv @ self.matrix[:, 2:3]]))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(2, 3))

    @classmethod
    def from_params(cls, angle_deg: float = 0.0, scale: float = 1.0, tx: float = 0.0,
                    ty: float = 0.0) -> "AffineTransform":
        a = np.deg2rad(angle_deg)
        rot = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        return cls(np.hstack([rot, [[tx], [ty]]]))


def load_landmarks(path: Union[str, Path]) -> np.ndarray:
    """Read ``x_src,y_src,x_dst,y_dst`` rows into an (n, 4) array."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["x_src", "y_src", "x_dst", "y_dst"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
            raise ValueError(f"landmark header must be {','.join(expected)}")
        rows = [[float(r[k]) for k in expected] for r in reader]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def save_landmarks(path: Union[str, Path], landmarks: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_src", "y_src", "x_dst", "y_dst"])
        for row in np.asarray(landmarks).reshape(-1, 4):
            w.writerow([repr(float(v)) for v in row])


def estimate_affine(landmarks) -> AffineTransform:
    """Least-squares affine map from source to destination landmarks.

    Raises
    ------
    DegenerateLandmarksError
        Fewer than three pairs, or collinear source points.
    """
    lm = np.asarray(landmarks, dtype=np.float64).reshape(-1, 4)
    if len(lm) < 3:
        raise DegenerateLandmarksError("need at least 3 landmark pairs")
    src, dst = lm[:, :2], lm[:, 2:]
    design = np.hstack([src, np.ones((len(lm), 1))])
    # scale-aware rank test on the centered source points
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= 1e-10 * sv[0]:
        raise DegenerateLandmarksError("source landmarks are collinear")
    coef, *_ = np.linalg.lstsq(design, dst, rcond=None)
    return AffineTransform(coef.T)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional (x, y); points outside [0, w-1] x [0, h-1] give 0."""
    h, w = image.shape
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x = np.clip(xs, 0, w - 1)
    y = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return np.where(inside, top * (1 - fy) + bottom * fy, 0.0)


def warp_image(image: np.ndarray, transform: AffineTransform, out_shape: Tuple[int, int]) -> np.ndarray:
    """Backward-warp ``image`` so that output pixel q shows input at ``transform^-1(q)``."""
    inv = transform.inverse()
    rows, cols = np.indices(out_shape, dtype=np.float64)
    pts = np.stack([cols.ravel(), rows.ravel()], axis=1)
    src = inv.apply(pts)
    out = bilinear_sample(np.asarray(image, dtype=np.float64), src[:, 0], src[:, 1])
    return out.reshape(out_shape)
