"""Synthetic optical/electron-microscope image pairs with exact circle annotations.

The electron-style image has sharp anti-aliased discs with radial shading; the
optical-style image renders the same geometry with a radius-proportional
Gaussian blur, a bright difference-of-Gaussians halo and additive noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .detect import CircleAnnotation, save_annotations


class SceneDensityError(RuntimeError):
    """Raised when particles cannot be placed under the overlap policy."""


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene.

    ``separation`` is the minimal center distance as a fraction of r1 + r2
    (1.0 allows touching, below 1.0 allows overlap). ``margin`` keeps whole
    discs this many pixels inside the frame.
    """

    shape: Tuple[int, int] = (128, 128)
    count: int = 12
    radius_mean: float = 10.0
    radius_std: float = 2.5
    radius_min: float = 2.0
    radius_max: float = float("inf")
    separation: float = 1.15
    margin: float = 1.0
    background: float = 0.08
    blur_frac: float = 0.4
    halo_amp: float = 0.35
    noise_std: float = 0.03
    seed: int = 0
    max_tries: int = 5000


def sample_radii(rng: np.random.Generator, spec: SceneSpec, n: int) -> np.ndarray:
    out = np.empty(0)
    while len(out) < n:
        draw = rng.normal(spec.radius_mean, spec.radius_std, size=2 * n + 4)
        out = np.concatenate([out, draw[(draw >= spec.radius_min) & (draw <= spec.radius_max)]])
    return out[:n]


def place_circles(spec: SceneSpec, rng: np.random.Generator, restarts: int = 20) -> List[CircleAnnotation]:
    """Largest-first rejection sampling; the whole layout restarts when a disc cannot be placed."""
    h, w = spec.shape
    radii = np.sort(sample_radii(rng, spec, spec.count))[::-1]
    if 2 * (radii[0] + spec.margin) >= min(h, w):
        raise SceneDensityError(f"radius {radii[0]:.1f} does not fit in a {h}x{w} frame")
    tries = max(1, spec.max_tries // restarts)
    for _ in range(restarts):
        placed: List[CircleAnnotation] = []
        for r in radii:
            lo = r + spec.margin
            for _ in range(tries):
                x, y = rng.uniform(lo, w - lo), rng.uniform(lo, h - lo)
                if all(np.hypot(x - c.x, y - c.y) >= spec.separation * (r + c.r) for c in placed):
                    placed.append(CircleAnnotation(float(x), float(y), float(r)))
                    break
            else:
                break
        if len(placed) == len(radii):
            return placed
    raise SceneDensityError(f"could not place {spec.count} particles in {h}x{w}")


def _distance_grid(shape, c: CircleAnnotation, pad: float):
    h, w = shape
    y0, y1 = max(0, int(c.y - c.r - pad)), min(h, int(np.ceil(c.y + c.r + pad)) + 1)
    x0, x1 = max(0, int(c.x - c.r - pad)), min(w, int(np.ceil(c.x + c.r + pad)) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.hypot(xx + 0.5 - c.x, yy + 0.5 - c.y)
    return (slice(y0, y1), slice(x0, x1)), d


def disc_coverage(d: np.ndarray, r: float) -> np.ndarray:
    """Anti-aliased disc: linear ramp of one pixel width centred on the boundary."""
    return np.clip(r - d + 0.5, 0.0, 1.0)


def render_sem(shape, circles: Sequence[CircleAnnotation], background: float = 0.08) -> np.ndarray:
    img = np.full(shape, background, dtype=np.float64)
    for c in circles:
        sl, d = _distance_grid(shape, c, 2.0)
        alpha = disc_coverage(d, c.r)
        shade = 0.72 + 0.2 * np.sqrt(np.clip(1.0 - (d / c.r) ** 2, 0.0, 1.0))
        img[sl] = np.maximum(img[sl], background + alpha * (shade - background))
    return img


def render_om(shape, circles: Sequence[CircleAnnotation], rng: np.random.Generator,
              background: float = 0.08, blur_frac: float = 0.4, halo_amp: float = 0.35,
              noise_std: float = 0.03) -> np.ndarray:
    img = np.full(shape, background + 0.1, dtype=np.float64)
    for c in circles:
        sigma = max(blur_frac * c.r, 0.5)
        sl, d = _distance_grid(shape, c, 5 * sigma + 3)
        disc = disc_coverage(d, c.r)
        inner = gaussian_filter(disc, sigma, mode="constant")
        outer = gaussian_filter(disc, 2.5 * sigma, mode="constant")
        halo = np.clip(outer - inner, 0.0, None)
        img[sl] = np.maximum(img[sl], background + 0.1 + 0.45 * inner + halo_amp * halo / (halo.max() + 1e-12))
    img = img + rng.normal(0.0, noise_std, size=shape)
    return np.clip(img, 0.0, 1.0)


def generate_pair(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray, List[CircleAnnotation]]:
    """Return ``(om_image, sem_image, annotations)`` for ``spec`` (values in [0, 1])."""
    rng = np.random.default_rng(spec.seed)
    circles = place_circles(spec, rng) if spec.count > 0 else []
    sem = render_sem(spec.shape, circles, spec.background)
    om = render_om(spec.shape, circles, rng, spec.background, spec.blur_frac, spec.halo_amp,
                   spec.noise_std)
    return om, sem, circles


# radius distributions for the three corpus styles (pixels)
STYLE_SPECS: Dict[str, SceneSpec] = {
    "primary": SceneSpec(radius_mean=11.0, radius_std=2.75),
    "secondary": SceneSpec(radius_mean=8.0, radius_std=1.76, count=16),
    "tertiary": SceneSpec(radius_mean=8.0, radius_std=1.09, count=16),
}


def radial_profile(image: np.ndarray, x: float, y: float, r_max: float, step: float = 0.1,
                   n_angles: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Angle-averaged intensity versus distance from (x, y), bilinear sampling."""
    from .registration import bilinear_sample

    rho = np.arange(0.0, r_max, step)
    theta = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    xs = x - 0.5 + rho[:, None] * np.cos(theta)[None]
    ys = y - 0.5 + rho[:, None] * np.sin(theta)[None]
    vals = bilinear_sample(np.asarray(image, dtype=np.float64), xs.ravel(), ys.ravel())
    return rho, vals.reshape(len(rho), n_angles).mean(axis=1)


def edge_width(image: np.ndarray, c: CircleAnnotation) -> float:
    """10%-90% width of the falling edge of particle ``c``.

    The high level is the mean profile inside half the radius, the low level the
    profile minimum between 0.5 r and 2 r (below any halo); returns ``inf`` when
    the particle is not brighter than its surround.
    """
    rho, prof = radial_profile(image, c.x, c.y, 2.0 * c.r + 0.05)
    outer = rho >= 0.5 * c.r
    hi = prof[~outer].mean()
    lo = prof[outer].min()
    if hi <= lo:
        return float("inf")
    l90, l10 = lo + 0.9 * (hi - lo), lo + 0.1 * (hi - lo)
    i90 = np.nonzero(outer & (prof <= l90))[0][0]
    i10 = np.nonzero((rho >= rho[i90]) & (prof <= l10))[0][0]
    return float(rho[i10] - rho[i90])


def isolated(circles: Sequence[CircleAnnotation], shape, gap: float = 1.0) -> List[int]:
    """Indices of circles whose 2r neighbourhood holds no other particle and fits the frame."""
    h, w = shape
    out = []
    for i, c in enumerate(circles):
        if c.x < 2 * c.r or c.y < 2 * c.r or c.x > w - 2 * c.r or c.y > h - 2 * c.r:
            continue
        if all(np.hypot(c.x - o.x, c.y - o.y) > 2 * c.r + o.r + gap for j, o in enumerate(circles) if j != i):
            out.append(i)
    return out


def misalign(image: np.ndarray, rng: np.random.Generator, max_angle: float = 3.0, max_scale: float = 0.03,
             max_shift: float = 3.0, n_landmarks: int = 6) -> Tuple[np.ndarray, np.ndarray]:
    """Distort ``image`` by a random known affine; return it with landmarks mapping it back.

    Landmark rows are ``(x_src, y_src, x_dst, y_dst)`` with source points in the
    distorted frame and destinations in the frame of ``image``.
    """
    from .registration import AffineTransform, warp_image

    h, w = image.shape
    to_ref = AffineTransform.from_params(rng.uniform(-max_angle, max_angle), 1 + rng.uniform(-max_scale, max_scale),
                                         rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift))
    raw = warp_image(image, to_ref.inverse(), image.shape)
    dst = np.column_stack([rng.uniform(0.1 * w, 0.9 * w, n_landmarks), rng.uniform(0.1 * h, 0.9 * h, n_landmarks)])
    src = to_ref.inverse().apply(dst)
    return raw, np.hstack([src, dst])


def generate_dataset(out_dir: Union[str, Path], styles: Optional[Dict[str, Tuple[SceneSpec, int]]] = None,
                     seed: int = 0, train_fraction: float = 0.8) -> Path:
    """Write om/sem PGM images, annotation CSVs and ``manifest.csv`` (path,kind,split).

    ``styles`` maps a style name to ``(scene spec, number of images)``. Each
    scene also gets a misaligned optical image (``om_raw``) and the landmark
    CSV that registers it onto the electron image.
    """
    from .io import write_image
    from .registration import save_landmarks

    out_dir = Path(out_dir)
    if styles is None:
        styles = {name: (spec, 10) for name, spec in STYLE_SPECS.items()}
    for sub in ("om", "sem", "om_raw", "landmarks", "annotations"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    ss = np.random.SeedSequence(seed)
    for (name, (spec, n)), child in zip(styles.items(), ss.spawn(len(styles))):
        seeds = child.generate_state(n)
        n_train = int(round(train_fraction * n))
        for i in range(n):
            om, sem, circles = generate_pair(replace(spec, seed=int(seeds[i])))
            raw, landmarks = misalign(om, np.random.default_rng(int(seeds[i]) + 1))
            split = "train" if i < n_train else "val"
            stem = f"{name}_{i:04d}"
            for kind, img in (("om", om), ("sem", sem), ("om_raw", raw)):
                rel = f"{kind}/{stem}.pgm"
                write_image(out_dir / rel, img)
                rows.append((rel, kind, split))
            save_landmarks(out_dir / f"landmarks/{stem}.csv", landmarks)
            save_annotations(out_dir / f"annotations/{stem}.csv", circles)
            rows.append((f"landmarks/{stem}.csv", "landmarks", split))
            rows.append((f"annotations/{stem}.csv", "annotations", split))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "kind", "split"])
        w.writerows(rows)
    return manifest


def read_manifest(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
