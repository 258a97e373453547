"""Synthetic kidney/tumor phantoms with exact ground truth.

Each phantom holds one or two ellipsoidal "kidneys" with a brighter
spherical "tumor" embedded in one of them, plus a dim ellipsoidal
distractor that is not labelled, all on a noisy background.
"""

from __future__ import annotations

import numpy as np

from .volcore import KIDNEY, TUMOR, Spacing, Volume

KIDNEY_LEVEL = 1.0
TUMOR_LEVEL = 2.0
DISTRACTOR_LEVEL = 0.5


def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def make_phantom(shape, rng: np.random.Generator, spacing: Spacing | None = None,
                 noise: float = 0.1) -> tuple[Volume, Volume]:
    """One phantom of array ``shape`` (D, H, W); returns ``(image, label)``."""
    d, h, w = shape
    label = np.zeros(shape, dtype=np.uint8)
    n_kidneys = int(rng.integers(1, 3))
    sides = [0, 1] if n_kidneys == 2 else [int(rng.integers(0, 2))]
    kidneys = []
    for side in sides:
        radii = (d * rng.uniform(0.22, 0.3), h * rng.uniform(0.16, 0.22), w * rng.uniform(0.13, 0.18))
        cx = w * (0.28 if side == 0 else 0.72) + rng.uniform(-0.04, 0.04) * w
        center = (d / 2 - 0.5 + rng.uniform(-0.08, 0.08) * d,
                  h / 2 - 0.5 + rng.uniform(-0.12, 0.12) * h,
                  cx - 0.5)
        mask = _ellipsoid(shape, center, radii)
        label[mask] = KIDNEY
        kidneys.append((center, radii))
    center, radii = kidneys[int(rng.integers(0, len(kidneys)))]
    r_t = min(radii) * rng.uniform(0.45, 0.65)
    offset = [rng.uniform(-0.35, 0.35) * r for r in radii]
    t_center = tuple(c + o for c, o in zip(center, offset))
    tumor = _ellipsoid(shape, t_center, (r_t, r_t, r_t)) & (label == KIDNEY)
    if not tumor.any():
        tumor = _ellipsoid(shape, center, (r_t, r_t, r_t))
    label[tumor] = TUMOR

    image = np.zeros(shape, dtype=np.float64)
    image[label == KIDNEY] = KIDNEY_LEVEL
    image[label == TUMOR] = TUMOR_LEVEL
    # unlabelled distractor below the kidneys
    distractor = _ellipsoid(shape, (d / 2 - 0.5, h * 0.85, w / 2 - 0.5), (d * 0.2, h * 0.1, w * 0.12))
    image[distractor & (label == 0)] = DISTRACTOR_LEVEL
    image += rng.normal(0.0, noise, size=shape)
    spacing = spacing or Spacing()
    return Volume(image.astype(np.float32), spacing), Volume(label, spacing)


def make_phantom_set(n: int, shape, seed: int = 0, spacing: Spacing | None = None,
                     noise: float = 0.1) -> list[tuple[str, Volume, Volume]]:
    rng = np.random.default_rng(seed)
    return [(f"phantom_{i:03d}",) + make_phantom(shape, rng, spacing, noise) for i in range(n)]
