"""Volumetric data types and the elementwise/labeling primitives shared by
every stage of the pipeline.

Axis convention: a volume with dims ``(W, H, D)`` is stored as a C-ordered
array of shape ``(D, H, W)``, so x varies fastest, then y, then z.  The
value kind is carried by the array dtype:

* ``float32`` -- scalar images and probability maps
* ``uint8``   -- label maps (0 background, 1 kidney, 2 tumor)
* ``bool``    -- binary masks
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

BACKGROUND, KIDNEY, TUMOR = 0, 1, 2

# 26-neighbourhood: every voxel sharing a face, edge or corner.
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)
CONNECTIVITY_6 = ndimage.generate_binary_structure(3, 1)


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Spacing:
    """Voxel size in millimetres along x (width), y (height) and z (depth)."""

    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"spacing {name} must be positive, got {v!r}")

    def as_zyx(self) -> tuple[float, float, float]:
        return (self.dz, self.dy, self.dx)

    @classmethod
    def from_zyx(cls, zyx) -> "Spacing":
        dz, dy, dx = (float(s) for s in zyx)
        return cls(dx, dy, dz)


@dataclass
class Volume:
    """A 3D grid with physical spacing.

    ``data`` has array shape ``(D, H, W)``; ``dims`` reports ``(W, H, D)``.
    """

    data: np.ndarray
    spacing: Spacing = field(default_factory=Spacing)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype == np.bool_ or data.dtype == np.uint8:
            pass
        elif np.issubdtype(data.dtype, np.floating):
            if not np.all(np.isfinite(data)):
                raise ValueError("volume contains non-finite values")
        else:
            raise TypeError(f"unsupported volume dtype {data.dtype}")
        self.data = data

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w = self.data.shape
        return (w, h, d)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def kind(self) -> str:
        if self.data.dtype == np.bool_:
            return "mask"
        if self.data.dtype == np.uint8:
            return "label"
        return "scalar"

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


def scalar_volume(data, spacing: Spacing | None = None) -> Volume:
    return Volume(np.asarray(data, dtype=np.float32), spacing or Spacing())


def prob_map(data, spacing: Spacing | None = None) -> Volume:
    """Wrap ``data`` as a probability map, checking every value lies in [0, 1]."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("probability map values must lie in [0, 1]")
    return Volume(arr, spacing or Spacing())


def label_map(data, spacing: Spacing | None = None) -> Volume:
    arr = np.asarray(data)
    if arr.size and (arr.min() < 0 or arr.max() > TUMOR):
        raise ValueError("labels must be in {0, 1, 2}")
    return Volume(arr.astype(np.uint8), spacing or Spacing())


def binary_mask(data, spacing: Spacing | None = None) -> Volume:
    return Volume(np.asarray(data, dtype=bool), spacing or Spacing())


def _check_threshold(t: float) -> float:
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return t


def binarize(p: Volume, t: float) -> Volume:
    """Foreground wherever ``p >= t`` (inclusive)."""
    t = _check_threshold(t)
    return Volume(p.data >= t, p.spacing)


def connected_components(m: Volume, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label the foreground of ``m`` into connected components.

    Returns an int32 array of shape ``m.shape`` with ids ``1..count`` on the
    foreground and 0 on the background, plus ``count``.
    """
    if connectivity == 26:
        structure = CONNECTIVITY_26
    elif connectivity == 6:
        structure = CONNECTIVITY_6
    else:
        raise ValueError("connectivity must be 6 or 26")
    labels, count = ndimage.label(np.asarray(m.data, dtype=bool), structure=structure)
    return labels.astype(np.int32, copy=False), int(count)


def count_foreground(m: Volume) -> int:
    return int(np.count_nonzero(m.data))


def mask_multiply(a: Volume, b: Volume) -> Volume:
    """Zero ``a`` wherever the mask ``b`` is background; keeps ``a``'s kind."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"dims {a.dims} and {b.dims} differ")
    keep = np.asarray(b.data, dtype=bool)
    out = np.where(keep, a.data, np.zeros((), dtype=a.data.dtype))
    return Volume(out.astype(a.data.dtype, copy=False), a.spacing)
