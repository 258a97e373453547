"""Turning the three probability maps into a label map: adaptive
thresholding with region-growing refinement, whole/tumor merging, gating by
the localisation mask, and probability-map ensembling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .preprocess import resize_to
from .volcore import (
    DimensionMismatch,
    KIDNEY,
    TUMOR,
    Volume,
    binarize,
    connected_components,
    count_foreground,
)

PAPER_VOLUME_VOXELS = 256 * 256 * 128


@dataclass(frozen=True)
class ThresholdPolicy:
    global_t: float = 0.5
    whole_fallback: float = 0.1
    whole_low: float = 0.4
    tumor_empty: float = 0.1
    tumor_small: float = 0.2
    tumor_default: float = 0.3
    small_cutoff: int = 100
    loc_t: float = 0.5

    def __post_init__(self):
        for name in ("global_t", "whole_fallback", "whole_low", "tumor_empty", "tumor_small",
                     "tumor_default", "loc_t"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name}={v} must lie in (0, 1)")
        for name in ("whole_fallback", "whole_low", "tumor_empty", "tumor_small", "tumor_default"):
            if getattr(self, name) >= self.global_t:
                raise ValueError(f"{name} must be below the global threshold")
        if self.small_cutoff < 1:
            raise ValueError("small_cutoff must be >= 1")

    @classmethod
    def scaled(cls, volume_voxels: int, **overrides) -> "ThresholdPolicy":
        """Policy whose small-tumor cutoff scales with volume size relative to 256x256x128."""
        cutoff = max(1, math.ceil(100 * volume_voxels / PAPER_VOLUME_VOXELS))
        return cls(**{"small_cutoff": cutoff, **overrides})


def grow_from(seed: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """``seed`` plus every connected component of ``candidates`` touching it."""
    labels, count = connected_components(Volume(candidates))
    if count == 0:
        return seed.copy()
    hit = np.unique(labels[seed & (labels > 0)])
    return seed | np.isin(labels, hit[hit > 0])


def region_grow_refine(p: Volume, t_high: float, t_low: float, seed: Volume | None = None) -> Volume:
    """Expand the high-threshold mask by low-threshold regions connected to it.

    ``A = p >= t_high`` (or ``seed`` when given), ``B = p >= t_low``; the
    result is ``A`` merged with every 26-connected component of ``B`` that
    intersects ``A``.
    """
    if not t_low < t_high:
        raise ValueError(f"t_low={t_low} must be below t_high={t_high}")
    a = binarize(p, t_high).data if seed is None else np.asarray(seed.data, dtype=bool)
    b = binarize(p, t_low).data
    return Volume(grow_from(a, b), p.spacing)


def upsample_loc(loc: Volume, shape) -> Volume:
    dims = tuple(reversed(tuple(shape)))
    return resize_to(loc, dims, "nearest") if loc.shape != tuple(shape) else loc


def postprocess_case(whole: Volume, tumor: Volume, loc: Volume, policy: ThresholdPolicy | None = None,
                     branches: dict | None = None) -> Volume:
    """Label map from whole/tumor/localisation probability maps.

    ``loc`` may sit on a coarser grid; it is thresholded at
    ``policy.loc_t`` and nearest-upsampled to the image grid.  If
    ``branches`` is a dict, the names of the branches taken are recorded in
    it (keys ``"whole"`` and ``"tumor"``).
    """
    policy = policy or ThresholdPolicy()
    if whole.shape != tumor.shape:
        raise DimensionMismatch(f"whole {whole.dims} and tumor {tumor.dims} differ")
    T = policy.global_t

    whole_mask = binarize(whole, T)
    tumor_mask = binarize(tumor, T)

    if count_foreground(whole_mask) == 0:
        whole_mask = binarize(whole, policy.whole_fallback)
        whole_branch = "empty"
    else:
        whole_mask = region_grow_refine(whole, T, policy.whole_low, seed=whole_mask)
        whole_branch = "refine"

    n_tumor = count_foreground(tumor_mask)
    if n_tumor == 0:
        tumor_mask = binarize(tumor, policy.tumor_empty)
        tumor_branch = "empty"
        if count_foreground(tumor_mask) == 0:
            tumor_mask = Volume(whole_mask.data.copy(), whole.spacing)
            tumor_branch = "still_empty"
        tumor_mask = region_grow_refine(tumor, T, policy.tumor_empty, seed=tumor_mask)
    elif n_tumor < policy.small_cutoff:
        tumor_mask = region_grow_refine(tumor, T, policy.tumor_small, seed=tumor_mask)
        tumor_branch = "small"
    else:
        tumor_mask = region_grow_refine(tumor, T, policy.tumor_default, seed=tumor_mask)
        tumor_branch = "default"

    labels = np.zeros(whole.shape, dtype=np.uint8)
    labels[whole_mask.data] = KIDNEY
    labels[tumor_mask.data] = TUMOR

    loc_up = upsample_loc(loc, whole.shape)
    if loc_up.shape != whole.shape:
        raise DimensionMismatch(f"localisation map {loc_up.dims} does not match {whole.dims}")
    labels[~binarize(loc_up, policy.loc_t).data] = 0

    if branches is not None:
        branches["whole"] = whole_branch
        branches["tumor"] = tumor_branch
    return Volume(labels, whole.spacing)


def threshold_labels(whole: Volume, tumor: Volume, t: float = 0.5) -> Volume:
    """Plain thresholding without refinement or localisation gating."""
    labels = np.zeros(whole.shape, dtype=np.uint8)
    labels[binarize(whole, t).data] = KIDNEY
    labels[binarize(tumor, t).data] = TUMOR
    return Volume(labels, whole.spacing)


def ensemble_average(maps: list[Volume]) -> Volume:
    """Voxelwise mean of M probability maps.

    Summation is done in float64 over the maps sorted by content, so the
    result does not depend on the order of ``maps``.
    """
    if not maps:
        raise ValueError("ensemble of zero maps")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise DimensionMismatch(f"map dims {m.dims} differ from {maps[0].dims}")
    stack = np.sort(np.stack([m.data.astype(np.float64) for m in maps]), axis=0)
    mean = stack.sum(axis=0) / len(maps)
    return Volume(np.clip(mean, 0.0, 1.0).astype(np.float32), maps[0].spacing)
