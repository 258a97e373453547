"""Volume preprocessing: resampling to a common voxel spacing, centred zero
padding to a common grid, downsampling to the network grid and intensity
normalisation, plus median denoising, in-plane rotation augmentation and
overlapping patch extraction/stitching.

Geometry arguments named ``dims`` are ``(W, H, D)``; arguments named
``shape`` are in array order ``(D, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volcore import Spacing, Volume

PAPER_FINAL_DIMS = (256, 256, 128)
PAPER_PATCH = (128, 128, 128)
PAPER_OVERLAP = (96, 96, 96)
# The target spacing is not recoverable from the source figure; this default is arbitrary.
DEFAULT_TARGET_SPACING = Spacing(1.5, 1.5, 3.0)


class PreprocessError(ValueError):
    pass


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _interp_axis(a: np.ndarray, coords: np.ndarray, axis: int, mode: str) -> np.ndarray:
    n = a.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    if mode == "nearest":
        idx = np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1)
        return np.take(a, idx, axis=axis)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = c - i0
    bshape = [1] * a.ndim
    bshape[axis] = len(coords)
    frac = frac.reshape(bshape)
    return np.take(a, i0, axis=axis) * (1.0 - frac) + np.take(a, i1, axis=axis) * frac


def _sample_grid(data: np.ndarray, coords_zyx, mode: str) -> np.ndarray:
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    out = data if mode == "nearest" else data.astype(np.float64)
    for axis, c in enumerate(coords_zyx):
        out = _interp_axis(out, c, axis, mode)
    return out.astype(data.dtype, copy=False)


def _default_mode(v: Volume) -> str:
    return "trilinear" if v.kind == "scalar" else "nearest"


def resample(v: Volume, target: Spacing, mode: str | None = None) -> Volume:
    """Resample ``v`` onto a grid with voxel size ``target``.

    New dims are ``round(old_dims * old_spacing / target)``.  Voxel centres
    are aligned, samples outside the source grid clamp to the edge.
    """
    mode = mode or _default_mode(v)
    old = v.spacing.as_zyx()
    new = target.as_zyx()
    shape = []
    coords = []
    for n, so, sn in zip(v.shape, old, new):
        m = _round_half_up(n * so / sn)
        if m < 1:
            raise PreprocessError(f"resampling {v.dims} to {target} gives an empty axis")
        shape.append(m)
        coords.append((np.arange(m) + 0.5) * (sn / so) - 0.5)
    return Volume(_sample_grid(v.data, coords, mode), target)


def resize_to(v: Volume, dims, mode: str | None = None) -> Volume:
    """Resample ``v`` to exactly ``dims`` (W, H, D), keeping its physical extent."""
    mode = mode or _default_mode(v)
    shape = tuple(int(s) for s in reversed(tuple(dims)))
    if min(shape) < 1:
        raise PreprocessError(f"invalid target dims {dims}")
    if shape == v.shape:
        return Volume(v.data.copy(), v.spacing)
    coords = [(np.arange(m) + 0.5) * (n / m) - 0.5 for n, m in zip(v.shape, shape)]
    spacing = Spacing.from_zyx(s * n / m for s, n, m in zip(v.spacing.as_zyx(), v.shape, shape))
    return Volume(_sample_grid(v.data, coords, mode), spacing)


def pad_to(v: Volume, dims) -> tuple[Volume, list[int]]:
    """Centre ``v`` in a zero-filled grid of ``dims`` (W, H, D).

    Returns the padded volume and offsets ``[x1, x2, y1, y2, z1, z2]``
    (voxels added below/above per axis).  Odd gaps put the extra voxel on
    the high side.
    """
    w, h, d = (int(s) for s in dims)
    offsets = []
    for have, want, axis in zip(v.dims, (w, h, d), "xyz"):
        if want < have:
            raise PreprocessError(f"cannot pad {axis}-axis of size {have} down to {want}")
        lo = (want - have) // 2
        offsets += [lo, want - have - lo]
    x1, x2, y1, y2, z1, z2 = offsets
    data = np.pad(v.data, ((z1, z2), (y1, y2), (x1, x2)))
    return Volume(data, v.spacing), offsets


def crop(v: Volume, offsets) -> Volume:
    """Inverse of :func:`pad_to`."""
    x1, x2, y1, y2, z1, z2 = (int(o) for o in offsets)
    d, h, w = v.shape
    return Volume(v.data[z1:d - z2, y1:h - y2, x1:w - x2].copy(), v.spacing)


def normalize(v: Volume) -> Volume:
    """Shift and scale to zero mean and unit population standard deviation."""
    x = v.data.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if not std > 0:
        raise PreprocessError("cannot normalise a constant volume")
    return Volume(((x - mean) / std).astype(np.float32), v.spacing)


def median_denoise(v: Volume) -> Volume:
    """3x3x3 median filter with replicated borders."""
    return Volume(ndimage.median_filter(v.data, size=3, mode="nearest"), v.spacing)


def augment_rotate(v: Volume, angle: float | None = None, rng: np.random.Generator | None = None,
                   max_angle: float = 1.0, mode: str | None = None) -> Volume:
    """Rotate every axial slice by ``angle`` degrees about the slice centre.

    When ``angle`` is None it is drawn uniformly from ``[-max_angle, max_angle]``
    using ``rng``.  Scalar volumes are interpolated bilinearly in-plane, label
    and mask volumes by nearest neighbour.  Samples falling outside the
    source are filled with the volume minimum.
    """
    if angle is None:
        if rng is None:
            raise ValueError("either angle or rng is required")
        angle = float(rng.uniform(-max_angle, max_angle))
    if abs(angle) > max_angle:
        raise ValueError(f"|angle| {angle} exceeds bound {max_angle}")
    if angle == 0:
        return Volume(v.data.copy(), v.spacing)
    mode = mode or ("bilinear" if v.kind == "scalar" else "nearest")
    d, h, w = v.shape
    dx, dy = v.spacing.dx, v.spacing.dy
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    px = (xx - (w - 1) / 2) * dx
    py = (yy - (h - 1) / 2) * dy
    # inverse map: output position -> source position
    sx = (cos * px + sin * py) / dx + (w - 1) / 2
    sy = (-sin * px + cos * py) / dy + (h - 1) / 2
    tol = 1e-9
    inside = (sx >= -tol) & (sx <= w - 1 + tol) & (sy >= -tol) & (sy <= h - 1 + tol)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    fill = v.data.min()
    if mode == "nearest":
        ix = np.floor(sx + 0.5).astype(np.intp)
        iy = np.floor(sy + 0.5).astype(np.intp)
        out = v.data[:, iy, ix]
    else:
        x0 = np.floor(sx).astype(np.intp)
        y0 = np.floor(sy).astype(np.intp)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = sx - x0
        fy = sy - y0
        a = v.data.astype(np.float64)
        out = ((a[:, y0, x0] * (1 - fx) + a[:, y0, x1] * fx) * (1 - fy)
               + (a[:, y1, x0] * (1 - fx) + a[:, y1, x1] * fx) * fy)
        out = out.astype(v.data.dtype)
    out = np.where(inside[None], out, fill)
    return Volume(out.astype(v.data.dtype, copy=False), v.spacing)


def axis_origins(dim: int, size: int, stride: int) -> list[int]:
    """Patch start positions along one axis; the last patch sits flush with the end."""
    if size > dim:
        raise PreprocessError(f"patch size {size} exceeds volume size {dim}")
    if stride < 1:
        raise PreprocessError("stride must be >= 1")
    origins = list(range(0, dim - size + 1, stride))
    if origins[-1] != dim - size:
        origins.append(dim - size)
    return origins


@dataclass
class PatchGrid:
    """Overlapping patch layout over a volume of array ``shape`` (D, H, W).

    ``patch_shape`` and ``overlap`` are in array order too; stride is
    ``patch_shape - overlap``.
    """

    shape: tuple[int, int, int]
    patch_shape: tuple[int, int, int] = PAPER_PATCH
    overlap: tuple[int, int, int] = PAPER_OVERLAP
    origins: list[tuple[int, int, int]] = field(init=False)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.patch_shape = tuple(int(s) for s in self.patch_shape)
        self.overlap = tuple(int(s) for s in self.overlap)
        per_axis = [axis_origins(n, p, s) for n, p, s in zip(self.shape, self.patch_shape, self.stride)]
        self.origins = [(z, y, x) for z in per_axis[0] for y in per_axis[1] for x in per_axis[2]]

    @property
    def stride(self) -> tuple[int, int, int]:
        return tuple(p - o for p, o in zip(self.patch_shape, self.overlap))

    def slices(self, origin) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch_shape))

    def __len__(self):
        return len(self.origins)


def extract_patches(arr, grid: PatchGrid) -> list[tuple[tuple[int, int, int], np.ndarray]]:
    """Cut ``arr`` (a Volume or an array whose last three axes are D, H, W) into patches."""
    data = arr.data if isinstance(arr, Volume) else np.asarray(arr)
    if tuple(data.shape[-3:]) != grid.shape:
        raise PreprocessError(f"array shape {data.shape[-3:]} does not match grid {grid.shape}")
    return [(o, data[(Ellipsis,) + grid.slices(o)].copy()) for o in grid.origins]


def stitch_patches(patches, shape, spacing: Spacing | None = None) -> Volume:
    """Average overlapping patch predictions back onto a volume of array ``shape``.

    Accumulation follows the order of ``patches``, so the result is
    deterministic.  Raises if any voxel is left uncovered.
    """
    shape = tuple(int(s) for s in shape)
    total = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int32)
    for origin, patch in patches:
        patch = np.asarray(patch)
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch.shape))
        total[sl] += patch
        count[sl] += 1
    if np.any(count == 0):
        raise PreprocessError(f"{int(np.sum(count == 0))} voxels not covered by any patch")
    return Volume((total / count).astype(np.float32), spacing or Spacing())


@dataclass
class PreprocessPlan:
    """Geometry bookkeeping for one case, enough to invert the transform."""

    original_dims: tuple[int, int, int]
    original_spacing: Spacing
    target_spacing: Spacing
    resampled_dims: tuple[int, int, int]
    padded_dims: tuple[int, int, int]
    offsets: list[int]
    final_dims: tuple[int, int, int]
    final_spacing: Spacing
    median: bool = False

    def to_text(self) -> str:
        def sp(s: Spacing):
            return f"{s.dx!r},{s.dy!r},{s.dz!r}"

        def ints(t):
            return ",".join(str(int(i)) for i in t)

        lines = [
            f"original_dims={ints(self.original_dims)}",
            f"original_spacing={sp(self.original_spacing)}",
            f"target_spacing={sp(self.target_spacing)}",
            f"resampled_dims={ints(self.resampled_dims)}",
            f"padded_dims={ints(self.padded_dims)}",
            f"offsets={ints(self.offsets)}",
            f"final_dims={ints(self.final_dims)}",
            f"final_spacing={sp(self.final_spacing)}",
            f"median={int(self.median)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PreprocessPlan":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()

        def ints(k):
            return tuple(int(x) for x in kv[k].split(","))

        def sp(k):
            return Spacing(*(float(x) for x in kv[k].split(",")))

        try:
            return cls(
                original_dims=ints("original_dims"),
                original_spacing=sp("original_spacing"),
                target_spacing=sp("target_spacing"),
                resampled_dims=ints("resampled_dims"),
                padded_dims=ints("padded_dims"),
                offsets=list(ints("offsets")),
                final_dims=ints("final_dims"),
                final_spacing=sp("final_spacing"),
                median=bool(int(kv.get("median", "0"))),
            )
        except KeyError as e:
            raise PreprocessError(f"plan is missing key {e.args[0]!r}") from None


def final_dims_for(divisor: int, base=PAPER_FINAL_DIMS) -> tuple[int, int, int]:
    if divisor < 1 or any(b % divisor for b in base):
        raise PreprocessError(f"divisor {divisor} does not divide {base}")
    return tuple(b // divisor for b in base)


def resampled_dims(v: Volume, target: Spacing) -> tuple[int, int, int]:
    old = (v.spacing.dx, v.spacing.dy, v.spacing.dz)
    new = (target.dx, target.dy, target.dz)
    return tuple(_round_half_up(n * so / sn) for n, so, sn in zip(v.dims, old, new))


def preprocess_case(image: Volume, label: Volume | None, target: Spacing, padded_dims, final_dims,
                    median: bool = False, multiple_of: int = 1):
    """Resample, pad, downsample and normalise one case.

    The label (if any) follows the same geometry with nearest-neighbour
    interpolation.  Returns ``(image, label, plan)``.
    """
    final_dims = tuple(int(s) for s in final_dims)
    if any(s % multiple_of for s in final_dims):
        raise PreprocessError(f"final dims {final_dims} not divisible by {multiple_of}")
    if label is not None and label.shape != image.shape:
        raise PreprocessError("image and label dims differ")
    img = resample(image, target, "trilinear")
    rdims = img.dims
    img, offsets = pad_to(img, padded_dims)
    img = resize_to(img, final_dims, "trilinear")
    if median:
        img = median_denoise(img)
    img = normalize(img)
    lab = None
    if label is not None:
        lab = resample(label, target, "nearest")
        lab, _ = pad_to(lab, padded_dims)
        lab = resize_to(lab, final_dims, "nearest")
    plan = PreprocessPlan(
        original_dims=image.dims,
        original_spacing=image.spacing,
        target_spacing=target,
        resampled_dims=rdims,
        padded_dims=tuple(int(s) for s in padded_dims),
        offsets=offsets,
        final_dims=final_dims,
        final_spacing=img.spacing,
        median=median,
    )
    return img, lab, plan


def invert_to_original(v: Volume, plan: PreprocessPlan, mode: str | None = None) -> Volume:
    """Map a volume at the network grid back onto the case's original grid."""
    mode = mode or _default_mode(v)
    if v.dims != tuple(plan.final_dims):
        raise PreprocessError(f"volume dims {v.dims} do not match plan {plan.final_dims}")
    up = resize_to(v, plan.padded_dims, mode)
    up = Volume(up.data, plan.target_spacing)
    inner = crop(up, plan.offsets)
    out = resize_to(inner, plan.original_dims, mode)
    return Volume(out.data, plan.original_spacing)
