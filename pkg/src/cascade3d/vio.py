"""On-disk formats: MVOL1 volumes, name-keyed parameter files, case
manifests, fold splits and metric CSVs.

MVOL1 layout (all little-endian)::

    offset  size  field
    0       5     magic  b"MVOL1"
    5       1     endianness tag  b"<"
    6       1     kind  0 = f32 scalar, 1 = u8 label, 2 = u8 mask
    7       1     reserved (0)
    8       12    dims W, H, D as uint32
    20      24    spacing dx, dy, dz as float64
    44      ...   payload, W*H*D elements, x fastest then y then z
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volcore import Spacing, Volume

MAGIC = b"MVOL1"
_HEADER = struct.Struct("<5scBB3I3d")
MAX_VOXELS = 2 ** 31

_KINDS = {0: ("scalar", np.dtype("<f4")), 1: ("label", np.dtype("u1")), 2: ("mask", np.dtype("u1"))}
_KIND_CODES = {"scalar": 0, "label": 1, "mask": 2}


class VolumeFormatError(ValueError):
    """Malformed MVOL1 file; ``code`` names the failure."""

    BAD_MAGIC = "bad magic"
    BAD_ENDIAN = "bad endianness tag"
    BAD_KIND = "bad value kind"
    TRUNCATED = "truncated payload"
    DIM_OVERFLOW = "dim overflow"
    TRAILING = "trailing bytes"

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_volume(v: Volume) -> bytes:
    code = _KIND_CODES[v.kind]
    dtype = _KINDS[code][1]
    w, h, d = v.dims
    header = _HEADER.pack(MAGIC, b"<", code, 0, w, h, d, v.spacing.dx, v.spacing.dy, v.spacing.dz)
    return header + np.ascontiguousarray(v.data, dtype=dtype).tobytes()


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(VolumeFormatError.BAD_MAGIC)
    if len(buf) < _HEADER.size:
        raise VolumeFormatError(VolumeFormatError.TRUNCATED, "header incomplete")
    _, endian, code, _, w, h, d, dx, dy, dz = _HEADER.unpack_from(buf)
    if endian != b"<":
        raise VolumeFormatError(VolumeFormatError.BAD_ENDIAN, repr(endian))
    if code not in _KINDS:
        raise VolumeFormatError(VolumeFormatError.BAD_KIND, str(code))
    kind, dtype = _KINDS[code]
    n = w * h * d
    if min(w, h, d) == 0 or n > MAX_VOXELS:
        raise VolumeFormatError(VolumeFormatError.DIM_OVERFLOW, f"{w}x{h}x{d}")
    need = _HEADER.size + n * dtype.itemsize
    if len(buf) < need:
        raise VolumeFormatError(VolumeFormatError.TRUNCATED, f"expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise VolumeFormatError(VolumeFormatError.TRAILING, f"{len(buf) - need} extra bytes")
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=_HEADER.size).reshape(d, h, w)
    if kind == "scalar":
        data = data.astype(np.float32)
    elif kind == "mask":
        data = data.astype(bool)
    else:
        data = data.copy()
    return Volume(data, Spacing(dx, dy, dz))


def write_volume(v: Volume, path) -> None:
    atomic_write(path, encode_volume(v))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


# -- parameters -------------------------------------------------------------

PARAM_MAGIC = b"MPAR1"
_DTYPES = {"<f4": 0, "<f8": 1}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class ParamFormatError(ValueError):
    pass


class ArchitectureMismatch(ValueError):
    def __init__(self, block: str, detail: str):
        self.block = block
        super().__init__(f"parameter block {block!r}: {detail}")


def save_params(params: dict[str, np.ndarray], path, arch: str = "") -> None:
    """Write name-keyed arrays (in the given order) plus an architecture text."""
    out = io.BytesIO()
    out.write(PARAM_MAGIC)
    arch_b = arch.encode()
    out.write(struct.pack("<I", len(arch_b)))
    out.write(arch_b)
    out.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        value = np.asarray(value)
        key = value.dtype.newbyteorder("<").str
        if key not in _DTYPES:
            raise ParamFormatError(f"unsupported dtype {value.dtype} for {name}")
        nb = name.encode()
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<BB", _DTYPES[key], value.ndim))
        out.write(struct.pack(f"<{value.ndim}I", *value.shape))
        out.write(np.ascontiguousarray(value, dtype=key).tobytes())
    atomic_write(path, out.getvalue())


def load_params(path) -> tuple[dict[str, np.ndarray], str]:
    buf = Path(path).read_bytes()
    if buf[:5] != PARAM_MAGIC:
        raise ParamFormatError("bad magic")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ParamFormatError("truncated parameter file")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (alen,) = take("<I")
    arch = buf[pos:pos + alen].decode()
    pos += alen
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        dtype = np.dtype(_DTYPE_CODES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(buf):
            raise ParamFormatError(f"truncated data for block {name!r}")
        params[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise ParamFormatError("trailing bytes after last block")
    return params, arch


def assign_params(blocks, params: dict[str, np.ndarray]) -> None:
    """Copy ``params`` into ParamBlocks, checking names and shapes in block order."""
    blocks = list(blocks)
    for block in blocks:
        if block.name not in params:
            raise ArchitectureMismatch(block.name, "missing from file")
        value = params[block.name]
        if value.shape != block.value.shape:
            raise ArchitectureMismatch(block.name, f"shape {value.shape} does not match {block.value.shape}")
    names = {b.name for b in blocks}
    extra = [n for n in params if n not in names]
    if extra:
        raise ArchitectureMismatch(extra[0], "not present in the architecture")
    for block in blocks:
        block.value[...] = params[block.name]


# -- manifests and folds ----------------------------------------------------

MANIFEST_HEADER = "# cascade3d-manifest v1"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_path: Path
    label_path: Path | None


def read_manifest(path, check_files: bool = True) -> list[CaseRecord]:
    """Parse ``case_id<TAB>image<TAB>label`` lines; relative paths resolve
    against the manifest's directory.  ``#`` lines are comments."""
    path = Path(path)
    base = path.parent
    records = []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ManifestError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        case_id = parts[0].strip()
        if case_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate case id {case_id!r}")
        seen.add(case_id)
        image = base / parts[1].strip()
        label = base / parts[2].strip() if len(parts) == 3 and parts[2].strip() else None
        if check_files:
            for p in (image, label):
                if p is not None and not p.exists():
                    raise ManifestError(f"{path}:{lineno}: missing file {p}")
        records.append(CaseRecord(case_id, image, label))
    return records


def write_manifest(records, path) -> None:
    path = Path(path)
    lines = [MANIFEST_HEADER]
    for r in records:
        def rel(p):
            p = Path(p)
            try:
                return str(p.relative_to(path.parent))
            except ValueError:
                return str(p)
        fields = [r.case_id, rel(r.image_path)] + ([rel(r.label_path)] if r.label_path is not None else [])
        lines.append("\t".join(fields))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def splitmix64(seed: int):
    """Generator of 64-bit outputs of the splitmix64 sequence."""
    mask = (1 << 64) - 1
    state = seed & mask
    while True:
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        yield z ^ (z >> 31)


@dataclass
class FoldSplit:
    k: int
    seed: int
    assignment: dict[str, int]

    def fold(self, i: int) -> list[str]:
        return sorted(c for c, f in self.assignment.items() if f == i)


def split_folds(case_ids, k: int = 5, seed: int = 0) -> FoldSplit:
    """Sort ids, shuffle with a seeded splitmix64 Fisher-Yates, deal round-robin."""
    ids = sorted({getattr(c, "case_id", c) for c in case_ids})
    if k < 2:
        raise ValueError("fold count must be >= 2")
    if not ids:
        raise ValueError("no cases to split")
    if k > len(ids):
        raise ValueError(f"{k} folds for only {len(ids)} cases")
    rand = splitmix64(seed)
    for i in range(len(ids) - 1, 0, -1):
        j = next(rand) % (i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    return FoldSplit(k, seed, {c: n % k for n, c in enumerate(ids)})


# -- metrics ----------------------------------------------------------------

METRICS_HEADER = ["case_id", "region", "dsc", "both_empty"]


def write_metrics(rows, path) -> None:
    """Rows of ``(case_id, region, dsc, both_empty)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for case_id, region, value, empty in rows:
        w.writerow([case_id, region, f"{value:.6f}", int(bool(empty))])
    atomic_write(path, buf.getvalue().encode())


def read_metrics(path) -> list[tuple[str, str, float, bool]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(r["case_id"], r["region"], float(r["dsc"]), bool(int(r.get("both_empty", 0) or 0)))
                for r in reader]
