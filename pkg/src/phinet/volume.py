"""Volume ingestion and preprocessing.

The preprocessing chain is, in order: foreground field-of-view crop (neck
removal), trilinear resampling to isotropic 2 mm voxels, linear intensity
scaling so the 99th percentile becomes 1, and zero pad/crop to a fixed cube.

Axis convention: a :class:`Volume` holds data shaped (D, H, W) in C order,
which is exactly NIfTI's x-fastest on-disk order with D = z, H = y, W = x.
Axis 0 (z) is the inferior -> superior axis; higher index is more superior.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np


class NiftiFormatError(ValueError):
    """Malformed or unsupported NIfTI file."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"voxel spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------- NIfTI-1

_DTYPES = {4: np.dtype("i2"), 16: np.dtype("f4"), 64: np.dtype("f8")}
_HDR_SIZE = 348
_VOX_OFFSET = 352


def read_nifti(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 volume (``.nii``)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HDR_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack("<i", raw[:4])[0] == _HDR_SIZE:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == _HDR_SIZE:
        end = ">"
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiFormatError(f"{path}: detached header/image pairs (ni1) are not supported")
    if magic != b"n+1\x00":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack(end + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(end + "2h", raw[70:74])
    pixdim = struct.unpack(end + "8f", raw[76:108])
    vox_offset = struct.unpack(end + "f", raw[108:112])[0]
    slope, inter = struct.unpack(end + "2f", raw[112:120])
    if dim[0] < 3 or any(d < 1 for d in dim[1:4]) or any(d != 1 for d in dim[4:dim[0] + 1]):
        raise NiftiFormatError(f"{path}: only 3D volumes are supported (dim={dim})")
    if datatype not in _DTYPES:
        raise NiftiFormatError(f"{path}: unsupported datatype code {datatype}")
    dt = _DTYPES[datatype].newbyteorder(end)
    if bitpix != dt.itemsize * 8:
        raise NiftiFormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    nx, ny, nz = dim[1:4]
    spacing = (pixdim[3], pixdim[2], pixdim[1])
    if any(not s > 0 for s in spacing):
        raise NiftiFormatError(f"{path}: non-positive pixdim {pixdim[1:4]}")
    offset = int(vox_offset)
    nbytes = nx * ny * nz * dt.itemsize
    if offset < _HDR_SIZE or len(raw) - offset != nbytes:
        raise NiftiFormatError(
            f"{path}: payload is {len(raw) - offset} bytes, header implies {nbytes}"
        )
    data = np.frombuffer(raw, dtype=dt, count=nx * ny * nz, offset=offset).reshape(nz, ny, nx)
    work = np.float64 if datatype == 64 else np.float32
    data = data.astype(work)
    if slope != 0 and not (slope == 1 and inter == 0):
        data = data * work(slope) + work(inter)
    meta = {"source": str(path), "datatype": int(datatype)}
    return Volume(data, spacing, meta)


def nifti_header(shape: Sequence[int], spacing: Sequence[float]) -> bytes:
    """348-byte little-endian header for a float32 volume of (D, H, W) ``shape``."""
    nz, ny, nx = (int(s) for s in shape)
    sz, sy, sx = (float(s) for s in spacing)
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 10  # xyzt_units: mm + s
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(volume: Volume, path) -> None:
    """Write ``volume`` as little-endian float32 NIfTI-1 with vox_offset 352."""
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(nifti_header(volume.shape, volume.spacing))
        fh.write(b"\x00" * (_VOX_OFFSET - _HDR_SIZE))
        fh.write(payload)


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestItem:
    path: str
    label: int
    split: Optional[str] = None
    subject: Optional[str] = None


@dataclass
class DatasetManifest:
    classes: List[str]
    items: List[ManifestItem]
    root: Optional[Path] = None

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a manifest needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        paths = [it.path for it in self.items]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        for it in self.items:
            if not 0 <= it.label < len(self.classes):
                raise ValueError(f"label {it.label} out of range for {it.path}")
        present = {it.label for it in self.items}
        missing = [c for i, c in enumerate(self.classes) if i not in present]
        if missing:
            raise ValueError(f"classes without items: {missing}")

    def resolve(self, item: ManifestItem) -> Path:
        p = Path(item.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def subset(self, split: str) -> List[ManifestItem]:
        return [it for it in self.items if it.split == split]

    def counts(self, split: Optional[str] = None) -> List[int]:
        items = self.items if split is None else self.subset(split)
        return [sum(it.label == k for it in items) for k in range(len(self.classes))]

    def to_dict(self) -> dict:
        items = []
        for it in self.items:
            d = {"path": it.path, "label": it.label}
            if it.split is not None:
                d["split"] = it.split
            if it.subject is not None:
                d["subject"] = it.subject
            items.append(d)
        return {"classes": list(self.classes), "items": items}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        unknown = set(doc) - {"classes", "items"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        items = []
        for d in doc["items"]:
            extra = set(d) - {"path", "label", "split", "subject"}
            if extra:
                raise ValueError(f"unknown manifest item keys: {sorted(extra)}")
            items.append(ManifestItem(d["path"], int(d["label"]), d.get("split"), d.get("subject")))
        return cls(list(doc["classes"]), items, root=path.parent)


# ---------------------------------------------------------------- preprocessing


@dataclass
class PreprocessConfig:
    target_spacing: float = 2.0
    percentile: float = 99.0
    foreground: str = "otsu"
    head_height_mm: float = 180.0
    extent: int = 32

    def __post_init__(self):
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must lie in (0, 100]")
        if not self.target_spacing > 0:
            raise ValueError("target spacing must be positive")
        if self.foreground not in ("otsu", "nonzero"):
            raise ValueError(f"unknown foreground strategy {self.foreground!r}")
        if self.extent < 1:
            raise ValueError("extent must be positive")


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing between-class variance of a histogram."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return float(lo)
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    return float(edges[int(np.argmax(between[:-1])) + 1])


def foreground_mask(volume: Volume, strategy: str = "otsu") -> np.ndarray:
    if strategy == "nonzero":
        return volume.data > 0
    return volume.data > otsu_threshold(volume.data)


def crop_fov(volume: Volume, config: Optional[PreprocessConfig] = None) -> Volume:
    """Drop inferior slices lying further than the head-height budget below the top of the foreground.

    Stand-in for neck removal: only the z axis is cropped, so a volume whose
    foreground already fits within the budget comes back unchanged.
    """
    config = config or PreprocessConfig()
    mask = foreground_mask(volume, config.foreground)
    if not mask.any():
        raise ValueError("crop_fov: empty foreground")
    zs = np.flatnonzero(mask.any(axis=(1, 2)))
    top = int(zs[-1])
    keep = int(math.floor(config.head_height_mm / volume.spacing[0] + 1e-9))
    lowest = max(0, top - keep + 1)
    if lowest <= zs[0]:
        return volume
    meta = dict(volume.meta, cropped_inferior=lowest)
    return Volume(volume.data[lowest:].copy(), volume.spacing, meta)


def _interp_axis(data: np.ndarray, axis: int, pos: np.ndarray) -> np.ndarray:
    n = data.shape[axis]
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    t = pos - i0
    shape = [1] * data.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    return np.take(data, i0, axis=axis) * (1 - t) + np.take(data, i1, axis=axis) * t


def sample_trilinear(data: np.ndarray, positions: Sequence[np.ndarray]) -> np.ndarray:
    """Separable trilinear sampling on a grid of per-axis continuous indices."""
    out = np.asarray(data, dtype=np.float64)
    for axis, pos in enumerate(positions):
        out = _interp_axis(out, axis, np.asarray(pos, dtype=np.float64))
    return out


def resample_trilinear(volume: Volume, target_spacing) -> Volume:
    if np.isscalar(target_spacing):
        target = (float(target_spacing),) * 3
    else:
        target = tuple(float(t) for t in target_spacing)
    if any(not t > 0 for t in target):
        raise ValueError("target spacing must be positive")
    if target == volume.spacing:
        return volume
    positions = []
    shape = []
    for n, s, t in zip(volume.shape, volume.spacing, target):
        m = max(1, int(round(n * s / t)))
        shape.append(m)
        positions.append((np.arange(m) + 0.5) * (t / s) - 0.5)
    data = sample_trilinear(volume.data, positions).astype(volume.data.dtype)
    return Volume(data, target, dict(volume.meta))


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Value at 1-based position ceil(q/100 * n) of the ascending sort."""
    flat = np.asarray(values).ravel()
    n = flat.size
    if n == 0:
        raise ValueError("percentile of an empty array")
    rank = math.ceil(Fraction(str(q)) * n / 100)
    rank = min(max(rank, 1), n)
    return float(np.partition(flat, rank - 1)[rank - 1])


def intensity_scale_p99(volume: Volume, percentile: float = 99.0) -> Volume:
    ref = nearest_rank_percentile(volume.data, percentile)
    if not ref > 0:
        raise ValueError(f"{percentile}th percentile is {ref}; refusing to scale by a non-positive value")
    data = (volume.data / volume.data.dtype.type(ref)).astype(volume.data.dtype)
    return Volume(data, volume.spacing, dict(volume.meta))


def pad_or_crop(data: np.ndarray, extent: int) -> np.ndarray:
    """Center ``data`` in a zero cube of side ``extent`` (cropping if larger)."""
    out = np.zeros((extent,) * 3, dtype=data.dtype)
    src, dst = [], []
    for n in data.shape:
        if n >= extent:
            start = (n - extent) // 2
            src.append(slice(start, start + extent))
            dst.append(slice(0, extent))
        else:
            start = (extent - n) // 2
            src.append(slice(0, n))
            dst.append(slice(start, start + n))
    out[tuple(dst)] = data[tuple(src)]
    return out


def preprocess_volume(volume: Volume, config: Optional[PreprocessConfig] = None) -> Volume:
    """Crop, resample, scale (the pre-padding stages of the pipeline)."""
    config = config or PreprocessConfig()
    v = crop_fov(volume, config)
    v = resample_trilinear(v, config.target_spacing)
    return intensity_scale_p99(v, config.percentile)


def preprocess_pipeline(volume: Volume, config: Optional[PreprocessConfig] = None) -> np.ndarray:
    """Full chain; returns a float32 array shaped (1, 1, E, E, E)."""
    config = config or PreprocessConfig()
    v = preprocess_volume(volume, config)
    cube = pad_or_crop(v.data.astype(np.float32), config.extent)
    return cube[None, None]


def load_manifest_arrays(
    manifest: DatasetManifest,
    config: Optional[PreprocessConfig] = None,
    split: Optional[str] = None,
) -> Tuple[np.ndarray, np.ndarray, List[ManifestItem]]:
    """Preprocess every (optionally split-filtered) item into one batch array."""
    config = config or PreprocessConfig()
    items = manifest.items if split is None else manifest.subset(split)
    if not items:
        raise ValueError(f"no manifest items for split {split!r}")
    arrays = [preprocess_pipeline(read_nifti(manifest.resolve(it)), config)[0] for it in items]
    labels = np.array([it.label for it in items], dtype=np.int64)
    return np.stack(arrays), labels, items
