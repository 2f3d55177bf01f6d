"""Seeded synthetic head phantoms with MR-like contrast relationships.

Each phantom holds three nested ellipsoidal compartments: an outer CSF
shell, a gray-matter layer and a white-matter core. The contrast class fixes
the ordering of compartment intensities:

    T1     WM > GM > CSF
    T2     CSF > GM > WM
    FLAIR  GM > WM >> CSF  (CSF suppressed)

``-post`` classes ("T1-post", "FLAIR-post") add small bright enhancing
blobs inside the GM/WM region. Absolute brightness is randomized per sample,
so only the relative intensities identify the class.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .volume import DatasetManifest, ManifestItem, Volume, write_nifti

BASE_INTENSITY = {
    "T1": {"csf": 0.25, "gm": 0.60, "wm": 0.95},
    "T2": {"csf": 0.95, "gm": 0.60, "wm": 0.35},
    "FLAIR": {"csf": 0.05, "gm": 0.85, "wm": 0.55},
}

ORDERING = {
    "T1": ("wm", "gm", "csf"),
    "T2": ("csf", "gm", "wm"),
    "FLAIR": ("gm", "wm", "csf"),
}

CLASSES = ("T1", "T2", "FLAIR", "T1-post", "FLAIR-post")


def base_contrast(name: str) -> Tuple[str, bool]:
    """Split a class name into its contrast and whether it is post-contrast."""
    if name not in CLASSES:
        raise ValueError(f"unknown phantom class {name!r}; expected one of {CLASSES}")
    if name.endswith("-post"):
        return name[:-5], True
    return name, False


@dataclass
class PhantomSpec:
    extent: int = 32
    spacing: float = 2.0
    noise: float = 0.03
    bias: float = 0.15
    jitter: float = 0.1
    intensity_jitter: float = 0.06
    brightness: Tuple[float, float] = (0.5, 2.0)
    blobs: Tuple[int, int] = (2, 4)
    blob_radius: Tuple[float, float] = (2.0, 3.0)
    blob_gain: Tuple[float, float] = (2.5, 3.5)

    def __post_init__(self):
        if self.extent < 8:
            raise ValueError("extent too small to nest three compartments (need >= 8)")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if self.noise < 0 or self.intensity_jitter < 0 or self.jitter < 0:
            raise ValueError("noise and jitter magnitudes must be non-negative")
        if not 0 <= self.bias <= 0.2:
            raise ValueError("bias field amplitude must lie in [0, 0.2]")
        if self.jitter > 0.3:
            raise ValueError("geometry jitter above 0.3 can break compartment nesting")
        if self.blobs[0] < 1 or self.blobs[1] < self.blobs[0]:
            raise ValueError("post-contrast phantoms need at least one blob")
        margin = self.ordering_margin()
        if margin < 3 * self.noise:
            raise ValueError(
                f"worst-case adjacent compartment gap {margin:.3f} is below 3x noise ({3 * self.noise:.3f})"
            )

    def ordering_margin(self) -> float:
        """Smallest adjacent-compartment gap over all classes after intensity jitter."""
        gaps = []
        for contrast, order in ORDERING.items():
            levels = BASE_INTENSITY[contrast]
            for hi, lo in zip(order, order[1:]):
                gaps.append(levels[hi] - levels[lo] - 2 * self.intensity_jitter)
        return min(gaps)

    @classmethod
    def noiseless(cls, **kw) -> "PhantomSpec":
        """Canonical phantoms: no noise, bias or jitter of any kind."""
        base = dict(noise=0.0, bias=0.0, jitter=0.0, intensity_jitter=0.0, brightness=(1.0, 1.0))
        base.update(kw)
        return cls(**base)


def _ellipsoid(grid, center, radii) -> np.ndarray:
    z, y, x = grid
    r = ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2
    return r <= 1.0


def _bias_field(grid, extent: int, amplitude: float, rng) -> np.ndarray:
    if amplitude == 0:
        return np.ones((extent,) * 3)
    z, y, x = (g / (extent - 1) * 2 - 1 for g in grid)
    terms = [z, y, x, z * y, z * x, y * x, z * z, y * y, x * x]
    coef = rng.uniform(-1, 1, len(terms))
    poly = sum(c * t for c, t in zip(coef, terms))
    poly = poly / np.abs(poly).max()
    return 1.0 + amplitude * rng.uniform(0.5, 1.0) * poly


def generate_phantom(
    name: str, spec: Optional[PhantomSpec] = None, seed: Union[int, Sequence[int]] = 0
) -> Tuple[Volume, Dict[str, np.ndarray]]:
    """One phantom volume plus boolean masks ``csf``, ``gm``, ``wm``, ``lesion``.

    Geometry, noise and bias come from one random stream and enhancing blobs
    from another, so "T1" and "T1-post" with the same seed differ only by
    the blobs.
    """
    spec = spec or PhantomSpec()
    contrast, post = base_contrast(name)
    root = np.random.SeedSequence(seed)
    geo_seq, blob_seq = root.spawn(2)
    rng = np.random.default_rng(geo_seq)
    E = spec.extent
    grid = np.meshgrid(*(np.arange(E, dtype=np.float64),) * 3, indexing="ij")
    j = spec.jitter
    center = (E - 1) / 2 + rng.uniform(-j, j, 3) * E / 4
    outer = 0.40 * E * (1 + rng.uniform(-j, j, 3))
    mid = outer * rng.uniform(0.78, 0.86)
    core = mid * rng.uniform(0.55, 0.70)
    m_outer = _ellipsoid(grid, center, outer)
    m_mid = _ellipsoid(grid, center, mid)
    m_core = _ellipsoid(grid, center, core)
    masks = {"csf": m_outer & ~m_mid, "gm": m_mid & ~m_core, "wm": m_core}
    if not all(m.any() for m in masks.values()):
        raise ValueError("extent too small: a compartment is empty")

    levels = {
        k: v + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
        for k, v in BASE_INTENSITY[contrast].items()
    }
    img = np.zeros((E,) * 3)
    for k, m in masks.items():
        img[m] = levels[k]
    field = _bias_field(grid, E, spec.bias, rng)
    noise = rng.standard_normal((E,) * 3) * spec.noise
    scale = rng.uniform(*spec.brightness)

    lesion = np.zeros((E,) * 3, dtype=bool)
    if post:
        brng = np.random.default_rng(blob_seq)
        tissue = masks["gm"] | masks["wm"]
        n_blobs = int(brng.integers(spec.blobs[0], spec.blobs[1] + 1))
        candidates = np.argwhere(tissue)
        peak = max(BASE_INTENSITY[contrast].values())
        for _ in range(n_blobs):
            c = candidates[brng.integers(len(candidates))]
            radius = brng.uniform(*spec.blob_radius)
            blob = _ellipsoid(grid, c, (radius,) * 3) & tissue
            blob[tuple(c)] = True
            img[blob] = peak * brng.uniform(*spec.blob_gain)
            lesion |= blob

    data = (img * field + noise) * scale
    masks = {k: m & ~lesion for k, m in masks.items()}
    masks["lesion"] = lesion
    meta = {"class": name, "seed": list(np.atleast_1d(seed).tolist())}
    return Volume(data.astype(np.float32), (spec.spacing,) * 3, meta), masks


def compartment_means(volume: Volume, masks: Dict[str, np.ndarray]) -> Dict[str, float]:
    return {k: float(volume.data[masks[k]].mean()) for k in ("csf", "gm", "wm")}


def _counts(n, classes) -> list:
    if isinstance(n, int):
        return [n] * len(classes)
    n = list(n)
    if len(n) != len(classes):
        raise ValueError("per-class counts must match the class list")
    return n


def generate_dataset(
    spec: Optional[PhantomSpec],
    classes: Sequence[str],
    n_per_class,
    seed: int,
    out_dir,
    n_test_per_class=0,
) -> DatasetManifest:
    """Write phantom ``.nii`` files plus ``manifest.json`` with train/test splits.

    ``n_per_class`` and ``n_test_per_class`` are either one count for every
    class or a per-class sequence. Item ``i`` (in file order) is generated
    from the stream ``(seed, i)``.
    """
    spec = spec or PhantomSpec()
    for c in classes:
        base_contrast(c)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    index = 0
    for split, counts in (("train", _counts(n_per_class, classes)), ("test", _counts(n_test_per_class, classes))):
        for label, (name, count) in enumerate(zip(classes, counts)):
            for k in range(count):
                vol, _ = generate_phantom(name, spec, seed=(seed, index))
                fname = f"{split}_{name}_{k:04d}.nii"
                write_nifti(vol, out / fname)
                items.append(ManifestItem(fname, label, split, subject=f"{seed}-{index}"))
                index += 1
    manifest = DatasetManifest(list(classes), items, root=out)
    manifest.save(out / "manifest.json")
    return manifest
