"""Template matching by Pearson correlation, the classical comparator.

A test volume is resampled onto each class template's grid (rigid, no
elastic warping) and assigned the class whose template correlates best.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .volume import Volume, foreground_mask, read_nifti, sample_trilinear, write_nifti

ArrayOrVolume = Union[np.ndarray, Volume]


@dataclass
class TemplateSet:
    volumes: List[Volume]
    classes: List[str]

    def __post_init__(self):
        if len(self.volumes) != len(self.classes) or not self.volumes:
            raise ValueError("need one template per class")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("template class names must be unique")
        ref = self.volumes[0]
        for v in self.volumes[1:]:
            if v.shape != ref.shape or v.spacing != ref.spacing:
                raise ValueError("templates must share extents and spacing")

    def save(self, directory) -> Path:
        """Write ``template_<class>.nii`` files and ``templates.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = []
        for cls, vol in zip(self.classes, self.volumes):
            name = f"template_{cls}.nii"
            write_nifti(vol, d / name)
            names.append(name)
        path = d / "templates.json"
        path.write_text(json.dumps({"classes": self.classes, "templates": names}, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TemplateSet":
        """Read a ``templates.json`` (or the directory holding one)."""
        path = Path(path)
        if path.is_dir():
            path = path / "templates.json"
        doc = json.loads(path.read_text())
        if set(doc) != {"classes", "templates"}:
            raise ValueError("template manifest must hold exactly 'classes' and 'templates'")
        vols = [read_nifti(path.parent / p) for p in doc["templates"]]
        return cls(vols, list(doc["classes"]))


def build_templates(arrays: Sequence[np.ndarray], labels: Sequence[int], classes: Sequence[str], spacing: float = 2.0) -> TemplateSet:
    """Voxelwise class means of already-preprocessed volumes sharing one grid."""
    arrays = [np.asarray(a).reshape(np.asarray(a).shape[-3:]) for a in arrays]
    labels = np.asarray(labels)
    vols = []
    for k in range(len(classes)):
        members = [a for a, lab in zip(arrays, labels) if lab == k]
        if not members:
            raise ValueError(f"no volumes for class {classes[k]!r}")
        vols.append(Volume(np.mean(members, axis=0).astype(np.float32), (spacing,) * 3))
    return TemplateSet(vols, list(classes))


def foreground_centroid(volume: Volume) -> np.ndarray:
    """Centroid of the Otsu foreground in mm, relative to the grid center."""
    mask = foreground_mask(volume)
    if not mask.any():
        return np.zeros(3)
    idx = np.argwhere(mask).mean(axis=0)
    return (idx + 0.5 - np.array(volume.shape) / 2) * np.array(volume.spacing)


def align_to_template_grid(volume: Volume, template: Volume, center: str = "mass") -> Volume:
    """Resample ``volume`` onto ``template``'s grid.

    ``center="grid"`` aligns the physical centers of the two grids;
    ``center="mass"`` additionally translates so the foreground centroids
    coincide. Samples outside the source clamp to its edge.
    """
    if any(n < 1 for n in template.shape):
        raise ValueError("degenerate template extents")
    if center not in ("grid", "mass"):
        raise ValueError(f"unknown centering mode {center!r}")
    shift = np.zeros(3)
    if center == "mass":
        shift = foreground_centroid(volume) - foreground_centroid(template)
    positions = []
    for axis in range(3):
        nt, st = template.shape[axis], template.spacing[axis]
        n, s = volume.shape[axis], volume.spacing[axis]
        phys = (np.arange(nt) + 0.5 - nt / 2) * st + shift[axis]
        positions.append(phys / s + n / 2 - 0.5)
    if volume.shape == template.shape and volume.spacing == template.spacing and not shift.any():
        return Volume(volume.data.copy(), volume.spacing, dict(volume.meta))
    data = sample_trilinear(volume.data, positions).astype(volume.data.dtype)
    return Volume(data, template.spacing, dict(volume.meta))


def _values(x: ArrayOrVolume) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume) else x, dtype=np.float64)


def pearson_cc(a: ArrayOrVolume, b: ArrayOrVolume) -> float:
    """Pearson correlation between two equally shaped images."""
    x, y = _values(a), _values(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.sum(dx * dx))
    syy = float(np.sum(dy * dy))
    if sxx == 0 or syy == 0:
        raise ValueError("pearson_cc: zero variance input")
    r = float(np.sum(dx * dy)) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def classify_by_template(volume: Volume, templates: TemplateSet, center: str = "mass") -> Tuple[int, List[float]]:
    """Index of the best-correlated template (first on ties) and every correlation."""
    corrs = [pearson_cc(align_to_template_grid(volume, t, center), t) for t in templates.volumes]
    return int(np.argmax(corrs)), corrs
