"""Volumes, centroid annotations and their on-disk formats.

Axis convention used throughout the package: array axis 0 runs left-right,
axis 1 anterior-posterior and axis 2 cranio-caudal. Positions stored in a
:class:`CentroidSet` are millimetres relative to the volume origin, so in a
1mm isotropic volume a position equals its (fractional) voxel index.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import nibabel as nib
import numpy as np
from scipy import ndimage

from .labels import index_to_name, name_to_index

log = logging.getLogger(__name__)

ISOTROPIC = (1.0, 1.0, 1.0)


class VolumeError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def extent_mm(self) -> np.ndarray:
        return (np.asarray(self.shape) - 1) * np.asarray(self.spacing)

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Geometry":
        return cls(tuple(int(s) for s in d["shape"]), tuple(float(s) for s in d["spacing"]),
                   tuple(float(s) for s in d["origin"]))


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image with voxel spacing and origin in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = ISOTROPIC
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data).view()
        if data.ndim != 3:
            raise VolumeError(f"non-3D image: got {data.ndim} axes")
        if min(data.shape) < 1:
            raise VolumeError(f"empty axis in shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise VolumeError(f"spacing must be three positive numbers, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise VolumeError(f"origin must have three components, got {self.origin}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.shape, self.spacing, self.origin)

    def is_isotropic(self, tol: float = 1e-6) -> bool:
        return bool(np.allclose(self.spacing, ISOTROPIC, rtol=0, atol=tol))

    def with_data(self, data: np.ndarray) -> "Volume":
        """New volume on the same grid."""
        if np.shape(data) != self.shape:
            raise VolumeError(f"shape {np.shape(data)} does not match geometry {self.shape}")
        return Volume(data, self.spacing, self.origin)


def load_volume(path: str | Path) -> Volume:
    """Read a NIfTI volume. Spacing comes from the header zooms, origin from the affine."""
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:
        raise VolumeError(f"unreadable file {path}: {exc}") from exc
    if len(img.shape) != 3:
        raise VolumeError(f"non-3D image: {path} has shape {img.shape}")
    zooms = img.header.get_zooms()[:3]
    if len(zooms) < 3 or any(z <= 0 for z in zooms):
        raise VolumeError(f"missing spacing metadata in {path}")
    data = np.asanyarray(img.dataobj)
    if not np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float32)
    origin = tuple(float(o) for o in img.affine[:3, 3])
    return Volume(data, tuple(float(z) for z in zooms), origin)


def save_volume(volume: Volume, path: str | Path, metadata: Mapping | None = None, sidecar: bool = True) -> None:
    """Write ``volume`` as NIfTI plus a ``.json`` sidecar holding geometry and ``metadata``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = np.diag([*volume.spacing, 1.0])
    affine[:3, 3] = volume.origin
    img = nib.Nifti1Image(np.ascontiguousarray(volume.data), affine)
    img.header.set_zooms(volume.spacing)
    nib.save(img, str(path))
    if not sidecar:
        return
    meta = {"geometry": volume.geometry.to_dict(), "dtype": str(volume.data.dtype)}
    if metadata:
        meta.update(metadata)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".json")


def resample_isotropic(volume: Volume, is_label: bool = False) -> Volume:
    """Resample onto a 1mm grid sharing the input origin.

    Output extent along each axis is ``round(extent * spacing)``. Intensities
    use trilinear interpolation, label maps (``is_label=True``) nearest neighbour.
    Volumes already at 1mm are returned unchanged.
    """
    if volume.is_isotropic():
        return volume
    spacing = np.asarray(volume.spacing)
    out_shape = tuple(max(1, int(round(n * s))) for n, s in zip(volume.shape, spacing))
    # output voxel i sits at origin + i mm, i.e. at input index i / spacing
    data = volume.data if is_label else volume.data.astype(np.float32, copy=False)
    out = ndimage.affine_transform(
        data,
        np.diag(1.0 / spacing),
        output_shape=out_shape,
        order=0 if is_label else 1,
        mode="nearest",
        prefilter=False,
    )
    return Volume(out, ISOTROPIC, volume.origin)


@dataclass(frozen=True)
class LoadReport:
    path: str
    clamped: tuple[str, ...] = ()
    gaps: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.clamped and not self.gaps


@dataclass(frozen=True, eq=False)
class CentroidSet:
    """Sparse annotation: vertebra index -> position (mm, volume frame)."""

    entries: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        entries = {}
        for key, pos in self.entries.items():
            index = name_to_index(key) if isinstance(key, str) else int(key)
            index_to_name(index)
            p = np.array(pos, dtype=np.float64).reshape(3)
            p.flags.writeable = False
            entries[index] = p
        object.__setattr__(self, "entries", dict(sorted(entries.items())))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, index: int) -> bool:
        return index in self.entries

    def __getitem__(self, index: int) -> np.ndarray:
        return self.entries[index]

    @property
    def labels(self) -> list[int]:
        return list(self.entries)

    def items(self):
        return self.entries.items()

    def gaps(self) -> list[int]:
        """Missing indices between the first and last annotated vertebra."""
        if not self.entries:
            return []
        lo, hi = min(self.entries), max(self.entries)
        return [i for i in range(lo, hi + 1) if i not in self.entries]

    def translated(self, offset) -> "CentroidSet":
        return CentroidSet({k: v + np.asarray(offset, float) for k, v in self.entries.items()})

    def to_records(self) -> list[dict]:
        return [{"name": index_to_name(k), "x": float(p[0]), "y": float(p[1]), "z": float(p[2])}
                for k, p in self.entries.items()]


def to_volume_frame(points: np.ndarray, geometry, convention: str = "mm",
                    source_spacing=None) -> np.ndarray:
    """Map annotation coordinates into the volume frame (mm from origin).

    ``convention="mm"``: physical mm in the scanner frame (origin is subtracted).
    ``convention="voxel"``: voxel indices of the original image, scaled by ``source_spacing``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if convention == "mm":
        return points - np.asarray(geometry.origin)
    if convention == "voxel":
        if source_spacing is None:
            raise AnnotationError("voxel-convention annotations need the source spacing")
        return points * np.asarray(source_spacing, dtype=np.float64)
    raise AnnotationError(f"unknown coordinate convention {convention!r}")


def read_centroid_file(path: str | Path) -> list[tuple[str, np.ndarray]]:
    """Parse ``NAME,x,y,z`` lines. Blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 4:
                raise AnnotationError(f"{path}:{lineno}: expected NAME,x,y,z, got {row}")
            try:
                pos = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: non-numeric coordinate in {row}") from None
            rows.append((row[0].strip(), pos))
    return rows


def load_centroids(path: str | Path, geometry, convention: str = "mm",
                   source_spacing=None) -> tuple[CentroidSet, LoadReport]:
    """Load an annotation file into the frame of ``geometry`` (a Volume or Geometry).

    Positions outside the volume are clamped to its bounds and recorded in the report.
    """
    entries: dict[int, np.ndarray] = {}
    rows = read_centroid_file(path)
    clamped = []
    upper = (np.asarray(geometry.shape) - 1) * np.asarray(geometry.spacing)
    for name, raw in rows:
        try:
            index = name_to_index(name)
        except ValueError as exc:
            raise AnnotationError(f"{path}: {exc}") from None
        if index in entries:
            raise AnnotationError(f"{path}: duplicate label {name}")
        pos = to_volume_frame(raw, geometry, convention, source_spacing)[0]
        inside = np.clip(pos, 0.0, upper)
        if not np.array_equal(inside, pos):
            clamped.append(name)
            warnings.warn(f"{path}: centroid {name} at {pos.tolist()} outside volume, clamped")
        entries[index] = inside
    cs = CentroidSet(entries)
    gaps = tuple(index_to_name(i) for i in cs.gaps())
    if gaps:
        log.warning("%s: non-consecutive annotation, missing %s", path, ", ".join(gaps))
    return cs, LoadReport(str(path), tuple(clamped), gaps)


def write_centroids(centroids: CentroidSet, path: str | Path, origin: Iterable[float] = (0.0, 0.0, 0.0)) -> None:
    """Write ``NAME,x,y,z`` in scanner mm (volume-frame positions shifted by ``origin``)."""
    origin = np.asarray(tuple(origin), dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for index, pos in centroids.items():
            writer.writerow([index_to_name(index), *(repr(float(c)) for c in pos + origin)])
