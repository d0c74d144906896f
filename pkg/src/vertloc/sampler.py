"""Training patch generation for the detection and identification networks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import Volume

DETECTION_SHAPE = (64, 64, 80)
IDENTIFICATION_SHAPE = (8, 80, 320)
LABEL_SLICE = 3  # 4th slice of the identification slab
HU_WINDOW = (-1000.0, 2000.0)
MAX_ATTEMPTS = 1000
PAD_VALUE = -1.0  # normalized air; labels pad with 0


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Patch:
    image: np.ndarray
    label: np.ndarray
    offset: tuple[int, int, int]
    kind: str  # "detection" | "identification"

    def __post_init__(self):
        if self.kind not in ("detection", "identification"):
            raise ValueError(f"unknown patch kind {self.kind!r}")


def normalize_intensity(data: np.ndarray, window: tuple[float, float] = HU_WINDOW) -> np.ndarray:
    """Clamp to ``window`` and rescale linearly to [-1, 1]."""
    lo, hi = window
    out = (np.clip(np.asarray(data, dtype=np.float32), lo, hi) - lo) / (hi - lo)
    return (out * 2.0 - 1.0).astype(np.float32)


def pad_to_min_shape(arr: np.ndarray, shape: Sequence[int], value: float = 0) -> tuple[np.ndarray, tuple[int, ...]]:
    """Pad symmetrically with ``value`` so every axis reaches ``shape``; returns the array and leading pads."""
    before = []
    widths = []
    for n, m in zip(arr.shape, shape):
        total = max(0, m - n)
        before.append(total // 2)
        widths.append((total // 2, total - total // 2))
    if not any(total for pair in widths for total in pair):
        return arr, tuple(before)
    return np.pad(arr, widths, constant_values=value), tuple(before)


def _crop(arr: np.ndarray, offset, shape) -> np.ndarray:
    return arr[tuple(slice(o, o + s) for o, s in zip(offset, shape))]


def _random_offset(rng: np.random.Generator, extent, shape) -> tuple[int, ...]:
    return tuple(int(rng.integers(0, e - s + 1)) for e, s in zip(extent, shape))


def _sample(image, labels, n, seed, shape, required, label_view, max_attempts, pad_value):
    if n < 1:
        raise ValueError("n must be >= 1")
    img, _ = pad_to_min_shape(image, shape, pad_value)
    lab, _ = pad_to_min_shape(labels, shape)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        for _ in range(max_attempts if i < required else 1):
            offset = _random_offset(rng, img.shape, shape)
            lab_crop = label_view(_crop(lab, offset, shape))
            if i >= required or lab_crop.any():
                break
        else:
            raise SamplingError(
                f"no patch containing vertebra voxels found after {max_attempts} attempts")
        out.append((np.ascontiguousarray(_crop(img, offset, shape)), np.ascontiguousarray(lab_crop), offset))
    # shuffle so the unconstrained patches are not always last
    order = rng.permutation(n)
    return [out[j] for j in order]


def sample_detection_patches(volume: Volume, labels: Volume, n: int = 5, seed=0,
                             shape=DETECTION_SHAPE, positive_fraction: float = 0.8,
                             max_attempts: int = MAX_ATTEMPTS, normalize: bool = True,
                             pad_value: float = PAD_VALUE) -> list[Patch]:
    """Random 3D crops; at least ``ceil(positive_fraction * n)`` contain vertebra voxels.

    ``labels`` may be the full 0..26 map; crops are binarized. Volumes smaller
    than the patch are padded symmetrically with ``pad_value`` (labels with 0).
    """
    if volume.shape != labels.shape:
        raise ValueError(f"volume {volume.shape} and labels {labels.shape} differ in shape")
    image = normalize_intensity(volume.data) if normalize else np.asarray(volume.data, np.float32)
    binary = (np.asarray(labels.data) > 0).astype(np.uint8)
    required = math.ceil(round(positive_fraction * n, 9))
    crops = _sample(image, binary, n, seed, tuple(shape), required, lambda c: c, max_attempts,
                    pad_value)
    return [Patch(img, lab, off, "detection") for img, lab, off in crops]


def sample_identification_patches(volume: Volume, labels: Volume, n: int = 100, seed=0,
                                  shape=IDENTIFICATION_SHAPE, label_slice: int = LABEL_SLICE,
                                  max_attempts: int = MAX_ATTEMPTS, normalize: bool = True,
                                  pad_value: float = PAD_VALUE) -> list[Patch]:
    """Slabs of ``shape`` whose ``label_slice`` label crop always holds vertebra voxels."""
    if volume.shape != labels.shape:
        raise ValueError(f"volume {volume.shape} and labels {labels.shape} differ in shape")
    image = normalize_intensity(volume.data) if normalize else np.asarray(volume.data, np.float32)
    dense = np.asarray(labels.data).astype(np.uint8)
    crops = _sample(image, dense, n, seed, tuple(shape), n, lambda c: c[label_slice], max_attempts,
                    pad_value)
    return [Patch(img, lab, off, "identification") for img, lab, off in crops]


def _displacement(shape2d, sigma, points, rng) -> np.ndarray:
    """Control-grid displacements (pixels, N(0, sigma)) upsampled with cubic splines."""
    grid = rng.standard_normal((2, points, points)) * sigma
    coords = [np.linspace(0, points - 1, n) for n in shape2d]
    mesh = np.meshgrid(*coords, indexing="ij")
    return np.stack([ndimage.map_coordinates(g, mesh, order=3, mode="nearest") for g in grid])


def elastic_deform(patch: Patch, sigma: float = 0.7, seed=0, points: int = 3) -> Patch:
    """Smooth random warp of the two in-plane axes, shared by image and label.

    The image is resampled linearly, the label with nearest neighbour and edge
    replication, so no label value absent from the input can appear.
    """
    if patch.kind != "identification":
        raise ValueError("elastic deformation applies to identification patches")
    if sigma == 0:
        return patch
    rng = np.random.default_rng(seed)
    shape2d = patch.label.shape
    disp = _displacement(shape2d, sigma, points, rng)
    base = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape2d), indexing="ij")
    coords = np.stack([b + d for b, d in zip(base, disp)])
    label = ndimage.map_coordinates(patch.label, coords, order=0, mode="nearest").astype(patch.label.dtype)
    image = np.stack([
        ndimage.map_coordinates(s, coords, order=1, mode="nearest") for s in patch.image
    ]).astype(patch.image.dtype)
    return Patch(image, label, patch.offset, patch.kind)


def save_patches(patches: Sequence[Patch], directory: str | Path, prefix: str, meta: dict | None = None) -> list[dict]:
    """Write ``<prefix>_<i>_image.npy`` / ``_label.npy`` pairs; returns manifest records."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, p in enumerate(patches):
        stem = f"{prefix}_{i:03d}"
        np.save(directory / f"{stem}_image.npy", p.image, allow_pickle=False)
        np.save(directory / f"{stem}_label.npy", p.label, allow_pickle=False)
        records.append({"stem": stem, "offset": list(p.offset), "kind": p.kind, **(meta or {})})
    return records


def load_patches(directory: str | Path, manifest: str | Path | None = None) -> list[Patch]:
    directory = Path(directory)
    manifest = Path(manifest) if manifest else directory / "manifest.json"
    records = json.loads(manifest.read_text())["patches"]
    return [
        Patch(np.load(directory / f"{r['stem']}_image.npy"), np.load(directory / f"{r['stem']}_label.npy"),
              tuple(r["offset"]), r["kind"])
        for r in records
    ]
