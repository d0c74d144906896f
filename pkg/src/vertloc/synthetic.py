"""Synthetic spine phantoms for tests, demos and stub-mode runs.

Vertebra ``v`` is painted with ``BONE_BASE_HU + BONE_STEP_HU * v`` so the
analytic stub networks can recover both the mask and the label.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dense import build_segment_chain, rasterize_dense_labels
from .inference import SlabMeanStub, ThresholdStub
from .labels import RadiiTable
from .sampler import HU_WINDOW
from .volume import CentroidSet, Geometry, Volume, save_volume, write_centroids

AIR_HU = -1000.0
TISSUE_HU = 0.0
BONE_BASE_HU = 200.0
BONE_STEP_HU = 40.0


def spine_centroids(first: int, last: int, shape_mm, rng: np.random.Generator,
                    gap_mm: tuple[float, float] = (26.0, 30.0), sway_mm: float = 6.0) -> CentroidSet:
    """Consecutive centroids ``first..last`` running down axis 2 of a box of ``shape_mm``."""
    n = last - first + 1
    gaps = rng.uniform(*gap_mm, size=max(n - 1, 0))
    z = np.concatenate([[0.0], np.cumsum(gaps)])
    z = z - z.mean() + shape_mm[2] / 2.0
    phase = rng.uniform(0, 2 * np.pi)
    t = np.linspace(0, 1, n)
    # gentle arc: at most half a period over the visible column
    x = shape_mm[0] / 2.0 + sway_mm * np.sin(np.pi * t + phase)
    y = shape_mm[1] / 2.0 + 0.5 * sway_mm * np.cos(0.5 * np.pi * t + phase)
    # index increases caudally, z decreases
    return CentroidSet({first + i: (x[i], y[i], z[n - 1 - i]) for i in range(n)})


def phantom(centroids: CentroidSet, geometry: Geometry, radii: RadiiTable | None = None,
            noise_hu: float = 0.0, seed: int = 0) -> tuple[Volume, Volume]:
    """CT-like volume and its dense labels on ``geometry``."""
    radii = radii or RadiiTable()
    labels = rasterize_dense_labels(build_segment_chain(centroids, radii), radii, geometry)
    shape = geometry.shape
    x, y = (np.arange(n) * s for n, s in zip(shape[:2], geometry.spacing[:2]))
    cx, cy = (np.asarray(geometry.shape[:2]) - 1) * np.asarray(geometry.spacing[:2]) / 2.0
    body = ((x[:, None] - cx) ** 2 + (y[None, :] - cy) ** 2) <= (0.45 * min(x[-1], y[-1]) * 1.0) ** 2
    ct = np.where(body[:, :, None], TISSUE_HU, AIR_HU) * np.ones(shape)
    ct = np.where(labels > 0, BONE_BASE_HU + BONE_STEP_HU * labels, ct)
    if noise_hu:
        ct = ct + np.random.default_rng(seed).normal(0.0, noise_hu, shape)
    vol = Volume(ct.astype(np.float32), geometry.spacing, geometry.origin)
    return vol, vol.with_data(labels)


def stub_nets(window=HU_WINDOW):
    """Detection and identification stubs that invert the phantom's intensity encoding."""
    lo, hi = window
    half = (hi - lo) / 2.0

    def to_norm(hu):
        return (hu - lo) / half - 1.0

    level = to_norm((TISSUE_HU + BONE_BASE_HU) / 2.0)
    # label = (hu - base) / step with hu = half * (n + 1) + lo
    scale = half / BONE_STEP_HU
    offset = (half + lo - BONE_BASE_HU) / BONE_STEP_HU
    return ThresholdStub(level), SlabMeanStub(scale, offset)


def write_dataset(directory: str | Path, n_scans: int = 2, seed: int = 0,
                  spacing=(1.0, 1.0, 1.0), shape_mm=(96, 96, 200), span=(18, 24),
                  noise_hu: float = 0.0) -> list[Path]:
    """Write ``scan_XXX.nii.gz`` + ``scan_XXX.csv`` pairs; returns the volume paths."""
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_scans):
        first = int(rng.integers(span[0], span[1] - 1))
        last = min(span[1], first + int(rng.integers(2, 5)))
        shape = tuple(int(round(m / s)) for m, s in zip(shape_mm, spacing))
        geometry = Geometry(shape, tuple(spacing), (0.0, 0.0, 0.0))
        centroids = spine_centroids(first, last, shape_mm, rng)
        vol, _ = phantom(centroids, geometry, noise_hu=noise_hu, seed=seed + i)
        path = directory / f"scan_{i:03d}.nii.gz"
        save_volume(vol, path, sidecar=False)
        write_centroids(centroids, directory / f"scan_{i:03d}.csv", origin=geometry.origin)
        paths.append(path)
    return paths
