"""Sparse centroids to dense per-voxel vertebra labels.

Each vertebra is represented by a line segment running between the midpoints
it shares with its neighbours. Axial discs (in the plane of array axes 0 and
1) of the vertebra's radius are swept along the segment; a voxel belongs to
the vertebra when it lies inside the disc centred on the segment point at
the voxel's own cranio-caudal level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .labels import RadiiTable
from .volume import CentroidSet, Volume

CC_AXIS = 2  # cranio-caudal array axis


@dataclass(frozen=True, eq=False)
class SegmentChain:
    """Per-vertebra segments ``index -> (start, end)`` in mm, ordered by index."""

    segments: Mapping[int, tuple[np.ndarray, np.ndarray]]

    def __len__(self) -> int:
        return len(self.segments)

    def items(self):
        return self.segments.items()


def build_segment_chain(centroids: CentroidSet, radii: RadiiTable | None = None) -> SegmentChain:
    """Segments between midpoints of adjacent centroids.

    The first and last vertebra get their outer endpoint by mirroring the
    shared midpoint through their own centroid. A lone centroid gets a
    cranio-caudal segment of length ``2 * R`` centred on it.
    """
    if len(centroids) == 0:
        raise ValueError("empty CentroidSet")
    labels = centroids.labels
    points = [centroids[k] for k in labels]
    if len(labels) == 1:
        r = (radii or RadiiTable())[labels[0]]
        c = points[0]
        axis = np.zeros(3)
        axis[CC_AXIS] = r
        return SegmentChain({labels[0]: (c - axis, c + axis)})

    # each midpoint is computed once so neighbouring segments share it bitwise
    mids = [(points[i] + points[i + 1]) / 2.0 for i in range(len(points) - 1)]
    segments = {}
    for i, label in enumerate(labels):
        start = mids[i - 1] if i > 0 else 2.0 * points[0] - mids[0]
        end = mids[i] if i < len(mids) else 2.0 * points[-1] - mids[-1]
        segments[label] = (start, end)
    return SegmentChain(segments)


def _inplane_sq_distance(x: np.ndarray, y: np.ndarray, z: np.ndarray,
                         start: np.ndarray, end: np.ndarray, r: float) -> np.ndarray:
    """Squared axial distance to the segment point at each voxel's level; inf where undefined."""
    z0, z1 = start[CC_AXIS], end[CC_AXIS]
    dz = z1 - z0
    if dz != 0.0:
        t = (z - z0) / dz
        inside = (t >= 0.0) & (t <= 1.0)
        cx = start[0] + t * (end[0] - start[0])
        cy = start[1] + t * (end[1] - start[1])
        d2 = (x - cx) ** 2 + (y - cy) ** 2
    else:
        # horizontal segment: every point sits at one level, use distance to its projection
        ex, ey = end[0] - start[0], end[1] - start[1]
        length2 = ex * ex + ey * ey
        if length2 > 0.0:
            t = np.clip(((x - start[0]) * ex + (y - start[1]) * ey) / length2, 0.0, 1.0)
        else:
            t = np.zeros(np.broadcast(x, y).shape)
        d2 = (x - (start[0] + t * ex)) ** 2 + (y - (start[1] + t * ey)) ** 2
        inside = z == z0
    d2 = np.where(inside & (d2 <= r * r), d2, np.inf)
    return d2


def rasterize_dense_labels(chain: SegmentChain, radii: RadiiTable, geometry) -> np.ndarray:
    """Label every voxel of ``geometry`` covered by a vertebra's disc sweep.

    Voxels claimed by several vertebrae go to the smallest in-plane distance,
    then to the lower index. Returns a uint8 array of ``geometry.shape``.
    """
    shape = tuple(geometry.shape)
    spacing = np.asarray(geometry.spacing, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.uint8)
    best = np.full(shape, np.inf)
    # ascending index + strict "<" leaves ties with the lower index
    for index, (start, end) in sorted(chain.items()):
        r = float(radii[index])
        lo = np.minimum(start, end) - [r, r, 0.0]
        hi = np.maximum(start, end) + [r, r, 0.0]
        i0 = np.maximum(np.ceil(lo / spacing).astype(int), 0)
        i1 = np.minimum(np.floor(hi / spacing).astype(int), np.asarray(shape) - 1)
        if np.any(i1 < i0):
            continue
        box = tuple(slice(a, b + 1) for a, b in zip(i0, i1))
        x, y, z = (np.arange(a, b + 1, dtype=np.float64) * s for a, b, s in zip(i0, i1, spacing))
        d2 = _inplane_sq_distance(x[:, None, None], y[None, :, None], z[None, None, :], start, end, r)
        win = d2 < best[box]
        best[box] = np.where(win, d2, best[box])
        labels[box] = np.where(win, np.uint8(index), labels[box])
    return labels


def dense_labels(centroids: CentroidSet, radii: RadiiTable, volume: Volume) -> Volume:
    """Convenience wrapper: chain + rasterize, returned on ``volume``'s grid."""
    if len(centroids) == 0:
        return volume.with_data(np.zeros(volume.shape, np.uint8))
    chain = build_segment_chain(centroids, radii)
    return volume.with_data(rasterize_dense_labels(chain, radii, volume))


def binarize(labels):
    """1 wherever the dense label is nonzero. Accepts arrays or label Volumes."""
    if isinstance(labels, Volume):
        return labels.with_data(binarize(labels.data))
    return (np.asarray(labels) > 0).astype(np.uint8)
