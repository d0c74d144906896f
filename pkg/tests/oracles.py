"""Brute-force reference implementations, kept independent of the package code paths."""

from __future__ import annotations

import math

import numpy as np


def disc_sweep_labels(segments: dict, radii: dict, shape, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Per-voxel loop over every segment: the voxel joins vertebra v when the axial disc
    of radius R_v centred on segment v's point at the voxel's level contains it."""
    out = np.zeros(shape, dtype=np.uint8)
    sx, sy, sz = (float(s) for s in spacing)
    segs = [(int(k), [float(c) for c in a], [float(c) for c in b], float(radii[k]))
            for k, (a, b) in sorted(segments.items())]
    for i in range(shape[0]):
        px = i * sx
        for j in range(shape[1]):
            py = j * sy
            for k in range(shape[2]):
                pz = k * sz
                best_d, best_label = math.inf, 0
                for label, a, b, r in segs:
                    dz = b[2] - a[2]
                    if dz != 0.0:
                        t = (pz - a[2]) / dz
                        if t < 0.0 or t > 1.0:
                            continue
                        qx = a[0] + t * (b[0] - a[0])
                        qy = a[1] + t * (b[1] - a[1])
                    else:
                        if pz != a[2]:
                            continue
                        ex, ey = b[0] - a[0], b[1] - a[1]
                        l2 = ex * ex + ey * ey
                        t = 0.0 if l2 == 0 else min(1.0, max(0.0, ((px - a[0]) * ex + (py - a[1]) * ey) / l2))
                        qx, qy = a[0] + t * ex, a[1] + t * ey
                    d = (px - qx) ** 2 + (py - qy) ** 2
                    if d <= r * r and d < best_d:
                        best_d, best_label = d, label
                out[i, j, k] = best_label
    return out


def tiling_windows(extent, step, pad):
    """Enumerate window origins by walking each axis until the retained block passes the extent."""
    axes = []
    for e, s in zip(extent, step):
        starts, o = [], 0
        while o < e:
            starts.append(o)
            o += s
        axes.append(starts)
    return sorted((a, b, c) for a in axes[0] for b in axes[1] for c in axes[2])


def slab_means(data: np.ndarray, width: int = 8, centre_slot: int = 3) -> np.ndarray:
    """For each axis-0 slice, mean of the edge-clamped slab of ``width`` slices around it."""
    n = data.shape[0]
    out = np.zeros(data.shape, dtype=np.float64)
    for i in range(n):
        acc = np.zeros(data.shape[1:])
        for s in range(width):
            acc += data[min(max(i - centre_slot + s, 0), n - 1)]
        out[i] = acc / width
    return out


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def nearest_truth_flags(pred: dict, truth: dict, limit: float = 20.0) -> dict:
    flags = {}
    for k, p in pred.items():
        best = min(truth.items(), key=lambda kv: math.dist(p, kv[1]), default=None)
        flags[k] = best is not None and best[0] == k and math.dist(p, best[1]) < limit
    return flags
