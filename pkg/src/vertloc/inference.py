"""Whole-scan application of the trained networks and fusion of their outputs."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .labels import NUM_VERTEBRAE
from .sampler import LABEL_SLICE, PAD_VALUE, normalize_intensity
from .volume import Volume

PATCH = (64, 64, 80)
STEP = (32, 32, 40)
PAD = (16, 16, 20)
SLAB = 8


@dataclass(frozen=True)
class TilingPlan:
    extent: tuple[int, int, int]
    patch: tuple[int, int, int]
    step: tuple[int, int, int]
    pad: tuple[int, int, int]
    padded: tuple[int, int, int]
    offsets: tuple[tuple[int, int, int], ...]

    def interior(self, offset) -> tuple[slice, ...]:
        """Retained region of the window at ``offset``, in original-volume coordinates."""
        return tuple(slice(o, min(o + s, e)) for o, s, e in zip(offset, self.step, self.extent))


def plan_tiling(extent, patch=PATCH, step=STEP, pad=PAD) -> TilingPlan:
    """Windows of ``patch`` every ``step`` over the volume padded by ``pad`` each side.

    The far side gets extra padding so the padded extent is ``ceil(extent / step) * step + 2 * pad``.
    Each window keeps only its central ``step`` block, so interiors tile the volume once.
    """
    extent = tuple(int(e) for e in extent)
    if len(extent) != 3 or min(extent) < 1:
        raise ValueError(f"extent must be three positive ints, got {extent}")
    for p, s, b in zip(patch, step, pad):
        if p != s + 2 * b:
            raise ValueError(f"patch {patch} must equal step {step} plus twice the pad {pad}")
    counts = [-(-e // s) for e, s in zip(extent, step)]
    padded = tuple(c * s + 2 * b for c, s, b in zip(counts, step, pad))
    offsets = tuple(itertools.product(*(range(0, c * s, s) for c, s in zip(counts, step))))
    return TilingPlan(extent, tuple(patch), tuple(step), tuple(pad), padded, offsets)


def _predict(net, batch: np.ndarray, device) -> np.ndarray:
    with torch.no_grad():
        return net(torch.from_numpy(batch).to(device)).cpu().numpy()


def detect_volume(net: Callable, volume: Volume, patch=PATCH, step=STEP, pad=PAD,
                  normalize: bool = True, batch_size: int = 4, device="cpu",
                  pad_value: float = PAD_VALUE) -> Volume:
    """Tile the scan, run ``net`` on each window and keep the argmax of window interiors."""
    if isinstance(net, nn.Module):
        net.eval()
    plan = plan_tiling(volume.shape, patch, step, pad)
    image = normalize_intensity(volume.data) if normalize else np.asarray(volume.data, np.float32)
    padded = np.full(plan.padded, pad_value, np.float32)
    padded[tuple(slice(b, b + e) for b, e in zip(pad, volume.shape))] = image
    out = np.zeros(volume.shape, np.uint8)
    core = tuple(slice(b, b + s) for b, s in zip(pad, step))
    for i in range(0, len(plan.offsets), batch_size):
        offsets = plan.offsets[i:i + batch_size]
        windows = np.stack([padded[tuple(slice(o, o + p) for o, p in zip(off, patch))] for off in offsets])
        probs = _predict(net, windows[:, None], device)
        for off, prob in zip(offsets, probs):
            region = plan.interior(off)
            kept = prob[(slice(None),) + core]
            cls = (kept[1] > kept[0]).astype(np.uint8)
            out[region] = cls[tuple(slice(0, r.stop - r.start) for r in region)]
    return volume.with_data(out)


def _next_multiple(n: int, m: int) -> int:
    return -(-n // m) * m


def slab_indices(n: int, centre: int, width: int = SLAB, label_slice: int = LABEL_SLICE) -> np.ndarray:
    """Slice indices of the slab whose ``label_slice``-th slice is ``centre``, edge-replicated."""
    return np.clip(np.arange(centre - label_slice, centre - label_slice + width), 0, n - 1)


def identify_volume(net: Callable, volume: Volume, multiple: int = 16, normalize: bool = True,
                    batch_size: int = 8, device="cpu", width: int = SLAB,
                    pad_value: float = PAD_VALUE) -> Volume:
    """Run the 2D net on the slab around every axis-0 slice; returns real values per voxel."""
    if isinstance(net, nn.Module):
        net.eval()
    image = normalize_intensity(volume.data) if normalize else np.asarray(volume.data, np.float32)
    nx, ny, nz = image.shape
    py, pz = _next_multiple(ny, multiple), _next_multiple(nz, multiple)
    oy, oz = (py - ny) // 2, (pz - nz) // 2
    out = np.zeros(image.shape, np.float32)
    for start in range(0, nx, batch_size):
        centres = range(start, min(nx, start + batch_size))
        batch = np.full((len(centres), width, py, pz), pad_value, np.float32)
        for b, c in enumerate(centres):
            batch[b, :, oy:oy + ny, oz:oz + nz] = image[slab_indices(nx, c, width)]
        pred = _predict(net, batch, device)
        out[start:start + len(centres)] = pred[:, 0, oy:oy + ny, oz:oz + nz]
    return volume.with_data(out)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def fuse(detection: Volume | np.ndarray, identification: Volume | np.ndarray) -> Volume | np.ndarray:
    """Mask the identification values with the binary detection and round to labels 0..26."""
    d = detection.data if isinstance(detection, Volume) else np.asarray(detection)
    i = identification.data if isinstance(identification, Volume) else np.asarray(identification)
    if d.shape != i.shape:
        raise ValueError(f"geometry mismatch: detection {d.shape} vs identification {i.shape}")
    if isinstance(detection, Volume) and isinstance(identification, Volume):
        if not (np.allclose(detection.spacing, identification.spacing)
                and np.allclose(detection.origin, identification.origin)):
            raise ValueError("geometry mismatch: spacing/origin differ")
    labels = np.clip(round_half_away(d.astype(np.float64) * i), 0, NUM_VERTEBRAE).astype(np.uint8)
    labels[d == 0] = 0
    return detection.with_data(labels) if isinstance(detection, Volume) else labels


class ThresholdStub(nn.Module):
    """Detection stand-in: foreground where the local max over a ``k``-cube exceeds ``level``."""

    def __init__(self, level: float = 0.0, k: int = 1):
        super().__init__()
        self.level = level
        self.k = k

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.k > 1:
            x = F.max_pool3d(x, self.k, stride=1, padding=self.k // 2)
        fg = (x > self.level).to(x.dtype)
        return torch.cat([1 - fg, fg], dim=1)


class SlabMeanStub(nn.Module):
    """Identification stand-in: ``scale * mean over slab channels + offset``."""

    def __init__(self, scale: float = 1.0, offset: float = 0.0):
        super().__init__()
        self.scale = scale
        self.offset = offset

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * x.mean(dim=1, keepdim=True) + self.offset
