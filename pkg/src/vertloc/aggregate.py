"""Dense predicted labels back to sparse centroid estimates by thresholded median votes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import RadiiTable, index_to_name, name_to_index
from .volume import CentroidSet, Volume

MIN_VOTES = 3000.0
VOTE_FRACTION = 0.4


def vote_threshold(index: int, radii: RadiiTable) -> float:
    """Minimum voxel votes for a centroid: ``max(3000, 0.4 * R**3)``."""
    if index not in radii:
        raise KeyError(f"no radius for vertebra {index}")
    return max(MIN_VOTES, VOTE_FRACTION * float(radii[index]) ** 3)


def lower_median(values: np.ndarray) -> float:
    """Median; for an even count the lower of the two middle values."""
    k = (len(values) - 1) // 2
    return float(np.partition(values, k)[k])


@dataclass(frozen=True)
class Vote:
    index: int
    count: int
    threshold: float
    median: tuple[float, float, float]

    @property
    def accepted(self) -> bool:
        return self.count >= self.threshold

    def to_dict(self) -> dict:
        x, y, z = self.median
        return {"name": index_to_name(self.index), "x": x, "y": y, "z": z, "votes": self.count,
                "threshold": self.threshold, "accepted": self.accepted}


@dataclass(frozen=True, eq=False)
class PredictionResult:
    votes: dict[int, Vote]
    labels: Volume | None = None
    meta: dict = field(default_factory=dict)

    @property
    def centroids(self) -> CentroidSet:
        return CentroidSet({k: v.median for k, v in self.votes.items() if v.accepted})

    def to_dict(self) -> dict:
        return {"vertebrae": [v.to_dict() for _, v in sorted(self.votes.items())], **self.meta}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PredictionResult":
        d = json.loads(Path(path).read_text())
        votes = {}
        for v in d.pop("vertebrae"):
            index = name_to_index(v["name"])
            votes[index] = Vote(index, int(v["votes"]), float(v["threshold"]), (v["x"], v["y"], v["z"]))
        return cls(votes, None, d)


def aggregate_centroids(fused: Volume, radii: RadiiTable | None = None) -> PredictionResult:
    """Count votes per label, take componentwise medians (mm, volume frame), apply thresholds."""
    radii = radii or RadiiTable()
    data = np.asarray(fused.data)
    flat = data.ravel()
    order = np.argsort(flat, kind="stable")
    present, starts, counts = np.unique(flat[order], return_index=True, return_counts=True)
    spacing = np.asarray(fused.spacing)
    votes = {}
    for value, start, count in zip(present, starts, counts):
        if value == 0:
            continue
        coords = np.unravel_index(order[start:start + count], data.shape)
        median = tuple(lower_median(c.astype(np.float64)) * s for c, s in zip(coords, spacing))
        index = int(value)
        votes[index] = Vote(index, int(count), vote_threshold(index, radii), median)
    return PredictionResult(votes, fused)
