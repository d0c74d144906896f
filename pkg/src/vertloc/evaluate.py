"""Localization error and identification rate, pooled by spinal region."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .labels import REGIONS, index_to_name, name_to_index, region_of
from .volume import CentroidSet

log = logging.getLogger(__name__)

ID_DISTANCE_MM = 20.0
REPORT_REGIONS = ("all", "cervical", "thoracic", "lumbar", "sacral")


@dataclass
class ScanScore:
    errors: dict[int, float]          # label -> mm, labels in both prediction and truth
    id_correct: dict[int, bool]       # predicted label -> identification flag
    truth_labels: tuple[int, ...]
    name: str = ""

    @property
    def mean_error(self) -> float:
        return float(np.mean(list(self.errors.values()))) if self.errors else float("nan")

    @property
    def id_rate(self) -> float:
        """Correct identifications over ground-truth vertebrae."""
        if not self.truth_labels:
            return float("nan")
        return sum(self.id_correct.values()) / len(self.truth_labels)


def score_scan(pred: CentroidSet, truth: CentroidSet, name: str = "",
               id_distance: float = ID_DISTANCE_MM) -> ScanScore:
    """Per-vertebra errors and identification flags for one scan.

    A prediction is correctly identified when the closest ground-truth
    centroid carries its label and lies strictly closer than ``id_distance``.
    """
    errors = {k: float(np.linalg.norm(p - truth[k])) for k, p in pred.items() if k in truth}
    truth_labels = tuple(truth.labels)
    truth_pts = np.array([truth[k] for k in truth_labels]) if truth_labels else np.zeros((0, 3))
    flags = {}
    for k, p in pred.items():
        if not truth_labels:
            flags[k] = False
            continue
        d = np.linalg.norm(truth_pts - p, axis=1)
        nearest = int(np.argmin(d))
        flags[k] = truth_labels[nearest] == k and d[nearest] < id_distance
    return ScanScore(errors, flags, truth_labels, name)


def _stats(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())  # population std


@dataclass
class RegionStats:
    n_truth: int
    n_pred: int
    n_correct: int
    errors: list[float]

    @property
    def id_rate(self) -> float:
        return 100.0 * self.n_correct / self.n_truth if self.n_truth else float("nan")

    @property
    def id_rate_pred(self) -> float:
        """Alternative denominator: predicted centroids."""
        return 100.0 * self.n_correct / self.n_pred if self.n_pred else float("nan")

    @property
    def mean(self) -> float:
        return _stats(self.errors)[0]

    @property
    def std(self) -> float:
        return _stats(self.errors)[1]

    def to_dict(self) -> dict:
        # empty regions have undefined statistics; JSON has no NaN, so use null
        def num(x):
            return None if math.isnan(x) else x
        return {"id_rate": num(self.id_rate), "id_rate_pred_denominator": num(self.id_rate_pred),
                "mean": num(self.mean), "std": num(self.std), "n_truth": self.n_truth, "n_pred": self.n_pred, "n_correct": self.n_correct,
                "n_errors": len(self.errors)}


@dataclass
class RegionReport:
    regions: dict[str, RegionStats]
    per_vertebra: dict[int, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "regions": {k: v.to_dict() for k, v in self.regions.items()},
            "per_vertebra": {index_to_name(k): v for k, v in sorted(self.per_vertebra.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionReport":
        per_vertebra = {name_to_index(k): list(v) for k, v in d.get("per_vertebra", {}).items()}
        regions = {}
        for name, r in d["regions"].items():
            members = range(1, 27) if name == "all" else REGIONS[name]
            errors = [e for k, v in per_vertebra.items() if k in members for e in v]
            regions[name] = RegionStats(r["n_truth"], r["n_pred"], r["n_correct"], errors)
        return cls(regions, per_vertebra)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")

    def table(self) -> str:
        lines = [f"{'Region':<10} {'Id Rate':>8} {'Mean':>7} {'Std':>7} {'N':>5}"]
        for name in REPORT_REGIONS:
            r = self.regions.get(name)
            if r is None or (r.n_truth == 0 and not r.errors):
                continue
            lines.append(f"{name.capitalize():<10} {r.id_rate:7.1f}% {r.mean:7.2f} {r.std:7.2f} {r.n_truth:>5}")
        return "\n".join(lines) + "\n"


def build_report(scores: Sequence[ScanScore]) -> RegionReport:
    """Pool per-vertebra errors and identification counts over scans, per region."""
    if not scores:
        raise ValueError("no scan scores to report")
    per_vertebra: dict[int, list[float]] = {}
    counts = {name: [0, 0, 0] for name in REPORT_REGIONS}  # truth, pred, correct
    for s in scores:
        for k in s.truth_labels:
            counts["all"][0] += 1
            counts[region_of(k)][0] += 1
        for k, ok in s.id_correct.items():
            for name in ("all", region_of(k)):
                counts[name][1] += 1
                counts[name][2] += int(ok)
        for k, e in s.errors.items():
            per_vertebra.setdefault(k, []).append(e)
    regions = {}
    for name in REPORT_REGIONS:
        members = range(1, 27) if name == "all" else REGIONS[name]
        errors = [e for k in sorted(per_vertebra) if k in members for e in per_vertebra[k]]
        regions[name] = RegionStats(*counts[name], errors)
    return RegionReport(regions, dict(sorted(per_vertebra.items())))


def plot_per_vertebra(report: RegionReport, path: str | Path) -> list[str]:
    """Box plot of localization error per vertebra (C1 to S2 order); returns plotted names."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    indices = [k for k in sorted(report.per_vertebra) if report.per_vertebra[k]]
    if not indices:
        raise ValueError("report holds no per-vertebra errors")
    for name, members in REGIONS.items():
        if not any(k in members for k in indices):
            log.info("no %s vertebrae in report, omitted from plot", name)
    names = [index_to_name(k) for k in indices]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(indices) + 1.5), 4.0))
    ax.boxplot([report.per_vertebra[k] for k in indices])
    ax.set_xticks(range(1, len(names) + 1), names, rotation=90)
    ax.set_ylabel("Localization error (mm)")
    ax.set_title("Localization error per vertebra")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return names
