"""Pipeline configuration: every tunable value with its default."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .labels import RadiiTable
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SamplerConfig:
    detection_samples: int = 5
    identification_samples: int = 100
    positive_fraction: float = 0.8
    detection_patch: tuple[int, int, int] = (64, 64, 80)
    identification_patch: tuple[int, int, int] = (8, 80, 320)
    label_slice: int = 3
    deform_sigma: float = 0.7
    deform_points: int = 3
    max_attempts: int = 1000
    hu_window: tuple[float, float] = (-1000.0, 2000.0)


@dataclass
class TilingConfig:
    patch: tuple[int, int, int] = (64, 64, 80)
    step: tuple[int, int, int] = (32, 32, 40)
    pad: tuple[int, int, int] = (16, 16, 20)
    slab_multiple: int = 16
    batch_size: int = 4


@dataclass
class PipelineConfig:
    train_dir: str = "data/train"
    test_dir: str = "data/test"
    output_dir: str = "output"
    seed: int = 0
    coordinate_convention: str = "mm"
    radii: dict[str, float] = field(default_factory=dict)
    validation_fraction: float = 0.1
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    detection: TrainConfig = field(default_factory=TrainConfig.detection)
    identification: TrainConfig = field(default_factory=TrainConfig.identification)

    def radii_table(self) -> RadiiTable:
        return RadiiTable.from_names(self.radii) if self.radii else RadiiTable()

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "PipelineConfig":
        s, t = self.sampler, self.tiling
        positives = {
            "sampler.detection_samples": s.detection_samples,
            "sampler.identification_samples": s.identification_samples,
            "sampler.positive_fraction": s.positive_fraction,
            "sampler.deform_points": s.deform_points,
            "sampler.max_attempts": s.max_attempts,
            "tiling.slab_multiple": t.slab_multiple,
            "tiling.batch_size": t.batch_size,
        }
        for seq_name, seq in (("sampler.detection_patch", s.detection_patch),
                              ("sampler.identification_patch", s.identification_patch),
                              ("tiling.patch", t.patch), ("tiling.step", t.step)):
            for i, v in enumerate(seq):
                positives[f"{seq_name}[{i}]"] = v
        for name, value in positives.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if s.deform_sigma < 0 or min(t.pad) < 0:
            raise ConfigError("deform_sigma and tiling.pad must be non-negative")
        if not 0 < s.positive_fraction <= 1 or not 0 <= self.validation_fraction < 1:
            raise ConfigError("positive_fraction must lie in (0, 1], validation_fraction in [0, 1)")
        if not 0 <= s.label_slice < s.identification_patch[0]:
            raise ConfigError("label_slice must index into the identification slab")
        if s.hu_window[0] >= s.hu_window[1]:
            raise ConfigError("hu_window must be increasing")
        if any(p != st + 2 * b for p, st, b in zip(t.patch, t.step, t.pad)):
            raise ConfigError("tiling.patch must equal tiling.step + 2 * tiling.pad")
        if self.coordinate_convention not in ("mm", "voxel"):
            raise ConfigError(f"unknown coordinate_convention {self.coordinate_convention!r}")
        try:
            self.radii_table()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def require_dirs(self, *names: str) -> None:
        for name in names:
            path = Path(getattr(self, name))
            if not path.is_dir():
                raise ConfigError(f"{name} does not exist: {path}")


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in ("sampler", "tiling"):
            value = _build(SamplerConfig if name == "sampler" else TilingConfig, value)
        elif name in ("detection", "identification"):
            base = asdict(getattr(TrainConfig, name)())
            try:
                value = TrainConfig(**{**base, **value})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Read a JSON config (missing keys take defaults), apply overrides and validate."""
    data = json.loads(Path(path).read_text()) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return _build(PipelineConfig, data).validate()
