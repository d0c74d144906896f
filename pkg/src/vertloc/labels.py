"""Vertebra naming, spinal regions and the per-vertebra radii table."""

from __future__ import annotations

from types import MappingProxyType
from typing import Mapping

NAMES: tuple[str, ...] = (
    tuple(f"C{i}" for i in range(1, 8))
    + tuple(f"T{i}" for i in range(1, 13))
    + tuple(f"L{i}" for i in range(1, 6))
    + ("S1", "S2")
)
NUM_VERTEBRAE = len(NAMES)  # 26

_INDEX = {name: i + 1 for i, name in enumerate(NAMES)}

REGIONS: dict[str, range] = {
    "cervical": range(1, 8),
    "thoracic": range(8, 20),
    "lumbar": range(20, 25),
    "sacral": range(25, 27),
}

# Vertebral body radii in mm, C1..S2.
DEFAULT_RADII_MM: tuple[float, ...] = (
    14, 15, 16, 17, 17, 19, 20,
    19, 20, 22, 24, 25, 27, 29, 31, 33, 32, 33, 34,
    34, 37, 38, 36, 34,
    34, 34,
)


def name_to_index(name: str) -> int:
    try:
        return _INDEX[name.strip().upper()]
    except KeyError:
        raise ValueError(f"unknown vertebra name {name!r}") from None


def index_to_name(index: int) -> str:
    if not 1 <= index <= NUM_VERTEBRAE:
        raise ValueError(f"vertebra index {index} outside 1..{NUM_VERTEBRAE}")
    return NAMES[index - 1]


def region_of(index: int) -> str:
    for region, members in REGIONS.items():
        if index in members:
            return region
    raise ValueError(f"vertebra index {index} outside 1..{NUM_VERTEBRAE}")


class RadiiTable(Mapping[int, float]):
    """Immutable map from vertebra index (1..26) to disc radius in mm."""

    def __init__(self, radii: Mapping[int, float] | None = None):
        table = {i + 1: float(r) for i, r in enumerate(DEFAULT_RADII_MM)}
        if radii:
            for key, value in radii.items():
                index = name_to_index(key) if isinstance(key, str) else int(key)
                index_to_name(index)
                table[index] = float(value)
        for index, r in table.items():
            if not 0 < r < 100:
                raise ValueError(f"radius for {index_to_name(index)} must lie in (0, 100) mm, got {r}")
        self._table = MappingProxyType(table)

    @classmethod
    def from_names(cls, radii: Mapping[str, float]) -> "RadiiTable":
        return cls({name_to_index(k): v for k, v in radii.items()})

    def __getitem__(self, index: int) -> float:
        return self._table[index]

    def __iter__(self):
        return iter(self._table)

    def __len__(self) -> int:
        return len(self._table)

    def expanded(self, delta: float) -> "RadiiTable":
        return RadiiTable({k: v + delta for k, v in self._table.items()})

    def to_dict(self) -> dict[str, float]:
        return {index_to_name(k): v for k, v in sorted(self._table.items())}

    def __repr__(self) -> str:
        return f"RadiiTable({self.to_dict()})"
