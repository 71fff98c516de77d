"""Simulator input space and the raw <-> [-1, 1] coordinate maps.

Everything downstream (designs, emulators, implausibility) works in unit
coordinates; raw units only appear when talking to a simulator or writing
reports.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class BoundsError(ValueError):
    """A coordinate lies outside its parameter's declared range."""

    def __init__(self, name: str, value: float, lo: float, hi: float):
        self.name = name
        self.value = value
        super().__init__(f"parameter {name!r}: value {value!r} outside [{lo!r}, {hi!r}]")


@dataclass(frozen=True)
class ParameterDef:
    name: str
    min: float
    max: float

    def __post_init__(self):
        if not self.name or not str(self.name).strip():
            raise ValueError("parameter name must be non-empty")
        if not np.isfinite(self.min) or not np.isfinite(self.max):
            raise ValueError(f"parameter {self.name!r}: range must be finite")
        if not self.min < self.max:
            raise ValueError(f"parameter {self.name!r}: min ({self.min}) must be < max ({self.max})")


@dataclass(frozen=True)
class ParameterSpace:
    params: tuple[ParameterDef, ...]

    def __init__(self, params: Iterable[ParameterDef]):
        params = tuple(params)
        if len(params) < 1:
            raise ValueError("parameter space needs at least one parameter")
        names = [p.name for p in params]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate parameter names: {dupes}")
        object.__setattr__(self, "params", params)

    @classmethod
    def from_ranges(cls, ranges: dict[str, Sequence[float]]) -> "ParameterSpace":
        return cls(ParameterDef(name, float(lo), float(hi)) for name, (lo, hi) in ranges.items())

    @classmethod
    def unit_cube(cls, dimension: int, prefix: str = "x") -> "ParameterSpace":
        return cls(ParameterDef(f"{prefix}{k}", -1.0, 1.0) for k in range(dimension))

    @property
    def dimension(self) -> int:
        return len(self.params)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.min for p in self.params])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.max for p in self.params])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def _check(self, values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> None:
        if values.shape[-1] != self.dimension:
            raise ValueError(f"expected {self.dimension} coordinates, got {values.shape[-1]}")
        bad = (values < lo) | (values > hi) | ~np.isfinite(values)
        if bad.any():
            row = np.argwhere(bad)[0]
            k = row[-1]
            raise BoundsError(self.params[k].name, float(values[tuple(row)]), float(lo[k]), float(hi[k]))

    def to_unit(self, raw) -> np.ndarray:
        """Map raw coordinates (shape ``(d,)`` or ``(n, d)``) into [-1, 1]."""
        raw = np.asarray(raw, dtype=float)
        lo, hi = self.lower, self.upper
        self._check(raw, lo, hi)
        u = 2.0 * (raw - lo) / (hi - lo) - 1.0
        # round-off can push the endpoints a hair outside the cube
        return np.clip(u, -1.0, 1.0)

    def from_unit(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        self._check(u, -np.ones(self.dimension), np.ones(self.dimension))
        lo, hi = self.lower, self.upper
        raw = lo + (u + 1.0) * 0.5 * (hi - lo)
        return np.clip(raw, lo, hi)

    def to_dict(self) -> list[dict]:
        return [{"name": p.name, "min": p.min, "max": p.max} for p in self.params]
