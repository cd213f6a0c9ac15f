"""Choose the (LFL, FD) calibration experiments that populate a lens table."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass(frozen=True)
class LensSpec:
    name: str
    lfl_min_mm: float
    lfl_max_mm: float
    fd_min_m: float
    fd_lower_m: float

    def __post_init__(self):
        if not (0 < self.lfl_min_mm <= self.lfl_max_mm):
            raise ValueError("LensSpec requires 0 < lfl_min_mm <= lfl_max_mm")
        if not (0 < self.fd_min_m <= self.fd_lower_m):
            raise ValueError("LensSpec requires 0 < fd_min_m <= fd_lower_m")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LensSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown LensSpec fields: {sorted(unknown)}")
        return cls(**data)


CANON17 = LensSpec("canon17", 17.0, 120.0, 0.853, 1.5)
PREMISTA80 = LensSpec("premista80", 80.0, 250.0, 1.5, 2.5)
PRESETS = {spec.name: spec for spec in (CANON17, PREMISTA80)}


def load_lens(path_or_name: str | Path) -> LensSpec:
    """Read a lens JSON file, or return a built-in preset by name."""
    if str(path_or_name) in PRESETS and not Path(path_or_name).exists():
        return PRESETS[str(path_or_name)]
    with open(path_or_name) as fh:
        return LensSpec.from_dict(json.load(fh))


@dataclass(frozen=True)
class ExperimentGrid:
    lfl_values_mm: tuple[float, ...]
    fd_values_m: tuple[float, ...]
    cells: tuple[tuple[float, float], ...] = field(init=False)

    def __post_init__(self):
        for name in ("lfl_values_mm", "fd_values_m"):
            vals = getattr(self, name)
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing")
        object.__setattr__(
            self, "cells", tuple(itertools.product(self.lfl_values_mm, self.fd_values_m))
        )

    def __len__(self) -> int:
        return len(self.cells)


def _strictly_increasing(values) -> list[float]:
    out: list[float] = []
    for v in sorted(values):
        if not out or v > out[-1]:
            out.append(v)
    return out


def sample_lfl(spec: LensSpec) -> list[float]:
    """Exponentially widening LFL steps (1, 2, 4, ... mm) from min, capped at max."""
    values = [spec.lfl_min_mm]
    step = 1.0
    while values[-1] + step < spec.lfl_max_mm:
        values.append(values[-1] + step)
        step *= 2.0
    values.append(spec.lfl_max_mm)
    return _strictly_increasing(values)


def sample_fd(spec: LensSpec) -> list[float]:
    """FD_min plus nine values evenly spaced in disparity between 1/FD_lower and 0."""
    # the first disparity step is FD_lower itself; take it exactly so a spec
    # with FD_min == FD_lower collapses to a single value
    values = [spec.fd_min_m, spec.fd_lower_m]
    for i in range(2, 10):
        disparity = (10 - i) / (9.0 * spec.fd_lower_m)
        values.append(1.0 / disparity)
    return _strictly_increasing(values)


def build_grid(spec: LensSpec) -> ExperimentGrid:
    return ExperimentGrid(tuple(sample_lfl(spec)), tuple(sample_fd(spec)))
