"""Paired 3D landmarks and their CSV exchange format.

The CSV layout matches BigWarp exports: one row per landmark,
`"name","active",mvg_x,mvg_y,mvg_z,fix_x,fix_y,fix_z`, no header line,
coordinates in micrometres. Inactive rows are kept on read but excluded
from fitting.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ._ioutil import atomic_write_text
from .errors import CorruptFileError, ParameterError


@dataclass(frozen=True)
class Landmark:
    name: str
    active: bool
    moving_um: tuple[float, float, float]
    fixed_um: tuple[float, float, float]

    def __post_init__(self):
        moving = tuple(float(c) for c in self.moving_um)
        fixed = tuple(float(c) for c in self.fixed_um)
        if len(moving) != 3 or len(fixed) != 3:
            raise ParameterError("landmark coordinates must be triples")
        if not all(math.isfinite(c) for c in moving + fixed):
            raise ParameterError(f"landmark {self.name!r} has non-finite coordinates")
        object.__setattr__(self, "moving_um", moving)
        object.__setattr__(self, "fixed_um", fixed)


@dataclass
class LandmarkSet:
    landmarks: list[Landmark] = field(default_factory=list)

    def __post_init__(self):
        names = [lm.name for lm in self.landmarks]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ParameterError(f"duplicate landmark names: {dupes}")

    def __len__(self) -> int:
        return len(self.landmarks)

    def __iter__(self):
        return iter(self.landmarks)

    def active(self) -> list[Landmark]:
        return [lm for lm in self.landmarks if lm.active]

    def moving_array(self, active_only: bool = True) -> np.ndarray:
        src = self.active() if active_only else self.landmarks
        return np.array([lm.moving_um for lm in src], dtype=np.float64).reshape(-1, 3)

    def fixed_array(self, active_only: bool = True) -> np.ndarray:
        src = self.active() if active_only else self.landmarks
        return np.array([lm.fixed_um for lm in src], dtype=np.float64).reshape(-1, 3)

    def names(self, active_only: bool = True) -> list[str]:
        src = self.active() if active_only else self.landmarks
        return [lm.name for lm in src]

    def swapped(self) -> "LandmarkSet":
        """Moving and fixed roles exchanged (used for inverse fits)."""
        return LandmarkSet([
            Landmark(lm.name, lm.active, lm.fixed_um, lm.moving_um)
            for lm in self.landmarks
        ])


def read_landmarks_csv(path: str) -> LandmarkSet:
    landmarks: list[Landmark] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 8:
                raise CorruptFileError(
                    f"{path}:{lineno}: expected 8 columns, got {len(row)}"
                )
            name = row[0]
            flag = row[1].strip().lower()
            if flag not in ("true", "false"):
                raise CorruptFileError(
                    f"{path}:{lineno}: active flag must be true/false, got {row[1]!r}"
                )
            try:
                coords = [float(c) for c in row[2:8]]
            except ValueError as e:
                raise CorruptFileError(f"{path}:{lineno}: bad coordinate") from e
            landmarks.append(
                Landmark(name, flag == "true", tuple(coords[:3]), tuple(coords[3:]))
            )
    return LandmarkSet(landmarks)


def write_landmarks_csv(lms: LandmarkSet, path: str) -> None:
    buf = io.StringIO()
    for lm in lms.landmarks:
        name = lm.name.replace('"', '""')
        coords = ",".join(repr(c) for c in lm.moving_um + lm.fixed_um)
        flag = "true" if lm.active else "false"
        buf.write(f'"{name}","{flag}",{coords}\n')
    atomic_write_text(path, buf.getvalue())
