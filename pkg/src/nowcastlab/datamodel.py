"""Grid and sample types, unit conversion, cropping and min-max scaling.

Arrays are stored as 32-bit floats; statistics are accumulated in 64-bit.
Row 0 of every grid is the northernmost row (top-left geographic origin).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import DegenerateStatsError, InvalidInputError, OutOfBoundsError

# Density of liquid water in kg/m^3; 1 kg/m^2 of water is a 1 mm layer.
WATER_DENSITY = 1000.0
KG_PER_M2_TO_MM = 1000.0 / WATER_DENSITY


class Unit(str, enum.Enum):
    MM_PER_H = "mm_per_h"
    KG_PER_M2_ACCUMULATED = "kg_per_m2_accumulated"
    KELVIN = "kelvin"
    PASCAL = "pascal"
    FRACTION = "fraction_0_1"
    M_PER_S = "m_per_s"
    DIMENSIONLESS = "dimensionless"


class Variable(str, enum.Enum):
    RAIN = "rain"
    TEMP_300M = "temp_300m"
    PRESSURE_MSL = "pressure_msl"
    REL_HUMIDITY_2M = "rel_humidity_2m"
    WIND_U_300M = "wind_u_300m"
    WIND_V_300M = "wind_v_300m"


# Channel order of the auxiliary stack, variable-major then time.
AUX_VARIABLES: tuple[Variable, ...] = (
    Variable.TEMP_300M,
    Variable.PRESSURE_MSL,
    Variable.REL_HUMIDITY_2M,
    Variable.WIND_U_300M,
    Variable.WIND_V_300M,
)
ALL_VARIABLES: tuple[Variable, ...] = (Variable.RAIN,) + AUX_VARIABLES

NATIVE_UNITS = {
    Variable.RAIN: Unit.MM_PER_H,
    Variable.TEMP_300M: Unit.KELVIN,
    Variable.PRESSURE_MSL: Unit.PASCAL,
    Variable.REL_HUMIDITY_2M: Unit.FRACTION,
    Variable.WIND_U_300M: Unit.M_PER_S,
    Variable.WIND_V_300M: Unit.M_PER_S,
}

N_INPUT_FRAMES = 4
N_TARGET_FRAMES = 4
N_AUX_CHANNELS = len(AUX_VARIABLES) * N_INPUT_FRAMES


def _as_grid_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a 2D grid, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"grid must be at least 1x1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("grid contains non-finite values")
    return arr


@dataclass(frozen=True)
class Grid2D:
    values: np.ndarray
    unit: Unit = Unit.DIMENSIONLESS

    def __post_init__(self):
        object.__setattr__(self, "values", _as_grid_array(self.values))
        object.__setattr__(self, "unit", Unit(self.unit))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FrameSequence:
    """Time-ordered frames of one variable, oldest first.

    ``frames`` is a ``(T, H, W)`` float32 array rather than a list of
    :class:`Grid2D` so that sequences can be sliced and stacked cheaply.
    """

    variable: Variable
    frames: np.ndarray
    unit: Unit
    step_hours: float = 1.0
    start_hour: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidInputError(f"frames must be (T, H, W) with T, H, W >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError(f"{Variable(self.variable).value}: non-finite frame values")
        if not self.step_hours > 0:
            raise InvalidInputError("step_hours must be positive")
        object.__setattr__(self, "frames", arr)
        object.__setattr__(self, "variable", Variable(self.variable))
        object.__setattr__(self, "unit", Unit(self.unit))

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_hour + self.step_hours * np.arange(len(self))

    def grid(self, i: int) -> Grid2D:
        return Grid2D(self.frames[i], self.unit)

    def with_frames(self, frames: np.ndarray, unit: Unit | None = None, start_hour: float | None = None):
        return FrameSequence(
            self.variable,
            frames,
            self.unit if unit is None else unit,
            self.step_hours,
            self.start_hour if start_hour is None else start_hour,
        )


@dataclass
class Sample:
    """Four input rain frames, four target rain frames and 20 auxiliary frames.

    ``aux_in`` has shape ``(5, 4, H, W)`` in :data:`AUX_VARIABLES` order and is
    aligned with the timestamps of ``rain_in``.
    """

    rain_in: np.ndarray
    rain_target: np.ndarray
    aux_in: np.ndarray
    sequence_id: int = 0
    window_start: int = 0
    start_hour: float = 0.0
    step_hours: float = 1.0

    def __post_init__(self):
        self.rain_in = np.asarray(self.rain_in, dtype=np.float32)
        self.rain_target = np.asarray(self.rain_target, dtype=np.float32)
        self.aux_in = np.asarray(self.aux_in, dtype=np.float32)
        h, w = self.rain_in.shape[-2:]
        expected = {
            "rain_in": (N_INPUT_FRAMES, h, w),
            "rain_target": (N_TARGET_FRAMES, h, w),
            "aux_in": (len(AUX_VARIABLES), N_INPUT_FRAMES, h, w),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise InvalidInputError(f"{name}: expected shape {shape}, got {actual}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rain_in.shape[1], self.rain_in.shape[2]

    @property
    def input_timestamps(self) -> np.ndarray:
        return self.start_hour + self.step_hours * np.arange(N_INPUT_FRAMES)

    @property
    def target_timestamps(self) -> np.ndarray:
        return self.start_hour + self.step_hours * np.arange(N_INPUT_FRAMES, N_INPUT_FRAMES + N_TARGET_FRAMES)

    @property
    def end_hour(self) -> float:
        """Timestamp of the last target frame."""
        return float(self.target_timestamps[-1])

    def aux_stack(self) -> np.ndarray:
        """Auxiliary frames flattened to ``(20, H, W)``."""
        return self.aux_in.reshape(N_AUX_CHANNELS, *self.shape)

    def aux_sequence(self, variable: Variable) -> FrameSequence:
        i = AUX_VARIABLES.index(Variable(variable))
        return FrameSequence(variable, self.aux_in[i], NATIVE_UNITS[Variable(variable)], self.step_hours, self.start_hour)


@dataclass(frozen=True)
class VariableStats:
    variable: Variable
    min: float
    max: float

    def __post_init__(self):
        object.__setattr__(self, "variable", Variable(self.variable))

    @classmethod
    def identity(cls, variable: Variable) -> "VariableStats":
        return cls(variable, 0.0, 1.0)

    @classmethod
    def from_values(cls, variable: Variable, values: np.ndarray) -> "VariableStats":
        variable = Variable(variable)
        if variable is Variable.REL_HUMIDITY_2M:
            return cls.identity(variable)
        arr = np.asarray(values, dtype=np.float64)
        return cls(variable, float(arr.min()), float(arr.max()))

    def to_dict(self) -> dict:
        return {"variable": self.variable.value, "min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, d: dict) -> "VariableStats":
        return cls(Variable(d["variable"]), float(d["min"]), float(d["max"]))


@dataclass(frozen=True)
class GeoReference:
    """Pixel-center coordinates of the top-left pixel and per-pixel steps."""

    lat_top: float
    lon_left: float
    lat_step: float
    lon_step: float


@dataclass(frozen=True)
class CropRegion:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    lat_step: float = 0.023
    lon_step: float = 0.037

    def __post_init__(self):
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise InvalidInputError("crop region must have lat_max > lat_min and lon_max > lon_min")
        if self.lat_step <= 0 or self.lon_step <= 0:
            raise InvalidInputError("crop steps must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        # Both bounding coordinates are pixel centers.
        rows = int(round((self.lat_max - self.lat_min) / self.lat_step)) + 1
        cols = int(round((self.lon_max - self.lon_min) / self.lon_step)) + 1
        return rows, cols


# The Netherlands box used for the HARMONIE grids.
NETHERLANDS = CropRegion(50.84, 53.462, 3.182, 7.4, 0.023, 0.037)


def accumulated_to_rate(acc: FrameSequence) -> FrameSequence:
    """Difference hourly accumulations into rain rates in mm/h, clamped at 0."""
    if acc.unit is not Unit.KG_PER_M2_ACCUMULATED:
        raise InvalidInputError(f"expected accumulated rain in kg/m^2, got {acc.unit.value}")
    if len(acc) < 2:
        raise InvalidInputError("need at least 2 accumulated frames to form a rate")
    frames = acc.frames.astype(np.float64)
    diff = np.diff(frames, axis=0) * KG_PER_M2_TO_MM / acc.step_hours
    rate = np.maximum(diff, 0.0).astype(np.float32)
    return FrameSequence(acc.variable, rate, Unit.MM_PER_H, acc.step_hours, acc.start_hour + acc.step_hours)


def crop(grid: Grid2D, region: CropRegion, origin: GeoReference) -> Grid2D:
    if not (np.isclose(region.lat_step, origin.lat_step) and np.isclose(region.lon_step, origin.lon_step)):
        raise InvalidInputError("crop region and grid use different pixel steps; resampling is not supported")
    rows, cols = region.shape
    r0 = int(round((origin.lat_top - region.lat_max) / origin.lat_step))
    c0 = int(round((region.lon_min - origin.lon_left) / origin.lon_step))
    h, w = grid.height, grid.width
    if r0 < 0:
        raise OutOfBoundsError(f"lat_max {region.lat_max} lies north of the grid's top edge {origin.lat_top}")
    if c0 < 0:
        raise OutOfBoundsError(f"lon_min {region.lon_min} lies west of the grid's left edge {origin.lon_left}")
    if r0 + rows > h:
        bottom = origin.lat_top - (h - 1) * origin.lat_step
        raise OutOfBoundsError(f"lat_min {region.lat_min} lies south of the grid's bottom edge {bottom:.6g}")
    if c0 + cols > w:
        right = origin.lon_left + (w - 1) * origin.lon_step
        raise OutOfBoundsError(f"lon_max {region.lon_max} lies east of the grid's right edge {right:.6g}")
    return Grid2D(grid.values[r0:r0 + rows, c0:c0 + cols].copy(), grid.unit)


def _check_stats(seq_variable: Variable, stats: VariableStats):
    if Variable(seq_variable) is not stats.variable:
        raise InvalidInputError(f"stats for {stats.variable.value} applied to {Variable(seq_variable).value}")
    if stats.variable is not Variable.REL_HUMIDITY_2M and not stats.max > stats.min:
        raise DegenerateStatsError(f"{stats.variable.value}: max ({stats.max}) must exceed min ({stats.min})")


def normalize_array(values: np.ndarray, stats: VariableStats) -> np.ndarray:
    """Min-max scale ``values``; relative humidity passes through unchanged."""
    _check_stats(stats.variable, stats)
    if stats.variable is Variable.REL_HUMIDITY_2M:
        return np.asarray(values, dtype=np.float32).copy()
    x = np.asarray(values, dtype=np.float64)
    return ((x - stats.min) / (stats.max - stats.min)).astype(np.float32)


def denormalize_array(values: np.ndarray, stats: VariableStats) -> np.ndarray:
    _check_stats(stats.variable, stats)
    if stats.variable is Variable.REL_HUMIDITY_2M:
        return np.asarray(values, dtype=np.float32).copy()
    x = np.asarray(values, dtype=np.float64)
    return (x * (stats.max - stats.min) + stats.min).astype(np.float32)


def normalize(seq: FrameSequence, stats: VariableStats) -> FrameSequence:
    _check_stats(seq.variable, stats)
    return seq.with_frames(normalize_array(seq.frames, stats), unit=Unit.DIMENSIONLESS)


def denormalize(seq: FrameSequence, stats: VariableStats) -> FrameSequence:
    _check_stats(seq.variable, stats)
    return seq.with_frames(denormalize_array(seq.frames, stats), unit=NATIVE_UNITS[seq.variable])


def stack_samples(samples: Sequence[Sample]):
    """Stack samples into ``(rain_in, aux, rain_target)`` arrays of shape
    ``(N, 4, H, W)``, ``(N, 20, H, W)`` and ``(N, 4, H, W)``."""
    if not samples:
        raise InvalidInputError("no samples to stack")
    rain_in = np.stack([s.rain_in for s in samples])
    aux = np.stack([s.aux_stack() for s in samples])
    target = np.stack([s.rain_target for s in samples])
    return rain_in, aux, target
