"""Volume data model and slicing along the three anatomical orientations.

Storage is a C-ordered ``(nz, ny, nx)`` float32 array: z indexes axial slices,
y coronal slices and x sagittal slices.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class VolumeError(ValueError):
    pass


class Orientation(str, Enum):
    """Slicing orientation. Each member fixes one axis of the volume."""

    AXIAL = "axial"  # fix z -> plane (y, x)
    CORONAL = "coronal"  # fix y -> plane (z, x)
    SAGITTAL = "sagittal"  # fix x -> plane (z, y)

    @property
    def axis(self) -> int:
        return _AXIS[self]

    @classmethod
    def parse(cls, name: str) -> "Orientation":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise VolumeError(f"unknown orientation {name!r}") from None


_AXIS = {Orientation.AXIAL: 0, Orientation.CORONAL: 1, Orientation.SAGITTAL: 2}


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise VolumeError(f"volume must be 3-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise VolumeError(f"volume dims must be >= 1, got {data.shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.dims == other.dims and self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"Volume(dims={self.dims})"


@dataclass(frozen=True)
class SliceStack:
    orientation: Orientation
    slices: tuple[np.ndarray, ...]

    @property
    def slice_dims(self) -> tuple[int, int]:
        return self.slices[0].shape  # type: ignore[return-value]

    def __len__(self):
        return len(self.slices)

    def as_array(self) -> np.ndarray:
        """Slices as one ``(n, rows, cols)`` array."""
        return np.stack(self.slices)


@dataclass(frozen=True)
class ScaleRecord:
    max_intensity: float

    def __post_init__(self):
        if not self.max_intensity >= np.finfo(np.float32).tiny:
            raise VolumeError(f"max_intensity must be positive, got {self.max_intensity}")


def extract_slices(v: Volume, o: Orientation) -> SliceStack:
    planes = np.moveaxis(v.data, o.axis, 0)
    return SliceStack(o, tuple(np.array(p, dtype=np.float32) for p in planes))


def stack_slices(s: SliceStack, o: Orientation) -> Volume:
    if s.orientation is not o:
        raise VolumeError(f"orientation mismatch: stack is {s.orientation.value}, requested {o.value}")
    if not s.slices:
        raise VolumeError("cannot stack an empty slice list")
    shape = s.slices[0].shape
    for i, sl in enumerate(s.slices):
        if sl.ndim != 2 or sl.shape != shape:
            raise VolumeError(f"inconsistent slice dims: slice {i} is {sl.shape}, expected {shape}")
    return Volume(np.moveaxis(np.stack(s.slices).astype(np.float32), 0, o.axis))


def normalize_volume(v: Volume) -> tuple[Volume, ScaleRecord]:
    """Divide by the volume maximum; an all-zero volume keeps divisor 1."""
    if (v.data < 0).any():
        raise VolumeError("normalize_volume requires non-negative intensities")
    peak = float(v.data.max())
    if peak <= 0.0:
        return v, ScaleRecord(1.0)
    out = np.minimum(v.data / np.float32(peak), np.float32(1.0))
    return Volume(out), ScaleRecord(peak)


def denormalize_volume(v: Volume, s: ScaleRecord) -> Volume:
    return Volume(v.data * np.float32(s.max_intensity))
