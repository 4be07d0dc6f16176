"""Progressive multi-orientation volume synthesis with conditional GANs."""

from progsynth.volume import (
    Orientation,
    ScaleRecord,
    SliceStack,
    Volume,
    denormalize_volume,
    extract_slices,
    normalize_volume,
    stack_slices,
)

__all__ = [
    "Orientation",
    "ScaleRecord",
    "SliceStack",
    "Volume",
    "denormalize_volume",
    "extract_slices",
    "normalize_volume",
    "stack_slices",
]

__version__ = "0.1.0"
