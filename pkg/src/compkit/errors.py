"""
Exceptions and warnings raised by compkit.

All errors derive from `CompositingError`, split into three families that the command line maps to exit codes:

* `DataError`: the inputs (files, arrays, datasets, checkpoints) are not usable;
* `ModelError`: a network is missing or failed while being applied;
* `NumericError`: training or checking produced non-finite values.

`UsageError` marks invalid parameter values (it is also a `ValueError`).
"""

from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

__all__ = [
    "CompositingError",
    "UsageError",
    "DataError",
    "ImageReadError",
    "UnsupportedFormatError",
    "CorruptImageError",
    "ImageWriteError",
    "ShapeMismatchError",
    "PyramidLevelError",
    "CheckpointError",
    "DatasetError",
    "EmptyRegionError",
    "MissingPredictionError",
    "SegmentationError",
    "ModelError",
    "ModelNotLoadedError",
    "RefinementError",
    "NumericError",
    "EmptyBandWarning",
    "QuantizationWarning",
]


class CompositingError(RuntimeError):
    pass


class UsageError(CompositingError, ValueError):
    pass


# ==========
# data errors
# ==========


class DataError(CompositingError):
    pass


class ImageReadError(DataError):
    def __init__(self, path: Union[str, Path], reason: str):
        self.path = Path(path)
        self.reason = reason

    def __str__(self) -> str:
        return f"Cannot read image {self.path}: {self.reason}"


class UnsupportedFormatError(ImageReadError):
    pass


class CorruptImageError(ImageReadError):
    pass


class ImageWriteError(DataError):
    def __init__(self, path: Union[str, Path], reason: str):
        self.path = Path(path)
        self.reason = reason

    def __str__(self) -> str:
        return f"Cannot write image {self.path}: {self.reason}"


class ShapeMismatchError(DataError, ValueError):
    def __init__(self, what: str, shapes: Sequence[Tuple[int, ...]]):
        self.what = what
        self.shapes = [tuple(s) for s in shapes]

    def __str__(self) -> str:
        return f"Shape mismatch in {self.what}: " + " vs. ".join(str(s) for s in self.shapes)


class PyramidLevelError(DataError, ValueError):
    pass


class CheckpointError(DataError):
    pass


class DatasetError(DataError):
    pass


class EmptyRegionError(DataError):
    pass


class MissingPredictionError(DataError):
    pass


class SegmentationError(DataError):
    pass


# ==========
# model errors
# ==========


class ModelError(CompositingError):
    pass


class ModelNotLoadedError(ModelError):
    pass


class RefinementError(ModelError):
    def __init__(self, scale: int, cause: BaseException):
        self.scale = scale
        self.cause = cause

    def __str__(self) -> str:
        return f"Mask refinement failed at scale {self.scale}x{self.scale}: {self.cause!r}"


# ==========
# numeric errors
# ==========


class NumericError(CompositingError):
    def __init__(self, message: str, dump_path: Optional[Path] = None):
        self.message = message
        self.dump_path = dump_path

    def __str__(self) -> str:
        s = self.message
        if self.dump_path is not None:
            s += f" (offending batch dumped to {self.dump_path})"
        return s


# ==========
# warnings
# ==========


class EmptyBandWarning(UserWarning):
    """The mask has no boundary, so the trimap has no unknown pixels"""

    pass


class QuantizationWarning(UserWarning):
    """Values outside [0, 1] were clamped while converting to 8 bits"""

    pass
