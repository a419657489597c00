"""
Gaussian and Laplacian pyramids with the 5-tap binomial kernel, and multi-scale (Laplacian pyramid) blending.

Levels may have odd dimensions: downsampling keeps ceil(dim / 2) samples and upsampling always targets the exact
dimensions of the finer level, so collapsing a pyramid reproduces the source image.
"""

import dataclasses
import math
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from . import imgcore
from .errors import PyramidLevelError, ShapeMismatchError, UsageError

__all__ = [
    "BINOMIAL_KERNEL",
    "GaussianPyramid",
    "LaplacianPyramid",
    "default_levels",
    "max_levels",
    "downsample",
    "upsample",
    "build_gaussian",
    "build_laplacian",
    "collapse",
    "pyramid_blend",
]

BINOMIAL_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclasses.dataclass
class GaussianPyramid:
    levels: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.levels[k]


@dataclasses.dataclass
class LaplacianPyramid:
    """Band-pass levels (finest first, signed values) plus the coarsest Gaussian level."""

    bands: List[np.ndarray]
    residual: np.ndarray

    @property
    def num_levels(self) -> int:
        return len(self.bands) + 1


def max_levels(h: int, w: int) -> int:
    """The largest level count whose coarsest level still has both dimensions >= 2."""
    if min(h, w) < 2:
        return 0
    levels = 1
    while min((h + 1) // 2, (w + 1) // 2) >= 2:
        h, w = (h + 1) // 2, (w + 1) // 2
        levels += 1
    return levels


def default_levels(h: int, w: int) -> int:
    """floor(log2(min(H, W))) - 2, at least 1 and at most `max_levels`."""
    levels = max(1, int(math.floor(math.log2(max(1, min(h, w))))) - 2)
    return max(1, min(levels, max_levels(h, w)))


def _check_levels(shape: Tuple[int, ...], num_levels: int):
    if num_levels < 1:
        raise UsageError(f"Number of pyramid levels must be >= 1, got {num_levels}")
    h, w = shape[:2]
    if num_levels > max_levels(h, w):
        raise PyramidLevelError(
            f"{num_levels} pyramid levels are too many for a {h}x{w} image"
            f" (at most {max_levels(h, w)} keep the coarsest level at least 2x2)"
        )


def downsample(img: np.ndarray) -> np.ndarray:
    """Blurs with the binomial kernel (reflect padding) along both spatial axes, then keeps every other sample."""
    out = ndimage.correlate1d(img, BINOMIAL_KERNEL, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, BINOMIAL_KERNEL, axis=1, mode="reflect")
    return out[::2, ::2]


def upsample(img: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """
    Expands a level to the exact (height, width) of its parent: zero-insertion followed by the binomial kernel scaled
    by 2 per axis (4 overall).  Mirror padding keeps the zero-inserted lattice symmetric, so constants are preserved.
    """
    h, w = shape
    if (h + 1) // 2 != img.shape[0] or (w + 1) // 2 != img.shape[1]:
        raise ShapeMismatchError("pyramid upsample (child is not the half of the target)", [img.shape, shape])
    up = np.zeros((h, w) + img.shape[2:], dtype=np.float64)
    up[::2, ::2] = img
    up = ndimage.correlate1d(up, 2.0 * BINOMIAL_KERNEL, axis=0, mode="mirror")
    return ndimage.correlate1d(up, 2.0 * BINOMIAL_KERNEL, axis=1, mode="mirror")


def build_gaussian(img: np.ndarray, num_levels: int) -> GaussianPyramid:
    img = np.asarray(img, dtype=np.float64)
    _check_levels(img.shape, num_levels)
    levels = [img.copy()]
    for _ in range(num_levels - 1):
        levels.append(downsample(levels[-1]))
    return GaussianPyramid(levels)


def build_laplacian(img: np.ndarray, num_levels: int) -> LaplacianPyramid:
    gauss = build_gaussian(img, num_levels)
    bands = [gauss[k] - upsample(gauss[k + 1], gauss[k].shape[:2]) for k in range(num_levels - 1)]
    return LaplacianPyramid(bands=bands, residual=gauss[num_levels - 1])


def _collapse_unclamped(pyr: LaplacianPyramid) -> np.ndarray:
    out = np.asarray(pyr.residual, dtype=np.float64)
    for band in reversed(pyr.bands):
        if band.shape[2:] != out.shape[2:]:
            raise ShapeMismatchError("pyramid collapse (channels)", [band.shape, out.shape])
        out = band + upsample(out, band.shape[:2])
    return out


def collapse(pyr: LaplacianPyramid) -> np.ndarray:
    """Reconstructs the image from coarse to fine, clamping the result to [0, 1]."""
    return np.clip(_collapse_unclamped(pyr), 0.0, 1.0)


def pyramid_blend(fg: np.ndarray, bg: np.ndarray, mask: np.ndarray, num_levels: int) -> np.ndarray:
    """
    Laplacian pyramid blending: every band (and the residual) is alpha-composited with the matching level of the
    mask's Gaussian pyramid, then the blended pyramid is collapsed.
    """
    fg = imgcore.as_image(fg, "fg")
    bg = imgcore.as_image(bg, "bg")
    mask = imgcore.as_mask(mask)
    imgcore.check_same_size("pyramid blend", fg, bg, mask)
    if fg.shape != bg.shape:
        raise ShapeMismatchError("pyramid blend (channels)", [fg.shape, bg.shape])

    lap_fg = build_laplacian(fg, num_levels)
    lap_bg = build_laplacian(bg, num_levels)
    gauss_mask = build_gaussian(mask[:, :, None], num_levels)

    bands = [
        gauss_mask[k] * lap_fg.bands[k] + (1.0 - gauss_mask[k]) * lap_bg.bands[k] for k in range(num_levels - 1)
    ]
    m = gauss_mask[num_levels - 1]
    residual = m * lap_fg.residual + (1.0 - m) * lap_bg.residual
    return collapse(LaplacianPyramid(bands=bands, residual=residual))
