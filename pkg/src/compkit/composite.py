"""
Classical compositing baselines and mask plumbing: alpha compositing (copy-paste), feathering, binarization,
pseudo-trimaps, multi-scale mask refinement and a simple threshold segmenter that provides raw masks.
"""

import dataclasses
import warnings
from typing import Callable, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from . import imgcore, log
from .errors import EmptyBandWarning, RefinementError, SegmentationError, ShapeMismatchError, UsageError
from .imgcore import Image, Label, SoftMask, Trimap

__all__ = [
    "CompositeConfig",
    "RefinerModel",
    "IdentityRefiner",
    "ConstantRefiner",
    "alpha_composite",
    "feather_mask",
    "binarize",
    "make_trimap",
    "invert_mask",
    "refine_mask_multiscale",
    "copy_paste",
    "feather_composite",
    "threshold_segment",
]

logger = log.get_logger(__name__, log.INFO)


@dataclasses.dataclass
class CompositeConfig:
    feather_sigma: float = 2.0
    trimap_band: int = 16
    binarize_threshold: float = 0.5
    refine_scales: Tuple[int, ...] = (320, 640)

    def __post_init__(self):
        if not self.feather_sigma > 0:
            raise UsageError(f"feather_sigma must be positive, got {self.feather_sigma}")
        _check_band(self.trimap_band)
        _check_threshold(self.binarize_threshold)
        self.refine_scales = tuple(int(s) for s in self.refine_scales)
        _check_scales(self.refine_scales)


@runtime_checkable
class RefinerModel(Protocol):
    """Maps (image, raw mask) to a refined mask of the same height and width, with values in [0, 1]."""

    def __call__(self, img: Image, mask: SoftMask) -> SoftMask:
        ...


class IdentityRefiner:
    def __call__(self, img: Image, mask: SoftMask) -> SoftMask:
        return np.array(mask, dtype=np.float64)


class ConstantRefiner:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, img: Image, mask: SoftMask) -> SoftMask:
        return np.full(np.shape(mask)[:2], self.value)


def _check_band(band: int):
    if band < 2 or band % 2 != 0:
        raise UsageError(f"Trimap band must be an even number >= 2, got {band}")


def _check_threshold(threshold: float):
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"Threshold must be in (0, 1), got {threshold}")


def _check_scales(scales: Sequence[int]):
    if len(scales) == 0:
        raise UsageError("At least one refinement scale is required")
    if any(s < 1 for s in scales):
        raise UsageError(f"Refinement scales must be positive, got {list(scales)}")
    if any(a >= b for a, b in zip(scales, scales[1:])):
        raise UsageError(f"Refinement scales must be strictly increasing, got {list(scales)}")


# ==========
# compositing
# ==========


def alpha_composite(fg: Image, bg: Image, alpha: SoftMask) -> Image:
    """out = alpha * fg + (1 - alpha) * bg, per pixel and channel."""
    fg = imgcore.as_image(fg, "fg")
    bg = imgcore.as_image(bg, "bg")
    alpha = imgcore.as_mask(alpha, "alpha")
    imgcore.check_same_size("alpha composite", fg, bg, alpha)
    if fg.shape != bg.shape:
        raise ShapeMismatchError("alpha composite (channels)", [fg.shape, bg.shape])
    a = alpha[:, :, None]
    return a * fg + (1.0 - a) * bg


def copy_paste(fg: Image, bg: Image, refined_mask: SoftMask) -> Image:
    """Copy-paste compositing: the refined mask is used directly as the alpha matte."""
    return alpha_composite(fg, bg, refined_mask)


def feather_mask(mask: SoftMask, sigma: float) -> SoftMask:
    return np.clip(imgcore.gaussian_blur(imgcore.as_mask(mask), sigma), 0.0, 1.0)


def feather_composite(fg: Image, bg: Image, mask: SoftMask, sigma: float = 2.0, threshold: float = 0.5) -> Image:
    """Feathering baseline: binarize the mask, soften it with a Gaussian blur, then alpha-composite."""
    return alpha_composite(fg, bg, feather_mask(binarize(mask, threshold), sigma))


def binarize(mask: SoftMask, threshold: float = 0.5) -> SoftMask:
    """1 where mask >= threshold (ties go to the foreground), 0 elsewhere."""
    _check_threshold(threshold)
    return (imgcore.as_mask(mask) >= threshold).astype(np.float64)


def invert_mask(mask: SoftMask) -> SoftMask:
    return 1.0 - imgcore.as_mask(mask)


def make_trimap(mask: SoftMask, band: int = 16, threshold: float = 0.5) -> Trimap:
    """
    Pseudo-trimap from a mask: pixels within band/2 of the binarized boundary are UNKNOWN, the others take the label
    of the binarization.  A uniform mask has no boundary: the trimap has no UNKNOWN pixels and an
    `EmptyBandWarning` is emitted.
    """
    _check_band(band)
    _check_threshold(threshold)
    mask = imgcore.as_mask(mask)
    fg = mask >= threshold
    trimap = np.where(fg, np.uint8(Label.FG), np.uint8(Label.BG)).astype(np.uint8)

    dist = imgcore.boundary_distance(mask, threshold)
    if np.isinf(dist).all():
        logger.warning(f"Mask of size {mask.shape[1]}x{mask.shape[0]} has no boundary; trimap has no unknown band")
        warnings.warn("Uniform mask: the trimap has no unknown pixels", EmptyBandWarning, stacklevel=2)
        return trimap

    trimap[dist <= band / 2] = Label.UNKNOWN
    return trimap


# ==========
# refinement
# ==========


def refine_mask_multiscale(
    img: Image,
    raw: SoftMask,
    refiner: Callable[[Image, SoftMask], SoftMask],
    scales: Sequence[int] = (320, 640),
) -> SoftMask:
    """
    Two-stage (in general, multi-stage) refinement: for each scale s in increasing order, the image and the current
    mask are resized to s x s and refined; the last result is resized back to the image size.

    :raises RefinementError: the refiner failed or returned a mask of the wrong size, at the reported scale.
    """
    scales = [int(s) for s in scales]
    _check_scales(scales)
    img = imgcore.as_image(img)
    raw = imgcore.as_mask(raw, "raw mask")
    imgcore.check_same_size("mask refinement", img, raw)
    h, w = raw.shape

    mask = raw
    for s in scales:
        img_s = imgcore.resize_bilinear(img, s, s)
        mask_s = imgcore.resize_bilinear(mask, s, s)
        try:
            mask = np.asarray(refiner(img_s, mask_s), dtype=np.float64)
        except Exception as e:
            raise RefinementError(s, e) from e
        if mask.shape[:2] != (s, s):
            raise RefinementError(s, ShapeMismatchError("refiner output", [mask.shape, (s, s)]))
        if mask.ndim == 3:
            mask = imgcore.as_mask(mask)
        logger.debug(f"Refined mask at {s}x{s}")

    return np.clip(imgcore.resize_bilinear(mask, w, h), 0.0, 1.0)


# ==========
# segmentation
# ==========


def threshold_segment(img: Image, threshold: float = 0.1, sigma: float = 1.0) -> SoftMask:
    """
    A trivial segmenter for images with a simple background: the background colour is the median of the border
    pixels, and pixels whose RGB distance to it exceeds `threshold` are foreground.  The result is softened by a
    Gaussian blur of `sigma`.

    :raises SegmentationError: no pixel differs from the background colour.
    """
    img = imgcore.as_image(img)
    rgb = img[:, :, :3] if img.shape[2] >= 3 else np.repeat(img, 3, axis=2)
    border = np.concatenate([rgb[0, :], rgb[-1, :], rgb[:, 0], rgb[:, -1]], axis=0)
    bg_color = np.median(border, axis=0)

    fg = np.linalg.norm(rgb - bg_color[None, None, :], axis=2) > threshold
    if not fg.any():
        raise SegmentationError(f"Threshold segmentation found no foreground (background colour {bg_color.tolist()})")
    logger.debug(f"Segmented {int(fg.sum())} foreground pixels, background colour {bg_color.tolist()}")
    return feather_mask(fg.astype(np.float64), sigma)
