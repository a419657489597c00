"""
Image containers and the raster operations every other module builds on.

Rasters are plain numpy arrays:

* an *image* is ``float64[H, W, C]`` with ``C`` in (1, 3, 4) and samples in [0, 1];
* a *soft mask* is ``float64[H, W]`` with values in [0, 1];
* a *trimap* is ``uint8[H, W]`` holding `Label` values, which double as its 8-bit file encoding.

All operations are pure: inputs are never modified and outputs are fresh arrays.
"""

import enum
import math
import warnings
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage

from .errors import (
    CorruptImageError,
    ImageWriteError,
    QuantizationWarning,
    ShapeMismatchError,
    UnsupportedFormatError,
    UsageError,
)

__all__ = [
    "Image",
    "SoftMask",
    "Trimap",
    "Label",
    "as_image",
    "as_mask",
    "check_same_size",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "load_trimap",
    "save_trimap",
    "quantize",
    "to_uint8",
    "resize_bilinear",
    "gaussian_kernel",
    "gaussian_blur",
    "boundary_distance",
    "trimap_counts",
    "mean_abs_diff",
]

Image = np.ndarray
SoftMask = np.ndarray
Trimap = np.ndarray


class Label(enum.IntEnum):
    BG = 0
    UNKNOWN = 128
    FG = 255


# ==========
# validation
# ==========


def as_image(img: np.ndarray, name: str = "image") -> Image:
    """
    Converts an array to the canonical image layout (float64, H x W x C); a 2-D array becomes a 1-channel image.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3, 4):
        raise ShapeMismatchError(f"{name} (expected H x W x C with C in 1, 3, 4)", [img.shape])
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeMismatchError(f"{name} (empty raster)", [img.shape])
    return img


def as_mask(mask: np.ndarray, name: str = "mask") -> SoftMask:
    """
    Converts an array to the canonical soft mask layout (float64, H x W); a 1-channel image is squeezed.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if mask.ndim != 2:
        raise ShapeMismatchError(f"{name} (expected H x W)", [mask.shape])
    return mask


def check_same_size(what: str, *arrays: np.ndarray):
    """Raises ShapeMismatchError unless all arrays share the same height and width."""
    sizes = [a.shape[:2] for a in arrays]
    if any(s != sizes[0] for s in sizes[1:]):
        raise ShapeMismatchError(what, sizes)


# ==========
# file i/o
# ==========

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_NETPBM_SIGNATURES = (b"P5", b"P6")

_MODE_BY_CHANNELS = {1: "L", 3: "RGB", 4: "RGBA"}


def _detect_format(path: Path) -> str:
    with open(path, "rb") as f:
        head = f.read(8)
    if head.startswith(_PNG_SIGNATURE):
        return "PNG"
    if head[:2] in _NETPBM_SIGNATURES and len(head) > 2 and head[2:3].isspace():
        return "PPM"
    raise UnsupportedFormatError(path, f"unrecognized file signature {head[:8]!r} (expected PNG or binary PPM/PGM)")


def load_image(path: Union[str, Path]) -> Image:
    """
    Loads an 8-bit PNG (gray, RGB, RGBA, palette) or binary PPM/PGM file; samples are mapped to [0, 1] by s/255.
    The format is detected from the file signature, not the extension.

    :raises FileNotFoundError: the file does not exist.
    :raises UnsupportedFormatError: not a PNG/PPM/PGM file, or not 8 bits per sample.
    :raises CorruptImageError: the stream cannot be decoded.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Image not found: {path}")

    fmt = _detect_format(path)
    try:
        with PILImage.open(path, formats=[fmt]) as pil:
            pil.load()
            mode = pil.mode
            if mode == "P":
                pil = pil.convert("RGBA" if "transparency" in pil.info else "RGB")
            elif mode == "LA":
                pil = pil.convert("RGBA")
            elif mode == "1":
                pil = pil.convert("L")
            elif mode not in ("L", "RGB", "RGBA"):
                raise UnsupportedFormatError(path, f"unsupported pixel mode {mode} (only 8-bit samples are supported)")
            data = np.asarray(pil, dtype=np.uint8)
    except (UnidentifiedImageError, SyntaxError, OSError, ValueError) as e:
        raise CorruptImageError(path, str(e)) from e

    return as_image(data.astype(np.float64) / 255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """
    Converts [0, 1] samples to bytes with round-half-up (round(s * 255)); out-of-range values are clamped.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size > 0 and (img.min() < 0.0 or img.max() > 1.0):
        warnings.warn("Clamping samples outside [0, 1] while converting to 8 bits", QuantizationWarning)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """
    The float values a raster has after being saved and loaded again as 8 bits.
    """
    return to_uint8(img).astype(np.float64) / 255.0


def _save_bytes(data: np.ndarray, path: Path):
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pgm", ".pnm") else "PNG"
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    mode = "L" if data.ndim == 2 else _MODE_BY_CHANNELS[data.shape[2]]
    if fmt == "PPM" and mode == "RGBA":
        raise UsageError(f"Cannot save a 4-channel image as PPM/PGM: {path}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(np.ascontiguousarray(data)).save(path, format=fmt)
    except OSError as e:
        raise ImageWriteError(path, str(e)) from e


def save_image(img: Image, path: Union[str, Path]):
    """
    Saves an image (or soft mask) as an 8-bit file: PNG unless the extension is .ppm/.pgm/.pnm.
    Samples are written as round(s * 255) (half-up), clamped to [0, 255].

    :raises ImageWriteError: the path is not writable.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = as_image(img)
    else:
        img = as_mask(img, "image")
    _save_bytes(to_uint8(img), Path(path))


def load_mask(path: Union[str, Path], channel: Optional[int] = None) -> SoftMask:
    """
    Loads a soft mask: from the alpha channel of an RGBA file, the gray channel of a grayscale file, or the luminance
    (ITU-R 601) of an RGB file.  `channel` selects one channel explicitly instead.
    """
    img = load_image(path)
    channels = img.shape[2]
    if channel is not None:
        if not 0 <= channel < channels:
            raise UsageError(f"Channel {channel} out of range for a {channels}-channel image: {path}")
        return img[:, :, channel].copy()
    if channels == 4:
        return img[:, :, 3].copy()
    if channels == 1:
        return img[:, :, 0].copy()
    return np.clip(img[:, :, :3] @ np.array([0.299, 0.587, 0.114]), 0.0, 1.0)


def save_mask(mask: SoftMask, path: Union[str, Path]):
    save_image(as_mask(mask), path)


def load_trimap(path: Union[str, Path]) -> Trimap:
    """
    Loads a trimap file (BG=0, UNKNOWN=128, FG=255); other byte values are mapped to the nearest label.
    """
    values = to_uint8(load_mask(path)).astype(np.int16)
    labels = np.array([int(label) for label in Label], dtype=np.int16)
    nearest = np.abs(values[:, :, None] - labels[None, None, :]).argmin(axis=2)
    return labels[nearest].astype(np.uint8)


def save_trimap(trimap: Trimap, path: Union[str, Path]):
    trimap = np.asarray(trimap, dtype=np.uint8)
    if trimap.ndim != 2:
        raise ShapeMismatchError("trimap (expected H x W)", [trimap.shape])
    _save_bytes(trimap, Path(path))


def trimap_counts(trimap: Trimap) -> Dict[Label, int]:
    return {label: int(np.count_nonzero(trimap == label)) for label in Label}


# ==========
# resampling and filtering
# ==========


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """
    Bilinear resampling with half-pixel-centered sampling: output pixel (y, x) reads the source at
    ((y + 0.5) * H / out_h - 0.5, (x + 0.5) * W / out_w - 0.5), clamped to the source extent.
    Works on images (H x W x C) and masks (H x W).
    """
    if out_w < 1 or out_h < 1:
        raise UsageError(f"Resize target must be at least 1x1, got {out_w}x{out_h}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1)
    coords = np.stack(np.meshgrid(ys, xs, indexing="ij"))

    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[:, :, c], coords, order=1, mode="nearest") for c in range(img.shape[2])],
        axis=2,
    )


def gaussian_kernel(sigma: float) -> np.ndarray:
    """The 1-D Gaussian kernel truncated at radius ceil(3 sigma), normalized to sum 1."""
    if not sigma > 0:
        raise UsageError(f"Gaussian sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """
    Separable Gaussian blur over the two spatial axes, with reflect padding (edge pixel repeated: d c b a | a b c d).
    """
    kernel = gaussian_kernel(sigma)
    img = np.asarray(img, dtype=np.float64)
    out = ndimage.correlate1d(img, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def boundary_distance(mask: SoftMask, threshold: float = 0.5) -> np.ndarray:
    """
    For every pixel, the exact Euclidean distance (in pixels) to the nearest pixel on the other side of the
    binarization ``mask >= threshold``.  A pixel next to the boundary has distance 1.
    If the binarized mask is uniform there is no boundary and every distance is +inf.
    """
    fg = as_mask(mask) >= threshold
    if fg.all() or not fg.any():
        return np.full(fg.shape, np.inf)
    # distance_transform_edt measures the distance from each non-zero pixel to the nearest zero pixel
    return np.where(fg, ndimage.distance_transform_edt(fg), ndimage.distance_transform_edt(~fg))


def mean_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))
