"""
The fully automatic compositing pipeline: raw mask (given, or from the threshold segmenter) -> multi-scale neural
refinement -> fusion network on the square test canvas -> resize back.
"""

import dataclasses
from typing import Optional, Tuple, Union

import numpy as np
from torch import nn

from . import composite, imgcore, log
from .composite import RefinerModel
from .errors import UsageError
from .imgcore import Image, SoftMask
from .mlf import Compositor, NetworkCompositor

__all__ = [
    "PipelineConfig",
    "prepare_mask",
    "run_pipeline",
]

logger = log.get_logger(__name__, log.INFO)


@dataclasses.dataclass
class PipelineConfig:
    scales: Tuple[int, ...] = (320, 640)
    test_size: int = 768
    segment_threshold: float = 0.1
    segment_sigma: float = 1.0

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        composite._check_scales(self.scales)
        if self.test_size < 1:
            raise UsageError(f"test_size must be >= 1, got {self.test_size}")
        if not self.segment_threshold > 0:
            raise UsageError(f"segment_threshold must be positive, got {self.segment_threshold}")
        if not self.segment_sigma > 0:
            raise UsageError(f"segment_sigma must be positive, got {self.segment_sigma}")


def prepare_mask(
    fg: Image,
    raw_mask: Optional[SoftMask] = None,
    refiner: Optional[RefinerModel] = None,
    cfg: Optional[PipelineConfig] = None,
) -> SoftMask:
    """
    The mask the compositor sees: the raw mask (threshold-segmented from fg when not given), refined at the
    configured scales unless refiner is None.
    """
    cfg = cfg or PipelineConfig()
    fg = imgcore.as_image(fg, "fg")
    if raw_mask is None:
        raw_mask = composite.threshold_segment(fg, cfg.segment_threshold, cfg.segment_sigma)
        logger.debug("No raw mask given; segmented the foreground by thresholding")
    raw_mask = imgcore.as_mask(raw_mask, "raw mask")
    imgcore.check_same_size("pipeline (fg vs. raw mask)", fg, raw_mask)
    if refiner is None:
        return raw_mask
    return composite.refine_mask_multiscale(fg[:, :, :3], raw_mask, refiner, cfg.scales)


def run_pipeline(
    fg: Image,
    bg: Image,
    compositor: Union[Compositor, nn.Module],
    refiner: Optional[RefinerModel] = None,
    raw_mask: Optional[SoftMask] = None,
    cfg: Optional[PipelineConfig] = None,
) -> Image:
    """
    Composites fg over bg.

    :param compositor: a compositor, or a fusion network (wrapped in a `NetworkCompositor` on the test canvas).
    :param refiner: the mask refiner; None skips refinement and composites with the raw mask.
    :param raw_mask: the raw segmentation of fg; None runs the threshold segmenter.
    """
    cfg = cfg or PipelineConfig()
    if isinstance(compositor, nn.Module):
        compositor = NetworkCompositor(compositor, cfg.test_size)
    fg = imgcore.as_image(fg, "fg")
    bg = imgcore.as_image(bg, "bg")
    imgcore.check_same_size("pipeline (fg vs. bg)", fg, bg)

    mask = prepare_mask(fg, raw_mask, refiner, cfg)
    out = compositor(fg[:, :, :3], mask, bg[:, :, :3], composite.invert_mask(mask))
    return np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)
