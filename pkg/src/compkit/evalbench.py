"""
Quantitative evaluation: PSNR of every method's composite against the stored targets, over whole images or over the
UNKNOWN band of each sample's stored trimap.

PSNR uses MAX = 1.0 on float images; identical images score the cap of 99 dB.
"""

import dataclasses
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from . import composite, imgcore, io, log, pyramid
from .augment import Sample, load_dataset
from .composite import RefinerModel
from .errors import DatasetError, EmptyRegionError, MissingPredictionError, ShapeMismatchError, UsageError
from .imgcore import Image, Label

__all__ = [
    "PSNR_CAP",
    "REGIONS",
    "psnr",
    "region_of",
    "Method",
    "MethodResult",
    "oracle_method",
    "copy_paste_method",
    "feather_method",
    "pyramid_method",
    "compositor_method",
    "BUILTIN_METHODS",
    "get_builtin_method",
    "run_benchmark",
    "emit_report",
    "compare_trend",
]

logger = log.get_logger(__name__, log.INFO)

PSNR_CAP = 99.0
REGIONS = ("whole", "unknown")


def psnr(a: Image, b: Image, region: Optional[np.ndarray] = None) -> float:
    """
    10 * log10(1 / MSE), the MSE taken over every channel of the pixels in region (all pixels when None).

    :param region: an H x W boolean array.
    :raises ShapeMismatchError: a, b (and region) differ in size or channels.
    :raises EmptyRegionError: region selects no pixel.
    """
    a = imgcore.as_image(a, "a")
    b = imgcore.as_image(b, "b")
    if a.shape != b.shape:
        raise ShapeMismatchError("psnr", [a.shape, b.shape])
    diff = a - b
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != a.shape[:2]:
            raise ShapeMismatchError("psnr region", [region.shape, a.shape[:2]])
        if not region.any():
            raise EmptyRegionError("The PSNR region selects no pixel")
        diff = diff[region]
    mse = float(np.mean(np.square(diff)))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def region_of(sample: Sample, region: str) -> Optional[np.ndarray]:
    """The pixels scored for sample: None for the whole image, else the UNKNOWN band of its trimap."""
    if region == "whole":
        return None
    if region == "unknown":
        if sample.trimap is None:
            raise DatasetError(f"Sample {sample.id} has no trimap for unknown-region evaluation")
        return sample.trimap == Label.UNKNOWN
    raise UsageError(f"Unknown region {region!r}; choose from {list(REGIONS)}")


# ==========
# methods
# ==========


@dataclasses.dataclass
class Method:
    """A compositing method: either a function of the sample, or a directory of predictions ``<id>.png``."""

    name: str
    fn: Optional[Callable[[Sample], Image]] = None
    predictions: Optional[Path] = None

    def __post_init__(self):
        if (self.fn is None) == (self.predictions is None):
            raise UsageError(f"Method {self.name!r} needs exactly one of a function and a prediction directory")
        if self.predictions is not None:
            self.predictions = Path(self.predictions)

    def predict(self, sample: Sample) -> Image:
        """The method's composite for sample, as it would be stored (8-bit quantized)."""
        if self.fn is not None:
            pred = imgcore.quantize(np.asarray(self.fn(sample), dtype=np.float64))
        else:
            path = self.predictions / f"{sample.id}.png"
            if not path.is_file():
                raise MissingPredictionError(f"Method {self.name!r} has no prediction for sample {sample.id}: {path}")
            pred = imgcore.load_image(path)
        if pred.shape != sample.target.shape:
            raise ShapeMismatchError(f"method {self.name!r} on sample {sample.id}", [pred.shape, sample.target.shape])
        return pred


def oracle_method() -> Method:
    """True-alpha compositing of the clean foreground; reproduces targets built the same way."""

    def fn(sample: Sample) -> Image:
        if sample.foreground is None:
            raise DatasetError(f"Sample {sample.id} has no clean foreground for the oracle")
        return composite.alpha_composite(sample.foreground, sample.bg, sample.fg_mask)

    return Method("oracle", fn)


def copy_paste_method(hard: bool = True, threshold: float = 0.5) -> Method:
    def fn(sample: Sample) -> Image:
        mask = composite.binarize(sample.fg_mask, threshold) if hard else sample.fg_mask
        return composite.copy_paste(sample.fg, sample.bg, mask)

    return Method("copy-paste" if hard else "copy-paste-soft", fn)


def feather_method(sigma: float = 2.0) -> Method:
    return Method("feather", lambda s: composite.feather_composite(s.fg, s.bg, s.fg_mask, sigma))


def pyramid_method(levels: Optional[int] = None) -> Method:
    def fn(sample: Sample) -> Image:
        n = levels if levels is not None else pyramid.default_levels(sample.height, sample.width)
        return pyramid.pyramid_blend(sample.fg, sample.bg, sample.fg_mask, n)

    return Method("pyramid", fn)


def compositor_method(name: str, compositor, refiner: Optional[RefinerModel] = None, cfg=None) -> Method:
    """
    The automatic pipeline with the given compositor (a network or any `Compositor`), fed each sample's mask as
    the raw mask.
    """
    from .pipeline import run_pipeline

    return Method(name, lambda s: run_pipeline(s.fg, s.bg, compositor, refiner, s.fg_mask, cfg))


BUILTIN_METHODS: Dict[str, Callable[[], Method]] = {
    "oracle": oracle_method,
    "copy-paste": copy_paste_method,
    "copy-paste-soft": lambda: copy_paste_method(hard=False),
    "feather": feather_method,
    "pyramid": pyramid_method,
}


def get_builtin_method(name: str) -> Method:
    try:
        return BUILTIN_METHODS[name]()
    except KeyError:
        raise UsageError(f"Unknown method {name!r}; choose from {sorted(BUILTIN_METHODS)}") from None


# ==========
# benchmark
# ==========


@dataclasses.dataclass
class MethodResult:
    method: str
    region: str
    ids: List[str]
    scores: List[float]
    mean: float = dataclasses.field(init=False)

    def __post_init__(self):
        if len(self.ids) != len(self.scores):
            raise ShapeMismatchError("method result (ids vs. scores)", [(len(self.ids),), (len(self.scores),)])
        self.mean = float(np.mean(self.scores)) if self.scores else float("nan")

    @property
    def n_samples(self) -> int:
        return len(self.scores)


def run_benchmark(
    dataset: Union[str, Path, Sequence[Sample]],
    methods: Sequence[Method],
    regions: Union[str, Sequence[str]] = "whole",
    progress: bool = True,
) -> List[MethodResult]:
    """
    Scores every method on every sample over each requested region.  Each method's prediction is computed (or
    loaded) once per sample and scored on all regions.

    :param dataset: a dataset root or already loaded samples.
    :return: one result per (method, region), method-major, in the given orders.
    """
    if isinstance(regions, str):
        regions = [regions]
    for region in regions:
        if region not in REGIONS:
            raise UsageError(f"Unknown region {region!r}; choose from {list(REGIONS)}")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise UsageError(f"Method names must be unique, got {names}")
    samples = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)

    results = []
    for method in methods:
        scores: Dict[str, List[float]] = {r: [] for r in regions}
        for sample in tqdm(samples, desc=f"eval {method.name}", disable=not progress):
            pred = method.predict(sample)
            for region in regions:
                scores[region].append(psnr(pred, sample.target, region_of(sample, region)))
        for region in regions:
            result = MethodResult(method.name, region, [s.id for s in samples], scores[region])
            logger.info(f"{method.name} ({region}): mean PSNR {result.mean:.2f} dB over {result.n_samples} samples")
            results.append(result)
    return results


def _fmt(x: float) -> str:
    return f"{x:.10f}"


def emit_report(results: Sequence[MethodResult], path: Union[str, Path]) -> List[Path]:
    """
    Writes the summary CSV (method, region, mean_psnr, n_samples) at path, the per-sample CSV
    (method, region, id, psnr) at ``<stem>_samples.csv``, and an aligned text table (one row per region, one column
    per method) at ``<stem>.txt``.

    :return: the three paths written.
    """
    path = Path(path)
    samples_path = path.with_name(f"{path.stem}_samples.csv")
    table_path = path.with_name(f"{path.stem}.txt")

    io.dump(
        path,
        [["method", "region", "mean_psnr", "n_samples"]]
        + [[r.method, r.region, _fmt(r.mean), r.n_samples] for r in results],
        fmt=io.fmts.csv,
    )
    io.dump(
        samples_path,
        [["method", "region", "id", "psnr"]]
        + [[r.method, r.region, i, _fmt(s)] for r in results for i, s in zip(r.ids, r.scores)],
        fmt=io.fmts.csv,
    )

    methods = list(dict.fromkeys(r.method for r in results))
    regions = list(dict.fromkeys(r.region for r in results))
    means = {(r.method, r.region): r.mean for r in results}
    rows = [["PSNR (dB)"] + methods]
    for region in regions:
        rows.append([region] + [f"{means[(m, region)]:.2f}" if (m, region) in means else "-" for m in methods])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    io.dump(table_path, "\n".join(lines) + "\n", fmt=io.fmts.txt)

    logger.info(f"Wrote report of {len(results)} results to {path}")
    return [path, samples_path, table_path]


def compare_trend(a: Union[float, MethodResult], b: Union[float, MethodResult], tie_db: float = 0.1) -> str:
    """
    Compares two mean PSNRs (or results): better if a exceeds b by more than tie_db, worse if b exceeds a by more than
    tie_db, else inconclusive.
    """
    a = a.mean if isinstance(a, MethodResult) else float(a)
    b = b.mean if isinstance(b, MethodResult) else float(b)
    if tie_db < 0:
        raise UsageError(f"tie_db must be >= 0, got {tie_db}")
    if abs(a - b) <= tie_db:
        return "inconclusive"
    return "better" if a > b else "worse"
