"""
Training and evaluation data: easy triplets composited from matting assets over pure colours, hard triplets
generated by a trained fusion network, synthetic assets and backgrounds, and the on-disk dataset layout.

Dataset layout::

    <root>/manifest.csv                  id,width,height,kind,seed
    <root>/<id>/fg.png bg.png target.png mask.png
    <root>/<id>/trimap.png foreground.png   (evaluation samples only)
"""

import dataclasses
import math
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from . import composite, imgcore, io, log
from .errors import DatasetError, ModelNotLoadedError, ShapeMismatchError
from .imgcore import Image, SoftMask, Trimap

__all__ = [
    "DEFAULT_PALETTE",
    "MANIFEST_HEADER",
    "MattingAsset",
    "Triplet",
    "Sample",
    "ManifestRow",
    "sample_color",
    "make_easy_triplet",
    "make_hard_triplet",
    "synthetic_assets",
    "synthetic_backgrounds",
    "load_assets",
    "load_backgrounds",
    "fit_background",
    "corrupt_mask",
    "synthesize_dataset",
    "make_syntest",
    "write_sample",
    "load_manifest",
    "load_dataset",
]

logger = log.get_logger(__name__, log.INFO)

RGB = Tuple[float, float, float]

DEFAULT_PALETTE: List[RGB] = [
    (1.0, 1.0, 1.0),
    (0.0, 0.0, 0.0),
    (0.5, 0.5, 0.5),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.0, 1.0),
]

MANIFEST_HEADER = ["id", "width", "height", "kind", "seed"]
KINDS = ("easy", "hard", "syntest")


@dataclasses.dataclass
class MattingAsset:
    foreground: Image
    alpha: SoftMask

    def __post_init__(self):
        self.foreground = imgcore.as_image(self.foreground, "asset foreground")[:, :, :3]
        self.alpha = imgcore.as_mask(self.alpha, "asset alpha")
        imgcore.check_same_size("matting asset", self.foreground, self.alpha)

    @property
    def size(self) -> Tuple[int, int]:
        return self.alpha.shape


@dataclasses.dataclass
class Triplet:
    fg: Image
    bg: Image
    target: Image
    fg_mask: SoftMask

    def __post_init__(self):
        imgcore.check_same_size("triplet", self.fg, self.bg, self.target, self.fg_mask)


@dataclasses.dataclass
class Sample(Triplet):
    id: str
    kind: str
    seed: int
    foreground: Optional[Image] = None
    trimap: Optional[Trimap] = None

    @property
    def width(self) -> int:
        return self.fg_mask.shape[1]

    @property
    def height(self) -> int:
        return self.fg_mask.shape[0]


@dataclasses.dataclass
class ManifestRow:
    id: str
    width: int
    height: int
    kind: str
    seed: int


# ==========
# triplets
# ==========


def sample_color(rng: np.random.Generator, palette: Optional[Sequence[RGB]] = None) -> RGB:
    """A palette colour or (with probability 1/2, or always without a palette) a uniform random colour."""
    if palette and rng.random() < 0.5:
        return tuple(float(c) for c in palette[int(rng.integers(len(palette)))])
    return tuple(float(c) for c in rng.random(3))


def make_easy_triplet(asset: MattingAsset, bg: Image, color: RGB) -> Triplet:
    """
    FG is the asset over a pure colour canvas, C the asset over bg, both by alpha compositing with the true alpha.
    """
    bg = imgcore.as_image(bg, "bg")[:, :, :3]
    imgcore.check_same_size("easy triplet (asset vs. background)", asset.foreground, bg)
    canvas = np.broadcast_to(np.asarray(color, dtype=np.float64), bg.shape).copy()
    return Triplet(
        fg=composite.alpha_composite(asset.foreground, canvas, asset.alpha),
        bg=bg,
        target=composite.alpha_composite(asset.foreground, bg, asset.alpha),
        fg_mask=asset.alpha.copy(),
    )


Compositor = Callable[[Image, SoftMask, Image, SoftMask], Image]


def make_hard_triplet(easy_fg: Image, fg_mask: SoftMask, bg1: Image, bg2: Image, model) -> Triplet:
    """
    Self-taught hard triplet: the model composites the easy foreground over bg1 (giving the new FG) and over bg2
    (giving the new target), with the same mask and its inverse.  The triplet is [FG', bg2, C'].

    :param model: a fusion network (`torch.nn.Module`) or any compositor (fg, fg_mask, bg, bg_mask) -> image.
    :raises ModelNotLoadedError: model is None.
    """
    if model is None:
        raise ModelNotLoadedError("Hard triplets need a trained compositing model")
    compositor = _as_compositor(model)
    fg_mask = imgcore.as_mask(fg_mask)
    bg_mask = composite.invert_mask(fg_mask)
    imgcore.check_same_size("hard triplet", easy_fg, fg_mask, bg1, bg2)
    fg_new = np.asarray(compositor(easy_fg, fg_mask, bg1, bg_mask), dtype=np.float64)
    target = np.asarray(compositor(easy_fg, fg_mask, bg2, bg_mask), dtype=np.float64)
    return Triplet(fg=fg_new, bg=imgcore.as_image(bg2, "bg2")[:, :, :3], target=target, fg_mask=fg_mask.copy())


def _as_compositor(model) -> Compositor:
    import torch

    from . import mlf

    if isinstance(model, torch.nn.Module):
        return lambda fg, fg_mask, bg, bg_mask: mlf.mlf_forward(model, fg, fg_mask, bg, bg_mask)
    if callable(model):
        return model
    raise ModelNotLoadedError(f"Not a compositing model: {type(model).__name__}")


# ==========
# assets and backgrounds
# ==========


def synthetic_assets(n: int, size: Union[int, Tuple[int, int]], rng: np.random.Generator) -> List[MattingAsset]:
    """
    Random soft-edged blobs: a wobbly ellipse with an anti-aliased edge and a striated fractional fringe
    (hair-like), coloured with a smooth gradient plus fine texture.
    """
    h, w = (size, size) if isinstance(size, int) else size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    assets = []
    for _ in range(n):
        cy, cx = h * rng.uniform(0.35, 0.65), w * rng.uniform(0.35, 0.65)
        ry, rx = h * rng.uniform(0.18, 0.32), w * rng.uniform(0.18, 0.32)
        theta = np.arctan2((yy - cy) / ry, (xx - cx) / rx)
        wobble = 1.0 + 0.12 * np.sin(int(rng.integers(2, 6)) * theta + rng.uniform(0, 2 * np.pi))
        radius = np.hypot((yy - cy) / ry, (xx - cx) / rx) / wobble
        dist = (radius - 1.0) * min(ry, rx)  # approximate signed distance in pixels, negative inside

        edge = rng.uniform(0.7, 2.0)
        alpha = np.clip(0.5 - dist / (2.0 * edge), 0.0, 1.0)
        fringe_width = rng.uniform(2.0, 5.0)
        strands = 0.5 + 0.5 * np.sin(rng.uniform(12, 30) * theta + rng.uniform(0, 2 * np.pi))
        fringe = np.clip(1.0 - dist / fringe_width, 0.0, 1.0) * (dist > 0) * strands * 0.7
        alpha = np.maximum(alpha, fringe)

        c0, c1 = rng.random(3), rng.random(3)
        t = np.clip((xx / max(w - 1, 1) + yy / max(h - 1, 1)) / 2.0, 0.0, 1.0)[:, :, None]
        texture = imgcore.gaussian_blur(rng.normal(0.0, 0.08, (h, w, 3)), 1.0)
        foreground = np.clip((1 - t) * c0 + t * c1 + texture, 0.0, 1.0)
        assets.append(MattingAsset(foreground=foreground, alpha=alpha))
    return assets


def synthetic_backgrounds(n: int, size: Union[int, Tuple[int, int]], rng: np.random.Generator) -> List[Image]:
    """Linear gradients between two random colours, overlaid with smooth coloured noise."""
    h, w = (size, size) if isinstance(size, int) else size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    backgrounds = []
    for _ in range(n):
        angle = rng.uniform(0, 2 * np.pi)
        t = (np.cos(angle) * xx / max(w - 1, 1) + np.sin(angle) * yy / max(h - 1, 1) + 1.0) / 3.0
        t = np.clip(t, 0.0, 1.0)[:, :, None]
        c0, c1 = rng.random(3), rng.random(3)
        noise = imgcore.gaussian_blur(rng.normal(0.0, 0.5, (h, w, 3)), max(1.0, min(h, w) / 16.0))
        backgrounds.append(np.clip((1 - t) * c0 + t * c1 + noise, 0.0, 1.0))
    return backgrounds


def _image_files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pgm"))


def load_assets(directory: Union[str, Path]) -> List[MattingAsset]:
    """
    Loads matting assets from a directory: RGBA files carry the alpha in their 4th channel; other files need a
    sibling ``<stem>_mask.png`` holding the alpha.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Asset directory not found: {directory}")
    assets = []
    for path in _image_files(directory):
        if path.stem.endswith("_mask"):
            continue
        img = imgcore.load_image(path)
        if img.shape[2] == 4:
            assets.append(MattingAsset(foreground=img[:, :, :3], alpha=img[:, :, 3]))
            continue
        mask_path = path.with_name(f"{path.stem}_mask.png")
        if not mask_path.is_file():
            raise DatasetError(f"Asset {path} has no alpha channel and no {mask_path.name}")
        rgb = img if img.shape[2] == 3 else np.repeat(img, 3, axis=2)
        assets.append(MattingAsset(foreground=rgb, alpha=imgcore.load_mask(mask_path)))
    logger.info(f"Loaded {len(assets)} matting assets from {directory}")
    return assets


def load_backgrounds(directory: Union[str, Path]) -> List[Image]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Background directory not found: {directory}")
    backgrounds = []
    for path in _image_files(directory):
        img = imgcore.load_image(path)
        backgrounds.append(img[:, :, :3] if img.shape[2] >= 3 else np.repeat(img, 3, axis=2))
    logger.info(f"Loaded {len(backgrounds)} backgrounds from {directory}")
    return backgrounds


def fit_background(bg: Image, h: int, w: int, rng: np.random.Generator) -> Image:
    """Scales bg to cover h x w (keeping its aspect ratio), then crops a random h x w window."""
    bg = imgcore.as_image(bg, "background")[:, :, :3]
    bh, bw = bg.shape[:2]
    scale = max(h / bh, w / bw)
    sh, sw = max(h, math.ceil(bh * scale)), max(w, math.ceil(bw * scale))
    bg = imgcore.resize_bilinear(bg, sw, sh)
    y = int(rng.integers(0, sh - h + 1))
    x = int(rng.integers(0, sw - w + 1))
    return bg[y : y + h, x : x + w].copy()


def corrupt_mask(alpha: SoftMask, rng: np.random.Generator) -> SoftMask:
    """
    A plausible raw segmentation of a true alpha: low-resolution resampling, hard thresholding, random erosion or
    dilation, and a slight blur.
    """
    alpha = imgcore.as_mask(alpha)
    h, w = alpha.shape
    factor = int(rng.integers(4, 9))
    low = imgcore.resize_bilinear(alpha, max(1, w // factor), max(1, h // factor))
    mask = imgcore.resize_bilinear(low, w, h) >= rng.uniform(0.35, 0.65)
    iterations = int(rng.integers(0, 3))
    if iterations > 0:
        op = ndimage.binary_erosion if rng.random() < 0.5 else ndimage.binary_dilation
        mask = op(mask, iterations=iterations)
    return composite.feather_mask(mask.astype(np.float64), rng.uniform(0.5, 1.5))


# ==========
# datasets
# ==========


def write_sample(root: Union[str, Path], sample: Sample):
    sample_dir = io.mkdir(Path(root) / sample.id)
    imgcore.save_image(sample.fg, sample_dir / "fg.png")
    imgcore.save_image(sample.bg, sample_dir / "bg.png")
    imgcore.save_image(sample.target, sample_dir / "target.png")
    imgcore.save_mask(sample.fg_mask, sample_dir / "mask.png")
    if sample.trimap is not None:
        imgcore.save_trimap(sample.trimap, sample_dir / "trimap.png")
    if sample.foreground is not None:
        imgcore.save_image(sample.foreground, sample_dir / "foreground.png")


def _write_manifest(root: Path, samples: Sequence[Sample]):
    io.dump(
        root / "manifest.csv",
        [MANIFEST_HEADER] + [[s.id, s.width, s.height, s.kind, s.seed] for s in samples],
        fmt=io.fmts.csv,
    )


def _quantized(triplet: Triplet, sample_id: str, kind: str, seed: int, **extra) -> Sample:
    """The sample exactly as it reads back from its 8-bit files."""
    return Sample(
        fg=imgcore.quantize(triplet.fg),
        bg=imgcore.quantize(triplet.bg),
        target=imgcore.quantize(triplet.target),
        fg_mask=imgcore.quantize(triplet.fg_mask),
        id=sample_id,
        kind=kind,
        seed=seed,
        **extra,
    )


def synthesize_dataset(
    assets: Sequence[MattingAsset],
    backgrounds: Sequence[Image],
    root: Union[str, Path],
    n_easy: int,
    n_hard: int = 0,
    model=None,
    colors: Optional[Sequence[RGB]] = None,
    seed: int = 0,
    progress: bool = True,
) -> List[Sample]:
    """
    Writes n_easy easy triplets followed by n_hard hard triplets (generated by model) under root, plus the
    manifest.  Every sample draws its asset, background(s) and colour from its own seed, itself drawn from seed.

    :param colors: the palette of pure background colours; defaults to `DEFAULT_PALETTE`.
    :return: the samples, as stored (8-bit quantized).
    """
    if n_easy < 0 or n_hard < 0:
        raise DatasetError(f"Sample counts must be >= 0, got n_easy={n_easy}, n_hard={n_hard}")
    if n_hard > 0 and model is None:
        raise ModelNotLoadedError("Hard triplets need a trained compositing model")
    if n_easy + n_hard > 0 and (len(assets) == 0 or len(backgrounds) == 0):
        raise DatasetError(f"Need assets and backgrounds, got {len(assets)} assets and {len(backgrounds)} backgrounds")
    palette = DEFAULT_PALETTE if colors is None else list(colors)

    root = io.mkdir(root)
    rng = np.random.default_rng(seed)
    samples = []
    for i in tqdm(range(n_easy + n_hard), desc="synthesize", disable=not progress):
        sample_seed = int(rng.integers(2**31))
        srng = np.random.default_rng(sample_seed)
        asset = assets[int(srng.integers(len(assets)))]
        h, w = asset.size
        bg = fit_background(backgrounds[int(srng.integers(len(backgrounds)))], h, w, srng)
        easy = make_easy_triplet(asset, bg, sample_color(srng, palette))
        if i < n_easy:
            sample = _quantized(easy, f"{i:06d}", "easy", sample_seed)
        else:
            bg2 = fit_background(backgrounds[int(srng.integers(len(backgrounds)))], h, w, srng)
            hard = make_hard_triplet(easy.fg, asset.alpha, bg, bg2, model)
            sample = _quantized(hard, f"{i:06d}", "hard", sample_seed)
        write_sample(root, sample)
        samples.append(sample)

    _write_manifest(root, samples)
    logger.info(f"Wrote {n_easy} easy and {n_hard} hard triplets to {root}")
    return samples


def make_syntest(
    assets: Sequence[MattingAsset],
    backgrounds: Sequence[Image],
    root: Union[str, Path],
    n: int,
    seed: int = 0,
    band: int = 16,
    progress: bool = True,
) -> List[Sample]:
    """
    Writes an evaluation set: each sample's target is the clean foreground F alpha-composited over the background
    with the true alpha; its FG is F over a different background (as a segmentation-based pipeline would see it);
    the pseudo-trimap of the alpha (unknown band of width `band`) is stored for unknown-region scores.

    F, alpha and both backgrounds are quantized to 8 bits before compositing, so that the stored files reproduce
    the target exactly.
    """
    if n < 0:
        raise DatasetError(f"Sample count must be >= 0, got {n}")
    if n > 0 and (len(assets) == 0 or len(backgrounds) == 0):
        raise DatasetError(f"Need assets and backgrounds, got {len(assets)} assets and {len(backgrounds)} backgrounds")

    root = io.mkdir(root)
    rng = np.random.default_rng(seed)
    samples = []
    for i in tqdm(range(n), desc="syntest", disable=not progress):
        sample_seed = int(rng.integers(2**31))
        srng = np.random.default_rng(sample_seed)
        asset = assets[int(srng.integers(len(assets)))]
        h, w = asset.size
        foreground = imgcore.quantize(asset.foreground)
        alpha = imgcore.quantize(asset.alpha)
        bg1 = imgcore.quantize(fit_background(backgrounds[int(srng.integers(len(backgrounds)))], h, w, srng))
        bg2 = imgcore.quantize(fit_background(backgrounds[int(srng.integers(len(backgrounds)))], h, w, srng))
        triplet = Triplet(
            fg=composite.alpha_composite(foreground, bg1, alpha),
            bg=bg2,
            target=composite.alpha_composite(foreground, bg2, alpha),
            fg_mask=alpha,
        )
        sample = _quantized(
            triplet,
            f"{i:06d}",
            "syntest",
            sample_seed,
            foreground=foreground,
            trimap=composite.make_trimap(alpha, band),
        )
        write_sample(root, sample)
        samples.append(sample)

    _write_manifest(root, samples)
    logger.info(f"Wrote {n} evaluation samples to {root}")
    return samples


def load_manifest(root: Union[str, Path]) -> List[ManifestRow]:
    path = Path(root) / "manifest.csv"
    if not path.is_file():
        raise DatasetError(f"No manifest.csv in {root}")
    rows = io.load(path, fmt=io.fmts.csv)
    if len(rows) == 0 or rows[0] != MANIFEST_HEADER:
        raise DatasetError(f"{path}: expected header {MANIFEST_HEADER}, got {rows[0] if rows else None}")
    manifest = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            entry = ManifestRow(id=row[0], width=int(row[1]), height=int(row[2]), kind=row[3], seed=int(row[4]))
        except (IndexError, ValueError) as e:
            raise DatasetError(f"{path}:{lineno}: malformed row {row}") from e
        if entry.kind not in KINDS:
            raise DatasetError(f"{path}:{lineno}: unknown sample kind {entry.kind!r}")
        manifest.append(entry)
    return manifest


def load_dataset(root: Union[str, Path]) -> List[Sample]:
    """
    Reads every sample listed in the manifest and checks its dimensions against the manifest.

    :raises DatasetError: the manifest is missing or malformed, or a sample does not match it.
    """
    root = Path(root)
    samples = []
    for row in load_manifest(root):
        d = root / row.id
        try:
            sample = Sample(
                fg=imgcore.load_image(d / "fg.png"),
                bg=imgcore.load_image(d / "bg.png"),
                target=imgcore.load_image(d / "target.png"),
                fg_mask=imgcore.load_mask(d / "mask.png"),
                id=row.id,
                kind=row.kind,
                seed=row.seed,
                foreground=imgcore.load_image(d / "foreground.png") if (d / "foreground.png").is_file() else None,
                trimap=imgcore.load_trimap(d / "trimap.png") if (d / "trimap.png").is_file() else None,
            )
        except FileNotFoundError as e:
            raise DatasetError(f"Sample {row.id} is incomplete: {e}") from e
        except ShapeMismatchError as e:
            raise DatasetError(f"Sample {row.id} has inconsistent dimensions: {e}") from e
        if (sample.height, sample.width) != (row.height, row.width):
            raise DatasetError(
                f"Sample {row.id} is {sample.width}x{sample.height}, the manifest says {row.width}x{row.height}"
            )
        if sample.trimap is not None:
            imgcore.check_same_size(f"sample {row.id} trimap", sample.fg_mask, sample.trimap)
        samples.append(sample)
    return samples
