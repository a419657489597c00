"""
The ``compkit`` command line.

Every subcommand is a typed function whose signature becomes its flags (through jsonargparse); the common flags
(--seed, --threads, --log_file, --verbose) are accepted by every subcommand, and ``--config FILE`` injects key=value
pairs that explicit flags override.

Exit codes: 0 success; 1 usage error; 2 data or model error (including missing files); 3 numeric failure (non-finite
loss, failing gradient check).
"""

import inspect
import os
import random
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from jsonargparse import ArgumentParser

from . import arg, augment, composite, evalbench, imgcore, io, log, mlf, pyramid
from .arg import RPath
from .errors import CompositingError, NumericError, UsageError
from .imgcore import Image, SoftMask
from .neuralcore import seed_everything
from .pipeline import PipelineConfig, prepare_mask, run_pipeline

__all__ = ["main", "build_parser", "COMMANDS"]

logger = log.get_logger(__name__, log.INFO)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

COMPOSITE_METHODS = ("copy-paste", "feather", "pyramid", "mlf")
COMPOSITOR_KINDS = ("mlf", "single")


def _common(
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    log_file: Optional[RPath] = None,
    verbose: bool = False,
):
    """
    :param seed: the seed of all randomness; a random seed is drawn (and logged) when omitted.
    :param threads: the number of torch threads; defaults to the number of cores.
    :param log_file: also log (at DEBUG level) to this file.
    :param verbose: log at DEBUG level on stderr.
    """


COMMON_ARGS = tuple(inspect.signature(_common).parameters)


# ==========
# helpers
# ==========


def _rgb(img: Image) -> Image:
    if img.shape[2] == 1:
        return np.repeat(img, 3, axis=2)
    return img[:, :, :3]


def _load_fg_and_mask(fg_path: Path, mask_path: Optional[Path]) -> Tuple[Image, SoftMask]:
    """The foreground image and its mask; without a mask file the foreground must carry an alpha channel."""
    fg = imgcore.load_image(fg_path)
    if mask_path is not None:
        return _rgb(fg), imgcore.load_mask(mask_path)
    if fg.shape[2] != 4:
        raise UsageError(f"--mask is required unless the foreground has an alpha channel: {fg_path}")
    return _rgb(fg), fg[:, :, 3].copy()


def _load_bg(bg_path: Path, like: Image, resize_bg: bool) -> Image:
    bg = _rgb(imgcore.load_image(bg_path))
    h, w = like.shape[:2]
    if resize_bg and bg.shape[:2] != (h, w):
        logger.info(f"Resizing the background from {bg.shape[1]}x{bg.shape[0]} to {w}x{h}")
        bg = imgcore.resize_bilinear(bg, w, h)
    imgcore.check_same_size("foreground vs. background (use --resize_bg true to resize)", like, bg)
    return bg


def _load_samples(roots: Sequence[Path]) -> List[augment.Sample]:
    samples = []
    for root in roots:
        samples += augment.load_dataset(root)
    return samples


def _network_config(
    num_levels: int, base_channels: int, growth_rate: int, block_layers: int, activation: str
) -> mlf.NetworkConfig:
    return mlf.NetworkConfig(num_levels, base_channels, growth_rate, block_layers, activation)


def _assets_and_backgrounds(
    assets: Optional[Path],
    backgrounds: Optional[Path],
    num_assets: int,
    num_backgrounds: int,
    size: int,
    rng: np.random.Generator,
):
    if assets is not None:
        asset_list = augment.load_assets(assets)
    else:
        asset_list = augment.synthetic_assets(num_assets, size, rng)
    if backgrounds is not None:
        bg_list = augment.load_backgrounds(backgrounds)
    else:
        bg_list = augment.synthetic_backgrounds(num_backgrounds, size, rng)
    return asset_list, bg_list


# ==========
# subcommands
# ==========


def cmd_composite(
    fg: RPath,
    bg: RPath,
    out: RPath,
    mask: Optional[RPath] = None,
    method: str = "copy-paste",
    sigma: float = 2.0,
    threshold: float = 0.5,
    levels: Optional[int] = None,
    mlf_checkpoint: Optional[RPath] = None,
    test_size: int = 768,
    resize_bg: bool = False,
):
    """
    Composites a foreground over a background with a classical baseline or a trained fusion network.

    :param fg: the foreground image (its alpha channel is the mask when --mask is omitted).
    :param bg: the background image.
    :param out: the output image (.png, or .ppm).
    :param mask: the (refined) foreground mask.
    :param method: one of copy-paste, feather, pyramid, mlf.
    :param sigma: the feathering blur.
    :param threshold: the binarization threshold of feathering.
    :param levels: the pyramid levels; defaults to a size-dependent value.
    :param mlf_checkpoint: the fusion network checkpoint (method mlf).
    :param test_size: the square canvas the fusion network runs on.
    :param resize_bg: resize the background to the foreground size instead of failing.
    """
    if method not in COMPOSITE_METHODS:
        raise UsageError(f"Unknown method {method!r}; choose from {list(COMPOSITE_METHODS)}")
    if method == "mlf" and mlf_checkpoint is None:
        raise UsageError("Method mlf needs --mlf_checkpoint")

    fg_img, fg_mask = _load_fg_and_mask(fg, mask)
    bg_img = _load_bg(bg, fg_img, resize_bg)
    if method == "copy-paste":
        result = composite.copy_paste(fg_img, bg_img, fg_mask)
    elif method == "feather":
        result = composite.feather_composite(fg_img, bg_img, fg_mask, sigma, threshold)
    elif method == "pyramid":
        n = levels if levels is not None else pyramid.default_levels(*fg_mask.shape)
        result = pyramid.pyramid_blend(fg_img, bg_img, fg_mask, n)
    else:
        net = mlf.load_network(mlf_checkpoint, COMPOSITOR_KINDS)
        result = mlf.NetworkCompositor(net, test_size)(fg_img, fg_mask, bg_img, composite.invert_mask(fg_mask))
    imgcore.save_image(result, out)
    logger.info(f"Wrote {method} composite to {out}")


def cmd_feather(mask: RPath, out: RPath, sigma: float = 2.0):
    """
    Softens a mask with a Gaussian blur.

    :param mask: the input mask.
    :param out: the output mask.
    :param sigma: the blur standard deviation in pixels.
    """
    imgcore.save_mask(composite.feather_mask(imgcore.load_mask(mask), sigma), out)


def cmd_trimap(mask: RPath, out: RPath, band: int = 16, threshold: float = 0.5):
    """
    Builds the pseudo-trimap of a mask: pixels within band/2 of the mask boundary are unknown.

    :param mask: the input mask.
    :param out: the output trimap (BG=0, UNKNOWN=128, FG=255).
    :param band: the width of the unknown band (even).
    :param threshold: the binarization threshold defining the boundary.
    """
    trimap = composite.make_trimap(imgcore.load_mask(mask), band, threshold)
    imgcore.save_trimap(trimap, out)
    counts = imgcore.trimap_counts(trimap)
    logger.info(", ".join(f"{label.name}={n}" for label, n in counts.items()))


def cmd_refine(
    image: RPath,
    refiner: RPath,
    out: RPath,
    raw_mask: Optional[RPath] = None,
    scales: List[int] = [320, 640],
    segment_threshold: float = 0.1,
):
    """
    Refines a raw mask with a trained refiner at increasing scales.

    :param image: the image the mask belongs to.
    :param refiner: the refiner checkpoint.
    :param out: the refined mask.
    :param raw_mask: the raw mask; segmented from the image by thresholding when omitted.
    :param scales: the refinement scales, increasing.
    :param segment_threshold: the colour distance threshold of the fallback segmenter.
    """
    cfg = PipelineConfig(scales=tuple(scales), segment_threshold=segment_threshold)
    img = _rgb(imgcore.load_image(image))
    raw = imgcore.load_mask(raw_mask) if raw_mask is not None else None
    net = mlf.load_network(refiner, ["refine"])
    imgcore.save_mask(prepare_mask(img, raw, mlf.NeuralRefiner(net), cfg), out)


def cmd_blend(
    fg: RPath,
    bg: RPath,
    out: RPath,
    mask: Optional[RPath] = None,
    levels: Optional[int] = None,
    resize_bg: bool = False,
):
    """
    Laplacian pyramid blending of a foreground and a background.

    :param fg: the foreground image.
    :param bg: the background image.
    :param out: the blended image.
    :param mask: the blending mask (the foreground's alpha channel when omitted).
    :param levels: the pyramid levels; defaults to a size-dependent value.
    :param resize_bg: resize the background to the foreground size instead of failing.
    """
    fg_img, fg_mask = _load_fg_and_mask(fg, mask)
    bg_img = _load_bg(bg, fg_img, resize_bg)
    n = levels if levels is not None else pyramid.default_levels(*fg_mask.shape)
    imgcore.save_image(pyramid.pyramid_blend(fg_img, bg_img, fg_mask, n), out)


def cmd_pipeline(
    fg: RPath,
    bg: RPath,
    mlf_checkpoint: RPath,
    out: RPath,
    refiner: Optional[RPath] = None,
    raw_mask: Optional[RPath] = None,
    skip_refine: bool = False,
    scales: List[int] = [320, 640],
    test_size: int = 768,
    segment_threshold: float = 0.1,
    mask_out: Optional[RPath] = None,
    resize_bg: bool = False,
):
    """
    The automatic pipeline: raw mask, multi-scale refinement, fusion network.

    :param fg: the foreground image.
    :param bg: the background image.
    :param mlf_checkpoint: the fusion network checkpoint.
    :param out: the composite.
    :param refiner: the refiner checkpoint (required unless --skip_refine).
    :param raw_mask: the raw mask; segmented from the foreground by thresholding when omitted.
    :param skip_refine: composite with the raw mask, without refinement.
    :param scales: the refinement scales, increasing.
    :param test_size: the square canvas the fusion network runs on.
    :param segment_threshold: the colour distance threshold of the fallback segmenter.
    :param mask_out: also write the mask the compositor used.
    :param resize_bg: resize the background to the foreground size instead of failing.
    """
    if refiner is None and not skip_refine:
        raise UsageError("--refiner is required (or pass --skip_refine true)")
    cfg = PipelineConfig(scales=tuple(scales), test_size=test_size, segment_threshold=segment_threshold)

    fg_img = _rgb(imgcore.load_image(fg))
    bg_img = _load_bg(bg, fg_img, resize_bg)
    raw = imgcore.load_mask(raw_mask) if raw_mask is not None else None
    net = mlf.load_network(mlf_checkpoint, COMPOSITOR_KINDS)
    refiner_model = None if skip_refine else mlf.NeuralRefiner(mlf.load_network(refiner, ["refine"]))

    mask = prepare_mask(fg_img, raw, refiner_model, cfg)
    imgcore.save_image(run_pipeline(fg_img, bg_img, net, None, mask, cfg), out)
    if mask_out is not None:
        imgcore.save_mask(mask, mask_out)
    logger.info(f"Wrote composite to {out}")


def cmd_train(
    data: List[RPath],
    out: RPath,
    seed: int,
    iterations: int = 200000,
    lr: float = 2e-3,
    batch_size: int = 1,
    crop_size: int = 384,
    lambda_p: float = 0.8,
    log_every: int = 100,
    num_levels: int = 4,
    base_channels: int = 16,
    growth_rate: int = 8,
    block_layers: int = 2,
    activation: str = "relu",
    single_stream: bool = False,
    raw_masks: bool = False,
    init: Optional[RPath] = None,
    extractor: Optional[RPath] = None,
):
    """
    Trains a fusion network on one or more triplet datasets; writes model.ckpt, loss.csv and train.cfg to out.

    :param data: the dataset roots.
    :param out: the output directory.
    :param iterations: the number of Adam steps.
    :param lr: the learning rate.
    :param batch_size: the triplets per step.
    :param crop_size: the side training crops are resized to.
    :param lambda_p: the weight of the perceptual loss.
    :param log_every: log the losses every this many iterations.
    :param num_levels: the encoder/decoder levels.
    :param base_channels: the channels of the first level (doubling per level).
    :param growth_rate: the dense block growth rate.
    :param block_layers: the layers per dense block.
    :param activation: relu or elu.
    :param single_stream: train the single-encoder variant (parameter-matched).
    :param raw_masks: feed corrupted masks instead of the true masks (no refinement).
    :param init: continue from this checkpoint instead of a fresh initialization.
    :param extractor: the perceptual feature extractor checkpoint; a seeded random one when omitted.
    """
    cfg = mlf.TrainConfig(
        lr=lr,
        batch_size=batch_size,
        crop_size=crop_size,
        lambda_p=lambda_p,
        iterations=iterations,
        seed=seed,
        log_every=log_every,
    )
    net_cfg = _network_config(num_levels, base_channels, growth_rate, block_layers, activation)

    samples = _load_samples(data)
    if init is not None:
        net = mlf.load_network(init, COMPOSITOR_KINDS)
    elif single_stream:
        net = mlf.SingleStreamNetwork(mlf.SingleStreamNetwork.parameter_matched(net_cfg))
    else:
        net = mlf.MLFNetwork(net_cfg)
    masks = None
    if raw_masks:
        rng = np.random.default_rng(seed)
        masks = [augment.corrupt_mask(s.fg_mask, rng) for s in samples]
    feature_extractor = mlf.FeatureExtractor.from_checkpoint(extractor) if extractor is not None else None

    out = io.mkdir(out)
    cfg.dump(out / "train.cfg")
    mlf.train_mlf(net, samples, cfg, masks=masks, extractor=feature_extractor, out_dir=out)
    logger.info(f"Saved {net.kind} network to {out / 'model.ckpt'}")


def cmd_train_refiner(
    data: List[RPath],
    out: RPath,
    seed: int,
    iterations: int = 200000,
    lr: float = 2e-3,
    batch_size: int = 1,
    patch_sizes: List[int] = [160, 320, 480],
    refine_size: int = 320,
    log_every: int = 100,
    num_levels: int = 4,
    base_channels: int = 16,
    growth_rate: int = 8,
    block_layers: int = 2,
    activation: str = "relu",
    init: Optional[RPath] = None,
):
    """
    Trains the mask refiner on corrupted versions of the dataset masks; writes model.ckpt, loss.csv and train.cfg.

    :param data: the dataset roots.
    :param out: the output directory.
    :param iterations: the number of Adam steps.
    :param lr: the learning rate.
    :param batch_size: the patches per step.
    :param patch_sizes: the candidate patch sides.
    :param refine_size: the side patches are resized to.
    :param log_every: log the loss every this many iterations.
    :param num_levels: the encoder/decoder levels.
    :param base_channels: the channels of the first level.
    :param growth_rate: the dense block growth rate.
    :param block_layers: the layers per dense block.
    :param activation: relu or elu.
    :param init: continue from this checkpoint instead of a fresh initialization.
    """
    cfg = mlf.TrainConfig(
        lr=lr,
        batch_size=batch_size,
        iterations=iterations,
        seed=seed,
        log_every=log_every,
        patch_sizes=tuple(patch_sizes),
        refine_size=refine_size,
    )
    net_cfg = _network_config(num_levels, base_channels, growth_rate, block_layers, activation)

    samples = _load_samples(data)
    net = mlf.load_network(init, ["refine"]) if init is not None else mlf.RefineNetwork(net_cfg)
    rng = np.random.default_rng(seed)
    pairs = [(s.fg, augment.corrupt_mask(s.fg_mask, rng), s.fg_mask) for s in samples]

    out = io.mkdir(out)
    cfg.dump(out / "train.cfg")
    mlf.train_refiner(net, pairs, cfg, out_dir=out)


def cmd_augment(
    out: RPath,
    seed: int,
    n_easy: int = 100,
    n_hard: int = 0,
    mlf_checkpoint: Optional[RPath] = None,
    assets: Optional[RPath] = None,
    backgrounds: Optional[RPath] = None,
    num_assets: int = 16,
    num_backgrounds: int = 16,
    size: int = 64,
):
    """
    Synthesizes a training set of easy triplets, then hard triplets generated by a trained fusion network.

    :param out: the dataset root.
    :param n_easy: the number of easy triplets.
    :param n_hard: the number of hard triplets (needs --mlf_checkpoint).
    :param mlf_checkpoint: the fusion network generating hard triplets.
    :param assets: a directory of matting assets; synthetic blobs when omitted.
    :param backgrounds: a directory of backgrounds; synthetic ones when omitted.
    :param num_assets: the number of synthetic assets.
    :param num_backgrounds: the number of synthetic backgrounds.
    :param size: the side of synthetic assets and backgrounds.
    """
    if n_hard > 0 and mlf_checkpoint is None:
        raise UsageError("Hard triplets (--n_hard > 0) need --mlf_checkpoint")
    model = mlf.load_network(mlf_checkpoint, COMPOSITOR_KINDS) if mlf_checkpoint is not None else None
    rng = np.random.default_rng([seed, 0])
    asset_list, bg_list = _assets_and_backgrounds(assets, backgrounds, num_assets, num_backgrounds, size, rng)
    augment.synthesize_dataset(asset_list, bg_list, out, n_easy, n_hard, model, seed=seed)


def cmd_syntest(
    out: RPath,
    seed: int,
    n: int = 50,
    band: int = 16,
    assets: Optional[RPath] = None,
    backgrounds: Optional[RPath] = None,
    num_assets: int = 16,
    num_backgrounds: int = 16,
    size: int = 64,
):
    """
    Synthesizes an evaluation set with true-alpha targets, clean foregrounds and trimaps.

    :param out: the dataset root.
    :param n: the number of samples.
    :param band: the width of the trimaps' unknown band.
    :param assets: a directory of matting assets; synthetic blobs when omitted.
    :param backgrounds: a directory of backgrounds; synthetic ones when omitted.
    :param num_assets: the number of synthetic assets.
    :param num_backgrounds: the number of synthetic backgrounds.
    :param size: the side of synthetic assets and backgrounds.
    """
    composite._check_band(band)
    rng = np.random.default_rng([seed, 1])
    asset_list, bg_list = _assets_and_backgrounds(assets, backgrounds, num_assets, num_backgrounds, size, rng)
    augment.make_syntest(asset_list, bg_list, out, n, seed=seed, band=band)


def _parse_predictions(predictions: Sequence[str]) -> List[evalbench.Method]:
    methods = []
    for item in predictions:
        name, sep, directory = item.partition("=")
        if not sep or not name or not directory:
            raise UsageError(f"--predictions entries are name=directory, got {item!r}")
        methods.append(evalbench.Method(name, predictions=Path(directory).resolve()))
    return methods


def cmd_eval(
    data: RPath,
    report: RPath,
    methods: List[str] = [],
    predictions: List[str] = [],
    mlf_checkpoint: Optional[RPath] = None,
    refiner: Optional[RPath] = None,
    regions: List[str] = ["whole", "unknown"],
    scales: List[int] = [320, 640],
    test_size: int = 768,
):
    """
    Scores compositing methods on an evaluation set by PSNR; writes the report CSVs and text table.

    :param data: the evaluation dataset root.
    :param report: the summary CSV (per-sample CSV and text table are written next to it).
    :param methods: built-in methods: oracle, copy-paste, copy-paste-soft, feather, pyramid.
    :param predictions: external results as name=directory (files <directory>/<id>.png).
    :param mlf_checkpoint: adds the automatic pipeline with this fusion network (method mlf).
    :param refiner: the refiner of the mlf method; masks are used unrefined when omitted.
    :param regions: whole and/or unknown.
    :param scales: the refinement scales of the mlf method.
    :param test_size: the square canvas the fusion network runs on.
    """
    for region in regions:
        if region not in evalbench.REGIONS:
            raise UsageError(f"Unknown region {region!r}; choose from {list(evalbench.REGIONS)}")
    method_list = [evalbench.get_builtin_method(m) for m in methods] + _parse_predictions(predictions)
    if refiner is not None and mlf_checkpoint is None:
        raise UsageError("--refiner is only used with --mlf_checkpoint")
    if mlf_checkpoint is not None:
        cfg = PipelineConfig(scales=tuple(scales), test_size=test_size)
        net = mlf.load_network(mlf_checkpoint, COMPOSITOR_KINDS)
        refiner_model = mlf.NeuralRefiner(mlf.load_network(refiner, ["refine"])) if refiner is not None else None
        method_list.append(evalbench.compositor_method("mlf", net, refiner_model, cfg))

    results = evalbench.run_benchmark(data, method_list, regions)
    paths = evalbench.emit_report(results, report)
    print(paths[2].read_text(), end="")


def cmd_gradcheck(seed: int, suite: str = "all", step: float = 1e-3, tolerance: float = 1e-3) -> int:
    """
    Checks every differentiable layer and loss against central finite differences.

    :param suite: all, or a comma-separated list of case names.
    :param step: the finite-difference step.
    :param tolerance: the largest acceptable relative error.
    """
    names = [n.strip() for n in suite.split(",") if n.strip()]
    results = mlf.gradcheck_suite(step, names, seed)
    width = max(len(n) for n in results)
    failed = []
    for name, err in results.items():
        ok = err < tolerance
        if not ok:
            failed.append(name)
        print(f"{name.ljust(width)}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        logger.error(f"Gradient check failed for {failed} (tolerance {tolerance:g})")
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS: Dict[str, Callable] = {
    "composite": cmd_composite,
    "feather": cmd_feather,
    "trimap": cmd_trimap,
    "refine": cmd_refine,
    "blend": cmd_blend,
    "pipeline": cmd_pipeline,
    "train": cmd_train,
    "train-refiner": cmd_train_refiner,
    "augment": cmd_augment,
    "syntest": cmd_syntest,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


# ==========
# entry point
# ==========


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="compkit", description="Automatic image compositing toolkit.")
    subcommands = parser.add_subcommands(dest="subcommand")
    for name, fn in COMMANDS.items():
        sub = ArgumentParser(description=inspect.getdoc(fn).split("\n")[0])
        sub.add_function_arguments(_common, as_group=False)
        sub.add_function_arguments(fn, as_group=False, skip={"seed"})
        subcommands.add_subcommand(name, sub, help=inspect.getdoc(fn).split("\n")[0])
    return parser


def _exit_code(e: BaseException) -> int:
    if isinstance(e, UsageError):
        return EXIT_USAGE
    if isinstance(e, NumericError):
        return EXIT_NUMERIC
    # data, model and I/O errors, and ValueError or RuntimeError raised inside torch or numpy
    return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        cfg = parser.parse_args(arg.expand_config_files(argv, COMMANDS))
    except SystemExit as e:
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"compkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    name = cfg.subcommand
    args = cfg[name].as_dict()
    common = {k: args.pop(k) for k in COMMON_ARGS}
    log.setup(common["log_file"], level_stderr=log.verbosity_level(common["verbose"]))

    seed = common["seed"]
    if seed is None:
        seed = random.SystemRandom().randrange(2**31)
        logger.info(f"No --seed given; using seed {seed}")
    threads = common["threads"] or os.cpu_count() or 1
    fn = COMMANDS[name]

    try:
        seed_everything(seed, threads)
        if "seed" in inspect.signature(fn).parameters:
            args["seed"] = seed
        code = fn(**args)
    except (CompositingError, OSError, ValueError, RuntimeError) as e:
        code = _exit_code(e)
        logger.error(f"{name}: {type(e).__name__}: {e}")
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
