"""
The multi-stream fusion (MLF) compositing network and the neural mask refiner.

* `MLFNetwork`: a foreground encoder and a background encoder (same topology, separate parameters), each fed an
  RGB image concatenated with a soft mask; a decoder that upsamples with transposed convolutions and, at every
  level, concatenates the features both encoders produced at that level; a 3x3 conv + sigmoid head.
* `SingleStreamNetwork`: the single-encoder ablation over the 8-channel concatenation of both inputs.
* `RefineNetwork`: a single-stream encoder-decoder mapping RGB + raw mask to a refined mask.

Training minimizes L1 + lambda_p * perceptual loss (MLF) or the cross-entropy to the true mask (refiner) with Adam.
"""

import dataclasses
import json
import math
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Protocol, Sequence, Tuple, Type, Union, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from . import composite, imgcore, io, log
from .errors import CheckpointError, DatasetError, ModelNotLoadedError, NumericError, ShapeMismatchError, UsageError
from .imgcore import Image, SoftMask
from .neuralcore import (
    ConvLayer,
    DenseBlock,
    DenseBlockSpec,
    UpConvLayer,
    count_parameters,
    cross_entropy,
    get_activation,
    grad_check,
    he_uniform_init,
    l1_loss,
    load_checkpoint,
    load_state_arrays,
    make_adam,
    mse_loss,
    save_checkpoint,
    state_arrays,
)
from .neuralcore.gradcheck import core_gradcheck_cases

if TYPE_CHECKING:
    from .augment import Triplet

__all__ = [
    "NetworkConfig",
    "TrainConfig",
    "LossRecord",
    "RefineLossRecord",
    "Encoder",
    "Decoder",
    "MLFNetwork",
    "SingleStreamNetwork",
    "RefineNetwork",
    "FeatureExtractor",
    "mlf_forward",
    "refine_forward",
    "perceptual_loss",
    "total_loss",
    "loss_terms",
    "sample_mlf_batch",
    "sample_refine_batch",
    "train_mlf",
    "train_refiner",
    "Compositor",
    "NetworkCompositor",
    "OracleCompositor",
    "NeuralRefiner",
    "save_network",
    "load_network",
    "gradcheck_suite",
]

logger = log.get_logger(__name__, log.INFO)


# ==========
# configuration
# ==========


@dataclasses.dataclass
class NetworkConfig:
    num_levels: int = 4
    base_channels: int = 16
    growth_rate: int = 8
    block_layers: int = 2
    activation: str = "relu"

    def __post_init__(self):
        for name in ["num_levels", "base_channels", "growth_rate"]:
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.block_layers < 0:
            raise UsageError(f"block_layers must be >= 0, got {self.block_layers}")
        get_activation(self.activation)

    @property
    def block_spec(self) -> DenseBlockSpec:
        return DenseBlockSpec(num_layers=self.block_layers, growth_rate=self.growth_rate)

    @property
    def size_multiple(self) -> int:
        """Input sizes are padded to a multiple of this, so that every level halves exactly."""
        return 2 ** (self.num_levels - 1)

    def level_channels(self, k: int) -> int:
        """Channels entering the level-k dense block."""
        return self.base_channels * 2**k

    def feature_channels(self, k: int) -> int:
        """Channels of the level-k encoder features (dense block output)."""
        return self.block_spec.out_channels(self.level_channels(k))


@dataclasses.dataclass
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 1
    crop_size: int = 384
    test_size: int = 768
    lambda_p: float = 0.8
    iterations: int = 200000
    seed: int = 0
    log_every: int = 100
    # refiner training: candidate patch sides, and the side patches are resized to
    patch_sizes: Tuple[int, ...] = (160, 320, 480)
    refine_size: int = 320

    def __post_init__(self):
        if not self.lr > 0:
            raise UsageError(f"lr must be positive, got {self.lr}")
        for name in ["batch_size", "crop_size", "test_size", "log_every", "refine_size"]:
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lambda_p < 0:
            raise UsageError(f"lambda_p must be >= 0, got {self.lambda_p}")
        if self.iterations < 0:
            raise UsageError(f"iterations must be >= 0, got {self.iterations}")
        self.patch_sizes = tuple(int(s) for s in self.patch_sizes)
        if len(self.patch_sizes) == 0 or min(self.patch_sizes) < 1:
            raise UsageError(f"patch_sizes must be non-empty and positive, got {list(self.patch_sizes)}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainConfig":
        """Reads a key=value file; keys not given keep their defaults."""
        data = io.load(path, fmt=io.fmts.kv)
        try:
            return io.deserialize(data, cls)
        except io.DeserializationError as e:
            raise UsageError(f"Invalid training config {path}: {e}") from e

    def dump(self, path: Union[str, Path]):
        io.dump(path, self, fmt=io.fmts.kv)


@dataclasses.dataclass
class LossRecord:
    iteration: int
    l1: float
    perceptual: float
    total: float


@dataclasses.dataclass
class RefineLossRecord:
    iteration: int
    cross_entropy: float


# ==========
# networks
# ==========


def _pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode="replicate")


class Encoder(nn.Module):
    """
    A stem 3x3 conv, then per level a dense block followed (except at the top level) by a stride-2 3x3 conv that
    halves the resolution and moves to the next level's width.  Returns the dense block outputs of every level.
    """

    def __init__(self, in_channels: int, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.act = get_activation(cfg.activation)
        self.stem = ConvLayer(in_channels, cfg.level_channels(0), kernel_size=3, padding=1)
        self.blocks = nn.ModuleList(
            DenseBlock(cfg.level_channels(k), cfg.block_spec, cfg.activation) for k in range(cfg.num_levels)
        )
        self.downs = nn.ModuleList(
            ConvLayer(cfg.feature_channels(k), cfg.level_channels(k + 1), kernel_size=3, stride=2, padding=1)
            for k in range(cfg.num_levels - 1)
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        x = self.act(self.stem(x))
        for k, block in enumerate(self.blocks):
            x = block(x)
            features.append(x)
            if k < len(self.downs):
                x = self.act(self.downs[k](x))
        return features


class Decoder(nn.Module):
    """
    Fuses the per-level features of `streams` encoders: the top-level features are concatenated and reduced by a
    1x1 conv; then per level, a transposed conv (kernel 4, stride 2) upsamples, the level's features of every stream
    are concatenated, and a dense block mixes them.  A 3x3 conv + sigmoid produces the output.
    """

    def __init__(self, streams: int, cfg: NetworkConfig, out_channels: int):
        super().__init__()
        self.cfg = cfg
        self.streams = streams
        self.act = get_activation(cfg.activation)
        top = cfg.num_levels - 1
        self.bottleneck = ConvLayer(streams * cfg.feature_channels(top), cfg.feature_channels(top), kernel_size=1)

        ups, blocks = [], []
        channels = cfg.feature_channels(top)
        for k in reversed(range(top)):
            ups.append(UpConvLayer(channels, cfg.level_channels(k), kernel_size=4, stride=2, padding=1))
            in_channels = cfg.level_channels(k) + streams * cfg.feature_channels(k)
            block = DenseBlock(in_channels, cfg.block_spec, cfg.activation)
            blocks.append(block)
            channels = block.out_channels
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.head = ConvLayer(channels, out_channels, kernel_size=3, padding=1)

    def forward(self, stream_features: Sequence[List[torch.Tensor]]) -> torch.Tensor:
        if len(stream_features) != self.streams:
            raise ShapeMismatchError("decoder streams", [(len(stream_features),), (self.streams,)])
        top = self.cfg.num_levels - 1
        x = self.act(self.bottleneck(torch.cat([f[top] for f in stream_features], dim=1)))
        for i, k in enumerate(reversed(range(top))):
            x = self.act(self.ups[i](x))
            x = self.blocks[i](torch.cat([x] + [f[k] for f in stream_features], dim=1))
        return torch.sigmoid(self.head(x))


class _NetworkBase(nn.Module):
    kind: str = ""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg

    def _prepare(self, *xs: torch.Tensor) -> Tuple[List[torch.Tensor], Tuple[int, int]]:
        shapes = [tuple(x.shape) for x in xs]
        if any(x.dim() != 4 for x in xs) or any(s[0] != shapes[0][0] or s[2:] != shapes[0][2:] for s in shapes):
            raise ShapeMismatchError(f"{type(self).__name__} inputs", shapes)
        size = tuple(xs[0].shape[2:])
        return [_pad_to_multiple(x, self.cfg.size_multiple) for x in xs], size

    @staticmethod
    def _crop(y: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        return y[:, :, : size[0], : size[1]]


def _check_channels(name: str, x: torch.Tensor, channels: int):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeMismatchError(f"{name} (expected N x {channels} x H x W)", [tuple(x.shape)])


class MLFNetwork(_NetworkBase):
    """Two-stream fusion network: inputs are (N, 4, H, W) tensors [RGB, fg mask] and [RGB, bg mask]."""

    kind = "mlf"

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        cfg = cfg or NetworkConfig()
        super().__init__(cfg)
        self.fg_encoder = Encoder(4, cfg)
        self.bg_encoder = Encoder(4, cfg)
        self.decoder = Decoder(2, cfg, out_channels=3)
        he_uniform_init(self)

    def forward(self, fg_in: torch.Tensor, bg_in: torch.Tensor) -> torch.Tensor:
        _check_channels("fg input", fg_in, 4)
        _check_channels("bg input", bg_in, 4)
        (fg_in, bg_in), size = self._prepare(fg_in, bg_in)
        out = self.decoder([self.fg_encoder(fg_in), self.bg_encoder(bg_in)])
        return self._crop(out, size)


class SingleStreamNetwork(_NetworkBase):
    """Single-encoder ablation: one encoder over the 8-channel concatenation of both inputs."""

    kind = "single"

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        cfg = cfg or NetworkConfig()
        super().__init__(cfg)
        self.encoder = Encoder(8, cfg)
        self.decoder = Decoder(1, cfg, out_channels=3)
        he_uniform_init(self)

    @classmethod
    def parameter_matched(cls, cfg: Optional[NetworkConfig] = None) -> NetworkConfig:
        """
        A widened config whose single-stream network has about as many parameters as the two-stream network of cfg.
        """
        cfg = cfg or NetworkConfig()
        with torch.random.fork_rng(devices=[]):
            target = count_parameters(MLFNetwork(cfg))
            best, best_diff = cfg, None
            for base in range(cfg.base_channels, 3 * cfg.base_channels + 1):
                growth = max(1, round(cfg.growth_rate * base / cfg.base_channels))
                candidate = dataclasses.replace(cfg, base_channels=base, growth_rate=growth)
                diff = abs(count_parameters(cls(candidate)) - target)
                if best_diff is None or diff < best_diff:
                    best, best_diff = candidate, diff
        return best

    def forward(self, fg_in: torch.Tensor, bg_in: torch.Tensor) -> torch.Tensor:
        _check_channels("fg input", fg_in, 4)
        _check_channels("bg input", bg_in, 4)
        (fg_in, bg_in), size = self._prepare(fg_in, bg_in)
        out = self.decoder([self.encoder(torch.cat([fg_in, bg_in], dim=1))])
        return self._crop(out, size)


class RefineNetwork(_NetworkBase):
    """Mask refiner: input (N, 4, H, W) = [RGB, raw mask], output (N, 1, H, W) refined mask."""

    kind = "refine"

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        cfg = cfg or NetworkConfig()
        super().__init__(cfg)
        self.encoder = Encoder(4, cfg)
        self.decoder = Decoder(1, cfg, out_channels=1)
        he_uniform_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels("refiner input", x, 4)
        (x,), size = self._prepare(x)
        return self._crop(self.decoder([self.encoder(x)]), size)


NETWORK_KINDS: Dict[str, Type[_NetworkBase]] = {
    cls.kind: cls for cls in [MLFNetwork, SingleStreamNetwork, RefineNetwork]
}


# ==========
# numpy <-> tensor
# ==========


def _rgb(img: Image, name: str) -> np.ndarray:
    img = imgcore.as_image(img, name)
    if img.shape[2] == 1:
        return np.repeat(img, 3, axis=2)
    return img[:, :, :3]


def _to_input(img: Image, mask: SoftMask, dtype: torch.dtype) -> torch.Tensor:
    """(H, W, 3) image + (H, W) mask -> (1, 4, H, W) tensor."""
    arr = np.concatenate([img, mask[:, :, None]], axis=2).transpose(2, 0, 1)[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _to_numpy(y: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) tensor -> (H, W, C) float64 array."""
    return y[0].detach().cpu().to(torch.float64).numpy().transpose(1, 2, 0).copy()


def _dtype_of(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def mlf_forward(
    net: Optional[nn.Module],
    fg: Image,
    fg_mask: SoftMask,
    bg: Image,
    bg_mask: SoftMask,
) -> Image:
    """
    Composites fg over bg with a fusion network (two-stream or single-stream); returns a 3-channel image of the same
    size with values in (0, 1).

    :raises ModelNotLoadedError: net is None.
    :raises ShapeMismatchError: the inputs do not share one size.
    """
    if net is None:
        raise ModelNotLoadedError("No compositing network is loaded")
    fg, bg = _rgb(fg, "fg"), _rgb(bg, "bg")
    fg_mask, bg_mask = imgcore.as_mask(fg_mask, "fg mask"), imgcore.as_mask(bg_mask, "bg mask")
    imgcore.check_same_size("mlf inputs", fg, fg_mask, bg, bg_mask)

    dtype = _dtype_of(net)
    with torch.no_grad():
        out = net(_to_input(fg, fg_mask, dtype), _to_input(bg, bg_mask, dtype))
    return _to_numpy(out)


def refine_forward(net: Optional[nn.Module], img: Image, raw: SoftMask) -> SoftMask:
    if net is None:
        raise ModelNotLoadedError("No refinement network is loaded")
    img = _rgb(img, "image")
    raw = imgcore.as_mask(raw, "raw mask")
    imgcore.check_same_size("refiner inputs", img, raw)
    with torch.no_grad():
        out = net(_to_input(img, raw, _dtype_of(net)))
    return _to_numpy(out)[:, :, 0]


# ==========
# losses
# ==========


class FeatureExtractor(nn.Module):
    """
    A fixed two-level convolutional feature stack for the perceptual loss: a 3x3 conv (level 1) and a stride-2 3x3
    conv (level 2), each followed by the activation.  Weights are either drawn from a private seeded generator or
    loaded from a checkpoint, and are never trained.
    """

    kind = "features"

    def __init__(self, seed: int = 0, channels: Tuple[int, int] = (16, 32), activation: str = "relu"):
        super().__init__()
        self.seed = seed
        self.activation = activation
        self.act = get_activation(activation)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.conv1 = ConvLayer(3, channels[0], kernel_size=3, padding=1)
            self.conv2 = ConvLayer(channels[0], channels[1], kernel_size=3, stride=2, padding=1)
            he_uniform_init(self)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        f1 = self.act(self.conv1(x))
        f2 = self.act(self.conv2(f1))
        return [f1, f2]

    def save(self, path: Union[str, Path]):
        save_checkpoint(path, state_arrays(self), {"kind": self.kind, "activation": self.activation})

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path]) -> "FeatureExtractor":
        """Loads externally supplied weights (conv1.weight, conv1.bias, conv2.weight, conv2.bias)."""
        arrays, meta = load_checkpoint(path)
        if "conv1.weight" not in arrays or "conv2.weight" not in arrays:
            raise CheckpointError(f"{path} does not hold feature extractor weights")
        channels = (arrays["conv1.weight"].shape[0], arrays["conv2.weight"].shape[0])
        extractor = cls(channels=channels, activation=meta.get("activation", "relu"))
        load_state_arrays(extractor, arrays)
        return extractor


def perceptual_loss(extractor: FeatureExtractor, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over the extractor's feature levels of the mean squared feature difference."""
    if pred.shape != target.shape:
        raise ShapeMismatchError("perceptual loss", [tuple(pred.shape), tuple(target.shape)])
    target_features = [f.detach() for f in extractor(target.detach())]
    return sum(mse_loss(fp, ft) for fp, ft in zip(extractor(pred), target_features))


def loss_terms(
    pred: torch.Tensor,
    target: torch.Tensor,
    lambda_p: float,
    extractor: Optional[FeatureExtractor],
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(l1, perceptual, total) with total = l1 + lambda_p * perceptual; perceptual is 0 when lambda_p is 0."""
    l1 = l1_loss(pred, target)
    if lambda_p == 0:
        return l1, torch.zeros((), dtype=l1.dtype), l1
    if extractor is None:
        raise UsageError("A feature extractor is required when lambda_p > 0")
    lp = perceptual_loss(extractor, pred, target)
    return l1, lp, l1 + lambda_p * lp


def total_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    lambda_p: float = 0.8,
    extractor: Optional[FeatureExtractor] = None,
) -> torch.Tensor:
    return loss_terms(pred, target, lambda_p, extractor)[2]


# ==========
# training
# ==========


def _random_crop(
    arrays: Sequence[np.ndarray],
    size: int,
    rng: np.random.Generator,
    side_range: Tuple[int, int],
) -> List[np.ndarray]:
    """Crops the same random square (side uniform in side_range) from all arrays, resizes it to size, and flips
    everything horizontally with probability 1/2."""
    h, w = arrays[0].shape[:2]
    side = int(rng.integers(side_range[0], side_range[1] + 1))
    y = int(rng.integers(0, h - side + 1))
    x = int(rng.integers(0, w - side + 1))
    flip = bool(rng.random() < 0.5)
    out = []
    for a in arrays:
        a = imgcore.resize_bilinear(a[y : y + side, x : x + side], size, size)
        out.append(a[:, ::-1] if flip else a)
    return out


def _chw(a: np.ndarray) -> np.ndarray:
    return (a[:, :, None] if a.ndim == 2 else a).transpose(2, 0, 1)


def sample_mlf_batch(
    dataset: Sequence["Triplet"],
    masks: Sequence[SoftMask],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Draws cfg.batch_size triplets; each is cropped to a random square (side in [min side / 2, min side]), resized to
    cfg.crop_size and randomly flipped.

    :return: fg input (N, 4, S, S), bg input (N, 4, S, S), target (N, 3, S, S), as float64.
    """
    fg_in, bg_in, target = [], [], []
    for i in rng.integers(0, len(dataset), size=cfg.batch_size):
        t = dataset[int(i)]
        mask = imgcore.as_mask(masks[int(i)])
        m = min(mask.shape)
        fg, mask, bg, c = _random_crop(
            [_rgb(t.fg, "fg"), mask, _rgb(t.bg, "bg"), _rgb(t.target, "target")],
            cfg.crop_size,
            rng,
            (max(1, math.ceil(m / 2)), m),
        )
        fg_in.append(np.concatenate([_chw(fg), _chw(mask)]))
        bg_in.append(np.concatenate([_chw(bg), _chw(1.0 - mask)]))
        target.append(_chw(c))
    return tuple(torch.from_numpy(np.ascontiguousarray(np.stack(b))) for b in (fg_in, bg_in, target))


def sample_refine_batch(
    pairs: Sequence[Tuple[Image, SoftMask, SoftMask]],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Draws cfg.batch_size (image, raw mask, true mask) pairs; each is cropped to a square patch whose side is picked
    from cfg.patch_sizes (capped by the image size), resized to cfg.refine_size and randomly flipped.

    :return: input (N, 4, S, S) and true mask (N, 1, S, S), as float64.
    """
    x, y = [], []
    for i in rng.integers(0, len(pairs), size=cfg.batch_size):
        img, raw, true = pairs[int(i)]
        img = _rgb(img, "image")
        raw, true = imgcore.as_mask(raw, "raw mask"), imgcore.as_mask(true, "true mask")
        imgcore.check_same_size("refiner training pair", img, raw, true)
        side = min(int(rng.choice(cfg.patch_sizes)), min(raw.shape))
        img, raw, true = _random_crop([img, raw, true], cfg.refine_size, rng, (side, side))
        x.append(np.concatenate([_chw(img), _chw(raw)]))
        y.append(_chw(true))
    return tuple(torch.from_numpy(np.ascontiguousarray(np.stack(b))) for b in (x, y))


def _dump_batch(out_dir: Optional[Path], iteration: int, **tensors: torch.Tensor) -> Path:
    dump_dir = io.mkdir(out_dir) if out_dir is not None else io.mktmp_dir("compkit-nan")
    path = dump_dir / f"nan-batch-{iteration}.npz"
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in tensors.items()})
    return path


def train_mlf(
    net: nn.Module,
    dataset: Sequence["Triplet"],
    cfg: TrainConfig,
    masks: Optional[Sequence[SoftMask]] = None,
    extractor: Optional[FeatureExtractor] = None,
    out_dir: Optional[Union[str, Path]] = None,
    progress: bool = True,
) -> Tuple[nn.Module, List[LossRecord]]:
    """
    Trains a fusion network on triplets with Adam and the L1 + lambda_p * perceptual loss.

    :param masks: the mask fed to the network for each triplet; defaults to each triplet's fg_mask.
    :param extractor: the perceptual feature extractor; defaults to `FeatureExtractor()`.
    :param out_dir: if given, the loss log (loss.csv) and the final checkpoint (model.ckpt) are written there.
    :raises DatasetError: the dataset is empty.
    :raises NumericError: the loss became non-finite; the offending batch is dumped.
    """
    if len(dataset) == 0:
        raise DatasetError("Cannot train on an empty dataset")
    if masks is None:
        masks = [t.fg_mask for t in dataset]
    if len(masks) != len(dataset):
        raise DatasetError(f"Got {len(masks)} masks for {len(dataset)} triplets")
    out_dir = Path(out_dir) if out_dir is not None else None

    dtype = _dtype_of(net)
    if extractor is None and cfg.lambda_p > 0:
        extractor = FeatureExtractor()
    if extractor is not None:
        extractor = extractor.to(dtype)

    rng = np.random.default_rng(cfg.seed)
    optimizer = make_adam(net.parameters(), lr=cfg.lr)
    records: List[LossRecord] = []
    net.train()
    logger.info(f"Training {type(net).__name__} on {len(dataset)} triplets for {cfg.iterations} iterations")

    for it in tqdm(range(1, cfg.iterations + 1), desc="train", disable=not progress):
        fg_in, bg_in, target = (b.to(dtype) for b in sample_mlf_batch(dataset, masks, cfg, rng))
        pred = net(fg_in, bg_in)
        l1, lp, total = loss_terms(pred, target, cfg.lambda_p, extractor)
        if not torch.isfinite(total):
            path = _dump_batch(out_dir, it, fg_in=fg_in, bg_in=bg_in, target=target)
            raise NumericError(f"Non-finite loss {total.item()} at iteration {it}", dump_path=path)

        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        records.append(LossRecord(it, l1.item(), lp.item(), total.item()))
        if it % cfg.log_every == 0 or it == cfg.iterations:
            logger.info(f"iter {it}: l1={l1.item():.5f} perceptual={lp.item():.5f} total={total.item():.5f}")

    if out_dir is not None:
        io.dump(
            out_dir / "loss.csv",
            [["iteration", "l1", "perceptual", "total"]]
            + [[r.iteration, r.l1, r.perceptual, r.total] for r in records],
            fmt=io.fmts.csv,
        )
        save_network(out_dir / "model.ckpt", net)
    return net, records


def train_refiner(
    net: RefineNetwork,
    pairs: Sequence[Tuple[Image, SoftMask, SoftMask]],
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    progress: bool = True,
) -> Tuple[RefineNetwork, List[RefineLossRecord]]:
    """
    Trains the mask refiner on (image, corrupted mask, true mask) pairs, sampling multi-size patches, with Adam and
    the cross-entropy to the true mask.
    """
    if len(pairs) == 0:
        raise DatasetError("Cannot train the refiner without training pairs")
    out_dir = Path(out_dir) if out_dir is not None else None
    dtype = _dtype_of(net)

    rng = np.random.default_rng(cfg.seed)
    optimizer = make_adam(net.parameters(), lr=cfg.lr)
    records: List[RefineLossRecord] = []
    net.train()
    logger.info(f"Training the refiner on {len(pairs)} pairs for {cfg.iterations} iterations")

    for it in tqdm(range(1, cfg.iterations + 1), desc="train-refiner", disable=not progress):
        x, y = (b.to(dtype) for b in sample_refine_batch(pairs, cfg, rng))
        loss = cross_entropy(net(x), y)
        if not torch.isfinite(loss):
            path = _dump_batch(out_dir, it, x=x, y=y)
            raise NumericError(f"Non-finite loss {loss.item()} at iteration {it}", dump_path=path)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        records.append(RefineLossRecord(it, loss.item()))
        if it % cfg.log_every == 0 or it == cfg.iterations:
            logger.info(f"iter {it}: cross_entropy={loss.item():.5f}")

    if out_dir is not None:
        io.dump(
            out_dir / "loss.csv",
            [["iteration", "cross_entropy"]] + [[r.iteration, r.cross_entropy] for r in records],
            fmt=io.fmts.csv,
        )
        save_network(out_dir / "model.ckpt", net)
    return net, records


# ==========
# inference adapters
# ==========


@runtime_checkable
class Compositor(Protocol):
    """Maps (fg, fg mask, bg, bg mask) to a composited RGB image of the same size."""

    def __call__(self, fg: Image, fg_mask: SoftMask, bg: Image, bg_mask: SoftMask) -> Image:
        ...


class NetworkCompositor:
    """Runs a fusion network on a square test canvas (test_size x test_size) and resizes the result back."""

    def __init__(self, net: Optional[nn.Module], test_size: int = 768):
        if net is None:
            raise ModelNotLoadedError("No compositing network is loaded")
        self.net = net.eval()
        self.test_size = test_size

    def __call__(self, fg: Image, fg_mask: SoftMask, bg: Image, bg_mask: SoftMask) -> Image:
        h, w = np.shape(fg_mask)[:2]
        s = self.test_size
        out = mlf_forward(
            self.net,
            imgcore.resize_bilinear(_rgb(fg, "fg"), s, s),
            imgcore.resize_bilinear(imgcore.as_mask(fg_mask), s, s),
            imgcore.resize_bilinear(_rgb(bg, "bg"), s, s),
            imgcore.resize_bilinear(imgcore.as_mask(bg_mask), s, s),
        )
        return np.clip(imgcore.resize_bilinear(out, w, h), 0.0, 1.0)


class OracleCompositor:
    """Alpha compositing with the given fg mask; stands in for a perfect network."""

    def __call__(self, fg: Image, fg_mask: SoftMask, bg: Image, bg_mask: SoftMask) -> Image:
        return composite.alpha_composite(_rgb(fg, "fg"), _rgb(bg, "bg"), fg_mask)


class NeuralRefiner:
    """Adapts a `RefineNetwork` to the (image, mask) -> mask refiner interface."""

    def __init__(self, net: Optional[RefineNetwork]):
        if net is None:
            raise ModelNotLoadedError("No refinement network is loaded")
        self.net = net.eval()

    def __call__(self, img: Image, mask: SoftMask) -> SoftMask:
        return refine_forward(self.net, img, mask)


# ==========
# checkpoints
# ==========


def save_network(path: Union[str, Path], net: _NetworkBase, meta: Optional[Dict[str, str]] = None):
    """Saves the parameters together with the network kind and architecture, so `load_network` can rebuild it."""
    full_meta = {"kind": net.kind}
    for field in dataclasses.fields(NetworkConfig):
        full_meta[f"net.{field.name}"] = json.dumps(getattr(net.cfg, field.name))
    full_meta.update(meta or {})
    save_checkpoint(path, state_arrays(net), full_meta)


def load_network(path: Union[str, Path], expect_kind: Optional[Sequence[str]] = None) -> _NetworkBase:
    """
    :param expect_kind: if given, the allowed network kinds (mlf, single, refine).
    :raises CheckpointError: the checkpoint is not a network of an allowed kind, or does not match its architecture.
    """
    arrays, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind not in NETWORK_KINDS:
        raise CheckpointError(f"{path} is not a network checkpoint (kind={kind!r})")
    if expect_kind is not None and kind not in expect_kind:
        raise CheckpointError(f"{path} holds a {kind!r} network, expected one of {list(expect_kind)}")
    try:
        cfg = NetworkConfig(**{k[len("net.") :]: json.loads(v) for k, v in meta.items() if k.startswith("net.")})
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid architecture metadata: {e}") from e
    with torch.random.fork_rng(devices=[]):
        net = NETWORK_KINDS[kind](cfg)
    load_state_arrays(net, arrays)
    logger.debug(f"Loaded {kind} network from {path}")
    return net.eval()


# ==========
# gradient suite
# ==========

TOY_NETWORK = NetworkConfig(num_levels=2, base_channels=4, growth_rate=2, block_layers=1, activation="elu")


def gradcheck_suite(
    h: float = 1e-3,
    names: Optional[Sequence[str]] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Runs the gradient checks of every layer and loss, plus the perceptual loss, the toy fusion network under the
    total loss, and the toy refiner under the cross-entropy.

    Network-level cases use ELU activations (ReLU kinks break finite differences) and a zero target (below the
    sigmoid range, so the L1 loss never crosses its kink); tiny gradient entries are measured relative to 1% of the
    largest one.

    :return: the max relative error of each case.
    """
    cases = dict(core_gradcheck_cases(seed))

    def gen() -> torch.Generator:
        return torch.Generator().manual_seed(seed)

    def perceptual(h: float) -> float:
        g = gen()
        extractor = FeatureExtractor(seed=seed, activation="elu").double()
        pred = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        target = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        return grad_check(lambda p: perceptual_loss(extractor, p, target), [pred], h, relative_floor=1e-2)

    def mlf_total(h: float) -> float:
        g = gen()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = MLFNetwork(TOY_NETWORK).double()
        extractor = FeatureExtractor(seed=seed, activation="elu").double()
        fg_in = torch.rand(1, 4, 8, 8, generator=g, dtype=torch.float64)
        bg_in = torch.rand(1, 4, 8, 8, generator=g, dtype=torch.float64)
        target = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
        return grad_check(
            lambda f, b, *params: total_loss(net(f, b), target, 0.8, extractor),
            [fg_in, bg_in, net.fg_encoder.stem.weight, net.bg_encoder.stem.bias, net.decoder.head.weight],
            h,
            relative_floor=1e-2,
        )

    def refine_ce(h: float) -> float:
        g = gen()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = RefineNetwork(TOY_NETWORK).double()
        x = torch.rand(1, 4, 8, 8, generator=g, dtype=torch.float64)
        y = (torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64) < 0.5).to(torch.float64)
        return grad_check(
            lambda x, *params: cross_entropy(net(x), y),
            [x, net.decoder.head.weight, net.decoder.head.bias],
            h,
            relative_floor=1e-2,
        )

    cases["perceptual_loss"] = perceptual
    cases["mlf_total_loss"] = mlf_total
    cases["refine_cross_entropy"] = refine_ce

    if names is None or list(names) == ["all"]:
        names = list(cases)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise UsageError(f"Unknown gradient check cases {unknown}; available: {sorted(cases)}")

    results = {}
    for name in names:
        results[name] = cases[name](h)
        logger.debug(f"gradcheck {name}: max relative error {results[name]:.3e}")
    return results
