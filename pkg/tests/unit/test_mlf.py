import copy
from pathlib import Path

import numpy as np
import pytest
import torch

from compkit import composite, mlf
from compkit.augment import Triplet
from compkit.errors import (
    CheckpointError,
    DatasetError,
    ModelNotLoadedError,
    NumericError,
    ShapeMismatchError,
    UsageError,
)
from compkit.neuralcore import count_parameters, cross_entropy, l1_loss, save_checkpoint, zero_init

TOY = mlf.NetworkConfig(num_levels=2, base_channels=4, growth_rate=2, block_layers=1)


def seeded(cls, cfg=TOY, seed=0):
    torch.manual_seed(seed)
    return cls(cfg)


def toy_triplets(n: int = 3, size: int = 12, seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        fg, bg = rng.random((size, size, 3)), rng.random((size, size, 3))
        mask = np.zeros((size, size))
        mask[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1.0
        out.append(Triplet(fg=fg, bg=bg, target=composite.alpha_composite(fg, bg, mask), fg_mask=mask))
    return out


def toy_train_config(**kwargs) -> mlf.TrainConfig:
    defaults = dict(iterations=3, crop_size=8, log_every=1, lambda_p=0.8, seed=5)
    defaults.update(kwargs)
    return mlf.TrainConfig(**defaults)


def params_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    return all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


# ==========
# configuration
# ==========


def test_network_config_validation():
    assert TOY.size_multiple == 2
    assert TOY.feature_channels(1) == 8 + 2
    with pytest.raises(UsageError):
        mlf.NetworkConfig(num_levels=0)
    with pytest.raises(UsageError):
        mlf.NetworkConfig(activation="tanh")


def test_train_config_validation():
    cfg = mlf.TrainConfig()
    assert (cfg.lr, cfg.lambda_p, cfg.crop_size, cfg.test_size, cfg.batch_size) == (2e-3, 0.8, 384, 768, 1)
    for bad in [dict(lr=0), dict(lambda_p=-1), dict(iterations=-1), dict(crop_size=0), dict(patch_sizes=())]:
        with pytest.raises(UsageError):
            mlf.TrainConfig(**bad)


def test_train_config_dump_load(tmp_path: Path):
    cfg = mlf.TrainConfig(lr=1e-3, iterations=10, patch_sizes=(8, 16))
    cfg.dump(tmp_path / "train.cfg")
    assert mlf.TrainConfig.load(tmp_path / "train.cfg") == cfg


def test_train_config_load_partial_and_unknown(tmp_path: Path):
    (tmp_path / "a.cfg").write_text("# short run\niterations=5\n")
    assert mlf.TrainConfig.load(tmp_path / "a.cfg") == mlf.TrainConfig(iterations=5)

    (tmp_path / "b.cfg").write_text("iteration=5\n")
    with pytest.raises(UsageError):
        mlf.TrainConfig.load(tmp_path / "b.cfg")


# ==========
# networks
# ==========


@pytest.mark.parametrize("cls", [mlf.MLFNetwork, mlf.SingleStreamNetwork])
@pytest.mark.parametrize("size", [(64, 64), (96, 64), (13, 22)])
def test_fusion_output_shape(cls, size):
    net = seeded(cls)
    out = net(torch.rand(1, 4, *size), torch.rand(1, 4, *size))
    assert tuple(out.shape) == (1, 3) + size
    assert torch.all((out > 0) & (out < 1))


def test_fusion_encoders_disjoint():
    net = seeded(mlf.MLFNetwork)
    fg_params = dict(net.fg_encoder.named_parameters())
    bg_params = dict(net.bg_encoder.named_parameters())
    assert fg_params.keys() == bg_params.keys()
    for name in fg_params:
        assert fg_params[name].shape == bg_params[name].shape
        assert fg_params[name].data_ptr() != bg_params[name].data_ptr()
    assert not torch.equal(net.fg_encoder.stem.weight, net.bg_encoder.stem.weight)


def test_fusion_uses_both_streams():
    net = seeded(mlf.MLFNetwork)
    fg_in, bg_in = torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 8)
    with torch.no_grad():
        a = net(fg_in, bg_in)
        assert not torch.equal(a, net(fg_in, torch.rand(1, 4, 8, 8)))
        assert not torch.equal(a, net(torch.rand(1, 4, 8, 8), bg_in))


@pytest.mark.parametrize("cls", [mlf.MLFNetwork, mlf.SingleStreamNetwork])
def test_zero_weights_give_half(cls):
    net = zero_init(seeded(cls))
    out = net(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 8))
    torch.testing.assert_close(out, torch.full((1, 3, 8, 8), 0.5))


def test_fusion_input_errors():
    net = seeded(mlf.MLFNetwork)
    with pytest.raises(ShapeMismatchError):
        net(torch.rand(1, 3, 8, 8), torch.rand(1, 4, 8, 8))
    with pytest.raises(ShapeMismatchError):
        net(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 6))


def test_refine_network():
    net = seeded(mlf.RefineNetwork)
    out = net(torch.rand(1, 4, 20, 20))
    assert tuple(out.shape) == (1, 1, 20, 20)
    torch.testing.assert_close(zero_init(net)(torch.rand(1, 4, 20, 20)), torch.full((1, 1, 20, 20), 0.5))
    with pytest.raises(ShapeMismatchError):
        net(torch.rand(1, 3, 20, 20))


def test_same_seed_same_weights():
    assert params_equal(seeded(mlf.MLFNetwork, seed=3), seeded(mlf.MLFNetwork, seed=3))
    assert not params_equal(seeded(mlf.MLFNetwork, seed=3), seeded(mlf.MLFNetwork, seed=4))


def test_single_stream_parameter_matched():
    target = count_parameters(seeded(mlf.MLFNetwork))
    widened = mlf.SingleStreamNetwork.parameter_matched(TOY)
    assert widened.base_channels >= TOY.base_channels
    plain_diff = abs(count_parameters(seeded(mlf.SingleStreamNetwork)) - target)
    assert abs(count_parameters(mlf.SingleStreamNetwork(widened)) - target) <= plain_diff


# ==========
# numpy adapters
# ==========


def test_mlf_forward_shapes_and_errors():
    net = seeded(mlf.MLFNetwork)
    fg, bg, mask = np.random.default_rng(0).random((3, 10, 14, 3))
    mask = mask[:, :, 0]
    out = mlf.mlf_forward(net, fg, mask, bg, 1 - mask)
    assert out.shape == (10, 14, 3)
    assert out.dtype == np.float64

    with pytest.raises(ModelNotLoadedError):
        mlf.mlf_forward(None, fg, mask, bg, 1 - mask)
    with pytest.raises(ShapeMismatchError):
        mlf.mlf_forward(net, fg, mask, bg[:9], 1 - mask)


def test_network_compositor_resizes_back():
    compositor = mlf.NetworkCompositor(zero_init(seeded(mlf.MLFNetwork)), test_size=16)
    rng = np.random.default_rng(1)
    out = compositor(rng.random((10, 7, 3)), rng.random((10, 7)), rng.random((10, 7, 3)), rng.random((10, 7)))
    assert out.shape == (10, 7, 3)
    np.testing.assert_allclose(out, 0.5, atol=1e-6)

    with pytest.raises(ModelNotLoadedError):
        mlf.NetworkCompositor(None)


def test_oracle_compositor():
    (t,) = toy_triplets(1)
    out = mlf.OracleCompositor()(t.fg, t.fg_mask, t.bg, 1 - t.fg_mask)
    np.testing.assert_array_equal(out, t.target)
    assert isinstance(mlf.OracleCompositor(), mlf.Compositor)


def test_neural_refiner():
    refiner = mlf.NeuralRefiner(zero_init(seeded(mlf.RefineNetwork)))
    out = refiner(np.random.default_rng(2).random((9, 11, 3)), np.zeros((9, 11)))
    assert out.shape == (9, 11)
    np.testing.assert_allclose(out, 0.5, atol=1e-6)

    with pytest.raises(ModelNotLoadedError):
        mlf.NeuralRefiner(None)
    with pytest.raises(ModelNotLoadedError):
        mlf.refine_forward(None, np.zeros((4, 4, 3)), np.zeros((4, 4)))


# ==========
# losses
# ==========


def test_feature_extractor_deterministic():
    x = torch.rand(1, 3, 8, 8)
    a, b = mlf.FeatureExtractor(seed=1), mlf.FeatureExtractor(seed=1)
    for fa, fb in zip(a(x), b(x)):
        assert torch.equal(fa, fb)
    assert [tuple(f.shape) for f in a(x)] == [(1, 16, 8, 8), (1, 32, 4, 4)]
    assert not any(p.requires_grad for p in a.parameters())


def test_feature_extractor_checkpoint(tmp_path: Path):
    extractor = mlf.FeatureExtractor(seed=7, channels=(4, 6))
    extractor.save(tmp_path / "features.ckpt")
    loaded = mlf.FeatureExtractor.from_checkpoint(tmp_path / "features.ckpt")
    assert params_equal(extractor, loaded)

    save_checkpoint(tmp_path / "other.ckpt", {"w": np.zeros(1)})
    with pytest.raises(CheckpointError):
        mlf.FeatureExtractor.from_checkpoint(tmp_path / "other.ckpt")


def test_perceptual_loss():
    extractor = mlf.FeatureExtractor()
    x, y = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    assert mlf.perceptual_loss(extractor, x, x).item() == 0.0
    assert mlf.perceptual_loss(extractor, x, y).item() >= 0.0
    with pytest.raises(ShapeMismatchError):
        mlf.perceptual_loss(extractor, x, y[:, :, :4])


def test_total_loss():
    extractor = mlf.FeatureExtractor().double()
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    target = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)

    assert mlf.total_loss(pred, target, 0.0).item() == l1_loss(pred, target).item()
    assert mlf.total_loss(pred, pred, 0.8, extractor).item() == 0.0

    expected = l1_loss(pred, target) + 0.8 * mlf.perceptual_loss(extractor, pred, target)
    assert abs(mlf.total_loss(pred, target, 0.8, extractor).item() - expected.item()) < 1e-9

    with pytest.raises(UsageError):
        mlf.total_loss(pred, target, 0.8, None)


# ==========
# training
# ==========


def test_sample_mlf_batch():
    triplets = toy_triplets(2)
    cfg = toy_train_config(batch_size=3)
    fg_in, bg_in, target = mlf.sample_mlf_batch(triplets, [t.fg_mask for t in triplets], cfg, np.random.default_rng(0))
    assert tuple(fg_in.shape) == (3, 4, 8, 8)
    assert tuple(bg_in.shape) == (3, 4, 8, 8)
    assert tuple(target.shape) == (3, 3, 8, 8)
    torch.testing.assert_close(bg_in[:, 3], 1 - fg_in[:, 3])


def test_train_zero_iterations():
    net = seeded(mlf.MLFNetwork)
    before = copy.deepcopy(net)
    _, records = mlf.train_mlf(net, toy_triplets(), toy_train_config(iterations=0), progress=False)
    assert records == []
    assert params_equal(net, before)


def test_train_writes_outputs(tmp_path: Path):
    net, records = mlf.train_mlf(
        seeded(mlf.MLFNetwork), toy_triplets(), toy_train_config(), out_dir=tmp_path, progress=False
    )
    assert [r.iteration for r in records] == [1, 2, 3]
    for r in records:
        assert r.total == pytest.approx(r.l1 + 0.8 * r.perceptual, rel=1e-5)

    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "iteration,l1,perceptual,total"
    assert len(rows) == 4
    loaded = mlf.load_network(tmp_path / "model.ckpt")
    assert isinstance(loaded, mlf.MLFNetwork)
    assert params_equal(loaded, net)


def test_train_deterministic(tmp_path: Path):
    mlf.train_mlf(seeded(mlf.MLFNetwork), toy_triplets(), toy_train_config(), out_dir=tmp_path / "a", progress=False)
    mlf.train_mlf(seeded(mlf.MLFNetwork), toy_triplets(), toy_train_config(), out_dir=tmp_path / "b", progress=False)
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_train_changes_parameters():
    net = seeded(mlf.SingleStreamNetwork)
    before = copy.deepcopy(net)
    mlf.train_mlf(net, toy_triplets(), toy_train_config(lambda_p=0.0), progress=False)
    assert not params_equal(net, before)


def test_train_errors(tmp_path: Path):
    with pytest.raises(DatasetError):
        mlf.train_mlf(seeded(mlf.MLFNetwork), [], toy_train_config(), progress=False)
    with pytest.raises(DatasetError):
        mlf.train_mlf(seeded(mlf.MLFNetwork), toy_triplets(2), toy_train_config(), masks=[], progress=False)


def test_train_non_finite_loss(tmp_path: Path):
    (t,) = toy_triplets(1)
    bad = Triplet(fg=np.full_like(t.fg, np.nan), bg=t.bg, target=t.target, fg_mask=t.fg_mask)
    with pytest.raises(NumericError) as exc_info:
        mlf.train_mlf(seeded(mlf.MLFNetwork), [bad], toy_train_config(), out_dir=tmp_path, progress=False)
    assert exc_info.value.dump_path is not None
    assert exc_info.value.dump_path.is_file()
    assert str(exc_info.value.dump_path) in str(exc_info.value)


def refine_pairs(n: int = 2, size: int = 12):
    return [(t.fg, np.clip(t.fg_mask + 0.2, 0, 1), t.fg_mask) for t in toy_triplets(n, size)]


def test_train_refiner_zero_iterations():
    net = seeded(mlf.RefineNetwork)
    before = copy.deepcopy(net)
    _, records = mlf.train_refiner(net, refine_pairs(), toy_train_config(iterations=0), progress=False)
    assert records == []
    assert params_equal(net, before)


def test_train_refiner_first_loss_matches_cross_entropy():
    cfg = toy_train_config(patch_sizes=(6, 12), refine_size=8)
    net = seeded(mlf.RefineNetwork)
    initial = copy.deepcopy(net)
    _, records = mlf.train_refiner(net, refine_pairs(), cfg, progress=False)
    assert len(records) == 3

    x, y = mlf.sample_refine_batch(refine_pairs(), cfg, np.random.default_rng(cfg.seed))
    with torch.no_grad():
        expected = cross_entropy(initial(x.float()), y.float()).item()
    assert records[0].cross_entropy == pytest.approx(expected, rel=1e-5)


def test_train_refiner_deterministic():
    cfg = toy_train_config(patch_sizes=(6, 12), refine_size=8)
    a, _ = mlf.train_refiner(seeded(mlf.RefineNetwork), refine_pairs(), cfg, progress=False)
    b, _ = mlf.train_refiner(seeded(mlf.RefineNetwork), refine_pairs(), cfg, progress=False)
    assert params_equal(a, b)


def test_train_refiner_empty():
    with pytest.raises(DatasetError):
        mlf.train_refiner(seeded(mlf.RefineNetwork), [], toy_train_config(), progress=False)


# ==========
# checkpoints
# ==========


@pytest.mark.parametrize("cls", [mlf.MLFNetwork, mlf.SingleStreamNetwork, mlf.RefineNetwork])
def test_save_load_network(tmp_path: Path, cls):
    net = seeded(cls)
    mlf.save_network(tmp_path / "net.ckpt", net, {"iterations": "0"})
    loaded = mlf.load_network(tmp_path / "net.ckpt")
    assert type(loaded) is cls
    assert loaded.cfg == TOY
    assert params_equal(loaded, net)


def test_load_network_wrong_kind(tmp_path: Path):
    mlf.save_network(tmp_path / "refine.ckpt", seeded(mlf.RefineNetwork))
    with pytest.raises(CheckpointError):
        mlf.load_network(tmp_path / "refine.ckpt", expect_kind=["mlf", "single"])

    mlf.FeatureExtractor().save(tmp_path / "features.ckpt")
    with pytest.raises(CheckpointError):
        mlf.load_network(tmp_path / "features.ckpt")


def test_load_network_missing(tmp_path: Path):
    with pytest.raises(FileNotFoundError):
        mlf.load_network(tmp_path / "missing.ckpt")


# ==========
# gradient suite
# ==========


def test_gradcheck_suite_passes():
    results = mlf.gradcheck_suite(h=1e-3)
    assert {"conv2d", "dense_block", "perceptual_loss", "mlf_total_loss", "refine_cross_entropy"} <= set(results)
    for name, err in results.items():
        assert err < 1e-3, name


def test_gradcheck_suite_subset_and_unknown():
    assert list(mlf.gradcheck_suite(names=["sum", "relu"])) == ["sum", "relu"]
    with pytest.raises(UsageError):
        mlf.gradcheck_suite(names=["nope"])
