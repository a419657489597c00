import json
from pathlib import Path

import numpy as np
import pytest

from compkit import augment, cli, composite, imgcore, io, mlf, pyramid
from compkit import neuralcore as nc


@pytest.fixture
def images(tmp_path: Path):
    rng = np.random.default_rng(0)
    fg = imgcore.quantize(rng.random((32, 32, 3)))
    bg = imgcore.quantize(rng.random((32, 32, 3)))
    mask = np.zeros((32, 32))
    mask[:, 16:] = 1.0
    mask[:, 15] = 0.5
    imgcore.save_image(fg, tmp_path / "fg.png")
    imgcore.save_image(bg, tmp_path / "bg.png")
    imgcore.save_mask(mask, tmp_path / "mask.png")
    imgcore.save_mask(np.ones((32, 32)), tmp_path / "ones.png")
    return tmp_path


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def fg_bg(root: Path) -> list:
    return ["--fg", root / "fg.png", "--bg", root / "bg.png"]


# ==========
# classical commands
# ==========


def test_composite_copy_paste_full_mask_is_fg(images: Path):
    out = images / "out.png"
    assert run("composite", *fg_bg(images), "--mask", images / "ones.png", "--out", out, "--seed", 0) == 0
    np.testing.assert_array_equal(imgcore.load_image(out), imgcore.load_image(images / "fg.png"))


def test_composite_uses_alpha_channel(images: Path):
    fg = imgcore.load_image(images / "fg.png")
    imgcore.save_image(np.concatenate([fg, np.zeros((32, 32, 1))], axis=2), images / "fg_rgba.png")
    out = images / "out.png"
    assert run("composite", "--fg", images / "fg_rgba.png", "--bg", images / "bg.png", "--out", out) == 0
    np.testing.assert_array_equal(imgcore.load_image(out), imgcore.load_image(images / "bg.png"))


def test_composite_feather_matches_library(images: Path):
    out = images / "out.png"
    args = [*fg_bg(images), "--mask", images / "mask.png", "--out", out]
    assert run("composite", *args, "--method", "feather", "--sigma", 1.5) == 0
    fg, bg = imgcore.load_image(images / "fg.png"), imgcore.load_image(images / "bg.png")
    expected = composite.feather_composite(fg, bg, imgcore.load_mask(images / "mask.png"), 1.5, 0.5)
    np.testing.assert_allclose(imgcore.load_image(out), imgcore.quantize(expected), atol=1e-12)


def test_blend_matches_library(images: Path):
    out = images / "blend.png"
    assert run("blend", *fg_bg(images), "--mask", images / "mask.png", "--out", out) == 0
    fg, bg = imgcore.load_image(images / "fg.png"), imgcore.load_image(images / "bg.png")
    mask = imgcore.load_mask(images / "mask.png")
    expected = pyramid.pyramid_blend(fg, bg, mask, pyramid.default_levels(32, 32))
    np.testing.assert_allclose(imgcore.load_image(out), imgcore.quantize(expected), atol=1e-12)


def test_feather_and_trimap(images: Path):
    mask = imgcore.load_mask(images / "mask.png")
    assert run("feather", "--mask", images / "mask.png", "--out", images / "soft.png", "--sigma", 3) == 0
    np.testing.assert_allclose(
        imgcore.load_mask(images / "soft.png"), imgcore.quantize(composite.feather_mask(mask, 3.0)), atol=1e-12
    )

    assert run("trimap", "--mask", images / "mask.png", "--out", images / "tri.png", "--band", 8) == 0
    np.testing.assert_array_equal(imgcore.load_trimap(images / "tri.png"), composite.make_trimap(mask, 8))


def test_config_file_and_override(images: Path):
    mask = imgcore.load_mask(images / "mask.png")
    (images / "feather.cfg").write_text("sigma=4.0\n")
    args = ["feather", "--config", images / "feather.cfg", "--mask", images / "mask.png"]

    assert run(*args, "--out", images / "a.png") == 0
    np.testing.assert_allclose(
        imgcore.load_mask(images / "a.png"), imgcore.quantize(composite.feather_mask(mask, 4.0)), atol=1e-12
    )
    assert run(*args, "--out", images / "b.png", "--sigma", 1.0) == 0
    np.testing.assert_allclose(
        imgcore.load_mask(images / "b.png"), imgcore.quantize(composite.feather_mask(mask, 1.0)), atol=1e-12
    )


def test_resize_bg(images: Path):
    imgcore.save_image(np.full((16, 24, 3), 0.2), images / "small.png")
    args = ["composite", "--fg", images / "fg.png", "--bg", images / "small.png", "--mask", images / "mask.png"]
    args += ["--out", images / "out.png"]
    assert run(*args) == cli.EXIT_DATA
    assert run(*args, "--resize_bg", "true") == 0
    assert imgcore.load_image(images / "out.png").shape == (32, 32, 3)


# ==========
# exit codes
# ==========


def test_usage_errors(images: Path):
    base = ["composite", *fg_bg(images), "--out", images / "out.png"]
    # no mask and no alpha channel
    assert run(*base) == cli.EXIT_USAGE
    assert run(*base, "--mask", images / "mask.png", "--method", "poisson") == cli.EXIT_USAGE
    assert run(*base, "--mask", images / "mask.png", "--method", "mlf") == cli.EXIT_USAGE
    assert run("frobnicate") == cli.EXIT_USAGE

    feather = ["feather", "--mask", images / "mask.png"]
    assert run(*feather) == cli.EXIT_USAGE
    assert run(*feather, "--out", images / "x.png", "--sigma", 0) == cli.EXIT_USAGE
    assert run(*feather, "--config", images / "missing.cfg", "--out", images / "x.png") == cli.EXIT_USAGE
    assert run("trimap", "--mask", images / "mask.png", "--out", images / "x.png", "--band", 3) == cli.EXIT_USAGE

    pipeline = ["pipeline", *fg_bg(images), "--mlf_checkpoint", images / "m.ckpt", "--out", images / "out.png"]
    assert run(*pipeline) == cli.EXIT_USAGE


def test_data_errors(images: Path):
    assert run("feather", "--mask", images / "nope.png", "--out", images / "x.png") == cli.EXIT_DATA
    (images / "bad.png").write_text("not an image")
    assert run("feather", "--mask", images / "bad.png", "--out", images / "x.png") == cli.EXIT_DATA

    args = ["composite", *fg_bg(images), "--mask", images / "mask.png", "--out", images / "x.png"]
    assert run(*args, "--method", "mlf", "--mlf_checkpoint", images / "missing.ckpt") == cli.EXIT_DATA


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "composite" in capsys.readouterr().out


# ==========
# gradcheck
# ==========


def test_gradcheck(capsys):
    assert run("gradcheck", "--suite", "sum,conv2d", "--seed", 0) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines] == ["sum", "conv2d"]
    assert all(line.split()[-1] == "ok" for line in lines)


def test_gradcheck_failure_exit_code():
    assert run("gradcheck", "--suite", "sum", "--tolerance", 0, "--seed", 0) == cli.EXIT_NUMERIC
    assert run("gradcheck", "--suite", "no_such_case", "--seed", 0) == cli.EXIT_USAGE


# ==========
# datasets, training, evaluation
# ==========


TOY_FLAGS = ["--num_levels", 2, "--base_channels", 4, "--growth_rate", 2, "--block_layers", 1]
SYNTH_FLAGS = ["--size", 24, "--num_assets", 2, "--num_backgrounds", 2]


def test_syntest_and_eval(tmp_path: Path, capsys):
    data = tmp_path / "syntest"
    assert run("syntest", "--out", data, "--seed", 0, "--n", 2, "--band", 8, *SYNTH_FLAGS) == 0
    assert len(augment.load_dataset(data)) == 2

    report = tmp_path / "report.csv"
    assert run("eval", "--data", data, "--report", report, "--methods", json.dumps(["oracle", "copy-paste"])) == 0
    summary = io.load(report)
    assert [row[:2] for row in summary[1:]] == [
        ["oracle", "whole"],
        ["oracle", "unknown"],
        ["copy-paste", "whole"],
        ["copy-paste", "unknown"],
    ]
    assert float(summary[1][2]) == 99.0
    assert "PSNR (dB)" in capsys.readouterr().out

    # external predictions: the oracle's outputs
    preds = tmp_path / "preds"
    for sample in augment.load_dataset(data):
        pred = composite.alpha_composite(sample.foreground, sample.bg, sample.fg_mask)
        imgcore.save_image(pred, preds / f"{sample.id}.png")
    args = ["--predictions", json.dumps([f"ext={preds}"]), "--regions", json.dumps(["whole"])]
    assert run("eval", "--data", data, "--report", report, *args) == 0
    assert io.load(report)[1][:3] == ["ext", "whole", "99.0000000000"]


def test_eval_without_methods(tmp_path: Path):
    data = tmp_path / "syntest"
    report = tmp_path / "r.csv"
    assert run("syntest", "--out", data, "--seed", 0, "--n", 1, "--band", 8, *SYNTH_FLAGS) == 0
    assert run("eval", "--data", data, "--report", report) == 0
    assert io.load(report) == [["method", "region", "mean_psnr", "n_samples"]]
    assert run("eval", "--data", data, "--report", report, "--regions", '["edge"]') == cli.EXIT_USAGE
    assert run("eval", "--data", data, "--report", report, "--predictions", '["nodir"]') == cli.EXIT_USAGE
    assert run("eval", "--data", tmp_path / "nothing", "--report", report) == cli.EXIT_DATA


def test_augment_train_composite_and_eval(tmp_path: Path):
    data = tmp_path / "train"
    assert run("augment", "--out", data, "--seed", 0, "--n_easy", 2, *SYNTH_FLAGS) == 0
    assert run("augment", "--out", tmp_path / "x", "--seed", 0, "--n_hard", 1) == cli.EXIT_USAGE

    out = tmp_path / "run"
    train = ["train", "--data", json.dumps([str(data)]), "--out", out, "--seed", 0]
    assert run(*train, "--iterations", 0, "--crop_size", 8, *TOY_FLAGS) == 0
    assert (out / "model.ckpt").is_file()
    assert mlf.TrainConfig.load(out / "train.cfg").crop_size == 8
    ckpt = out / "model.ckpt"
    assert mlf.load_network(ckpt, ["mlf"]).cfg == mlf.NetworkConfig(2, 4, 2, 1)

    # hard triplets from the trained network
    hard = tmp_path / "hard"
    assert run("augment", "--out", hard, "--seed", 0, "--n_easy", 1, "--n_hard", 1, "--mlf_checkpoint", ckpt) == 0
    assert len(augment.load_dataset(hard)) == 2

    sample = augment.load_dataset(data)[0]
    imgcore.save_image(sample.fg, tmp_path / "fg.png")
    imgcore.save_image(sample.bg, tmp_path / "bg.png")
    imgcore.save_mask(sample.fg_mask, tmp_path / "mask.png")
    args = [*fg_bg(tmp_path), "--mask", tmp_path / "mask.png", "--out", tmp_path / "out.png"]
    assert run("composite", *args, "--method", "mlf", "--mlf_checkpoint", ckpt, "--test_size", 16) == 0
    assert imgcore.load_image(tmp_path / "out.png").shape == sample.fg.shape

    syntest = tmp_path / "syntest"
    assert run("syntest", "--out", syntest, "--seed", 1, "--n", 1, "--band", 8, *SYNTH_FLAGS) == 0
    report = tmp_path / "report.csv"
    args = ["--mlf_checkpoint", ckpt, "--test_size", 16, "--regions", '["whole"]']
    assert run("eval", "--data", syntest, "--report", report, *args) == 0
    assert io.load(report)[1][:2] == ["mlf", "whole"]


def test_train_refiner_refine_and_pipeline(tmp_path: Path):
    data = tmp_path / "train"
    assert run("augment", "--out", data, "--seed", 0, "--n_easy", 2, *SYNTH_FLAGS) == 0
    train = ["--data", json.dumps([str(data)]), "--seed", 0, *TOY_FLAGS]
    assert run("train", *train, "--out", tmp_path / "mlf", "--iterations", 0, "--crop_size", 8) == 0
    refine_args = ["--iterations", 1, "--patch_sizes", "[8]", "--refine_size", 8]
    assert run("train-refiner", *train, "--out", tmp_path / "ref", *refine_args) == 0
    assert (tmp_path / "ref" / "loss.csv").is_file()
    refiner = tmp_path / "ref" / "model.ckpt"
    assert mlf.load_network(refiner, ["refine"]).kind == "refine"

    sample = augment.load_dataset(data)[0]
    imgcore.save_image(sample.fg, tmp_path / "fg.png")
    imgcore.save_image(sample.bg, tmp_path / "bg.png")
    imgcore.save_mask(sample.fg_mask, tmp_path / "raw.png")

    args = ["--image", tmp_path / "fg.png", "--raw_mask", tmp_path / "raw.png", "--out", tmp_path / "refined.png"]
    assert run("refine", *args, "--refiner", refiner, "--scales", "[8, 16]") == 0
    refined = imgcore.load_mask(tmp_path / "refined.png")
    assert refined.shape == sample.fg_mask.shape

    pipeline = ["pipeline", *fg_bg(tmp_path), "--raw_mask", tmp_path / "raw.png", "--test_size", 16]
    compositor = ["--mlf_checkpoint", tmp_path / "mlf" / "model.ckpt"]
    mask_a, mask_b = tmp_path / "a_mask.png", tmp_path / "b_mask.png"
    refined_args = ["--refiner", refiner, "--scales", "[8, 16]", "--mask_out", mask_a]
    assert run(*pipeline, *compositor, *refined_args, "--out", tmp_path / "a.png") == 0
    np.testing.assert_array_equal(imgcore.load_mask(mask_a), refined)

    skip_args = ["--skip_refine", "true", "--mask_out", mask_b]
    assert run(*pipeline, *compositor, *skip_args, "--out", tmp_path / "b.png") == 0
    np.testing.assert_array_equal(imgcore.load_mask(mask_b), imgcore.load_mask(tmp_path / "raw.png"))

    # the refiner checkpoint is not a compositor
    args = ["--mlf_checkpoint", refiner, "--skip_refine", "true", "--out", tmp_path / "c.png"]
    assert run(*pipeline, *args) == cli.EXIT_DATA


@pytest.mark.parametrize("error", [RuntimeError("conv2d: shape mismatch"), ValueError("bad tensor")])
def test_library_errors_map_to_data_exit(images: Path, monkeypatch, error):
    def fail(*args, **kwargs):
        raise error

    monkeypatch.setattr(mlf, "load_network", fail)
    args = ["composite", *fg_bg(images), "--mask", images / "mask.png", "--out", images / "x.png"]
    assert run(*args, "--method", "mlf", "--mlf_checkpoint", images / "m.ckpt") == cli.EXIT_DATA


# ==========
# determinism (--seed with --threads 1)
# ==========


def test_train_zero_iterations_keeps_seeded_init(tmp_path: Path):
    data = tmp_path / "train"
    assert run("augment", "--out", data, "--seed", 0, "--n_easy", 1, *SYNTH_FLAGS) == 0
    args = ["--data", json.dumps([str(data)]), "--iterations", 0, "--crop_size", 8, "--threads", 1, *TOY_FLAGS]
    assert run("train", *args, "--out", tmp_path / "run", "--seed", 11) == 0

    nc.seed_everything(11, 1)
    expected = mlf.MLFNetwork(mlf.NetworkConfig(2, 4, 2, 1))
    loaded = mlf.load_network(tmp_path / "run" / "model.ckpt", ["mlf"])
    expected_arrays, loaded_arrays = nc.state_arrays(expected), nc.state_arrays(loaded)
    assert list(loaded_arrays) == list(expected_arrays)
    for name, array in expected_arrays.items():
        np.testing.assert_array_equal(loaded_arrays[name], array)


def test_train_and_pipeline_are_reproducible(tmp_path: Path):
    data = tmp_path / "train"
    assert run("augment", "--out", data, "--seed", 0, "--n_easy", 2, *SYNTH_FLAGS) == 0
    train = ["--data", json.dumps([str(data)]), "--seed", 3, "--threads", 1, *TOY_FLAGS]
    for name in ["a", "b"]:
        assert run("train", *train, "--out", tmp_path / f"mlf_{name}", "--iterations", 3, "--crop_size", 8) == 0
    ckpt_a, ckpt_b = (tmp_path / f"mlf_{name}" / "model.ckpt" for name in ["a", "b"])
    assert ckpt_a.read_bytes() == ckpt_b.read_bytes()
    assert (tmp_path / "mlf_a" / "loss.csv").read_text() == (tmp_path / "mlf_b" / "loss.csv").read_text()

    refine_args = ["--iterations", 2, "--patch_sizes", "[8]", "--refine_size", 8]
    assert run("train-refiner", *train, "--out", tmp_path / "ref", *refine_args) == 0

    sample = augment.load_dataset(data)[1]
    imgcore.save_image(sample.fg, tmp_path / "fg.png")
    imgcore.save_image(sample.bg, tmp_path / "bg.png")
    imgcore.save_mask(sample.fg_mask, tmp_path / "raw.png")
    pipeline = ["pipeline", *fg_bg(tmp_path), "--mlf_checkpoint", ckpt_a, "--refiner", tmp_path / "ref" / "model.ckpt"]
    pipeline += ["--raw_mask", tmp_path / "raw.png", "--scales", "[8, 16]", "--test_size", 16]
    pipeline += ["--seed", 5, "--threads", 1]
    for name in ["a", "b"]:
        assert run(*pipeline, "--out", tmp_path / f"{name}.png") == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
