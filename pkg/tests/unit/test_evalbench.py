import math
from pathlib import Path

import numpy as np
import pytest

from compkit import augment, evalbench, imgcore, io, mlf
from compkit.errors import (
    DatasetError,
    EmptyRegionError,
    MissingPredictionError,
    ShapeMismatchError,
    UsageError,
)
from compkit.imgcore import Label


@pytest.fixture(scope="module")
def syntest(tmp_path_factory):
    root = tmp_path_factory.mktemp("syntest")
    rng = np.random.default_rng(0)
    assets = augment.synthetic_assets(2, (40, 32), rng)
    backgrounds = augment.synthetic_backgrounds(2, 48, rng)
    augment.make_syntest(assets, backgrounds, root, n=3, seed=1, band=8, progress=False)
    return root


def toy_sample(sample_id: str = "000000", trimap: bool = True) -> augment.Sample:
    rng = np.random.default_rng(int(sample_id))
    mask = np.zeros((8, 8))
    mask[2:6, 2:6] = 1.0
    fg, bg = imgcore.quantize(rng.random((8, 8, 3))), imgcore.quantize(rng.random((8, 8, 3)))
    tri = np.where(mask > 0.5, Label.FG, Label.BG).astype(np.uint8)
    tri[2, 2:6] = Label.UNKNOWN
    return augment.Sample(
        fg=fg,
        bg=bg,
        target=imgcore.quantize(0.5 * fg + 0.5 * bg),
        fg_mask=mask,
        id=sample_id,
        kind="syntest",
        seed=0,
        foreground=fg,
        trimap=tri if trimap else None,
    )


# ==========
# psnr
# ==========


def test_psnr_identical_is_cap():
    x = np.random.default_rng(0).random((5, 5, 3))
    assert evalbench.psnr(x, x) == evalbench.PSNR_CAP == 99.0


def test_psnr_closed_form():
    assert evalbench.psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    assert evalbench.psnr(np.zeros((4, 4, 1)), np.ones((4, 4, 1))) == 0.0


def test_psnr_tiny_error_is_capped():
    a = np.zeros((4, 4, 3))
    b = a.copy()
    b[0, 0, 0] = 1e-9
    assert evalbench.psnr(a, b) == 99.0


def test_psnr_symmetric_and_scaling():
    rng = np.random.default_rng(1)
    a = rng.random((6, 7, 3)) * 0.5
    err = rng.normal(0, 0.05, (6, 7, 3))
    assert evalbench.psnr(a, a + err) == evalbench.psnr(a + err, a)
    doubled = evalbench.psnr(a, a + 2 * err) - evalbench.psnr(a, a + err)
    assert doubled == pytest.approx(-20 * math.log10(2), abs=1e-9)


def test_psnr_region_ignores_outside():
    rng = np.random.default_rng(2)
    a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    region = np.zeros((6, 6), dtype=bool)
    region[1:4, 2:5] = True
    before = evalbench.psnr(a, b, region)
    b2 = b.copy()
    b2[~region] = 0.0
    assert evalbench.psnr(a, b2, region) == before
    assert before == pytest.approx(10 * math.log10(1 / np.mean((a[region] - b[region]) ** 2)))


def test_psnr_errors():
    with pytest.raises(ShapeMismatchError):
        evalbench.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ShapeMismatchError):
        evalbench.psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)))
    with pytest.raises(ShapeMismatchError):
        evalbench.psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.ones((3, 4), dtype=bool))
    with pytest.raises(EmptyRegionError):
        evalbench.psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4), dtype=bool))


def test_region_of():
    sample = toy_sample()
    assert evalbench.region_of(sample, "whole") is None
    assert evalbench.region_of(sample, "unknown").sum() == 4
    with pytest.raises(DatasetError):
        evalbench.region_of(toy_sample(trimap=False), "unknown")
    with pytest.raises(UsageError):
        evalbench.region_of(sample, "boundary")


# ==========
# methods
# ==========


def test_method_needs_exactly_one_source(tmp_path: Path):
    with pytest.raises(UsageError):
        evalbench.Method("x")
    with pytest.raises(UsageError):
        evalbench.Method("x", fn=lambda s: s.fg, predictions=tmp_path)


def test_method_predict_quantizes():
    sample = toy_sample()
    pred = evalbench.Method("grey", fn=lambda s: np.full((8, 8, 3), 0.4)).predict(sample)
    np.testing.assert_array_equal(pred, np.full((8, 8, 3), 102 / 255))


def test_method_wrong_shape():
    with pytest.raises(ShapeMismatchError):
        evalbench.Method("bad", fn=lambda s: np.zeros((8, 7, 3))).predict(toy_sample())


def test_prediction_directory(tmp_path: Path):
    sample = toy_sample()
    imgcore.save_image(sample.target, tmp_path / "000000.png")
    method = evalbench.Method("files", predictions=tmp_path)
    np.testing.assert_array_equal(method.predict(sample), sample.target)
    with pytest.raises(MissingPredictionError):
        method.predict(toy_sample("000001"))


def test_builtin_methods():
    sample = toy_sample()
    assert sorted(evalbench.BUILTIN_METHODS) == ["copy-paste", "copy-paste-soft", "feather", "oracle", "pyramid"]
    for name in evalbench.BUILTIN_METHODS:
        method = evalbench.get_builtin_method(name)
        assert method.name == name
        assert method.predict(sample).shape == (8, 8, 3)
    with pytest.raises(UsageError):
        evalbench.get_builtin_method("closed-form")


def test_copy_paste_method_on_binary_mask():
    sample = toy_sample()
    pred = evalbench.copy_paste_method().predict(sample)
    expected = np.where(sample.fg_mask[:, :, None] > 0.5, sample.fg, sample.bg)
    np.testing.assert_array_equal(pred, expected)


def test_oracle_needs_foreground():
    sample = toy_sample()
    sample.foreground = None
    with pytest.raises(DatasetError):
        evalbench.oracle_method().predict(sample)


def test_compositor_method_with_oracle_compositor():
    sample = toy_sample()
    pred = evalbench.compositor_method("mlf", mlf.OracleCompositor()).predict(sample)
    np.testing.assert_array_equal(pred, evalbench.copy_paste_method().predict(sample))


# ==========
# benchmark and report
# ==========


def test_benchmark_oracle_reaches_cap(syntest):
    results = evalbench.run_benchmark(
        syntest, [evalbench.oracle_method(), evalbench.copy_paste_method()], ["whole", "unknown"], progress=False
    )
    assert [(r.method, r.region) for r in results] == [
        ("oracle", "whole"),
        ("oracle", "unknown"),
        ("copy-paste", "whole"),
        ("copy-paste", "unknown"),
    ]
    for r in results[:2]:
        assert r.scores == [99.0] * 3
        assert r.mean == 99.0
    for r in results[2:]:
        assert r.n_samples == 3
        assert r.mean < 99.0
    # errors concentrate on the boundary band
    assert results[3].mean < results[2].mean


def test_benchmark_accepts_loaded_samples(syntest):
    samples = augment.load_dataset(syntest)
    (r,) = evalbench.run_benchmark(samples, [evalbench.feather_method()], progress=False)
    assert r.ids == [s.id for s in samples]


def test_benchmark_no_methods(syntest):
    assert evalbench.run_benchmark(syntest, [], progress=False) == []


def test_benchmark_empty_dataset():
    (r,) = evalbench.run_benchmark([], [evalbench.oracle_method()], progress=False)
    assert r.n_samples == 0
    assert math.isnan(r.mean)


def test_benchmark_errors(syntest, tmp_path: Path):
    with pytest.raises(UsageError):
        evalbench.run_benchmark(syntest, [evalbench.oracle_method()], ["everywhere"], progress=False)
    with pytest.raises(UsageError):
        evalbench.run_benchmark(syntest, [evalbench.oracle_method(), evalbench.oracle_method()], progress=False)
    with pytest.raises(MissingPredictionError):
        evalbench.run_benchmark(syntest, [evalbench.Method("files", predictions=tmp_path)], progress=False)
    with pytest.raises(DatasetError):
        evalbench.run_benchmark(tmp_path, [evalbench.oracle_method()], progress=False)


def test_emit_report(tmp_path: Path):
    results = [
        evalbench.MethodResult("oracle", "whole", ["000000", "000001"], [99.0, 99.0]),
        evalbench.MethodResult("copy-paste", "whole", ["000000", "000001"], [30.0, 31.5]),
        evalbench.MethodResult("copy-paste", "unknown", ["000000", "000001"], [20.0, 21.0]),
    ]
    paths = evalbench.emit_report(results, tmp_path / "report.csv")
    assert paths == [tmp_path / "report.csv", tmp_path / "report_samples.csv", tmp_path / "report.txt"]

    summary = io.load(paths[0])
    assert summary[0] == ["method", "region", "mean_psnr", "n_samples"]
    assert summary[2] == ["copy-paste", "whole", "30.7500000000", "2"]

    per_sample = io.load(paths[1])
    assert len(per_sample) == 1 + 6
    # the summary mean is the mean of the per-sample rows
    for method, region, mean, _ in summary[1:]:
        scores = [float(row[3]) for row in per_sample[1:] if row[:2] == [method, region]]
        assert float(mean) == pytest.approx(sum(scores) / len(scores))

    table = paths[2].read_text().splitlines()
    assert table[0].split(" | ")[0].strip() == "PSNR (dB)"
    assert set(table[1]) <= {"-", "+"}
    assert [c.strip() for c in table[2].split("|")] == ["whole", "99.00", "30.75"]
    assert [c.strip() for c in table[3].split("|")] == ["unknown", "-", "20.50"]


def test_compare_trend():
    assert evalbench.compare_trend(30.0, 29.0) == "better"
    assert evalbench.compare_trend(29.0, 30.0) == "worse"
    assert evalbench.compare_trend(30.05, 30.0) == "inconclusive"
    a = evalbench.MethodResult("a", "whole", ["0"], [25.0])
    b = evalbench.MethodResult("b", "whole", ["0"], [24.0])
    assert evalbench.compare_trend(a, b, tie_db=0.5) == "better"
    with pytest.raises(UsageError):
        evalbench.compare_trend(1.0, 2.0, tie_db=-1)
