import os
from pathlib import Path

import pytest
from jsonargparse import ArgumentParser

import compkit as ck


def subject_rpath(arg: ck.arg.RPath):
    pass


def test_rpath_relative(tmp_path):
    os.chdir(tmp_path)
    parser = ArgumentParser()
    parser.add_function_arguments(subject_rpath)
    cfg = parser.parse_args(["--arg", "bbb"])
    assert cfg.arg == (tmp_path / "bbb").resolve()
    assert not cfg.arg.exists()


def test_rpath_absolute(tmp_path):
    os.chdir(tmp_path)
    parser = ArgumentParser()
    parser.add_function_arguments(subject_rpath)
    cfg = parser.parse_args(["--arg", str(tmp_path)])
    assert cfg.arg == tmp_path.resolve()
    assert cfg.arg.exists()


SUBCOMMANDS = ["train", "eval"]


def test_expand_config_files_injects_after_subcommand(tmp_path: Path):
    (tmp_path / "train.cfg").write_text("# toy\niterations=10\nlr=0.001\nname=toy\nscales=[320, 640]\n")
    argv = ["train", "--config", str(tmp_path / "train.cfg"), "--iterations", "5"]
    assert ck.arg.expand_config_files(argv, SUBCOMMANDS) == [
        "train",
        "--iterations",
        "10",
        "--lr",
        "0.001",
        "--name",
        "toy",
        "--scales",
        "[320, 640]",
        "--iterations",
        "5",
    ]


def test_expand_config_files_equals_form(tmp_path: Path):
    (tmp_path / "a.cfg").write_text("seed=3\n")
    argv = [f"--config={tmp_path / 'a.cfg'}", "eval", "--data", "x"]
    assert ck.arg.expand_config_files(argv, SUBCOMMANDS) == ["eval", "--seed", "3", "--data", "x"]


def test_expand_config_files_noop():
    assert ck.arg.expand_config_files(["eval", "--data", "x"], SUBCOMMANDS) == ["eval", "--data", "x"]


def test_expand_config_files_errors(tmp_path: Path):
    with pytest.raises(ValueError):
        ck.arg.expand_config_files(["train", "--config"], SUBCOMMANDS)

    (tmp_path / "a.cfg").write_text("seed=3\n")
    with pytest.raises(ValueError):
        ck.arg.expand_config_files(["--config", str(tmp_path / "a.cfg")], SUBCOMMANDS)

    with pytest.raises(FileNotFoundError):
        ck.arg.expand_config_files(["train", "--config", str(tmp_path / "missing.cfg")], SUBCOMMANDS)
