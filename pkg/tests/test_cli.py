"""CLI subcommands and exit codes, driven in-process."""

import os

import numpy as np
import pytest

from bnn import cli

from conftest import write_mnist_dir


@pytest.fixture(scope="module")
def mnist_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "mnist"
    return write_mnist_dir(str(d), n_train=60, n_test=30)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, mnist_data):
    out = str(tmp_path_factory.mktemp("run"))
    rc = cli.main([
        "train", "--model", "lenet", "--dataset", "mnist",
        "--data-dir", mnist_data, "--out-dir", out,
        "--epochs", "1", "--batch-size", "30",
    ])
    assert rc == cli.EXIT_OK
    return out


class TestTrain:
    def test_artifacts_written(self, trained):
        assert os.path.exists(os.path.join(trained, "model.bnn"))
        report = os.path.join(trained, "report.csv")
        lines = open(report).read().strip().splitlines()
        assert lines[0].startswith("epoch,loss,")
        assert len(lines) == 2  # header + 1 epoch

    def test_missing_data_dir(self, tmp_path, capsys):
        rc = cli.main([
            "train", "--model", "lenet", "--dataset", "mnist",
            "--data-dir", str(tmp_path / "nope"), "--epochs", "1",
        ])
        assert rc == cli.EXIT_DATA

    def test_bad_model_spec_lists_options(self, mnist_data, capsys):
        rc = cli.main([
            "train", "--model", "vgg", "--dataset", "mnist",
            "--data-dir", mnist_data, "--epochs", "1",
        ])
        assert rc == cli.EXIT_USAGE
        assert "lenet" in capsys.readouterr().err

    def test_bad_hyperparameter(self, mnist_data):
        rc = cli.main([
            "train", "--model", "lenet", "--dataset", "mnist",
            "--data-dir", mnist_data, "--epochs", "0",
        ])
        assert rc == cli.EXIT_USAGE

    def test_corrupt_data_file(self, tmp_path):
        d = write_mnist_dir(str(tmp_path / "m"), n_train=10, n_test=5)
        path = os.path.join(d, "train-images-idx3-ubyte")
        open(path, "wb").write(b"\x00" * 40)
        rc = cli.main([
            "train", "--model", "lenet", "--dataset", "mnist",
            "--data-dir", d, "--epochs", "1",
        ])
        assert rc == cli.EXIT_DATA


class TestEval:
    def test_eval_saved_model(self, trained, mnist_data, capsys):
        rc = cli.main([
            "eval", "--model-file", os.path.join(trained, "model.bnn"),
            "--dataset", "mnist", "--data-dir", mnist_data,
        ])
        assert rc == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "test top-1" in out

    def test_eval_corrupt_model(self, tmp_path, mnist_data):
        bad = str(tmp_path / "bad.bnn")
        open(bad, "wb").write(b"garbage file contents")
        rc = cli.main([
            "eval", "--model-file", bad,
            "--dataset", "mnist", "--data-dir", mnist_data,
        ])
        assert rc == cli.EXIT_DATA

    def test_eval_missing_model(self, mnist_data):
        rc = cli.main([
            "eval", "--model-file", "/does/not/exist.bnn",
            "--dataset", "mnist", "--data-dir", mnist_data,
        ])
        assert rc == cli.EXIT_DATA


class TestExport:
    def test_export_fp(self, trained, tmp_path, capsys):
        out = str(tmp_path / "fp.bnn")
        rc = cli.main([
            "export", "--model-file", os.path.join(trained, "model.bnn"),
            "--out", out,
        ])
        assert rc == cli.EXIT_OK
        # fp export is much larger than the packed file
        assert os.path.getsize(out) > 10 * os.path.getsize(
            os.path.join(trained, "model.bnn")
        )


class TestSize:
    def test_lenet(self, capsys):
        rc = cli.main(["size", "--model", "lenet"])
        assert rc == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "parameters:" in out
        assert "1,113,066" in out

    def test_densenet(self, capsys):
        rc = cli.main(["size", "--model", "densenet:k=128,b=2"])
        assert rc == cli.EXIT_OK
        assert "11,389,224" in capsys.readouterr().out

    def test_bad_spec(self, capsys):
        rc = cli.main(["size", "--model", "resnet7"])
        assert rc == cli.EXIT_USAGE


class TestBench:
    def test_small_sizes(self, capsys):
        rc = cli.main(["bench", "--sizes", "64", "128"])
        assert rc == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "equality check passed" in out
        assert "vs naive" in out


class TestSweep:
    def test_tclip_sweep(self, mnist_data, tmp_path, capsys):
        out = str(tmp_path / "sweep")
        rc = cli.main([
            "sweep", "--kind", "tclip", "--grid", "0.5", "1.0",
            "--model", "lenet", "--dataset", "mnist",
            "--data-dir", mnist_data, "--out-dir", out,
            "--epochs", "1", "--batch-size", "30",
        ])
        assert rc == cli.EXIT_OK
        csv_path = os.path.join(out, "sweep_tclip.csv")
        lines = open(csv_path).read().strip().splitlines()
        assert lines[0] == "t_clip,final_test_top1,best_test_top1"
        assert len(lines) == 3

    def test_scaling_sweep(self, mnist_data, tmp_path):
        out = str(tmp_path / "sweep")
        rc = cli.main([
            "sweep", "--kind", "scaling",
            "--model", "lenet", "--dataset", "mnist",
            "--data-dir", mnist_data, "--out-dir", out,
            "--epochs", "1", "--batch-size", "30",
        ])
        assert rc == cli.EXIT_OK
        lines = open(os.path.join(out, "sweep_scaling.csv")).read().strip(
        ).splitlines()
        assert lines[0] == "epoch,N,B,FB"
        assert len(lines) == 2


def test_usage_error_on_no_command():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_entry_point_installed():
    import shutil
    exe = shutil.which("bnn")
    assert exe is not None
