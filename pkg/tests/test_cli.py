"""
Tests for the fop command line.
"""
# pylint: disable=redefined-outer-name
from pathlib import Path

import numpy as np
import pytest
import yaml

from fieldofparallax.fop_cli import EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_OK, MANIFEST_NAME, main
from fieldofparallax.fop_lightfield import LightField, load_lfr, save_lfr
from fieldofparallax.fop_refocus import load_stack
from tests.test_refocus import single_plane


@pytest.fixture
def grid_9x9(tmp_path: Path) -> Path:
    """LFR file of a 9 x 9 view grid."""
    path = tmp_path.joinpath("grid.lfr")
    save_lfr(LightField(np.random.default_rng(0).uniform(size=(9, 9, 4, 4, 1)).astype(np.float32)), path)
    return path


def test_select(grid_9x9: Path, capsys: pytest.CaptureFixture) -> None:
    """Selections print as u,v pairs."""
    assert main(["select", "--in", str(grid_9x9), "--strategy", "corners_plus_center", "--k", "3"]) == EXIT_OK
    assert capsys.readouterr().out == "0,0 8,8 4,4\n"
    assert main(["select", "--in", str(grid_9x9), "--strategy", "explicit", "--k", "2", "--coords", "1,2", "3,4"]) == 0
    assert capsys.readouterr().out == "1,2 3,4\n"


def test_select_errors(grid_9x9: Path, capsys: pytest.CaptureFixture) -> None:
    """Too many views, bad coordinates and missing files exit with 2."""
    assert main(["select", "--in", str(grid_9x9), "--strategy", "min_angular_difference", "--k", "82"]) == EXIT_ERROR
    assert "KTooLargeError" in capsys.readouterr().err
    args = ["select", "--in", str(grid_9x9), "--strategy", "explicit", "--k", "1", "--coords", "1;2"]
    assert main(args) == EXIT_ERROR
    missing = str(grid_9x9.with_name("missing.lfr"))
    assert main(["select", "--in", missing, "--strategy", "fixed_five", "--k", "5"]) == EXIT_ERROR
    assert main(["unknown"]) == EXIT_ERROR


def test_refocus(grid_9x9: Path, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Focal stacks are exported with their manifest, unsorted slopes are rejected."""
    out = tmp_path.joinpath("stack")
    assert main(["refocus", "--in", str(grid_9x9), "--slopes=-0.5,0,0.5", "--out", str(out)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines] == ["slice=0", "slice=1", "slice=2", lines[-1].split()[0]]
    assert lines[-1].startswith("sharpest=")
    assert load_stack(out).slopes == [-0.5, 0.0, 0.5]
    assert out.joinpath(MANIFEST_NAME).exists()
    assert main(["refocus", "--in", str(grid_9x9), "--slopes", "1,0", "--out", str(out)]) == EXIT_ERROR
    assert "UnsortedSlopesError" in capsys.readouterr().err


def test_gradcheck(capsys: pytest.CaptureFixture) -> None:
    """Default checks pass, an impossible tolerance fails with 1."""
    assert main(["gradcheck"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[-1].endswith(" pass")
    assert main(["gradcheck", "--mode", "hard_per_view"]) == EXIT_OK
    assert main(["gradcheck", "--tol", "1e-12"]) == EXIT_CHECK_FAILED
    assert capsys.readouterr().out.splitlines()[-1].endswith(" fail")


def test_gradcheck_encoder(capsys: pytest.CaptureFixture) -> None:
    """End to end check of a small encoder."""
    assert main(["gradcheck", "--target", "encoder", "--c", "4", "--k", "2", "--b", "1"]) == EXIT_OK
    assert "tol=1.0e-04 pass" in capsys.readouterr().out


def test_eval(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Identical maps score perfectly, mismatched shapes exit with 2."""
    labels = np.random.default_rng(1).integers(0, 5, size=(8, 8))
    np.save(tmp_path.joinpath("labels.npy"), labels)
    np.save(tmp_path.joinpath("saliency.npy"), labels / 4.0)
    np.save(tmp_path.joinpath("short.npy"), labels[:4])
    pred, gt = str(tmp_path.joinpath("labels.npy")), str(tmp_path.joinpath("saliency.npy"))
    assert main(["eval", "--pred", pred, "--gt", pred]) == EXIT_OK
    assert capsys.readouterr().out == "acc=1.000000\nmacc=1.000000\nmiou=1.000000\n"
    assert main(["eval", "--pred", gt, "--gt", gt, "--metric", "mae"]) == EXIT_OK
    assert capsys.readouterr().out == "mae=0.000000\n"
    assert main(["eval", "--pred", pred, "--gt", str(tmp_path.joinpath("short.npy"))]) == EXIT_ERROR
    assert "MetricsShapeError" in capsys.readouterr().err


def test_config_file(grid_9x9: Path, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Config values act as defaults, command line flags win, unknown keys are rejected."""
    config = tmp_path.joinpath("fop.yaml")
    config.write_text(yaml.safe_dump({"input": str(grid_9x9), "strategy": "min_angular_difference", "k": 5}))
    assert main(["--config", str(config), "select"]) == EXIT_OK
    assert capsys.readouterr().out == "4,4 4,3 3,4 5,4 4,5\n"
    assert main(["--config", str(config), "select", "--k", "1"]) == EXIT_OK
    assert capsys.readouterr().out == "4,4\n"
    config.write_text(yaml.safe_dump({"no-such-flag": 1}))
    assert main(["--config", str(config), "select"]) == EXIT_ERROR
    assert "ConfigError" in capsys.readouterr().err


def test_manifest(grid_9x9: Path, tmp_path: Path) -> None:
    """Runs record command, seed, inputs and verdict."""
    path = tmp_path.joinpath("runs", "select.yaml")
    args = ["--manifest", str(path), "--seed", "3", "select", "--in", str(grid_9x9), "--strategy", "explicit"]
    assert main(args + ["--k", "1", "--coords", "2,2"]) == EXIT_OK
    manifest = yaml.safe_load(path.read_text())
    assert manifest["command"] == "select"
    assert manifest["seed"] == 3
    assert manifest["inputs"] == [str(grid_9x9)]
    assert manifest["config"]["coords"] == ["2,2"]
    assert manifest["passed"] is True
    assert manifest["summary"] == "2,2"
    assert manifest["wall_clock"] >= 0.0


def test_convert(tmp_path: Path) -> None:
    """8 bit arrays are rescaled into LFR files."""
    source = tmp_path.joinpath("lf.npy")
    np.save(source, np.full((2, 2, 3, 3, 1), 255, dtype=np.uint8))
    assert main(["convert", "--in", str(source), "--out", str(tmp_path.joinpath("lf.lfr"))]) == EXIT_OK
    assert np.all(load_lfr(tmp_path.joinpath("lf.lfr")).data == 1.0)


def test_synth(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Synthetic scenes are written with their labels."""
    out = tmp_path.joinpath("scene")
    assert main(["--seed", "4", "synth", "--out", str(out)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("label=")
    assert load_lfr(out.joinpath("scene.lfr")).data.shape == (5, 5, 32, 32, 3)
    assert np.load(out.joinpath("labels.npy")).shape == (8, 8)
    assert yaml.safe_load(out.joinpath(MANIFEST_NAME).read_text())["outputs"][0].endswith("scene.lfr")


def test_train(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Training writes its report, adapter checkpoints and manifest."""
    out = tmp_path.joinpath("train")
    assert main(["train", "--steps", "2", "--batch-size", "2", "--out", str(out)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("final_loss=")
    assert len(out.joinpath("report.csv").read_text().splitlines()) == 4
    assert sorted(p.name for p in out.glob("*.fopa")) == [f"adapter_stage{s}.fopa" for s in (2, 3, 4)]
    assert out.joinpath(MANIFEST_NAME).exists()


def test_ablate_views(tmp_path: Path) -> None:
    """View studies tabulate every arm."""
    out = tmp_path.joinpath("ablate")
    args = ["ablate", "--study", "views", "--seeds", "1", "--steps", "1", "--batch-size", "1", "--out", str(out)]
    assert main(args) == EXIT_OK
    table = out.joinpath("ablation.txt").read_text().splitlines()
    assert len(table) == 9
    assert table[1].split()[0] == "corners_plus_center"


def test_refocus_finds_plane(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """The sharpest exported slice of a single plane scene is at minus its disparity."""
    source = tmp_path.joinpath("plane.lfr")
    save_lfr(single_plane(1, seed=5), source)
    out = tmp_path.joinpath("stack")
    assert main(["refocus", "--in", str(source), "--slopes=-2,-1,0,1,2", "--out", str(out)]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[-1] == "sharpest=1 slope=-1.0"


def test_seed_after_command(tmp_path: Path) -> None:
    """--seed is accepted before and after the command."""
    first, second = tmp_path.joinpath("first"), tmp_path.joinpath("second")
    assert main(["--seed", "7", "synth", "--out", str(first)]) == EXIT_OK
    assert main(["synth", "--seed", "7", "--out", str(second)]) == EXIT_OK
    assert first.joinpath("scene.lfr").read_bytes() == second.joinpath("scene.lfr").read_bytes()
    assert yaml.safe_load(second.joinpath(MANIFEST_NAME).read_text())["seed"] == 7


def test_train_stage_channels(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Stage widths come from the command line, decreasing widths exit with 2."""
    out = tmp_path.joinpath("narrow")
    args = ["train", "--steps", "1", "--batch-size", "1", "--out", str(out)]
    assert main(args + ["--stage-channels", "2,2,4,4"]) == EXIT_OK
    assert out.joinpath("report.csv").exists()
    assert main(args + ["--stage-channels", "8,4,4,4"]) == EXIT_ERROR
    assert "EncoderConfigError" in capsys.readouterr().err


def test_config_flag_names(grid_9x9: Path, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Config keys may use the flag name, YAML lists go through the flag type."""
    config = tmp_path.joinpath("fop.yaml")
    config.write_text(yaml.safe_dump({"in": str(grid_9x9), "strategy": "explicit", "k": 2, "coords": ["1,2", "3,4"]}))
    assert main(["--config", str(config), "select"]) == EXIT_OK
    assert capsys.readouterr().out == "1,2 3,4\n"
    out = tmp_path.joinpath("stack")
    config.write_text(yaml.safe_dump({"in": str(grid_9x9), "slopes": [-0.5, 0, 0.5], "out": str(out)}))
    assert main(["--config", str(config), "refocus"]) == EXIT_OK
    assert load_stack(out).slopes == [-0.5, 0.0, 0.5]


def test_config_bad_values(grid_9x9: Path, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Unparseable config values and unknown choices exit with 2."""
    config = tmp_path.joinpath("fop.yaml")
    for values in ({"coords": ["1;2"]}, {"k": "three"}, {"strategy": "all_views"}):
        config.write_text(yaml.safe_dump({"in": str(grid_9x9), **values}))
        assert main(["--config", str(config), "select", "--strategy", "explicit", "--k", "1"]) == EXIT_ERROR
        assert "ConfigError" in capsys.readouterr().err


def test_config_seed_precedence(tmp_path: Path) -> None:
    """A config seed is a default, --seed on the command line wins in either position."""
    config = tmp_path.joinpath("fop.yaml")
    config.write_text(yaml.safe_dump({"seed": 3}))
    for index, args in enumerate((["--seed", "7", "synth"], ["synth", "--seed", "7"])):
        out = tmp_path.joinpath(f"cli_seed{index}")
        assert main(["--config", str(config)] + args + ["--out", str(out)]) == EXIT_OK
        assert yaml.safe_load(out.joinpath(MANIFEST_NAME).read_text())["seed"] == 7
    out = tmp_path.joinpath("from_config")
    assert main(["--config", str(config), "synth", "--out", str(out)]) == EXIT_OK
    assert yaml.safe_load(out.joinpath(MANIFEST_NAME).read_text())["seed"] == 3


def test_unreadable_arrays(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Files that are not npy arrays exit with 2."""
    bad = tmp_path.joinpath("bad.npy")
    bad.write_text("not an array\n")
    assert main(["convert", "--in", str(bad), "--out", str(tmp_path.joinpath("lf.lfr"))]) == EXIT_ERROR
    assert "IoFailureError" in capsys.readouterr().err
    good = tmp_path.joinpath("good.npy")
    np.save(good, np.zeros((4, 4), dtype=int))
    assert main(["eval", "--pred", str(bad), "--gt", str(good)]) == EXIT_ERROR
    assert "IoFailureError" in capsys.readouterr().err


def test_eval_fractional_prediction(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Saliency maps scored as labels are rejected instead of truncated."""
    np.save(tmp_path.joinpath("pred.npy"), np.full((4, 4), 0.9))
    np.save(tmp_path.joinpath("gt.npy"), np.zeros((4, 4), dtype=int))
    args = ["eval", "--pred", str(tmp_path.joinpath("pred.npy")), "--gt", str(tmp_path.joinpath("gt.npy"))]
    assert main(args) == EXIT_ERROR
    assert "LabelOutOfRangeError" in capsys.readouterr().err
