"""
Tests for the command-line entry point.
"""

import numpy as np
import pytest

from src.config import resolve_config
from src.main import (
    EXIT_CHECK_FAILED,
    EXIT_OK,
    EXIT_VALIDATION,
    build_parser,
    load_dataset,
    main,
    resolve,
)
from src.synthetic import OrbitTrajectory


@pytest.fixture
def scene_file(tiny_scene_spec, tmp_path):
    """The tiny scene spec written as JSON."""
    path = tmp_path / "scene.json"
    path.write_text(tiny_scene_spec.model_dump_json())
    return path


@pytest.fixture
def trained_run(scene_file, tmp_path, test_env_vars):
    """A two-step micro run; returns the run directory."""
    out = tmp_path / "run"
    code = main(
        [
            "train",
            "--preset",
            "micro-gradcheck",
            "--iterations",
            "2",
            "--synthetic-spec",
            str(scene_file),
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    return out


def test_synth_writes_dataset(scene_file, tmp_path, test_env_vars, capsys):
    """Test synth renders the scene spec into a dataset directory."""
    out = tmp_path / "data"
    assert main(["synth", "--spec", str(scene_file), "--out", str(out)]) == EXIT_OK
    assert (out / "manifest.json").exists()
    assert len(list(out.glob("*.png"))) == 5
    assert "3 train / 2 test" in capsys.readouterr().out


def test_synth_is_byte_deterministic(scene_file, tmp_path, test_env_vars):
    """Test two synth runs write identical files."""
    main(["synth", "--spec", str(scene_file), "--out", str(tmp_path / "a")])
    main(["synth", "--spec", str(scene_file), "--out", str(tmp_path / "b")])
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


def test_synth_without_views_is_validation_error(tiny_scene_spec, tmp_path, test_env_vars):
    """Test a spec with no cameras exits with the validation code."""
    path = tmp_path / "empty.json"
    path.write_text(tiny_scene_spec.model_copy(update={"orbit": OrbitTrajectory(count=0)}).model_dump_json())
    assert main(["synth", "--spec", str(path), "--out", str(tmp_path / "x")]) == EXIT_VALIDATION


def test_bad_override_is_validation_error(test_env_vars):
    """Test a malformed --set exits with the validation code."""
    assert main(["params", "--set", "nonsense"]) == EXIT_VALIDATION


def test_train_without_data_is_validation_error(test_env_vars, tmp_path):
    """Test train needs a dataset or a synthetic spec."""
    assert main(["train", "--preset", "micro-gradcheck", "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_params_prints_breakdown_and_bounds(test_env_vars, capsys):
    """Test params lists the terms and both size bounds."""
    assert main(["params"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "hash grid L*T*F" in out
    assert "planes 3*F*sum N^2" in out


def test_gradcheck_passes(test_env_vars, capsys):
    """Test gradcheck on the micro preset."""
    assert main(["gradcheck"]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_gradcheck_corrupted_fails(test_env_vars, capsys):
    """Test a corrupted adjoint gives the check-failed exit code."""
    assert main(["gradcheck", "--corrupt", "fg.plane.xy.level00"]) == EXIT_CHECK_FAILED
    assert "fg.plane.xy.level00" in capsys.readouterr().out


def test_train_writes_checkpoint(trained_run):
    """Test train produces the run artifacts."""
    assert (trained_run / "checkpoints" / "final.ckpt").exists()
    assert len((trained_run / "metrics.jsonl").read_text().splitlines()) == 2


def test_eval_from_checkpoint(trained_run, scene_file, tmp_path, capsys):
    """Test eval scores the saved dataset next to the run."""
    data = tmp_path / "data"
    main(["synth", "--spec", str(scene_file), "--out", str(data)])
    checkpoint = trained_run / "checkpoints" / "final.ckpt"
    assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", str(data)]) == EXIT_OK
    assert (tmp_path / "run" / "eval_test" / "metrics.csv").exists()
    assert "mean PSNR" in capsys.readouterr().out


def test_render_novel_view(trained_run, tmp_path):
    """Test render writes a PNG for a pose given on the command line."""
    out = tmp_path / "novel.png"
    checkpoint = trained_run / "checkpoints" / "final.ckpt"
    code = main(
        [
            "render",
            "--checkpoint",
            str(checkpoint),
            "--position",
            "3",
            "0",
            "0.5",
            "--width",
            "12",
            "--height",
            "8",
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    assert out.exists()


def test_flags_override_preset():
    """Test explicit flags win over the preset and aliases resolve."""
    args = build_parser().parse_args(
        ["train", "--preset", "desk-small", "--iterations", "7", "--encoder", "hash-only"]
    )
    config = resolve(args)
    assert config.optim.iterations == 7
    assert config.encoding.kind == "hash"


def test_params_hash_plus_dense(test_env_vars, capsys):
    """Test params itemizes both grids of the hash+dense encoder."""
    assert main(["params", "--preset", "micro-gradcheck", "--encoder", "hash-dense"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "fg hash grid" in out
    assert "fg dense grid" in out
    assert "fg planes" not in out
    assert "hash grid L*T*F" in out


def test_training_seed_does_not_change_synthetic_scene(scene_file):
    """Test the scene comes from its own seed whatever the training seed."""
    images = []
    for seed in (0, 7):
        config = resolve_config(
            preset="micro-gradcheck", flags={"synthetic_spec": str(scene_file), "optim": {"seed": seed}}
        )
        images.append(load_dataset(config).images)
    for a, b in zip(*images):
        np.testing.assert_array_equal(a, b)
