"""
Tests for the trainer, evaluator and ablation driver.
"""

import csv
import json

import numpy as np
import pytest

from src.config import resolve_config
from src.data import Camera, SceneDataset, look_at_camera
from src.engine import Evaluator, Trainer, mean_row, run_ablation, train
from src.errors import TrainingDiverged
from src.metrics import psnr


def _config(**optim):
    return resolve_config(preset="micro-gradcheck", flags={"optim": {"iterations": 3, **optim}})


def _metrics(path):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    for row in rows:
        row.pop("wall_ms")
    return rows


def test_train_writes_artifacts(tiny_dataset, tmp_path):
    """Test a short run writes the snapshot, metrics log and checkpoints."""
    model, summary = train(tiny_dataset, _config(), tmp_path / "run")
    assert summary.steps == 3
    assert np.isfinite(summary.final_loss)
    assert (tmp_path / "run" / "config.json").exists()
    assert len((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()) == 3
    assert summary.checkpoint == tmp_path / "run" / "checkpoints" / "final.ckpt"
    assert model.num_images == tiny_dataset.num_train


def test_snapshot_reproduces_config(tiny_dataset, tmp_path):
    """Test the written snapshot resolves back to the run's config."""
    config = _config()
    trainer = Trainer(config, tiny_dataset, tmp_path)
    path = trainer.write_snapshot()
    assert resolve_config(config_file=path) == config


def test_same_seed_identical_metrics(tiny_dataset, tmp_path):
    """Test two runs with one seed log identical losses."""
    train(tiny_dataset, _config(), tmp_path / "a")
    train(tiny_dataset, _config(), tmp_path / "b")
    assert _metrics(tmp_path / "a" / "metrics.jsonl") == _metrics(tmp_path / "b" / "metrics.jsonl")


def test_thread_count_does_not_change_results(tiny_dataset, tmp_path):
    """Test chunked gradients reduce identically for any thread count."""
    one = _config(threads=1, chunk_rays=4)
    four = _config(threads=4, chunk_rays=4)
    train(tiny_dataset, one, tmp_path / "one")
    train(tiny_dataset, four, tmp_path / "four")
    assert _metrics(tmp_path / "one" / "metrics.jsonl") == _metrics(tmp_path / "four" / "metrics.jsonl")


def test_resume_continues_exactly(tiny_dataset, tmp_path):
    """Test a resumed run matches an uninterrupted one step for step."""
    train(tiny_dataset, _config(iterations=4), tmp_path / "full")

    first = Trainer(_config(iterations=2), tiny_dataset, tmp_path / "part")
    first.train()
    resumed = Trainer(_config(iterations=4), tiny_dataset, tmp_path / "part")
    summary = resumed.train(resume=tmp_path / "part" / "checkpoints" / "final.ckpt")

    assert summary.steps == 4
    full = _metrics(tmp_path / "full" / "metrics.jsonl")
    part = _metrics(tmp_path / "part" / "metrics.jsonl")
    assert [row["step"] for row in part] == [1, 2, 3, 4]
    assert part == full


def test_divergence_dumps_diagnostics(tiny_dataset, tmp_path):
    """Test a non-finite loss writes divergence.json and raises."""
    trainer = Trainer(_config(), tiny_dataset, tmp_path)
    trainer.model.foreground.color.weights[0][...] = np.nan
    with pytest.raises(TrainingDiverged):
        trainer.train()
    dump = json.loads((tmp_path / "divergence.json").read_text())
    assert dump["step"] == 1
    assert "fg.color.weight0" in dump["non_finite_gradients"]


def test_training_reduces_loss(tiny_dataset, tmp_path):
    """Test the loss falls over a short run on a tiny scene."""
    config = _config(iterations=60, batch_rays=64, chunk_rays=64, learning_rate=2e-2)
    train(tiny_dataset, config, tmp_path)
    losses = [row["loss"] for row in _metrics(tmp_path / "metrics.jsonl")]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_evaluate_writes_renders_and_csv(tiny_dataset, tmp_path):
    """Test evaluation output files and the mean row."""
    model, summary = train(tiny_dataset, _config(), tmp_path / "run")
    evaluator = Evaluator.from_checkpoint(summary.checkpoint)
    rows = evaluator.evaluate(tiny_dataset, "test", tmp_path / "eval")
    assert len(rows) == 2
    assert sorted(p.name for p in (tmp_path / "eval" / "renders").iterdir()) == [
        "view_000.png",
        "view_004.png",
    ]
    with open(tmp_path / "eval" / "metrics.csv", newline="") as f:
        table = list(csv.DictReader(f))
    assert table[-1]["image"] == "mean"
    assert float(table[-1]["psnr"]) == pytest.approx(mean_row(rows).psnr)


def test_evaluate_train_split_uses_own_embedding(tiny_dataset, tmp_path):
    """Test train views render with their own appearance rows."""
    model, summary = train(tiny_dataset, _config(), tmp_path / "run")
    evaluator = Evaluator.from_checkpoint(summary.checkpoint)
    camera = tiny_dataset.cameras[tiny_dataset.indices("train")[0]]
    own = evaluator.render_camera(camera, app_id=camera.appearance_id)
    render, row = evaluator.evaluate_view(camera, tiny_dataset.images[tiny_dataset.indices("train")[0]])
    np.testing.assert_array_equal(render, own)
    assert row.split == "train"


def test_optimize_left_half_scores_right_half(tiny_scene_spec, tmp_path):
    """Test the left-half protocol fits a free embedding and scores the rest."""
    from src.synthetic import generate_synthetic

    dataset = generate_synthetic(tiny_scene_spec.model_copy(update={"width": 24, "height": 16}))
    config = resolve_config(
        preset="micro-gradcheck",
        flags={"optim": {"iterations": 2}, "eval": {"appearance": "optimize-left-half", "appearance_steps": 3}},
    )
    model, _ = train(dataset, config, tmp_path / "run")
    evaluator = Evaluator(model, dataset.bounds, config)
    before = {name: value.copy() for name, value in model.parameters().items()}
    index = dataset.indices("test")[0]
    render, row = evaluator.evaluate_view(dataset.cameras[index], dataset.images[index])
    assert render.shape == (16, 24, 3)
    assert np.isfinite(row.psnr)
    for name, value in model.parameters().items():
        np.testing.assert_array_equal(value, before[name])


def test_run_ablation_writes_medians(tiny_dataset, tmp_path):
    """Test the ablation table has per-seed rows and a median per kind."""
    config = _config(iterations=2)
    path = run_ablation(config, tiny_dataset, ["hybrid", "hash", "hash+dense"], [0, 1], tmp_path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(r["kind"], r["seed"]) for r in rows] == [
        ("hybrid", "0"),
        ("hybrid", "1"),
        ("hybrid", "median"),
        ("hash", "0"),
        ("hash", "1"),
        ("hash", "median"),
        ("hash+dense", "0"),
        ("hash+dense", "1"),
        ("hash+dense", "median"),
    ]


def test_single_small_image_overfits(unit_bounds, tmp_path):
    """Test one 8x8 training view is memorized past 35 dB in 500 steps."""
    camera = look_at_camera((3.0, 0.0, 0.5), (0.0, 0.0, 0.0), 8, 8, 50.0, image="view.png")
    camera = Camera.model_validate({**camera.model_dump(), "split": "train", "appearance_id": 0})
    py, px = np.mgrid[0:8, 0:8] / 7.0
    image = np.stack([0.2 + 0.6 * px, 0.2 + 0.6 * py, np.full_like(px, 0.5)], axis=-1)
    dataset = SceneDataset([camera], [image], unit_bounds)
    config = resolve_config(
        preset="micro-gradcheck",
        flags={
            "geometry": {"jitter": False},
            "optim": {"iterations": 500, "batch_rays": 64, "chunk_rays": 64, "progress_every": 100},
        },
    )
    model, summary = train(dataset, config, tmp_path / "overfit")
    assert summary.steps == 500
    render = Evaluator(model, dataset.bounds, config).render_camera(camera, app_id=0)
    assert psnr(render, image) > 35.0
