"""
Desk-scale acceptance runs.

These train full desk-small models and take minutes each; they are
deselected by default. Run them with: pytest -m acceptance
"""

import csv
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from src.config import HashGridConfig, PlaneSetConfig, resolve_config
from src.encoding import HASH_PRIMES, PLANE_AXES, HashGrid, PlaneSet, to_unit_cube
from src.engine import Evaluator, mean_row, run_ablation, train
from src.geometry import contract
from src.gradcheck import run_gradcheck
from src.render import composite
from src.synthetic import generate_synthetic, load_synthetic_spec

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk-small.toml"
DESK_SCENE = ROOT / "scenes" / "desk-small.toml"


@pytest.fixture(scope="module")
def desk_dataset():
    """The desk-small synthetic scene: 24 train / 4 test views at 96x96."""
    return generate_synthetic(load_synthetic_spec(DESK_SCENE))


def _test_score(config, dataset, out):
    model, _ = train(dataset, config, out)
    return mean_row(Evaluator(model, dataset.bounds, config).evaluate(dataset, "test", out / "eval"))


def _medians(path):
    with open(path, newline="") as f:
        return {row["kind"]: float(row["psnr"]) for row in csv.DictReader(f) if row["seed"] == "median"}


def test_gradcheck_micro_under_a_minute(micro_config):
    """Test the micro gradient check passes within 60 s."""
    start = time.perf_counter()
    report = run_gradcheck(micro_config)
    assert report.passed, report.format()
    assert time.perf_counter() - start < 60.0


def test_compositing_conservation_many_rays():
    """Test weights plus final transmittance sum to one over 1e5 rays."""
    rng = np.random.default_rng(0)
    for count in (8, 16, 32, 64):
        rays = 25_000
        sigma = rng.uniform(0.0, 50.0, (rays, count))
        delta = rng.uniform(0.0, 1.0, (rays, count))
        color = rng.uniform(0.0, 1.0, (rays, count, 3))
        result = composite(sigma, color, delta)
        total = result.weights.sum(axis=-1) + result.final_transmittance
        np.testing.assert_allclose(total, 1.0, atol=1e-6)
        assert np.all(np.diff(result.transmittance, axis=-1) <= 0.0)


def test_contraction_properties_many_points():
    """Test identity inside the ball and the radius-2 bound over 1e6 points."""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1_000_000, 3)) * rng.uniform(0.0, 50.0, (1_000_000, 1))
    y = contract(x)
    norms = np.linalg.norm(x, axis=-1)
    inside = norms <= 1.0
    np.testing.assert_array_equal(y[inside], x[inside])
    assert np.all(np.linalg.norm(y, axis=-1) < 2.0)
    outside = norms > 1e-3
    cosine = np.sum(x[outside] * y[outside], axis=-1) / (norms[outside] * np.linalg.norm(y[outside], axis=-1))
    np.testing.assert_allclose(cosine, 1.0, atol=1e-9)


def test_desk_small_convergence(desk_dataset, tmp_path):
    """Test the desk preset reaches 24 dB PSNR and 0.80 SSIM on held-out views."""
    config = resolve_config(config_file=DESK_CONFIG)
    start = time.perf_counter()
    score = _test_score(config, desk_dataset, tmp_path / "hybrid")
    assert score.psnr >= 24.0
    assert score.ssim >= 0.80
    assert time.perf_counter() - start <= 15 * 60


def test_hybrid_beats_hash_under_collisions(desk_dataset, tmp_path):
    """Test planes recover detail a small, collision-heavy hash table loses."""
    config = resolve_config(config_file=DESK_CONFIG, overrides=["encoding.hash_grid.table_size=1024"])
    medians = _medians(run_ablation(config, desk_dataset, ["hybrid", "hash"], [0, 1, 2], tmp_path))
    assert medians["hybrid"] - medians["hash"] >= 0.2


def test_plane_only_close_to_hybrid(desk_dataset, tmp_path):
    """Test plane features alone train within 3 dB of the hybrid."""
    config = resolve_config(config_file=DESK_CONFIG)
    medians = _medians(run_ablation(config, desk_dataset, ["hybrid", "plane"], [0], tmp_path))
    assert np.isfinite(medians["plane"])
    assert medians["hybrid"] - medians["plane"] <= 3.0


def _corner_slot(corner, resolution, table_size):
    side = resolution + 1
    if side**3 <= table_size:
        return corner[0] + side * (corner[1] + side * corner[2])
    hashed = 0
    for coordinate, prime in zip(corner, HASH_PRIMES):
        hashed ^= (coordinate * prime) & 0xFFFFFFFFFFFFFFFF
    return hashed % table_size


def _lerp_weight(frac, corner):
    weight = 1.0
    for f, bit in zip(frac, corner):
        weight *= f if bit else 1.0 - f
    return weight


def test_interpolation_oracle_ten_thousand_queries():
    """Test every grid and plane level against scalar interpolation over 1e4 points."""
    rng = np.random.default_rng(0)
    directions = rng.normal(size=(10_000, 3))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    points = directions * rng.uniform(0.0, 1.999, (10_000, 1))
    unit = to_unit_cube(points, 1.0)

    grid_config = HashGridConfig(levels=3, table_size=2**9, feat_dim=2, res_min=4, res_max=16)
    grid = HashGrid(grid_config, 1.0, rng, np.float64, init_scale=1.0)
    features = grid.encode(points)
    for level, resolution in enumerate(grid.resolutions):
        table = grid.tables[level]
        for n, point in enumerate(unit):
            pos = point * resolution
            base = np.minimum(np.floor(pos).astype(int), resolution - 1)
            frac = pos - base
            expected = np.zeros(2)
            for corner in itertools.product((0, 1), repeat=3):
                cell = [int(b) + c for b, c in zip(base, corner)]
                slot = _corner_slot(cell, resolution, grid_config.table_size)
                expected += _lerp_weight(frac, corner) * table[slot]
            assert np.max(np.abs(features[n, 2 * level : 2 * level + 2] - expected)) <= 1e-9

    plane_config = PlaneSetConfig(resolutions=[4, 16], feat_dim=2, vertical_scale=1.0)
    planes = PlaneSet(plane_config, 1.0, rng, np.float64, init_scale=1.0)
    features = planes.encode(points)
    offset = 0
    for plane, axes in PLANE_AXES:
        for level, resolution in enumerate(plane_config.resolutions):
            table = planes.planes[plane][level]
            for n, point in enumerate(unit[:, list(axes)]):
                pos = point * resolution
                base = np.minimum(np.floor(pos).astype(int), resolution - 1)
                frac = pos - base
                expected = np.zeros(2)
                for corner in itertools.product((0, 1), repeat=2):
                    u, v = int(base[0]) + corner[0], int(base[1]) + corner[1]
                    expected += _lerp_weight(frac, corner) * table[u + (resolution + 1) * v]
                assert np.max(np.abs(features[n, offset : offset + 2] - expected)) <= 1e-9
            offset += 2
