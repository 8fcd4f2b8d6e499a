"""
Pytest fixtures for hybrid radiance-field tests.
"""

import numpy as np
import pytest

from src.config import resolve_config
from src.geometry import SceneBounds
from src.synthetic import OrbitTrajectory, Sphere, SyntheticSceneSpec, generate_synthetic


@pytest.fixture
def test_env_vars(monkeypatch, tmp_path):
    """Point the output root at a temporary directory."""
    monkeypatch.setenv("HYBRIDNERF_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setattr("src.config._settings_instance", None)


@pytest.fixture
def rng():
    """Deterministic random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    """The micro-gradcheck preset, fully resolved."""
    return resolve_config(preset="micro-gradcheck")


@pytest.fixture
def unit_bounds():
    """Foreground bound 1 around the origin."""
    return SceneBounds(center=(0.0, 0.0, 0.0), bound_B=1.0, altitude_range=(-0.5, 0.5))


@pytest.fixture
def tiny_scene_spec():
    """A single sphere seen by a handful of small orbit views."""
    return SyntheticSceneSpec(
        seed=3,
        bound_B=2.0,
        spheres=[Sphere(center=(0.0, 0.0, 0.0), radius=0.6, albedo=(0.9, 0.3, 0.2))],
        ground_height=None,
        orbit=OrbitTrajectory(radius=3.0, altitudes=[0.5, 1.0], count=5, target=(0.0, 0.0, 0.0)),
        width=16,
        height=16,
        fov_degrees=50.0,
        foreground_samples=256,
        background_samples=16,
        test_every=4,
    )


@pytest.fixture
def tiny_dataset(tiny_scene_spec):
    """Rendered tiny scene: 3 train views, 2 test views (16x16)."""
    return generate_synthetic(tiny_scene_spec)


@pytest.fixture
def temp_output_dir(tmp_path):
    """Create temporary output directory."""
    output_dir = tmp_path / "outputs"
    output_dir.mkdir()
    return output_dir
