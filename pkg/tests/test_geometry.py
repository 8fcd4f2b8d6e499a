"""
Tests for contraction and ray sampling.
"""

import numpy as np
import pytest

from src.errors import EmptySampleSet, NoForegroundIntersection
from src.geometry import (
    Rays,
    SceneBounds,
    build_sample_set,
    coarse_samples,
    contract,
    disparity_to_t,
    foreground_segment,
    merge_samples,
    normalize_point,
    resample_fine,
    sample_background,
    sample_foreground,
)


def _through_origin(t_near=0.05, t_far=100.0):
    return Rays.single([-2.0, 0.0, 0.0], [1.0, 0.0, 0.0], t_near, t_far)


def test_normalize_point(unit_bounds):
    """Test centering and scaling by B."""
    bounds = SceneBounds(center=(1.0, 0.0, 0.0), bound_B=2.0, altitude_range=(0.0, 1.0))
    np.testing.assert_allclose(normalize_point([3.0, 2.0, 0.0], bounds), [1.0, 1.0, 0.0])


def test_contract_examples():
    """Test identity inside the ball and the squash outside."""
    np.testing.assert_allclose(contract([0.5, 0.0, 0.0]), [0.5, 0.0, 0.0])
    np.testing.assert_allclose(contract([2.0, 0.0, 0.0]), [1.5, 0.0, 0.0])
    np.testing.assert_allclose(contract([1e12, 0.0, 0.0]), [2.0, 0.0, 0.0], atol=1e-9)


def test_contract_properties(rng):
    """Test norm < 1 + b, direction preservation and continuity at the boundary."""
    directions = rng.normal(size=(100_000, 3))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    radii = np.exp(rng.uniform(-5.0, 12.0, size=(100_000, 1)))
    points = directions * radii
    out = contract(points)
    norms = np.linalg.norm(out, axis=-1)
    assert np.all(norms < 2.0)
    inside = radii[:, 0] <= 1.0
    np.testing.assert_array_equal(out[inside], points[inside])
    np.testing.assert_allclose(out / norms[:, None], directions, atol=1e-12)

    just_outside = directions * (1.0 + 1e-12)
    np.testing.assert_allclose(contract(just_outside), directions, atol=1e-9)


def test_contract_infinity_norm():
    """Test contraction with the L-infinity norm."""
    out = contract([2.0, 1.0, 0.0], p=np.inf, b=1.0)
    np.testing.assert_allclose(out, [1.5, 0.75, 0.0])


def test_foreground_segment_through_origin(unit_bounds):
    """Test entry and exit of a ray through the center."""
    t_in, t_out, hit = foreground_segment(_through_origin(), unit_bounds)
    assert hit[0]
    assert t_in[0] == pytest.approx(1.0)
    assert t_out[0] == pytest.approx(3.0)


def test_foreground_segment_general_p_matches_analytic(unit_bounds):
    """Test that the numeric search agrees with the p=2 closed form."""
    rays = Rays.single([-2.0, 0.3, 0.1], np.array([1.0, 0.0, 0.0]), 0.05, 100.0)
    analytic = foreground_segment(rays, unit_bounds)
    numeric_bounds = unit_bounds.model_copy(update={"p_norm": 2.0000001})
    numeric = foreground_segment(rays, numeric_bounds)
    np.testing.assert_allclose(numeric[0], analytic[0], atol=1e-5)
    np.testing.assert_allclose(numeric[1], analytic[1], atol=1e-5)


def test_foreground_segment_cube(unit_bounds):
    """Test the infinity-norm region is the cube [-1, 1]^3."""
    bounds = unit_bounds.model_copy(update={"p_norm": float("inf")})
    t_in, t_out, hit = foreground_segment(_through_origin(), bounds)
    assert hit[0]
    assert t_in[0] == pytest.approx(1.0, abs=1e-8)
    assert t_out[0] == pytest.approx(3.0, abs=1e-8)


def test_sample_foreground_uniform(unit_bounds):
    """Test three unjittered samples at entry, midpoint and exit."""
    t = sample_foreground(_through_origin(), unit_bounds, 3)
    np.testing.assert_allclose(t[0], [1.0, 2.0, 3.0])


def test_sample_foreground_single_midpoint(unit_bounds):
    """Test that a single sample sits at the segment midpoint."""
    np.testing.assert_allclose(sample_foreground(_through_origin(), unit_bounds, 1)[0], [2.0])


def test_sample_foreground_jitter_stays_in_segment(unit_bounds, rng):
    """Test jittered samples stay sorted inside the segment."""
    t = sample_foreground(_through_origin(), unit_bounds, 16, rng)[0]
    assert np.all(np.diff(t) >= 0)
    assert t[0] >= 1.0 and t[-1] <= 3.0


def test_sample_foreground_miss_raises(unit_bounds):
    """Test a ray that never enters the ball."""
    rays = Rays.single([-2.0, 5.0, 0.0], [1.0, 0.0, 0.0], 0.05, 100.0)
    with pytest.raises(NoForegroundIntersection):
        sample_foreground(rays, unit_bounds, 4)


def test_ray_starting_inside_clamps_to_t_near(unit_bounds):
    """Test a camera inside the ball starts sampling at t_near."""
    rays = Rays.single([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.05, 100.0)
    t_in, t_out, hit = foreground_segment(rays, unit_bounds)
    assert hit[0]
    assert t_in[0] == pytest.approx(0.05)
    assert t_out[0] == pytest.approx(1.0)


def test_disparity_examples():
    """Test the midpoint in disparity and the endpoint limits."""
    assert disparity_to_t(0.5, 1.0, np.inf) == pytest.approx(2.0)
    assert disparity_to_t(1e-12, 1.0, 100.0) == pytest.approx(1.0)
    assert disparity_to_t(1.0, 1.0, 100.0) == pytest.approx(100.0)
    s = np.arange(1, 5) / 4
    t = disparity_to_t(s, 1.0, 100.0)
    np.testing.assert_allclose(t, 1.0 / ((1.0 - s) + s / 100.0))
    assert np.all(np.diff(t) > 0)


def test_sample_background_monotone(unit_bounds, rng):
    """Test background samples run from the exit to t_far."""
    rays = _through_origin()
    t = sample_background(rays, unit_bounds, 8)[0]
    assert np.all(np.diff(t) > 0)
    assert t[0] > 3.0
    assert t[-1] == pytest.approx(100.0)
    jittered = sample_background(rays, unit_bounds, 8, rng)[0]
    assert np.all(np.diff(jittered) > 0)


def test_coarse_samples_shapes_and_miss(unit_bounds):
    """Test rays that miss the ball get only background samples."""
    rays = Rays(
        np.array([[-2.0, 0.0, 0.0], [-2.0, 5.0, 0.0]]),
        np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        0.05,
        100.0,
    )
    t = coarse_samples(rays, unit_bounds, 4, 2)
    assert t.shape == (2, 6)
    assert np.all(np.diff(t, axis=-1) >= 0)
    samples = build_sample_set(rays, unit_bounds, t[:, :4], t[:, 4:])
    assert samples.foreground[0, :4].all()
    assert not samples.foreground[1].any()


def test_build_sample_set_contents(unit_bounds):
    """Test deltas, tags and contracted positions."""
    rays = _through_origin()
    samples = build_sample_set(rays, unit_bounds, [[1.0, 2.0, 3.0]], [[6.0]], last_delta=1e10)
    np.testing.assert_allclose(samples.deltas[0], [1.0, 1.0, 3.0, 1e10])
    assert samples.foreground[0].tolist() == [True, True, True, False]
    np.testing.assert_allclose(samples.positions_contracted[0, 3], [1.75, 0.0, 0.0])


def test_build_sample_set_empty_raises(unit_bounds):
    """Test that an empty merge raises."""
    with pytest.raises(EmptySampleSet):
        build_sample_set(_through_origin(), unit_bounds, np.zeros((1, 0)), np.zeros((1, 0)))


def test_resample_fine_concentrates(rng):
    """Test fine samples land in the heavy bin."""
    t = np.array([[0.0, 1.0, 2.0, 3.0, 4.0]])
    w = np.array([[0.0, 0.0, 1.0, 0.0, 0.0]])
    fine = resample_fine(t, w, 64, rng)
    assert np.all((fine >= 1.5) & (fine <= 2.5))
    assert np.all(np.diff(fine[0]) >= 0)


def test_resample_fine_zero_weights_uniform():
    """Test all-zero weights fall back to uniform over the ray."""
    t = np.array([[0.0, 1.0, 2.0, 3.0, 4.0]])
    fine = resample_fine(t, np.zeros((1, 5)), 4)
    np.testing.assert_allclose(fine[0], [0.5, 1.5, 2.5, 3.5])


def test_resample_fine_follows_weight_shares():
    """Test the share of fine samples per bin tracks the normalized weights."""
    t = np.array([[0.0, 1.0]])
    fine = resample_fine(t, np.array([[0.25, 0.75]]), 1000, np.random.default_rng(0))
    assert abs(np.mean(fine[0] > 0.5) - 0.75) <= 0.03
    assert np.all((fine >= 0.0) & (fine <= 1.0))


def test_merge_samples_sorted():
    """Test merged t-values stay sorted."""
    merged = merge_samples(np.array([[1.0, 3.0]]), np.array([[2.0, 0.5]]))
    np.testing.assert_array_equal(merged, [[0.5, 1.0, 2.0, 3.0]])


def test_rays_validate_unit_directions():
    """Test non-unit directions are rejected."""
    with pytest.raises(ValueError, match="unit length"):
        Rays.single([0.0, 0.0, 0.0], [2.0, 0.0, 0.0], 0.0, 1.0)
