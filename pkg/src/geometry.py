"""
Scene parameterization and ray sampling.

Points are normalized by the foreground bound B, contracted into a ball of
radius 1 + b, and sampled linearly inside the unit ball (foreground) and
linearly in disparity beyond it (background).
"""

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import EmptySampleSet, NoForegroundIntersection

UNIT_TOLERANCE = 1e-6
LAST_DELTA = 1e10


class Region(IntEnum):
    FOREGROUND = 0
    BACKGROUND = 1


class SceneBounds(BaseModel):
    """Foreground bound B, contraction size b, norm order p, camera altitudes."""

    model_config = ConfigDict(extra="forbid")

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bound_B: float = Field(gt=0.0)
    bg_b: float = Field(default=1.0, gt=0.0)
    p_norm: float = Field(default=2.0, ge=1.0)
    altitude_range: tuple[float, float]

    @model_validator(mode="after")
    def check_altitudes(self) -> "SceneBounds":
        low, high = self.altitude_range
        if not low < high:
            raise ValueError(f"altitude_range min must be < max, got {self.altitude_range}")
        return self

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    def far_plane(self, far_scale: float = 1e3) -> float:
        """Finite stand-in for the infinitely distant background."""
        return far_scale * self.bound_B

    def near_plane(self, near_scale: float = 0.05) -> float:
        return near_scale * self.bound_B


@dataclass(frozen=True)
class Rays:
    """A batch of R rays; directions are unit length."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3)
    t_near: np.ndarray  # (R,)
    t_far: np.ndarray  # (R,)

    def __post_init__(self):
        origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        count = origins.shape[0]
        t_near = np.broadcast_to(np.asarray(self.t_near, dtype=np.float64), (count,))
        t_far = np.broadcast_to(np.asarray(self.t_far, dtype=np.float64), (count,))
        if origins.shape != directions.shape or origins.shape[-1] != 3:
            raise ValueError(
                f"origins {origins.shape} and directions {directions.shape} must both be (R, 3)"
            )
        lengths = np.linalg.norm(directions, axis=-1)
        if np.any(np.abs(lengths - 1.0) > UNIT_TOLERANCE):
            raise ValueError("ray directions must be unit length")
        if np.any(t_near < 0) or np.any(t_near >= t_far):
            raise ValueError("rays need 0 <= t_near < t_far")
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "t_near", np.array(t_near))
        object.__setattr__(self, "t_far", np.array(t_far))

    @classmethod
    def single(cls, origin, direction, t_near: float, t_far: float) -> "Rays":
        return cls(np.asarray(origin)[None], np.asarray(direction)[None], t_near, t_far)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, index) -> "Rays":
        return Rays(
            self.origins[index], self.directions[index], self.t_near[index], self.t_far[index]
        )


@dataclass
class SampleSet:
    """Sorted samples of R rays, S samples each."""

    t_values: np.ndarray  # (R, S)
    positions_contracted: np.ndarray  # (R, S, 3)
    deltas: np.ndarray  # (R, S)
    region_tags: np.ndarray  # (R, S) int8 Region codes

    @property
    def foreground(self) -> np.ndarray:
        return self.region_tags == Region.FOREGROUND

    @property
    def shape(self) -> tuple[int, int]:
        return self.t_values.shape


def normalize_point(x_world, bounds: SceneBounds) -> np.ndarray:
    return (np.asarray(x_world, dtype=np.float64) - bounds.center_array) / bounds.bound_B


def contract(x_norm, p: float = 2.0, b: float = 1.0) -> np.ndarray:
    """Identity inside the unit p-ball, (1 + b - b/|x|) x/|x| outside."""
    x = np.asarray(x_norm, dtype=np.float64)
    norm = np.linalg.norm(x, ord=p, axis=-1, keepdims=True)
    outside = norm > 1.0
    safe = np.where(outside, norm, 1.0)
    squashed = (1.0 + b - b / safe) * (x / safe)
    return np.where(outside, squashed, x)


def _norm_along(rays: Rays, bounds: SceneBounds, t: np.ndarray) -> np.ndarray:
    points = rays.origins + t[:, None] * rays.directions
    return np.linalg.norm(normalize_point(points, bounds), ord=bounds.p_norm, axis=-1)


def _bisect_crossing(rays, bounds, inside_t, outside_t, iterations=60):
    for _ in range(iterations):
        mid = 0.5 * (inside_t + outside_t)
        mid_inside = _norm_along(rays, bounds, mid) <= 1.0
        inside_t = np.where(mid_inside, mid, inside_t)
        outside_t = np.where(mid_inside, outside_t, mid)
    return inside_t


def foreground_segment(rays: Rays, bounds: SceneBounds):
    """
    Entry/exit distances of each ray through the normalized unit ball.

    Returns:
        (t_entry, t_exit, hit), clamped to [t_near, t_far]. Rays with
        hit == False carry t_entry == t_exit == t_near.
    """
    if bounds.p_norm == 2.0:
        o = normalize_point(rays.origins, bounds)
        half_b = np.sum(o * rays.directions, axis=-1) * bounds.bound_B
        c = (np.sum(o * o, axis=-1) - 1.0) * bounds.bound_B**2
        disc = half_b**2 - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t_in = np.maximum(-half_b - root, rays.t_near)
        t_out = np.minimum(-half_b + root, rays.t_far)
        hit = (disc > 0) & (t_out > t_in)
    else:
        # the p-norm along a line is convex: locate its minimum, then bisect
        low, high = rays.t_near.copy(), rays.t_far.copy()
        for _ in range(120):
            third = (high - low) / 3.0
            left, right = low + third, high - third
            go_right = _norm_along(rays, bounds, left) > _norm_along(rays, bounds, right)
            low = np.where(go_right, left, low)
            high = np.where(go_right, high, right)
        t_min = 0.5 * (low + high)
        hit = _norm_along(rays, bounds, t_min) <= 1.0
        near_inside = _norm_along(rays, bounds, rays.t_near) <= 1.0
        far_inside = _norm_along(rays, bounds, rays.t_far) <= 1.0
        t_in = np.where(
            near_inside, rays.t_near, _bisect_crossing(rays, bounds, t_min, rays.t_near.copy())
        )
        t_out = np.where(
            far_inside, rays.t_far, _bisect_crossing(rays, bounds, t_min, rays.t_far.copy())
        )
        hit = hit & (t_out > t_in)
    t_in = np.where(hit, t_in, rays.t_near)
    t_out = np.where(hit, t_out, rays.t_near)
    return t_in, t_out, hit


def _linear_samples(start, end, n, rng: Optional[np.random.Generator]):
    start = np.asarray(start, dtype=np.float64)[:, None]
    end = np.asarray(end, dtype=np.float64)[:, None]
    if n == 1:
        if rng is None:
            return 0.5 * (start + end)
        return start + (end - start) * rng.uniform(size=start.shape)
    t = start + (end - start) * np.linspace(0.0, 1.0, n)[None, :]
    if rng is not None:
        mids = 0.5 * (t[:, :-1] + t[:, 1:])
        upper = np.concatenate([mids, t[:, -1:]], axis=-1)
        lower = np.concatenate([t[:, :1], mids], axis=-1)
        t = lower + (upper - lower) * rng.uniform(size=t.shape)
    return t


def sample_foreground(
    rays: Rays, bounds: SceneBounds, n: int, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """
    n t-values per ray, spread linearly over the foreground segment.

    Unjittered samples sit at linspace(entry, exit, n); a single sample sits at
    the midpoint. Passing rng jitters each sample within its bin.
    """
    if n < 1:
        raise ValueError(f"need at least one foreground sample, got {n}")
    t_in, t_out, hit = foreground_segment(rays, bounds)
    if not np.all(hit):
        raise NoForegroundIntersection(
            f"{int(np.sum(~hit))} of {len(rays)} rays miss the foreground region"
        )
    return _linear_samples(t_in, t_out, n, rng)


def disparity_to_t(s, t_start, t_far) -> np.ndarray:
    """Map s in (0, 1] to depth, linear in 1/t between t_start and t_far."""
    s = np.asarray(s, dtype=np.float64)
    t_start = np.asarray(t_start, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)  # 1/inf == 0
    return 1.0 / ((1.0 - s) / t_start + s / t_far)


def sample_background(
    rays: Rays,
    bounds: SceneBounds,
    n: int,
    rng: Optional[np.random.Generator] = None,
    t_start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    n t-values per ray from the foreground exit (or t_near for rays that miss
    the ball) to t_far, uniformly spaced in disparity.
    """
    if n < 1:
        raise ValueError(f"need at least one background sample, got {n}")
    if t_start is None:
        _, t_out, hit = foreground_segment(rays, bounds)
        t_start = np.where(hit, t_out, rays.t_near)
    k = np.arange(1, n + 1, dtype=np.float64)[None, :]
    if rng is None:
        s = np.broadcast_to(k / n, (len(rays), n))
    else:
        s = (k - rng.uniform(size=(len(rays), n))) / n
    return disparity_to_t(s, np.asarray(t_start)[:, None], rays.t_far[:, None])


def coarse_samples(
    rays: Rays,
    bounds: SceneBounds,
    n_foreground: int,
    n_background: int,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Coarse t-values, n_foreground + n_background per ray.

    Rays that miss the foreground ball spend their whole budget on the
    background.
    """
    t_in, t_out, hit = foreground_segment(rays, bounds)
    fg = _linear_samples(t_in, t_out, n_foreground, rng)
    bg = sample_background(rays, bounds, n_background, rng, t_start=t_out)
    bg_only = sample_background(
        rays, bounds, n_foreground + n_background, rng, t_start=rays.t_near
    )
    split = np.concatenate([fg, bg], axis=-1)
    return np.where(hit[:, None], split, bg_only)


def resample_fine(
    t_coarse: np.ndarray,
    weights: np.ndarray,
    n: int,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Inverse-CDF sampling from the piecewise-constant PDF over coarse bins.

    Sample i owns the bin between the midpoints to its neighbours (the first
    and last bins end at the first and last sample). Rays whose weights are all
    zero fall back to a uniform PDF over [t_0, t_last].
    """
    t_coarse = np.atleast_2d(np.asarray(t_coarse, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if weights.shape != t_coarse.shape:
        raise ValueError(f"weights {weights.shape} must match t_coarse {t_coarse.shape}")
    rays, count = t_coarse.shape
    mids = 0.5 * (t_coarse[:, :-1] + t_coarse[:, 1:])
    edges = np.concatenate([t_coarse[:, :1], mids, t_coarse[:, -1:]], axis=-1)
    widths = np.diff(edges, axis=-1)

    weights = np.maximum(weights, 0.0)
    all_zero = weights.sum(axis=-1, keepdims=True) <= 1e-12
    weights = np.where(all_zero, widths, weights)
    total = weights.sum(axis=-1, keepdims=True)
    pdf = weights / np.where(total > 0, total, 1.0)
    cdf = np.concatenate([np.zeros((rays, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0

    strata = np.arange(n, dtype=np.float64)[None, :]
    if rng is None:
        u = np.broadcast_to((strata + 0.5) / n, (rays, n))
    else:
        u = (strata + rng.uniform(size=(rays, n))) / n

    above_count = np.sum(cdf[:, None, :] <= u[:, :, None], axis=-1)
    below = np.clip(above_count - 1, 0, count - 1)
    cdf_lo = np.take_along_axis(cdf, below, axis=-1)
    cdf_hi = np.take_along_axis(cdf, below + 1, axis=-1)
    edge_lo = np.take_along_axis(edges, below, axis=-1)
    edge_hi = np.take_along_axis(edges, below + 1, axis=-1)
    denom = np.where(cdf_hi - cdf_lo < 1e-12, 1.0, cdf_hi - cdf_lo)
    frac = np.clip((u - cdf_lo) / denom, 0.0, 1.0)
    return np.sort(edge_lo + frac * (edge_hi - edge_lo), axis=-1)


def merge_samples(t_coarse: np.ndarray, t_fine: np.ndarray) -> np.ndarray:
    return np.sort(np.concatenate([t_coarse, t_fine], axis=-1), axis=-1, kind="stable")


def sample_set_from_t(
    rays: Rays, bounds: SceneBounds, t_values: np.ndarray, last_delta: float = LAST_DELTA
) -> SampleSet:
    """Positions, region tags and deltas for sorted t-values."""
    t_values = np.atleast_2d(np.asarray(t_values, dtype=np.float64))
    if t_values.shape[-1] == 0:
        raise EmptySampleSet("no foreground or background samples to build")
    points = rays.origins[:, None, :] + t_values[..., None] * rays.directions[:, None, :]
    x_norm = normalize_point(points, bounds)
    norms = np.linalg.norm(x_norm, ord=bounds.p_norm, axis=-1)
    tags = np.where(norms <= 1.0, Region.FOREGROUND, Region.BACKGROUND).astype(np.int8)
    deltas = np.concatenate(
        [np.diff(t_values, axis=-1), np.full(t_values.shape[:-1] + (1,), last_delta)],
        axis=-1,
    )
    return SampleSet(
        t_values=t_values,
        positions_contracted=contract(x_norm, bounds.p_norm, bounds.bg_b),
        deltas=deltas,
        region_tags=tags,
    )


def build_sample_set(
    rays: Rays,
    bounds: SceneBounds,
    t_fg: np.ndarray,
    t_bg: np.ndarray,
    last_delta: float = LAST_DELTA,
) -> SampleSet:
    """Merge foreground and background t-values and build the sample set."""
    count = len(rays)
    t_fg = np.asarray(t_fg, dtype=np.float64).reshape(count, -1)
    t_bg = np.asarray(t_bg, dtype=np.float64).reshape(count, -1)
    merged = np.concatenate([t_fg, t_bg], axis=-1)
    if merged.shape[-1] == 0:
        raise EmptySampleSet("both foreground and background sample lists are empty")
    return sample_set_from_t(rays, bounds, np.sort(merged, axis=-1, kind="stable"), last_delta)
