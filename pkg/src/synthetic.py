"""
Analytic desk-scale scenes with known radiance, rendered into datasets by
dense ray marching.
"""

import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.config import load_config_file
from src.data import Camera, SceneDataset, camera_rays, look_at_camera, quantize
from src.errors import CameraOutsideScene, ConfigError
from src.geometry import SceneBounds, coarse_samples, sample_set_from_t
from src.render import composite

logger = logging.getLogger("SceneData")

Vec3 = tuple[float, float, float]
ORACLE_CHUNK = 2048


class _SpecModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Sphere(_SpecModel):
    center: Vec3
    radius: float = Field(gt=0.0)
    albedo: Vec3 = (0.8, 0.8, 0.8)


class Box(_SpecModel):
    center: Vec3
    half_size: Vec3
    albedo: Vec3 = (0.8, 0.8, 0.8)

    @field_validator("half_size")
    @classmethod
    def validate_half_size(cls, v: Vec3) -> Vec3:
        if min(v) <= 0:
            raise ValueError(f"box half sizes must be positive, got {v}")
        return v


class OrbitTrajectory(_SpecModel):
    """Cameras on a circle around target, cycling through the altitudes."""

    radius: float = Field(default=3.0, gt=0.0)
    altitudes: list[float] = Field(default_factory=lambda: [1.5, 2.0, 2.5])
    count: int = Field(default=28, ge=0)
    target: Vec3 = (0.0, 0.0, -0.5)

    @field_validator("altitudes")
    @classmethod
    def validate_altitudes(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("orbit needs at least one altitude")
        return v


def _default_spheres() -> list[Sphere]:
    return [
        Sphere(center=(0.0, 0.0, -0.4), radius=0.6, albedo=(0.85, 0.25, 0.2)),
        Sphere(center=(1.2, 0.6, -0.6), radius=0.4, albedo=(0.2, 0.75, 0.3)),
        Sphere(center=(-1.0, -0.9, -0.5), radius=0.5, albedo=(0.25, 0.35, 0.85)),
    ]


class SyntheticSceneSpec(_SpecModel):
    """
    Spheres, boxes and an optional ground half-space under a directional light.

    The defaults describe the desk-small scene.
    """

    seed: int = 0
    bound_B: float = Field(default=4.0, gt=0.0)
    spheres: list[Sphere] = Field(default_factory=_default_spheres)
    boxes: list[Box] = Field(default_factory=list)
    ground_height: Optional[float] = -1.0
    ground_albedo: Vec3 = (0.55, 0.5, 0.45)
    sky_color: Vec3 = (0.55, 0.7, 0.9)
    light_direction: Vec3 = (0.4, 0.3, 1.0)
    ambient: float = Field(default=0.3, ge=0.0, le=1.0)
    brightness_range: tuple[float, float] = (0.7, 1.3)
    orbit: OrbitTrajectory = Field(default_factory=OrbitTrajectory)
    width: int = Field(default=96, ge=1)
    height: int = Field(default=96, ge=1)
    fov_degrees: float = Field(default=60.0, gt=0.0, lt=180.0)
    foreground_samples: int = Field(default=256, ge=256)
    background_samples: int = Field(default=128, ge=1)
    test_every: int = Field(default=8, ge=1)

    @field_validator("brightness_range")
    @classmethod
    def validate_brightness(cls, v: tuple[float, float]) -> tuple[float, float]:
        low, high = v
        if not 0.7 <= low <= high <= 1.3:
            raise ValueError(f"brightness multipliers must lie in [0.7, 1.3], got {v}")
        return v

    @model_validator(mode="after")
    def check_primitives_inside(self) -> "SyntheticSceneSpec":
        for sphere in self.spheres:
            if np.linalg.norm(sphere.center) + sphere.radius > self.bound_B:
                raise ValueError(f"sphere at {sphere.center} leaves the foreground ball")
        for box in self.boxes:
            if np.linalg.norm(np.abs(box.center) + np.asarray(box.half_size)) > self.bound_B:
                raise ValueError(f"box at {box.center} leaves the foreground ball")
        return self

    @property
    def kappa(self) -> float:
        """Density inside primitives, opaque at training sample spacing."""
        return 100.0 / self.bound_B

    def bounds(self) -> SceneBounds:
        low, high = min(self.orbit.altitudes), max(self.orbit.altitudes)
        if low == high:
            low, high = low - 0.5, high + 0.5
        return SceneBounds(center=(0.0, 0.0, 0.0), bound_B=self.bound_B, altitude_range=(low, high))


def load_synthetic_spec(path: Path, seed: Optional[int] = None) -> SyntheticSceneSpec:
    data = load_config_file(path)
    if seed is not None:
        data["seed"] = seed
    try:
        return SyntheticSceneSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid synthetic scene spec {path}: {e}") from e


def _shade(normals: np.ndarray, spec: SyntheticSceneSpec) -> np.ndarray:
    light = np.asarray(spec.light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    return spec.ambient + (1.0 - spec.ambient) * np.maximum(normals @ light, 0.0)


def oracle_radiance(x_world, d, spec: SyntheticSceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """
    Ground-truth density and color at world points.

    Density is kappa inside any primitive and 0 elsewhere. Color is the albedo
    of the first primitive containing the point times a Lambertian factor for
    the outward normal of that primitive; the view direction d has no effect.
    """
    x = np.atleast_2d(np.asarray(x_world, dtype=np.float64))
    count = len(x)
    sigma = np.zeros(count)
    color = np.zeros((count, 3))
    claimed = np.zeros(count, dtype=bool)

    def claim(inside, normals, albedo):
        fresh = inside & ~claimed
        if not np.any(fresh):
            return
        sigma[fresh] = spec.kappa
        color[fresh] = np.asarray(albedo) * _shade(normals[fresh], spec)[:, None]
        claimed[fresh] = True

    for sphere in spec.spheres:
        offset = x - np.asarray(sphere.center)
        dist = np.linalg.norm(offset, axis=-1)
        normals = offset / np.where(dist > 0, dist, 1.0)[:, None]
        normals[dist == 0] = (0.0, 0.0, 1.0)
        claim(dist <= sphere.radius, normals, sphere.albedo)

    for box in spec.boxes:
        half = np.asarray(box.half_size)
        scaled = (x - np.asarray(box.center)) / half
        inside = np.all(np.abs(scaled) <= 1.0, axis=-1)
        axis = np.argmax(np.abs(scaled), axis=-1)
        normals = np.zeros((count, 3))
        normals[np.arange(count), axis] = np.where(scaled[np.arange(count), axis] >= 0, 1.0, -1.0)
        claim(inside, normals, box.albedo)

    if spec.ground_height is not None:
        normals = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (count, 3))
        claim(x[:, 2] <= spec.ground_height, normals, spec.ground_albedo)

    return sigma, color


def orbit_cameras(spec: SyntheticSceneSpec) -> list[Camera]:
    """Look-at cameras, every test_every-th view held out for testing."""
    orbit = spec.orbit
    target = np.asarray(orbit.target, dtype=np.float64)
    cameras, next_id = [], 0
    for i in range(orbit.count):
        angle = 2.0 * math.pi * i / orbit.count
        position = (
            target[0] + orbit.radius * math.cos(angle),
            target[1] + orbit.radius * math.sin(angle),
            orbit.altitudes[i % len(orbit.altitudes)],
        )
        camera = look_at_camera(
            position, target, spec.width, spec.height, spec.fov_degrees, f"view_{i:03d}.png"
        )
        if i % spec.test_every != 0:
            camera = camera.model_copy(update={"split": "train", "appearance_id": next_id})
            next_id += 1
        cameras.append(camera)
    return cameras


def render_oracle(camera: Camera, spec: SyntheticSceneSpec, bounds: SceneBounds) -> np.ndarray:
    """Dense ray-marched image of the analytic scene, before brightness jitter."""
    all_rays = camera_rays(camera, bounds)
    rgb = np.empty((len(all_rays), 3))
    for start in range(0, len(all_rays), ORACLE_CHUNK):
        index = slice(start, start + ORACLE_CHUNK)
        rays = all_rays.subset(index)
        t_values = coarse_samples(rays, bounds, spec.foreground_samples, spec.background_samples)
        samples = sample_set_from_t(rays, bounds, t_values)
        points = rays.origins[:, None, :] + t_values[..., None] * rays.directions[:, None, :]
        sigma, color = oracle_radiance(points.reshape(-1, 3), None, spec)
        rgb[index] = composite(
            sigma.reshape(t_values.shape),
            color.reshape(t_values.shape + (3,)),
            samples.deltas,
            spec.sky_color,
        ).rgb
    return rgb.reshape(camera.height, camera.width, 3)


def generate_synthetic(spec: SyntheticSceneSpec) -> SceneDataset:
    """Render every orbit camera; a pure function of spec (seed included)."""
    cameras = orbit_cameras(spec)
    if not cameras:
        raise ValueError("no cameras in synthetic scene spec")
    for camera in cameras:
        sigma, _ = oracle_radiance(camera.position, None, spec)
        if sigma[0] > 0:
            raise CameraOutsideScene(f"camera {camera.image} at {camera.position} sits inside a primitive")

    bounds = spec.bounds()
    rng = np.random.default_rng(spec.seed)
    multipliers = rng.uniform(*spec.brightness_range, size=len(cameras))
    images = []
    for camera, multiplier in zip(cameras, multipliers):
        images.append(quantize(render_oracle(camera, spec, bounds) * multiplier))
        logger.debug(f"Rendered {camera.image} with brightness x{multiplier:.3f}")
    dataset = SceneDataset(cameras, images, bounds, spec.sky_color)
    logger.info(
        f"Synthetic scene rendered - {len(cameras)} views at {spec.width}x{spec.height}",
        extra={"train": dataset.num_train, "test": len(dataset.indices("test")), "seed": spec.seed},
    )
    return dataset
