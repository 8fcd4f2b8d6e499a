"""
Scene datasets: pinhole cameras, the JSON manifest with 8-bit PNG images,
and per-pixel ray generation.

Manifest layout (manifest.json in the dataset directory):
    version     format version string
    bounds      SceneBounds fields (center, bound_B, bg_b, p_norm, altitude_range)
    background  sky fill color used when the scene was rendered
    cameras     list of Camera records: fx, fy, cx, cy, width, height,
                pose (3x4 row-major camera-to-world), image (file name
                relative to the manifest), split, appearance_id
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.config import GeometryConfig
from src.errors import OutOfImage
from src.geometry import Rays, SceneBounds

logger = logging.getLogger("SceneData")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = "1"
ORTHONORMAL_TOLERANCE = 1e-5


class Camera(BaseModel):
    """Pinhole camera; OpenCV axes (x right, y down, z forward)."""

    model_config = ConfigDict(extra="forbid")

    fx: float = Field(gt=0.0)
    fy: float = Field(gt=0.0)
    cx: float
    cy: float
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    pose: list[list[float]]
    image: str
    split: Literal["train", "test"] = "train"
    appearance_id: Optional[int] = Field(default=None, ge=0)

    @field_validator("pose")
    @classmethod
    def validate_pose(cls, v: list[list[float]]) -> list[list[float]]:
        pose = np.asarray(v, dtype=np.float64)
        if pose.shape != (3, 4):
            raise ValueError(f"pose must be 3x4 camera-to-world, got shape {pose.shape}")
        rotation = pose[:, :3]
        if np.max(np.abs(rotation @ rotation.T - np.eye(3))) > ORTHONORMAL_TOLERANCE:
            raise ValueError("pose rotation is not orthonormal")
        if np.linalg.det(rotation) < 0:
            raise ValueError("pose rotation must be right-handed")
        return v

    @model_validator(mode="after")
    def check_appearance(self) -> "Camera":
        if self.split == "train" and self.appearance_id is None:
            raise ValueError(f"training camera {self.image} needs an appearance_id")
        if self.split == "test" and self.appearance_id is not None:
            raise ValueError(f"test camera {self.image} must not carry an appearance_id")
        return self

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.pose, dtype=np.float64)[:, :3]

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.pose, dtype=np.float64)[:, 3]


class Manifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: str = MANIFEST_VERSION
    bounds: SceneBounds
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cameras: list[Camera]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid the PNG files store."""
    return to_uint8(image).astype(np.float64) / 255.0


def save_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: list[np.ndarray]  # (H, W, 3) in [0, 1]
    bounds: SceneBounds
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    root: Optional[Path] = None

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for camera, image in zip(self.cameras, self.images):
            if image.shape != (camera.height, camera.width, 3):
                raise ValueError(
                    f"{camera.image}: image {image.shape} does not match "
                    f"{camera.height}x{camera.width}"
                )
        ids = sorted(c.appearance_id for c in self.cameras if c.split == "train")
        if ids != list(range(len(ids))):
            raise ValueError("appearance ids must enumerate the training images 0..K-1")

    @property
    def num_train(self) -> int:
        return sum(1 for c in self.cameras if c.split == "train")

    def indices(self, split: str) -> list[int]:
        return [i for i, c in enumerate(self.cameras) if c.split == split]

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for camera, image in zip(self.cameras, self.images):
            save_png(image, directory / camera.image)
        manifest = Manifest(bounds=self.bounds, background=self.background, cameras=self.cameras)
        path = directory / MANIFEST_NAME
        path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2))
        logger.info(f"Dataset saved - {len(self.cameras)} views to {directory}")
        return path

    @classmethod
    def load(cls, directory: Path) -> "SceneDataset":
        directory = Path(directory)
        path = directory if directory.suffix == ".json" else directory / MANIFEST_NAME
        try:
            manifest = Manifest.model_validate_json(path.read_text())
        except OSError as e:
            raise ValueError(f"Could not read dataset manifest {path}: {e}") from e
        except ValidationError as e:
            raise ValueError(f"Invalid dataset manifest {path}: {e}") from e
        images = [load_png(path.parent / camera.image) for camera in manifest.cameras]
        logger.info(
            f"Dataset loaded - {len(images)} views from {path.parent}",
            extra={"views": len(images), "train": sum(c.split == "train" for c in manifest.cameras)},
        )
        return cls(manifest.cameras, images, manifest.bounds, manifest.background, path.parent)


def camera_directions(camera: Camera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Unit world-space directions through pixel centers."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    local = np.stack(
        [(px + 0.5 - camera.cx) / camera.fx, (py + 0.5 - camera.cy) / camera.fy, np.ones_like(px)],
        axis=-1,
    )
    world = local @ camera.rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def _ray_limits(bounds: SceneBounds, geometry: Optional[GeometryConfig]):
    geometry = geometry or GeometryConfig()
    return bounds.near_plane(geometry.near_scale), bounds.far_plane(geometry.far_scale)


def pixel_ray(
    camera: Camera, px: float, py: float, bounds: SceneBounds, geometry: Optional[GeometryConfig] = None
) -> Rays:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise OutOfImage(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    t_near, t_far = _ray_limits(bounds, geometry)
    direction = camera_directions(camera, np.array([px]), np.array([py]))
    return Rays(camera.position[None], direction, t_near, t_far)


def camera_rays(
    camera: Camera, bounds: SceneBounds, geometry: Optional[GeometryConfig] = None
) -> Rays:
    """Rays for every pixel, row-major (py outer, px inner)."""
    py, px = np.mgrid[0 : camera.height, 0 : camera.width]
    directions = camera_directions(camera, px.ravel(), py.ravel())
    origins = np.broadcast_to(camera.position, directions.shape)
    t_near, t_far = _ray_limits(bounds, geometry)
    return Rays(origins, directions, t_near, t_far)


@dataclass
class RayPool:
    """Every training pixel as a ray with its color and appearance id."""

    rays: Rays
    colors: np.ndarray  # (R, 3)
    app_ids: np.ndarray  # (R,)

    def __len__(self) -> int:
        return len(self.rays)

    def sample(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform ray indices across all pixels, with replacement."""
        return rng.integers(0, len(self), size=batch)


def build_ray_pool(
    dataset: SceneDataset, geometry: Optional[GeometryConfig] = None, split: str = "train"
) -> RayPool:
    indices = dataset.indices(split)
    if not indices:
        raise ValueError(f"dataset has no {split} images")
    origins, directions, colors, ids = [], [], [], []
    for index in indices:
        camera = dataset.cameras[index]
        rays = camera_rays(camera, dataset.bounds, geometry)
        origins.append(rays.origins)
        directions.append(rays.directions)
        colors.append(dataset.images[index].reshape(-1, 3))
        ids.append(np.full(len(rays), camera.appearance_id or 0, dtype=np.int64))
    t_near, t_far = _ray_limits(dataset.bounds, geometry)
    pool = RayPool(
        rays=Rays(np.concatenate(origins), np.concatenate(directions), t_near, t_far),
        colors=np.concatenate(colors),
        app_ids=np.concatenate(ids),
    )
    logger.info(f"Ray pool built - {len(pool)} rays from {len(indices)} {split} images")
    return pool


def look_at_camera(
    position,
    target,
    width: int,
    height: int,
    fov_degrees: float = 60.0,
    image: str = "render.png",
    up=(0.0, 0.0, 1.0),
) -> Camera:
    """Test-split camera at position looking at target, z-up world."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.concatenate([np.stack([right, down, forward], axis=1), position[:, None]], axis=1)
    focal = 0.5 * width / np.tan(np.radians(fov_degrees) / 2.0)
    return Camera(
        fx=focal,
        fy=focal,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        pose=pose.tolist(),
        image=image,
        split="test",
    )
