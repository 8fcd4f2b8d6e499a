"""
Centralized configuration management for the hybrid radiance-field engine.
Uses Pydantic v2 models for run configuration and pydantic-settings for the
process environment.
"""

import copy
import json
import math
import tomllib
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.errors import ConfigError

VERSION = "0.4.0"


class Settings(BaseSettings):
    """
    Process-level settings.
    Only the output root may be overridden from the environment.
    """

    output_root: Path = Field(
        default=Path("runs"), validation_alias="HYBRIDNERF_OUTPUT_ROOT"
    )

    version: str = VERSION

    model_config = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", extra="ignore", case_sensitive=False
    )


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryConfig(_Section):
    """Scene parameterization and per-ray sample counts."""

    n_foreground: int = Field(default=128, ge=1)
    n_background: int = Field(default=64, ge=1)
    p_norm: float = Field(default=2.0, ge=1.0)
    bg_b: float = Field(default=1.0, gt=0.0)
    near_scale: float = Field(default=0.05, gt=0.0)  # t_near = near_scale * B
    far_scale: float = Field(default=1e3, gt=1.0)  # t_far = far_scale * B
    last_delta: float = Field(default=1e10, gt=0.0)
    jitter: bool = True  # stratified jitter of training samples


class HashGridConfig(_Section):
    levels: int = Field(default=16, ge=1)
    table_size: int = Field(default=2**19, ge=2)
    feat_dim: int = Field(default=2, ge=1)
    res_min: int = Field(default=16, ge=1)
    res_max: int = Field(default=2048, ge=1)

    @field_validator("table_size")
    @classmethod
    def validate_table_size(cls, v: int) -> int:
        if v & (v - 1):
            raise ValueError(f"table_size must be a power of two, got {v}")
        return v

    def resolutions(self) -> list[int]:
        """Per-level grid resolutions N_l, geometric from res_min to res_max."""
        if self.levels == 1:
            return [self.res_min]
        growth = math.exp(math.log(self.res_max / self.res_min) / (self.levels - 1))
        return [
            int(math.floor(self.res_min * growth**level + 1e-6))
            for level in range(self.levels)
        ]

    def entries(self) -> list[int]:
        return [min(self.table_size, (n + 1) ** 3) for n in self.resolutions()]

    def param_count(self) -> int:
        return sum(self.entries()) * self.feat_dim

    def param_bound(self) -> int:
        """The L*T*F upper bound."""
        return self.levels * self.table_size * self.feat_dim


class PlaneSetConfig(_Section):
    resolutions: list[int] = Field(default_factory=lambda: [128, 256, 512, 1024])
    feat_dim: int = Field(default=2, ge=1)
    # None: derived from the scene's altitude range when the model is built
    vertical_scale: Optional[float] = Field(default=None, gt=0.0)
    altitude_axis: int = Field(default=2, ge=0, le=2)

    @field_validator("resolutions")
    @classmethod
    def validate_resolutions(cls, v: list[int]) -> list[int]:
        if not v or any(n < 1 for n in v):
            raise ValueError("plane resolutions must be a non-empty list of positive ints")
        return v

    def output_dim(self) -> int:
        return 3 * len(self.resolutions) * self.feat_dim

    def param_count(self) -> int:
        """Exact count with (N+1)^2 vertices per plane level."""
        return 3 * self.feat_dim * sum((n + 1) ** 2 for n in self.resolutions)

    def param_bound(self) -> int:
        """The N^2 * F per-plane figure."""
        return 3 * self.feat_dim * sum(n**2 for n in self.resolutions)


EncoderKind = Literal["hybrid", "hash", "plane", "dense", "hash+dense"]


class EncodingConfig(_Section):
    kind: EncoderKind = "hybrid"
    hash_grid: HashGridConfig = Field(default_factory=HashGridConfig)
    planes: PlaneSetConfig = Field(default_factory=PlaneSetConfig)
    background_grid: HashGridConfig = Field(default_factory=HashGridConfig)
    dense_resolution: int = Field(default=160, ge=1)
    init_scale: float = Field(default=1e-4, gt=0.0)

    def dense_grid(self) -> HashGridConfig:
        """Single-level grid whose table holds every vertex (no hashing)."""
        vertices = (self.dense_resolution + 1) ** 3
        table = 1 << (vertices - 1).bit_length()
        return HashGridConfig(
            levels=1,
            table_size=table,
            feat_dim=self.hash_grid.feat_dim,
            res_min=self.dense_resolution,
            res_max=self.dense_resolution,
        )


class FieldConfig(_Section):
    density_hidden: list[int] = Field(default_factory=lambda: [64])
    color_hidden: list[int] = Field(default_factory=lambda: [64, 64])
    geo_feat_dim: int = Field(default=15, ge=0)
    sh_degree: int = Field(default=4, ge=1, le=4)
    appearance_dim: int = Field(default=48, ge=0)


class RenderConfig(_Section):
    background: Literal["black", "white"] = "black"

    def background_rgb(self) -> tuple[float, float, float]:
        return (1.0, 1.0, 1.0) if self.background == "white" else (0.0, 0.0, 0.0)


class OptimConfig(_Section):
    iterations: int = Field(default=100_000, ge=0)
    batch_rays: int = Field(default=5 * 1024, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"
    checkpoint_every: int = Field(default=10_000, ge=0)  # 0 disables periodic saves
    log_every: int = Field(default=1, ge=1)
    progress_every: int = Field(default=100, ge=1)
    chunk_rays: int = Field(default=1024, ge=1)
    threads: int = Field(default=1, ge=1)


class EvalConfig(_Section):
    appearance: Literal["mean", "optimize-left-half"] = "mean"
    appearance_steps: int = Field(default=100, ge=1)
    appearance_lr: float = Field(default=1e-2, gt=0.0)
    split: Literal["train", "test"] = "test"


class RunConfig(_Section):
    """Everything needed to reproduce a run."""

    preset: str = "paper-default"
    dataset: Optional[Path] = None
    synthetic_spec: Optional[Path] = None
    output_dir: Optional[Path] = None
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    encoding: EncodingConfig = Field(default_factory=EncodingConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def snapshot(self) -> dict[str, Any]:
        return self.model_dump(mode="json")


_MICRO_GRID = {"levels": 2, "table_size": 2**7, "feat_dim": 2, "res_min": 4, "res_max": 8}
_DESK_GRID = {"levels": 8, "table_size": 2**14, "feat_dim": 2, "res_min": 16, "res_max": 256}

PRESETS: dict[str, dict[str, Any]] = {
    "paper-default": {},
    "desk-small": {
        "geometry": {"n_foreground": 32, "n_background": 16},
        "encoding": {
            "hash_grid": _DESK_GRID,
            "background_grid": _DESK_GRID,
            "planes": {"resolutions": [32, 64, 128], "feat_dim": 2},
            "dense_resolution": 48,
        },
        "optim": {
            "iterations": 3000,
            "batch_rays": 1024,
            "learning_rate": 5e-3,
            "checkpoint_every": 1000,
            "chunk_rays": 256,
        },
    },
    "micro-gradcheck": {
        "geometry": {"n_foreground": 4, "n_background": 2},
        "encoding": {
            "hash_grid": _MICRO_GRID,
            "background_grid": _MICRO_GRID,
            "planes": {"resolutions": [8, 16], "feat_dim": 2},
            "dense_resolution": 6,
            "init_scale": 0.1,
        },
        "field": {"density_hidden": [8], "color_hidden": [8, 8], "appearance_dim": 8},
        "optim": {
            "iterations": 10,
            "batch_rays": 16,
            "learning_rate": 1e-2,
            "dtype": "float64",
            "checkpoint_every": 0,
            "progress_every": 1,
            "chunk_rays": 16,
        },
    },
}


def _deep_merge(base: dict, update: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a TOML config or a JSON resolved-config snapshot."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text())
        with open(path, "rb") as f:
            return tomllib.load(f)
    except (OSError, json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Could not read config file {path}: {e}") from e


def parse_override(assignment: str) -> dict[str, Any]:
    """
    Turn 'section.key=value' into a nested dict.

    Values are parsed as JSON when possible ('3', '[8, 16]', 'true'),
    otherwise kept as strings.
    """
    if "=" not in assignment:
        raise ConfigError(f"Override must look like section.key=value, got '{assignment}'")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: dict[str, Any] = value
    for part in reversed(dotted.strip().split(".")):
        nested = {part: nested}
    return nested


def resolve_config(
    preset: str = "paper-default",
    config_file: Optional[Path] = None,
    overrides: Optional[list[str]] = None,
    flags: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """
    Build a RunConfig.

    Precedence, lowest first: model defaults, preset, config file,
    --set overrides, explicit flags.
    """
    data: dict[str, Any] = {}
    if config_file is not None:
        file_data = load_config_file(config_file)
        preset = file_data.get("preset", preset)
    else:
        file_data = {}

    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}'. Choose from {sorted(PRESETS)}")
    data = _deep_merge(PRESETS[preset], {"preset": preset})
    data = _deep_merge(data, file_data)
    for assignment in overrides or []:
        data = _deep_merge(data, parse_override(assignment))
    data = _deep_merge(data, flags or {})

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


# Singleton pattern for settings
_settings_instance: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create the singleton Settings instance."""
    global _settings_instance
    if _settings_instance is None:
        _settings_instance = Settings()
    return _settings_instance
