"""
Trainable feature encoders: multi-resolution hash grid, multi-resolution
orthogonal planes, and their concatenation.

Forward passes interpolate table entries; backward passes re-derive the same
corners and weights from the query points and scatter-add adjoints into
gradient buffers keyed by parameter name.
"""

import abc
import logging
from typing import Optional

import numpy as np

from src.config import EncodingConfig, HashGridConfig, PlaneSetConfig
from src.errors import OutOfDomain, TapeMismatch
from src.geometry import SceneBounds

logger = logging.getLogger("HybridEncoding")

DOMAIN_TOLERANCE = 1e-6
HASH_PRIMES = (1, 2_654_435_761, 805_459_861)
PLANE_AXES = (("xy", (0, 1)), ("xz", (0, 2)), ("yz", (1, 2)))

# x fastest, matching the dense row-major index
_CORNERS_3D = np.array(
    [[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)], dtype=np.int64
)
_CORNERS_2D = np.array([[du, dv] for dv in (0, 1) for du in (0, 1)], dtype=np.int64)

Gradients = dict[str, np.ndarray]


def to_unit_cube(x_c, b: float) -> np.ndarray:
    """Map the contracted ball of radius 1 + b onto [0, 1]^3."""
    unit = (np.asarray(x_c, dtype=np.float64) / (1.0 + b) + 1.0) / 2.0
    if np.any(unit < -DOMAIN_TOLERANCE) or np.any(unit > 1.0 + DOMAIN_TOLERANCE):
        worst = float(np.max(np.abs(unit - 0.5))) + 0.5
        raise OutOfDomain(f"contracted point maps to {worst:.6f}, outside [0, 1]")
    return np.clip(unit, 0.0, 1.0)


def altitude_scale(bounds: SceneBounds) -> float:
    """Vertical-plane stretch from the camera altitude band, clamped to [1, 8]."""
    low, high = bounds.altitude_range
    return float(np.clip(2.0 * bounds.bound_B / (high - low), 1.0, 8.0))


def grid_index(cells, resolution: int, table_size: int) -> np.ndarray:
    """Dense row-major index when all (N+1)^3 vertices fit, spatial hash otherwise."""
    cells = np.asarray(cells, dtype=np.uint64)
    side = resolution + 1
    if side**3 <= table_size:
        index = cells[..., 0] + np.uint64(side) * (cells[..., 1] + np.uint64(side) * cells[..., 2])
        return index.astype(np.int64)
    hashed = (
        (cells[..., 0] * np.uint64(HASH_PRIMES[0]))
        ^ (cells[..., 1] * np.uint64(HASH_PRIMES[1]))
        ^ (cells[..., 2] * np.uint64(HASH_PRIMES[2]))
    )
    return (hashed % np.uint64(table_size)).astype(np.int64)


def hash_index(cell, level: int, config: HashGridConfig) -> np.ndarray:
    return grid_index(cell, config.resolutions()[level], config.table_size)


def trilinear_corners(unit: np.ndarray, resolution: int):
    """Corner cells (N, 8, 3) and weights (N, 8) of each point's voxel."""
    pos = unit * resolution
    base = np.clip(np.floor(pos), 0, resolution - 1).astype(np.int64)
    frac = pos - base
    cells = base[:, None, :] + _CORNERS_3D[None]
    weights = np.prod(
        np.where(_CORNERS_3D[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1
    )
    return cells, weights


def bilinear_corners(uv: np.ndarray, resolution: int):
    """Flat vertex indices (N, 4) and weights (N, 4) on a (N+1)^2 lattice."""
    pos = uv * resolution
    base = np.clip(np.floor(pos), 0, resolution - 1).astype(np.int64)
    frac = pos - base
    cells = base[:, None, :] + _CORNERS_2D[None]
    weights = np.prod(
        np.where(_CORNERS_2D[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1
    )
    return cells[..., 0] + (resolution + 1) * cells[..., 1], weights


def _scatter(grad: np.ndarray, index: np.ndarray, weights: np.ndarray, adjoint: np.ndarray):
    """grad[index[n, c]] += weights[n, c] * adjoint[n] for every feature channel."""
    flat_index = index.ravel()
    for channel in range(grad.shape[1]):
        contrib = (weights * adjoint[:, channel : channel + 1]).ravel()
        grad[:, channel] += np.bincount(flat_index, weights=contrib, minlength=grad.shape[0])


class FeatureEncoder(abc.ABC):
    """Maps contracted points (N, 3) to features (N, output_dim)."""

    name: str
    output_dim: int
    # trailing feature channels that come from planes (fed to the color head too)
    plane_dim: int = 0

    @abc.abstractmethod
    def parameters(self) -> dict[str, np.ndarray]: ...

    @abc.abstractmethod
    def encode(self, x_c: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def backward(self, x_c: np.ndarray, dL_dfeature: np.ndarray, grads: Gradients) -> None:
        """Accumulate dL/d(table entries) into grads."""

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def _check_adjoint(self, x_c: np.ndarray, dL_dfeature: np.ndarray):
        if dL_dfeature.shape != (len(x_c), self.output_dim):
            raise TapeMismatch(
                f"{self.name}: adjoint shape {dL_dfeature.shape} does not match "
                f"({len(x_c)}, {self.output_dim})"
            )


class HashGrid(FeatureEncoder):
    def __init__(
        self,
        config: HashGridConfig,
        contraction_b: float = 1.0,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        init_scale: float = 1e-4,
        name: str = "hash",
    ):
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.name = name
        self.b = contraction_b
        self.dtype = np.dtype(dtype)
        self.resolutions = config.resolutions()
        self.tables = [
            rng.uniform(-init_scale, init_scale, size=(entries, config.feat_dim)).astype(dtype)
            for entries in config.entries()
        ]
        self.output_dim = config.levels * config.feat_dim

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.level{i:02d}": table for i, table in enumerate(self.tables)}

    def _lookups(self, x_c):
        unit = to_unit_cube(np.atleast_2d(x_c), self.b)
        for level, resolution in enumerate(self.resolutions):
            cells, weights = trilinear_corners(unit, resolution)
            index = grid_index(cells, resolution, self.config.table_size)
            yield level, index, weights.astype(self.dtype)

    def encode(self, x_c: np.ndarray) -> np.ndarray:
        x_c = np.atleast_2d(x_c)
        feat = self.config.feat_dim
        out = np.empty((len(x_c), self.output_dim), dtype=self.dtype)
        for level, index, weights in self._lookups(x_c):
            corners = self.tables[level][index]  # (N, 8, F)
            out[:, level * feat : (level + 1) * feat] = np.einsum("nc,ncf->nf", weights, corners)
        return out

    def backward(self, x_c: np.ndarray, dL_dfeature: np.ndarray, grads: Gradients) -> None:
        x_c = np.atleast_2d(x_c)
        self._check_adjoint(x_c, dL_dfeature)
        feat = self.config.feat_dim
        names = list(self.parameters())
        for level, index, weights in self._lookups(x_c):
            adjoint = dL_dfeature[:, level * feat : (level + 1) * feat]
            _scatter(grads[names[level]], index, weights, adjoint)


class PlaneSet(FeatureEncoder):
    """Three axis-aligned multi-resolution feature planes (XY, XZ, YZ)."""

    def __init__(
        self,
        config: PlaneSetConfig,
        contraction_b: float = 1.0,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        init_scale: float = 1e-4,
        name: str = "plane",
    ):
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.name = name
        self.b = contraction_b
        self.dtype = np.dtype(dtype)
        self.vertical_scale = config.vertical_scale or 1.0
        self.planes = {
            plane: [
                rng.uniform(-init_scale, init_scale, size=((n + 1) ** 2, config.feat_dim)).astype(
                    dtype
                )
                for n in config.resolutions
            ]
            for plane, _ in PLANE_AXES
        }
        self.output_dim = config.output_dim()
        self.plane_dim = self.output_dim

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.{plane}.level{i:02d}": grid
            for plane, grids in self.planes.items()
            for i, grid in enumerate(grids)
        }

    def project(self, unit: np.ndarray, axes: tuple[int, int]) -> np.ndarray:
        """
        Drop the orthogonal axis; stretch the altitude axis about the center.

        The altitude coordinate u becomes clip(0.5 + (u - 0.5) * vertical_scale, 0, 1),
        so a stretched scene never indexes outside the plane.
        """
        uv = unit[:, list(axes)].copy()
        for column, axis in enumerate(axes):
            if axis == self.config.altitude_axis and self.vertical_scale != 1.0:
                uv[:, column] = np.clip(0.5 + (uv[:, column] - 0.5) * self.vertical_scale, 0, 1)
        return uv

    def _lookups(self, x_c):
        unit = to_unit_cube(np.atleast_2d(x_c), self.b)
        feat = self.config.feat_dim
        offset = 0
        for plane, axes in PLANE_AXES:
            uv = self.project(unit, axes)
            for level, resolution in enumerate(self.config.resolutions):
                index, weights = bilinear_corners(uv, resolution)
                yield plane, level, slice(offset, offset + feat), index, weights.astype(self.dtype)
                offset += feat

    def encode(self, x_c: np.ndarray) -> np.ndarray:
        x_c = np.atleast_2d(x_c)
        out = np.empty((len(x_c), self.output_dim), dtype=self.dtype)
        for plane, level, columns, index, weights in self._lookups(x_c):
            out[:, columns] = np.einsum("nc,ncf->nf", weights, self.planes[plane][level][index])
        return out

    def backward(self, x_c: np.ndarray, dL_dfeature: np.ndarray, grads: Gradients) -> None:
        x_c = np.atleast_2d(x_c)
        self._check_adjoint(x_c, dL_dfeature)
        for plane, level, columns, index, weights in self._lookups(x_c):
            name = f"{self.name}.{plane}.level{level:02d}"
            _scatter(grads[name], index, weights, dL_dfeature[:, columns])


class HybridEncoder(FeatureEncoder):
    """[hash-grid features ; second encoder's features], grid first."""

    def __init__(self, grid: HashGrid, second: FeatureEncoder, name: str = "hybrid"):
        self.grid = grid
        self.second = second
        self.name = name
        self.output_dim = grid.output_dim + second.output_dim
        # only plane channels feed the color head; a dense grid contributes none
        self.plane_dim = second.plane_dim

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.grid.parameters(), **self.second.parameters()}

    def encode(self, x_c: np.ndarray) -> np.ndarray:
        return np.concatenate([self.grid.encode(x_c), self.second.encode(x_c)], axis=-1)

    def backward(self, x_c: np.ndarray, dL_dfeature: np.ndarray, grads: Gradients) -> None:
        x_c = np.atleast_2d(x_c)
        self._check_adjoint(x_c, dL_dfeature)
        split = self.grid.output_dim
        self.grid.backward(x_c, dL_dfeature[:, :split], grads)
        self.second.backward(x_c, dL_dfeature[:, split:], grads)


def hashgrid_encode(x_c, grid: HashGrid) -> np.ndarray:
    return grid.encode(x_c)


def plane_encode(x_c, planes: PlaneSet) -> np.ndarray:
    return planes.encode(x_c)


def hybrid_encode(x_c, grid: HashGrid, planes: PlaneSet) -> np.ndarray:
    return np.concatenate([grid.encode(x_c), planes.encode(x_c)], axis=-1)


def encode_backward(x_c, encoder: FeatureEncoder, dL_dfeature, grads: Gradients) -> Gradients:
    encoder.backward(np.atleast_2d(x_c), np.atleast_2d(dL_dfeature), grads)
    return grads


def param_count(encoder: FeatureEncoder) -> int:
    return encoder.param_count()


def zero_gradients(encoder: FeatureEncoder) -> Gradients:
    return {name: np.zeros_like(p) for name, p in encoder.parameters().items()}


def build_foreground_encoder(
    config: EncodingConfig,
    contraction_b: float,
    rng: np.random.Generator,
    dtype=np.float32,
    prefix: str = "fg",
) -> FeatureEncoder:
    """The foreground encoder selected by config.kind."""
    scale = config.init_scale
    if config.kind == "dense":
        return HashGrid(config.dense_grid(), contraction_b, rng, dtype, scale, f"{prefix}.dense")
    if config.kind == "plane":
        return PlaneSet(config.planes, contraction_b, rng, dtype, scale, f"{prefix}.plane")
    grid = HashGrid(config.hash_grid, contraction_b, rng, dtype, scale, f"{prefix}.hash")
    if config.kind == "hash":
        return grid
    if config.kind == "hash+dense":
        dense = HashGrid(config.dense_grid(), contraction_b, rng, dtype, scale, f"{prefix}.dense")
        return HybridEncoder(grid, dense, name=f"{prefix}.hash+dense")
    planes = PlaneSet(config.planes, contraction_b, rng, dtype, scale, f"{prefix}.plane")
    return HybridEncoder(grid, planes, name=f"{prefix}.hybrid")


def build_background_encoder(
    config: EncodingConfig,
    contraction_b: float,
    rng: np.random.Generator,
    dtype=np.float32,
    prefix: str = "bg",
) -> HashGrid:
    return HashGrid(
        config.background_grid, contraction_b, rng, dtype, config.init_scale, f"{prefix}.hash"
    )
