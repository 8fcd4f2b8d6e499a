"""
Radiance-field heads: spherical-harmonics direction encoding, per-image
appearance embeddings, density MLP and color MLP, with hand-written
reverse-mode gradients.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from src.config import EncodingConfig, FieldConfig, PlaneSetConfig
from src.encoding import (
    FeatureEncoder,
    Gradients,
    altitude_scale,
    build_background_encoder,
    build_foreground_encoder,
)
from src.errors import NonUnitDirection, TapeMismatch
from src.geometry import Region, SceneBounds

logger = logging.getLogger("HybridField")

SIGMA_CLAMP = 15.0
UNIT_TOLERANCE = 1e-6


def sh_encode(d, degree: int = 4) -> np.ndarray:
    """Real spherical-harmonics basis up to the given degree (degree**2 values)."""
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    lengths = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(lengths - 1.0) > UNIT_TOLERANCE):
        raise NonUnitDirection(
            f"view directions must be unit length, worst |d| = {lengths.flat[np.argmax(np.abs(lengths - 1))]:.8f}"
        )
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xy, yz, xz = x * y, y * z, x * z
    x2, y2, z2 = x * x, y * y, z * z
    out = np.empty((len(d), degree**2))
    out[:, 0] = 0.28209479177387814
    if degree > 1:
        out[:, 1] = -0.48860251190291987 * y
        out[:, 2] = 0.48860251190291987 * z
        out[:, 3] = -0.48860251190291987 * x
    if degree > 2:
        out[:, 4] = 1.0925484305920792 * xy
        out[:, 5] = -1.0925484305920792 * yz
        out[:, 6] = 0.94617469575755997 * z2 - 0.31539156525251999
        out[:, 7] = -1.0925484305920792 * xz
        out[:, 8] = 0.54627421529603959 * (x2 - y2)
    if degree > 3:
        out[:, 9] = 0.59004358992664352 * y * (3.0 * x2 - y2)
        out[:, 10] = 2.8906114426405538 * xy * z
        out[:, 11] = 0.45704579946446572 * y * (1.0 - 5.0 * z2)
        out[:, 12] = 0.3731763325901154 * z * (5.0 * z2 - 3.0)
        out[:, 13] = 0.45704579946446572 * x * (1.0 - 5.0 * z2)
        out[:, 14] = 1.4453057213202769 * z * (x2 - y2)
        out[:, 15] = 0.59004358992664352 * x * (x2 - 3.0 * y2)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MLP:
    """Fully connected ReLU network; the last layer is linear."""

    def __init__(
        self,
        widths: list[int],
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        name: str = "mlp",
    ):
        rng = rng or np.random.default_rng(0)
        self.widths = list(widths)
        self.name = name
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / max(fan_in, 1))  # He-uniform
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
            self.biases.append(np.zeros(fan_out, dtype=dtype))

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{self.name}.weight{i}"] = w
            params[f"{self.name}.bias{i}"] = b
        return params

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns the output and the input seen by every layer."""
        inputs = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h, inputs

    def backward(
        self, inputs: list[np.ndarray], dL_dout: np.ndarray, grads: Gradients
    ) -> np.ndarray:
        """Accumulate weight/bias gradients; return dL/d(input)."""
        if len(inputs) != len(self.weights) or dL_dout.shape[-1] != self.widths[-1]:
            raise TapeMismatch(f"{self.name}: tape does not match this network")
        g = dL_dout
        for i in reversed(range(len(self.weights))):
            grads[f"{self.name}.weight{i}"] += inputs[i].T @ g
            grads[f"{self.name}.bias{i}"] += g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (inputs[i] > 0)
        return g

    def param_count(self) -> int:
        return mlp_param_count(self.widths)


def mlp_param_count(widths: list[int]) -> int:
    return sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))


class AppearanceTable:
    """One trainable embedding row per training image."""

    def __init__(
        self,
        num_images: int,
        dim: int,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        name: str = "appearance",
    ):
        rng = rng or np.random.default_rng(0)
        self.name = f"{name}.table"
        self.dim = dim
        self.table = rng.normal(0.0, 0.01, size=(num_images, dim)).astype(dtype)

    def parameters(self) -> dict[str, np.ndarray]:
        return {self.name: self.table}

    def rows(self, app_ids: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(app_ids, dtype=np.int64)]

    def mean(self) -> np.ndarray:
        """Embedding used for views that have no row of their own."""
        if len(self.table) == 0:
            return np.zeros(self.dim, dtype=self.table.dtype)
        return self.table.mean(axis=0)

    def backward(self, app_ids: np.ndarray, dL_drows: np.ndarray, grads: Gradients) -> None:
        grad = grads[self.name]
        for channel in range(self.dim):
            grad[:, channel] += np.bincount(
                app_ids, weights=dL_drows[:, channel], minlength=len(grad)
            )


@dataclass
class FieldTape:
    """Intermediate activations of one RegionField.forward call."""

    x_c: np.ndarray
    features: np.ndarray
    density_inputs: list[np.ndarray]
    raw_sigma: np.ndarray
    sigma: np.ndarray
    color_inputs: list[np.ndarray]
    rgb: np.ndarray


class RegionField:
    """Encoder + density MLP + color MLP for one region of space."""

    def __init__(
        self,
        encoder: FeatureEncoder,
        config: FieldConfig,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        name: str = "fg",
    ):
        rng = rng or np.random.default_rng(0)
        self.encoder = encoder
        self.config = config
        self.name = name
        self.dtype = np.dtype(dtype)
        self.sh_dim = config.sh_degree**2
        self.density = MLP(
            [encoder.output_dim, *config.density_hidden, 1 + config.geo_feat_dim],
            rng,
            dtype,
            f"{name}.density",
        )
        color_in = config.geo_feat_dim + self.sh_dim + config.appearance_dim + encoder.plane_dim
        self.color = MLP([color_in, *config.color_hidden, 3], rng, dtype, f"{name}.color")

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            **self.encoder.parameters(),
            **self.density.parameters(),
            **self.color.parameters(),
        }

    def forward(self, x_c, dirs, appearance_rows) -> tuple[np.ndarray, np.ndarray, FieldTape]:
        features = self.encoder.encode(x_c)
        density_out, density_inputs = self.density.forward(features)
        raw_sigma = density_out[:, 0]
        sigma = np.exp(np.clip(raw_sigma, -SIGMA_CLAMP, SIGMA_CLAMP))

        parts = [
            density_out[:, 1:],
            sh_encode(dirs, self.config.sh_degree).astype(self.dtype),
            np.asarray(appearance_rows, dtype=self.dtype).reshape(len(features), -1),
        ]
        if self.encoder.plane_dim:
            parts.append(features[:, -self.encoder.plane_dim :])
        logits, color_inputs = self.color.forward(np.concatenate(parts, axis=-1))
        rgb = sigmoid(logits)
        tape = FieldTape(
            x_c=np.atleast_2d(x_c),
            features=features,
            density_inputs=density_inputs,
            raw_sigma=raw_sigma,
            sigma=sigma,
            color_inputs=color_inputs,
            rgb=rgb,
        )
        return sigma, rgb, tape

    def backward(
        self, tape: FieldTape, dL_dsigma: np.ndarray, dL_drgb: np.ndarray, grads: Gradients
    ) -> tuple[np.ndarray, np.ndarray]:
        """
        Accumulate MLP gradients.

        Returns:
            (dL/d(encoder feature), dL/d(appearance rows))
        """
        count = len(tape.sigma)
        if dL_dsigma.shape != (count,) or dL_drgb.shape != (count, 3):
            raise TapeMismatch(
                f"{self.name}: adjoints {dL_dsigma.shape}/{dL_drgb.shape} do not match "
                f"a tape of {count} samples"
            )
        d_logits = dL_drgb * tape.rgb * (1.0 - tape.rgb)
        d_color_in = self.color.backward(tape.color_inputs, d_logits, grads)

        geo = self.config.geo_feat_dim
        app_start = geo + self.sh_dim
        app_end = app_start + self.config.appearance_dim
        inside = (tape.raw_sigma > -SIGMA_CLAMP) & (tape.raw_sigma < SIGMA_CLAMP)
        d_raw = dL_dsigma * tape.sigma * inside
        d_density_out = np.concatenate([d_raw[:, None], d_color_in[:, :geo]], axis=-1)
        d_features = self.density.backward(tape.density_inputs, d_density_out, grads)
        if self.encoder.plane_dim:
            d_features[:, -self.encoder.plane_dim :] += d_color_in[:, app_end:]
        return d_features, d_color_in[:, app_start:app_end]


@dataclass
class ModelTape:
    foreground_index: np.ndarray
    background_index: np.ndarray
    foreground: Optional[FieldTape]
    background: Optional[FieldTape]
    app_ids: Optional[np.ndarray]
    count: int


class RadianceModel:
    """Foreground and background fields sharing one appearance table."""

    def __init__(
        self,
        encoding: EncodingConfig,
        field: FieldConfig,
        bounds: SceneBounds,
        num_images: int,
        seed: Union[int, np.random.SeedSequence] = 0,
        dtype="float32",
    ):
        self.dtype = np.dtype(dtype)
        if encoding.planes.vertical_scale is None:
            planes = encoding.planes.model_copy(
                update={"vertical_scale": altitude_scale(bounds)}
            )
            encoding = encoding.model_copy(update={"planes": planes})
        self.encoding = encoding
        self.field_config = field
        self.num_images = num_images
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        fg_seed, bg_seed, app_seed = seed.spawn(3)
        fg_rng = np.random.default_rng(fg_seed)
        bg_rng = np.random.default_rng(bg_seed)
        b = bounds.bg_b
        self.foreground = RegionField(
            build_foreground_encoder(encoding, b, fg_rng, self.dtype), field, fg_rng, self.dtype, "fg"
        )
        self.background = RegionField(
            build_background_encoder(encoding, b, bg_rng, self.dtype), field, bg_rng, self.dtype, "bg"
        )
        self.appearance = AppearanceTable(
            num_images, field.appearance_dim, np.random.default_rng(app_seed), self.dtype
        )
        logger.info(
            f"RadianceModel built - encoder={encoding.kind}, params={self.param_count():,}, "
            f"dtype={self.dtype}"
        )

    def region(self, region: Region) -> RegionField:
        return self.foreground if region == Region.FOREGROUND else self.background

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            **self.foreground.parameters(),
            **self.background.parameters(),
            **self.appearance.parameters(),
        }

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def encoder_parameter_names(self) -> set[str]:
        return {*self.foreground.encoder.parameters(), *self.background.encoder.parameters()}

    def zero_gradients(self, encoders: bool = True) -> Gradients:
        """Gradient buffers; encoders=False leaves out the feature tables."""
        skip = set() if encoders else self.encoder_parameter_names()
        return {
            name: np.zeros_like(p) for name, p in self.parameters().items() if name not in skip
        }

    def parameter_breakdown(self) -> dict[str, int]:
        fg, bg = self.foreground, self.background
        return {
            f"{fg.encoder.name} encoder": fg.encoder.param_count(),
            "fg density MLP": fg.density.param_count(),
            "fg color MLP": fg.color.param_count(),
            f"{bg.encoder.name} encoder": bg.encoder.param_count(),
            "bg density MLP": bg.density.param_count(),
            "bg color MLP": bg.color.param_count(),
            "appearance table": self.appearance.table.size,
            "total": self.param_count(),
        }

    def query(
        self,
        x_c: np.ndarray,
        dirs: np.ndarray,
        foreground: np.ndarray,
        app_ids: Optional[np.ndarray] = None,
        appearance: Optional[np.ndarray] = None,
    ) -> tuple[np.ndarray, np.ndarray, ModelTape]:
        """
        Density and color for N points, each routed to its region's field.

        Either app_ids (N,) selects table rows, or appearance (A,) is a fixed
        embedding shared by every point.
        """
        count = len(x_c)
        if appearance is not None:
            rows = np.broadcast_to(np.asarray(appearance, dtype=self.dtype), (count, self.appearance.dim))
            app_ids = None
        else:
            app_ids = np.asarray(app_ids, dtype=np.int64).reshape(count)
            rows = self.appearance.rows(app_ids)
        fg_index = np.flatnonzero(foreground)
        bg_index = np.flatnonzero(~np.asarray(foreground, dtype=bool))
        sigma = np.zeros(count, dtype=self.dtype)
        rgb = np.zeros((count, 3), dtype=self.dtype)
        tapes = {}
        for key, field, index in (
            ("fg", self.foreground, fg_index),
            ("bg", self.background, bg_index),
        ):
            if index.size == 0:
                tapes[key] = None
                continue
            sigma[index], rgb[index], tapes[key] = field.forward(x_c[index], dirs[index], rows[index])
        tape = ModelTape(fg_index, bg_index, tapes["fg"], tapes["bg"], app_ids, count)
        return sigma, rgb, tape

    def backward(
        self,
        tape: ModelTape,
        dL_dsigma: np.ndarray,
        dL_drgb: np.ndarray,
        grads: Gradients,
        encoders: bool = True,
    ) -> Optional[np.ndarray]:
        """
        Accumulate gradients for every parameter touched by the query.

        Returns dL/d(appearance) summed over points when the query used a fixed
        embedding, otherwise None (rows were scattered into the table).
        """
        if dL_dsigma.shape != (tape.count,) or dL_drgb.shape != (tape.count, 3):
            raise TapeMismatch("model adjoints do not match the query tape")
        d_rows = np.zeros((tape.count, self.appearance.dim), dtype=self.dtype)
        for field, index, field_tape in (
            (self.foreground, tape.foreground_index, tape.foreground),
            (self.background, tape.background_index, tape.background),
        ):
            if field_tape is None:
                continue
            d_features, d_app = field.backward(field_tape, dL_dsigma[index], dL_drgb[index], grads)
            if encoders:
                field.encoder.backward(field_tape.x_c, d_features, grads)
            d_rows[index] = d_app
        if tape.app_ids is None:
            return d_rows.sum(axis=0)
        if self.appearance.dim:
            self.appearance.backward(tape.app_ids, d_rows, grads)
        return None


def field_forward(x_c, d, app_id, region: Region, model: RadianceModel):
    """Evaluate one region's field; returns (sigma, rgb, tape)."""
    x_c = np.atleast_2d(x_c)
    rows = model.appearance.rows(np.broadcast_to(np.asarray(app_id), (len(x_c),)))
    return model.region(region).forward(x_c, np.atleast_2d(d), rows)


def field_backward(tape: FieldTape, dL_dsigma, dL_dc, region: Region, model: RadianceModel):
    """
    Adjoint of field_forward.

    Returns:
        (gradients of the region's MLPs, dL/d(appearance rows), dL/d(encoder feature))
    """
    field = model.region(region)
    grads = {
        name: np.zeros_like(p)
        for name, p in {**field.density.parameters(), **field.color.parameters()}.items()
    }
    d_features, d_app = field.backward(
        tape, np.atleast_1d(dL_dsigma), np.atleast_2d(dL_dc), grads
    )
    return grads, d_app, d_features


def encoder_output_dim(encoding: EncodingConfig) -> tuple[int, int]:
    """(output_dim, plane_dim) of the foreground encoder, without allocating it."""
    grid_dim = encoding.hash_grid.levels * encoding.hash_grid.feat_dim
    plane_dim = encoding.planes.output_dim()
    if encoding.kind == "hash":
        return grid_dim, 0
    if encoding.kind == "dense":
        return encoding.hash_grid.feat_dim, 0
    if encoding.kind == "plane":
        return plane_dim, plane_dim
    if encoding.kind == "hash+dense":
        return grid_dim + encoding.hash_grid.feat_dim, 0
    return grid_dim + plane_dim, plane_dim


def parameter_breakdown(
    encoding: EncodingConfig, field: FieldConfig, num_images: int
) -> dict[str, int]:
    """Itemized trainable-scalar counts computed from configs alone."""
    terms: dict[str, int] = {}
    planes: PlaneSetConfig = encoding.planes
    if encoding.kind in ("hybrid", "hash", "hash+dense"):
        terms["fg hash grid"] = encoding.hash_grid.param_count()
    if encoding.kind in ("hybrid", "plane"):
        terms["fg planes"] = planes.param_count()
    if encoding.kind in ("dense", "hash+dense"):
        terms["fg dense grid"] = encoding.dense_grid().param_count()
    fg_dim, plane_dim = encoder_output_dim(encoding)
    geo, sh, app = field.geo_feat_dim, field.sh_degree**2, field.appearance_dim
    terms["fg density MLP"] = mlp_param_count([fg_dim, *field.density_hidden, 1 + geo])
    terms["fg color MLP"] = mlp_param_count([geo + sh + app + plane_dim, *field.color_hidden, 3])
    bg_dim = encoding.background_grid.levels * encoding.background_grid.feat_dim
    terms["bg hash grid"] = encoding.background_grid.param_count()
    terms["bg density MLP"] = mlp_param_count([bg_dim, *field.density_hidden, 1 + geo])
    terms["bg color MLP"] = mlp_param_count([geo + sh + app, *field.color_hidden, 3])
    terms["appearance table"] = num_images * app
    terms["total"] = sum(terms.values())
    return terms
