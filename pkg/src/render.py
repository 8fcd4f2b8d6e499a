"""
Volume rendering: compositing of sorted ray samples, its adjoint, and the
coarse-to-fine renderer that routes samples to the foreground or background
field.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.config import GeometryConfig
from src.encoding import Gradients
from src.errors import EmptyRay, TapeMismatch
from src.field import ModelTape, RadianceModel
from src.geometry import (
    Rays,
    SampleSet,
    SceneBounds,
    coarse_samples,
    merge_samples,
    resample_fine,
    sample_set_from_t,
)

logger = logging.getLogger("HybridRenderer")

TAU_CLAMP = 80.0


@dataclass
class RayRadiance:
    """Composited color plus the per-sample quantities used for resampling."""

    rgb: np.ndarray  # (R, 3)
    weights: np.ndarray  # (R, S)
    transmittance: np.ndarray  # (R, S), T_0 = 1
    opacity: np.ndarray  # (R,)
    final_transmittance: np.ndarray  # (R,)


def _as_batch(sigma, c, delta):
    sigma = np.asarray(sigma, dtype=np.float64)
    single = sigma.ndim == 1
    sigma = np.atleast_2d(sigma)
    c = np.asarray(c, dtype=np.float64).reshape(sigma.shape + (3,))
    delta = np.asarray(delta, dtype=np.float64).reshape(sigma.shape)
    if np.any(sigma < 0) or np.any(delta < 0):
        raise ValueError("compositing needs sigma >= 0 and delta >= 0 (t sorted)")
    return sigma, c, delta, single


def _optical_depth(sigma: np.ndarray, delta: np.ndarray):
    product = sigma * delta
    tau = np.minimum(product, TAU_CLAMP)
    cumulative = np.cumsum(tau, axis=-1)
    exclusive = np.concatenate([np.zeros_like(tau[..., :1]), cumulative[..., :-1]], axis=-1)
    transmittance = np.exp(-exclusive)
    weights = transmittance * -np.expm1(-tau)
    return product, tau, transmittance, weights, np.exp(-cumulative[..., -1])


def composite(sigma, c, delta, background=(0.0, 0.0, 0.0), allow_empty: bool = True) -> RayRadiance:
    """
    Alpha-composite samples front to back.

    Accepts one ray (S,) or a batch (R, S). Light not absorbed by the samples
    is filled with the background color. A ray without samples yields the
    background with zero opacity unless allow_empty is False.
    """
    sigma, c, delta, single = _as_batch(sigma, c, delta)
    background = np.asarray(background, dtype=np.float64)
    rays, count = sigma.shape
    if count == 0:
        if not allow_empty:
            raise EmptyRay("cannot composite a ray with no samples")
        result = RayRadiance(
            rgb=np.broadcast_to(background, (rays, 3)).copy(),
            weights=np.zeros((rays, 0)),
            transmittance=np.zeros((rays, 0)),
            opacity=np.zeros(rays),
            final_transmittance=np.ones(rays),
        )
    else:
        _, _, transmittance, weights, final = _optical_depth(sigma, delta)
        opacity = weights.sum(axis=-1)
        rgb = np.einsum("rs,rsk->rk", weights, c) + (1.0 - opacity)[:, None] * background
        result = RayRadiance(rgb, weights, transmittance, opacity, final)
    if single:
        return RayRadiance(
            result.rgb[0],
            result.weights[0],
            result.transmittance[0],
            result.opacity[0],
            result.final_transmittance[0],
        )
    return result


def composite_backward(sigma, c, delta, dL_drgb, background=(0.0, 0.0, 0.0)):
    """
    Adjoint of composite.

    Returns:
        (dL/dsigma, dL/dc) shaped like sigma and c
    """
    sigma, c, delta, single = _as_batch(sigma, c, delta)
    dL_drgb = np.atleast_2d(np.asarray(dL_drgb, dtype=np.float64))
    if dL_drgb.shape != (sigma.shape[0], 3):
        raise TapeMismatch(f"rgb adjoint {dL_drgb.shape} does not match {sigma.shape[0]} rays")
    if sigma.shape[1] == 0:
        d_sigma, d_c = np.zeros(sigma.shape), np.zeros(c.shape)
    else:
        product, tau, transmittance, weights, _ = _optical_depth(sigma, delta)
        background = np.asarray(background, dtype=np.float64)
        # rgb = bg + sum_i w_i (c_i - bg)
        emitted = np.einsum("rsk,rk->rs", c - background, dL_drgb)
        contrib = weights * emitted
        later = np.cumsum(contrib[:, ::-1], axis=-1)[:, ::-1] - contrib
        d_tau = transmittance * np.exp(-tau) * emitted - later
        d_sigma = np.where(product < TAU_CLAMP, d_tau * delta, 0.0)
        d_c = weights[..., None] * dL_drgb[:, None, :]
    if single:
        return d_sigma[0], d_c[0]
    return d_sigma, d_c


@dataclass
class PassRecord:
    """One coarse or fine pass: samples, field outputs and the query tape."""

    samples: SampleSet
    sigma: np.ndarray  # (R, S)
    colors: np.ndarray  # (R, S, 3)
    radiance: RayRadiance
    tape: ModelTape


@dataclass
class RenderResult:
    coarse: PassRecord
    fine: Optional[PassRecord]
    diagnostics: dict = field(default_factory=dict)
    fine_t: Optional[np.ndarray] = None  # resampled t-values before merging

    @property
    def rgb(self) -> np.ndarray:
        record = self.fine if self.fine is not None else self.coarse
        return record.radiance.rgb

    @property
    def rgb_coarse(self) -> np.ndarray:
        return self.coarse.radiance.rgb


class Renderer:
    """Coarse pass, inverse-CDF resampling, merged fine pass."""

    def __init__(
        self,
        model: RadianceModel,
        bounds: SceneBounds,
        geometry: GeometryConfig,
        background=(0.0, 0.0, 0.0),
    ):
        self.model = model
        self.bounds = bounds
        self.geometry = geometry
        self.background = np.asarray(background, dtype=np.float64)

    def _pass(self, rays: Rays, t_values, app_ids, appearance) -> PassRecord:
        samples = sample_set_from_t(rays, self.bounds, t_values, self.geometry.last_delta)
        count, per_ray = samples.shape
        dirs = np.repeat(rays.directions, per_ray, axis=0)
        ids = None if app_ids is None else np.repeat(np.asarray(app_ids).reshape(count), per_ray)
        sigma, colors, tape = self.model.query(
            samples.positions_contracted.reshape(-1, 3),
            dirs,
            samples.foreground.ravel(),
            app_ids=ids,
            appearance=appearance,
        )
        sigma = sigma.reshape(count, per_ray)
        colors = colors.reshape(count, per_ray, 3)
        radiance = composite(sigma, colors, samples.deltas, self.background)
        return PassRecord(samples, sigma, colors, radiance, tape)

    def render_rays(
        self,
        rays: Rays,
        app_ids: Optional[np.ndarray] = None,
        appearance: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
        fine: bool = True,
        fine_t: Optional[np.ndarray] = None,
    ) -> RenderResult:
        """
        Render a batch of rays.

        rng jitters both sampling passes; None renders deterministically.
        fine_t replaces the resampled fine t-values (held fixed for gradient
        checks).
        """
        if app_ids is None and appearance is None:
            appearance = self.model.appearance.mean()
        geo = self.geometry
        t_coarse = coarse_samples(rays, self.bounds, geo.n_foreground, geo.n_background, rng)
        coarse = self._pass(rays, t_coarse, app_ids, appearance)
        fine_pass = None
        if fine:
            if fine_t is None:
                fine_t = resample_fine(
                    t_coarse, np.nan_to_num(coarse.radiance.weights), geo.n_foreground + geo.n_background, rng
                )
            fine_pass = self._pass(rays, merge_samples(t_coarse, fine_t), app_ids, appearance)
        diagnostics = {
            "coarse_opacity": float(np.mean(coarse.radiance.opacity)),
            "coarse_samples": int(coarse.samples.shape[1]),
            "foreground_fraction": float(np.mean(coarse.samples.foreground)),
        }
        if fine_pass is not None:
            diagnostics["fine_opacity"] = float(np.mean(fine_pass.radiance.opacity))
            diagnostics["fine_samples"] = int(fine_pass.samples.shape[1])
        return RenderResult(coarse, fine_pass, diagnostics, fine_t)

    def backward(
        self,
        result: RenderResult,
        dL_drgb_coarse: Optional[np.ndarray],
        dL_drgb_fine: Optional[np.ndarray],
        grads: Gradients,
        encoders: bool = True,
    ) -> Optional[np.ndarray]:
        """
        Push pixel adjoints through compositing and both field passes.

        Returns the gradient of a fixed appearance vector when one was used,
        else None.
        """
        appearance_grad = None
        for record, adjoint in ((result.coarse, dL_drgb_coarse), (result.fine, dL_drgb_fine)):
            if record is None or adjoint is None:
                continue
            d_sigma, d_c = composite_backward(
                record.sigma, record.colors, record.samples.deltas, adjoint, self.background
            )
            dtype = self.model.dtype
            grad = self.model.backward(
                record.tape,
                d_sigma.ravel().astype(dtype),
                d_c.reshape(-1, 3).astype(dtype),
                grads,
                encoders,
            )
            if grad is not None:
                appearance_grad = grad if appearance_grad is None else appearance_grad + grad
        return appearance_grad

    def render_chunked(
        self,
        rays: Rays,
        chunk: int = 1024,
        appearance: Optional[np.ndarray] = None,
        app_ids: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Deterministic fine-pass colors for many rays, chunk by chunk."""
        if app_ids is None and appearance is None:
            appearance = self.model.appearance.mean()
        out = np.empty((len(rays), 3))
        for start in range(0, len(rays), chunk):
            index = slice(start, start + chunk)
            ids = None if app_ids is None else np.asarray(app_ids)[index]
            out[index] = self.render_rays(rays.subset(index), ids, appearance).rgb
        logger.debug(f"Rendered {len(rays)} rays in chunks of {chunk}")
        return out


def render_ray(
    ray: Rays,
    bounds: SceneBounds,
    model: RadianceModel,
    app_id: Optional[int],
    geometry: GeometryConfig,
    background=(0.0, 0.0, 0.0),
):
    """Render one ray; app_id None uses the mean appearance embedding."""
    renderer = Renderer(model, bounds, geometry, background)
    ids = None if app_id is None else np.array([app_id])
    result = renderer.render_rays(ray, app_ids=ids)
    return result.rgb[0], result.diagnostics
