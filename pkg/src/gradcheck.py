"""
Finite-difference verification of every hand-written adjoint.

Each suite perturbs selected entries of a tensor by +/- h, evaluates a scalar
loss, and compares the central difference with the analytic gradient using
rel = |a - n| / max(|a|, |n|, 1e-6).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from src.config import RunConfig
from src.encoding import HashGrid, PlaneSet, zero_gradients
from src.field import RadianceModel
from src.geometry import Rays, SceneBounds
from src.optim import mse_loss
from src.render import Renderer, composite, composite_backward

logger = logging.getLogger("GradCheck")

STEP = 1e-6
REL_FLOOR = 1e-6
TOLERANCES = {"composite": 1e-5, "encoders": 1e-5, "field": 1e-4, "pipeline": 1e-3}


def tensor_class(name: str) -> str:
    """Group a parameter name into its trainable tensor class."""
    if name.startswith("appearance"):
        return "appearance rows"
    if ".plane." in name:
        return "plane tables"
    if ".hash." in name or ".dense." in name:
        return "hash tables"
    for head in ("density", "color"):
        if f".{head}.weight" in name:
            return f"{head} MLP weights"
        if f".{head}.bias" in name:
            return f"{head} MLP biases"
    return "compositing inputs"


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


@dataclass
class TensorCheck:
    suite: str
    name: str
    tensor_class: str
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


@dataclass
class GradCheckReport:
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> Optional[TensorCheck]:
        """The check furthest beyond (or closest to) its tolerance."""
        if not self.checks:
            return None
        return max(self.checks, key=lambda c: c.max_rel_error / c.tolerance)

    def class_summary(self, suite: str = "pipeline") -> dict[str, TensorCheck]:
        """Worst check per trainable tensor class, one entry per class."""
        summary: dict[str, TensorCheck] = {}
        for check in self.checks:
            if check.suite != suite:
                continue
            current = summary.get(check.tensor_class)
            if current is None or check.max_rel_error > current.max_rel_error:
                summary[check.tensor_class] = check
        return summary

    def format(self) -> str:
        lines = [f"{'class':<22} {'worst tensor':<28} {'max rel err':>12}  status"]
        for cls, check in sorted(self.class_summary().items()):
            status = "ok" if check.passed else "FAIL"
            lines.append(f"{cls:<22} {check.name:<28} {check.max_rel_error:>12.3e}  {status}")
        for check in self.checks:
            if not check.passed:
                lines.append(
                    f"FAILED {check.suite}: {check.name} rel err {check.max_rel_error:.3e} "
                    f"> {check.tolerance:.0e}"
                )
        worst = self.worst
        if worst is not None:
            lines.append(
                f"worst relative error {worst.max_rel_error:.3e} at {worst.suite}:{worst.name}"
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def check_tensor(
    suite: str,
    name: str,
    array: np.ndarray,
    analytic: np.ndarray,
    loss_fn: Callable[[], float],
    rng: np.random.Generator,
    tolerance: float,
    top_k: int = 4,
    random_k: int = 6,
) -> TensorCheck:
    """Compare the largest and a few random gradient entries with central differences."""
    magnitude = np.abs(analytic).ravel()
    picks = set(np.argsort(-magnitude, kind="stable")[:top_k].tolist())
    picks |= set(rng.choice(array.size, size=min(random_k, array.size), replace=False).tolist())
    worst = 0.0
    for flat in sorted(picks):
        index = np.unravel_index(flat, array.shape)
        original = array[index]
        array[index] = original + STEP
        plus = loss_fn()
        array[index] = original - STEP
        minus = loss_fn()
        array[index] = original
        numeric = (plus - minus) / (2.0 * STEP)
        worst = max(worst, relative_error(float(analytic[index]), numeric))
    check = TensorCheck(suite, name, tensor_class(name), worst, len(picks), tolerance)
    logger.debug(f"{suite}:{name} max rel err {worst:.3e} over {len(picks)} entries")
    return check


def _corrupt(grads: dict[str, np.ndarray], name: Optional[str]) -> None:
    if name is not None and name in grads:
        grads[name] = grads[name] * 1.5 + 1e-3


def composite_suite(rng: np.random.Generator, samples: int = 8) -> list[TensorCheck]:
    sigma = rng.uniform(0.5, 2.0, samples)
    color = rng.uniform(0.0, 1.0, (samples, 3))
    delta = rng.uniform(0.05, 0.3, samples)
    adjoint = rng.normal(size=3)

    def loss() -> float:
        return float(composite(sigma, color, delta).rgb @ adjoint)

    d_sigma, d_color = composite_backward(sigma, color, delta, adjoint)
    tol = TOLERANCES["composite"]
    return [
        check_tensor("composite", "composite.sigma", sigma, d_sigma, loss, rng, tol),
        check_tensor("composite", "composite.color", color, d_color, loss, rng, tol),
    ]


def _contracted_points(rng: np.random.Generator, count: int, b: float) -> np.ndarray:
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    return directions * rng.uniform(0.0, 0.95 * (1.0 + b), (count, 1))


def encoder_suite(config: RunConfig, rng: np.random.Generator, corrupt=None) -> list[TensorCheck]:
    enc = config.encoding
    b = config.geometry.bg_b
    planes_config = enc.planes.model_copy(update={"vertical_scale": enc.planes.vertical_scale or 2.0})
    encoders = [
        HashGrid(enc.hash_grid, b, rng, np.float64, 0.1, "fg.hash"),
        PlaneSet(planes_config, b, rng, np.float64, 0.1, "fg.plane"),
    ]
    points = _contracted_points(rng, 16, b)
    checks = []
    for encoder in encoders:
        adjoint = rng.normal(size=(len(points), encoder.output_dim))

        def loss(encoder=encoder, adjoint=adjoint) -> float:
            return float(np.sum(encoder.encode(points) * adjoint))

        grads = zero_gradients(encoder)
        encoder.backward(points, adjoint, grads)
        _corrupt(grads, corrupt)
        for name, table in encoder.parameters().items():
            checks.append(
                check_tensor("encoders", name, table, grads[name], loss, rng, TOLERANCES["encoders"])
            )
    return checks


def micro_bounds() -> SceneBounds:
    return SceneBounds(center=(0.0, 0.0, 0.0), bound_B=1.0, altitude_range=(-0.5, 0.5))


def field_suite(config: RunConfig, rng: np.random.Generator, corrupt=None) -> list[TensorCheck]:
    model = RadianceModel(config.encoding, config.field, micro_bounds(), 2, config.optim.seed, "float64")
    fg = model.foreground
    points = _contracted_points(rng, 6, 0.0)  # stays inside the unit ball
    dirs = rng.normal(size=(len(points), 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    ids = rng.integers(0, 2, size=len(points))
    a = rng.normal(size=len(points))
    c = rng.normal(size=(len(points), 3))

    def loss() -> float:
        sigma, rgb, _ = fg.forward(points, dirs, model.appearance.rows(ids))
        return float(sigma @ a + np.sum(rgb * c))

    grads = model.zero_gradients()
    _, _, tape = fg.forward(points, dirs, model.appearance.rows(ids))
    d_features, d_app = fg.backward(tape, a, c, grads)
    fg.encoder.backward(points, d_features, grads)
    model.appearance.backward(ids, d_app, grads)
    _corrupt(grads, corrupt)
    params = {**fg.parameters(), **model.appearance.parameters()}
    return [
        check_tensor("field", name, array, grads[name], loss, rng, TOLERANCES["field"])
        for name, array in params.items()
    ]


def pipeline_suite(config: RunConfig, rng: np.random.Generator, corrupt=None) -> list[TensorCheck]:
    """One ray, coarse and fine passes, foreground and background fields."""
    bounds = micro_bounds()
    model = RadianceModel(config.encoding, config.field, bounds, 2, config.optim.seed, "float64")
    renderer = Renderer(model, bounds, config.geometry, config.render.background_rgb())
    direction = np.array([0.8, -0.3, 0.2])
    rays = Rays.single(
        [-0.3, 0.2, 0.1],
        direction / np.linalg.norm(direction),
        bounds.near_plane(config.geometry.near_scale),
        bounds.far_plane(config.geometry.far_scale),
    )
    app_ids = np.array([0])
    target = rng.uniform(0.0, 1.0, (1, 3))
    fine_t = renderer.render_rays(rays, app_ids=app_ids).fine_t

    def loss() -> float:
        result = renderer.render_rays(rays, app_ids=app_ids, fine_t=fine_t)
        coarse, _ = mse_loss(result.rgb_coarse, target)
        fine, _ = mse_loss(result.rgb, target)
        return 0.5 * (coarse + fine)

    result = renderer.render_rays(rays, app_ids=app_ids, fine_t=fine_t)
    _, d_coarse = mse_loss(result.rgb_coarse, target)
    _, d_fine = mse_loss(result.rgb, target)
    grads = model.zero_gradients()
    renderer.backward(result, 0.5 * d_coarse, 0.5 * d_fine, grads)
    _corrupt(grads, corrupt)
    return [
        check_tensor("pipeline", name, array, grads[name], loss, rng, TOLERANCES["pipeline"])
        for name, array in model.parameters().items()
    ]


def run_gradcheck(config: RunConfig, corrupt: Optional[str] = None) -> GradCheckReport:
    """
    Run every suite in 64-bit precision.

    corrupt names a parameter whose analytic gradient is deliberately
    perturbed, to show that a faulty adjoint is caught and localized.
    """
    snapshot = config.snapshot()
    snapshot["optim"]["dtype"] = "float64"
    config = RunConfig.model_validate(snapshot)
    rng = np.random.default_rng(config.optim.seed)
    report = GradCheckReport()
    for suite, run in (
        ("composite", lambda: composite_suite(rng)),
        ("encoders", lambda: encoder_suite(config, rng, corrupt)),
        ("field", lambda: field_suite(config, rng, corrupt)),
        ("pipeline", lambda: pipeline_suite(config, rng, corrupt)),
    ):
        checks = run()
        report.checks.extend(checks)
        worst = max(c.max_rel_error for c in checks)
        logger.info(f"Suite {suite}: {len(checks)} tensors, worst rel err {worst:.3e}")
    return report
