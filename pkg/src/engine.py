import csv
import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from src.checkpoint import (
    check_compatible,
    copy_into_model,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from src.config import RunConfig, Settings, get_settings
from src.data import Camera, RayPool, SceneDataset, build_ray_pool, camera_rays, save_png
from src.encoding import Gradients
from src.errors import TrainingDiverged
from src.field import RadianceModel
from src.geometry import SceneBounds
from src.metrics import psnr, ssim
from src.optim import Adam, AdamState, adam_step, mse_loss, psnr_from_mse
from src.render import Renderer

logger = logging.getLogger("HybridTrainer")


def scene_bounds(bounds: SceneBounds, config: RunConfig) -> SceneBounds:
    """Dataset bounds with the run's contraction settings applied."""
    return bounds.model_copy(update={"p_norm": config.geometry.p_norm, "bg_b": config.geometry.bg_b})


@dataclass
class StepMetrics:
    step: int
    loss: float
    train_psnr: float
    wall_ms: float


@dataclass
class TrainingSummary:
    steps: int
    final_loss: Optional[float]
    final_psnr: Optional[float]
    checkpoint: Path
    metrics_path: Path


class Trainer:
    """
    Owns the model, optimizer and sampler of one training run.

    Every batch is split into fixed-size ray chunks; each chunk gets its own
    random stream and gradient buffer, and buffers are summed in chunk order,
    so results do not depend on the number of worker threads.
    """

    def __init__(
        self,
        config: RunConfig,
        dataset: SceneDataset,
        output_dir: Optional[Path] = None,
        settings: Optional[Settings] = None,
    ):
        self.settings = settings or get_settings()
        self.config = config
        self.dataset = dataset
        self.output_dir = Path(output_dir or config.output_dir or self.settings.output_root / "train")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.output_dir / "metrics.jsonl"
        self.checkpoint_dir = self.output_dir / "checkpoints"

        self.bounds = scene_bounds(dataset.bounds, config)
        model_seed, sampler_seed = np.random.SeedSequence(config.optim.seed).spawn(2)
        self.model = RadianceModel(
            config.encoding,
            config.field,
            self.bounds,
            dataset.num_train,
            seed=model_seed,
            dtype=config.optim.dtype,
        )
        self.renderer = Renderer(
            self.model, self.bounds, config.geometry, config.render.background_rgb()
        )
        self.optimizer = Adam(self.model.parameters(), config.optim)
        self.rng = np.random.default_rng(sampler_seed)
        self._pool: Optional[RayPool] = None
        logger.info(
            f"Trainer initialized - encoder={config.encoding.kind}, seed={config.optim.seed}, "
            f"output_dir={self.output_dir}"
        )

    @property
    def step(self) -> int:
        return self.optimizer.step_count

    @property
    def pool(self) -> RayPool:
        if self._pool is None:
            self._pool = build_ray_pool(self.dataset, self.config.geometry)
        return self._pool

    def write_snapshot(self) -> Path:
        path = self.output_dir / "config.json"
        path.write_text(json.dumps(self.config.snapshot(), indent=2))
        return path

    def _chunk(self, index: np.ndarray, seed: int, batch: int):
        pool = self.pool
        grads = self.model.zero_gradients()
        rng = np.random.default_rng(seed) if self.config.geometry.jitter else None
        result = self.renderer.render_rays(
            pool.rays.subset(index), app_ids=pool.app_ids[index], rng=rng
        )
        target = pool.colors[index]
        diff_coarse = result.rgb_coarse - target
        diff_fine = result.rgb - target
        # the loss is the mean of the coarse and fine batch MSEs
        self.renderer.backward(result, diff_coarse / batch, diff_fine / batch, grads)
        return float(np.sum(diff_coarse**2)), float(np.sum(diff_fine**2)), grads

    def train_step(self) -> StepMetrics:
        started = time.perf_counter()
        optim = self.config.optim
        index = self.pool.sample(optim.batch_rays, self.rng)
        chunks = [index[i : i + optim.chunk_rays] for i in range(0, len(index), optim.chunk_rays)]
        seeds = self.rng.integers(0, 2**63 - 1, size=len(chunks))

        def work(k):
            return self._chunk(chunks[k], int(seeds[k]), len(index))

        sse_coarse = sse_fine = 0.0
        grads: Optional[Gradients] = None
        with ThreadPoolExecutor(max_workers=optim.threads) as executor:
            for chunk_coarse, chunk_fine, chunk_grads in executor.map(work, range(len(chunks))):
                sse_coarse += chunk_coarse
                sse_fine += chunk_fine
                if grads is None:
                    grads = chunk_grads
                else:
                    for name, grad in chunk_grads.items():
                        grads[name] += grad

        loss = 0.5 * (sse_coarse + sse_fine) / len(index)
        self._check_finite(loss, grads)
        self.optimizer.step(grads)
        return StepMetrics(
            step=self.step,
            loss=loss,
            train_psnr=psnr_from_mse(sse_fine / (3 * len(index))),
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )

    def _check_finite(self, loss: float, grads: Gradients) -> None:
        bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
        if np.isfinite(loss) and not bad:
            return
        dump = {
            "step": self.step + 1,
            "loss": loss if np.isfinite(loss) else str(loss),
            "non_finite_gradients": bad,
            "gradient_norms": {
                name: float(np.linalg.norm(g.astype(np.float64))) for name, g in grads.items()
            },
        }
        path = self.output_dir / "divergence.json"
        path.write_text(json.dumps(dump, indent=2, default=str))
        logger.error(f"Training diverged at step {self.step + 1}, diagnostics in {path}")
        raise TrainingDiverged(f"loss became {loss} at step {self.step + 1}; see {path}")

    def save(self, name: str) -> Path:
        return save_checkpoint(
            self.checkpoint_dir / name,
            self.model,
            self.config,
            self.bounds,
            self.step,
            self.optimizer.state,
            self.rng.bit_generator.state,
        )

    def resume(self, path: Path) -> None:
        """Restore parameters, Adam moments, step counter and sampler state."""
        checkpoint = load_checkpoint(path)
        check_compatible(checkpoint, self.config)
        copy_into_model(checkpoint, self.model)
        state = checkpoint.adam_state()
        if state is not None:
            for name in self.model.parameters():
                self.optimizer.state.m[name][...] = state.m[name]
                self.optimizer.state.v[name][...] = state.v[name]
            self.optimizer.state.step = state.step
        if "rng_state" in checkpoint.header:
            self.rng.bit_generator.state = checkpoint.header["rng_state"]
        logger.info(f"Resumed from {path} at step {self.step}")

    def train(self, resume: Optional[Path] = None) -> TrainingSummary:
        optim = self.config.optim
        if resume is not None:
            self.resume(resume)
        elif self.metrics_path.exists():
            self.metrics_path.unlink()
        self.write_snapshot()

        last: Optional[StepMetrics] = None
        with open(self.metrics_path, "a") as log:
            while self.step < optim.iterations:
                last = self.train_step()
                if last.step % optim.log_every == 0:
                    log.write(json.dumps(asdict(last)) + "\n")
                    log.flush()
                if last.step % optim.progress_every == 0:
                    logger.info(
                        f"step {last.step}/{optim.iterations} loss={last.loss:.6f} "
                        f"psnr={last.train_psnr:.2f}dB",
                        extra={"step": last.step, "loss": last.loss},
                    )
                if optim.checkpoint_every and last.step % optim.checkpoint_every == 0:
                    self.save(f"step_{last.step:07d}.ckpt")

        final = self.save("final.ckpt")
        logger.info(f"Training finished - {self.step} steps, checkpoint {final}")
        return TrainingSummary(
            steps=self.step,
            final_loss=last.loss if last else None,
            final_psnr=last.train_psnr if last else None,
            checkpoint=final,
            metrics_path=self.metrics_path,
        )


def train(
    dataset: SceneDataset, config: RunConfig, output_dir: Optional[Path] = None
) -> tuple[RadianceModel, TrainingSummary]:
    trainer = Trainer(config, dataset, output_dir)
    summary = trainer.train()
    return trainer.model, summary


@dataclass
class ImageMetrics:
    image: str
    split: str
    psnr: float
    ssim: float


class Evaluator:
    """Renders dataset views and scores them against the ground truth."""

    def __init__(self, model: RadianceModel, bounds: SceneBounds, config: RunConfig):
        self.model = model
        self.config = config
        self.bounds = scene_bounds(bounds, config)
        self.renderer = Renderer(model, self.bounds, config.geometry, config.render.background_rgb())

    @classmethod
    def from_checkpoint(cls, path: Path, config: Optional[RunConfig] = None) -> "Evaluator":
        checkpoint = load_checkpoint(path)
        if config is not None:
            check_compatible(checkpoint, config)
        return cls(restore_model(checkpoint), checkpoint.bounds, config or checkpoint.config)

    def render_camera(
        self, camera: Camera, appearance: Optional[np.ndarray] = None, app_id: Optional[int] = None
    ) -> np.ndarray:
        rays = camera_rays(camera, self.bounds, self.config.geometry)
        ids = None if app_id is None else np.full(len(rays), app_id)
        rgb = self.renderer.render_chunked(rays, self.config.optim.chunk_rays, appearance, ids)
        return np.clip(rgb, 0.0, 1.0).reshape(camera.height, camera.width, 3)

    def optimize_appearance(self, camera: Camera, image: np.ndarray) -> np.ndarray:
        """Fit a free embedding to the left half of the view, all else frozen."""
        settings = self.config.eval
        rays = camera_rays(camera, self.bounds, self.config.geometry)
        colors = image.reshape(-1, 3)
        columns = np.tile(np.arange(camera.width), camera.height)
        left = np.flatnonzero(columns < camera.width // 2)
        vector = self.model.appearance.mean().astype(np.float64)
        state = AdamState.zeros_like({"appearance": vector})
        scratch = self.model.zero_gradients(encoders=False)
        rng = np.random.default_rng(self.config.optim.seed)
        batch = min(self.config.optim.batch_rays, len(left))
        for _ in range(settings.appearance_steps):
            index = rng.choice(left, size=batch, replace=False)
            result = self.renderer.render_rays(rays.subset(index), appearance=vector)
            _, d_fine = mse_loss(result.rgb, colors[index])
            _, d_coarse = mse_loss(result.rgb_coarse, colors[index])
            grad = self.renderer.backward(
                result, 0.5 * d_coarse, 0.5 * d_fine, scratch, encoders=False
            )
            adam_step(
                {"appearance": vector},
                {"appearance": grad.astype(np.float64)},
                state,
                settings.appearance_lr,
            )
        return vector

    def evaluate_view(self, camera: Camera, image: np.ndarray) -> tuple[np.ndarray, ImageMetrics]:
        half = camera.width // 2
        if camera.split == "train":
            render = self.render_camera(camera, app_id=camera.appearance_id)
            scored, truth = render, image
        elif self.config.eval.appearance == "optimize-left-half":
            render = self.render_camera(camera, appearance=self.optimize_appearance(camera, image))
            scored, truth = render[:, half:], image[:, half:]
        else:
            render = self.render_camera(camera)
            scored, truth = render, image
        return render, ImageMetrics(camera.image, camera.split, psnr(scored, truth), ssim(scored, truth))

    def evaluate(self, dataset: SceneDataset, split: str, output_dir: Path) -> list[ImageMetrics]:
        """Render every view of a split; write PNGs and a metrics CSV with a mean row."""
        indices = dataset.indices(split)
        if not indices:
            raise ValueError(f"dataset has no {split} images")
        renders_dir = Path(output_dir) / "renders"
        renders_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for index in indices:
            camera, image = dataset.cameras[index], dataset.images[index]
            render, row = self.evaluate_view(camera, image)
            save_png(render, renders_dir / camera.image)
            rows.append(row)
            logger.info(f"{camera.image}: PSNR {row.psnr:.2f} dB, SSIM {row.ssim:.4f}")
        write_metrics_csv(rows, Path(output_dir) / "metrics.csv")
        return rows


def mean_row(rows: list[ImageMetrics]) -> ImageMetrics:
    return ImageMetrics(
        image="mean",
        split=rows[0].split if rows else "",
        psnr=float(np.mean([r.psnr for r in rows])),
        ssim=float(np.mean([r.ssim for r in rows])),
    )


def write_metrics_csv(rows: list[ImageMetrics], path: Path) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["image", "split", "psnr", "ssim"])
        writer.writeheader()
        for row in [*rows, mean_row(rows)]:
            writer.writerow(asdict(row))
    logger.info(f"Metrics written to {path}")
    return path


def run_ablation(
    config: RunConfig,
    dataset: SceneDataset,
    kinds: list[str],
    seeds: list[int],
    output_dir: Path,
) -> Path:
    """Train and test every (encoder kind, seed) pair with the same budget."""
    output_dir = Path(output_dir)
    records = []
    for kind in kinds:
        scores = []
        for seed in seeds:
            snapshot = config.snapshot()
            snapshot["encoding"]["kind"] = kind
            snapshot["optim"]["seed"] = seed
            run_config = RunConfig.model_validate(snapshot)
            run_dir = output_dir / kind / f"seed_{seed}"
            trainer = Trainer(run_config, dataset, run_dir)
            trainer.train()
            evaluator = Evaluator(trainer.model, dataset.bounds, run_config)
            summary = mean_row(evaluator.evaluate(dataset, "test", run_dir / "eval_test"))
            scores.append(summary)
            records.append({"kind": kind, "seed": seed, "psnr": summary.psnr, "ssim": summary.ssim})
        records.append(
            {
                "kind": kind,
                "seed": "median",
                "psnr": statistics.median(s.psnr for s in scores),
                "ssim": statistics.median(s.ssim for s in scores),
            }
        )
        logger.info(f"Ablation {kind}: median test PSNR {records[-1]['psnr']:.2f} dB")

    path = output_dir / "ablation.csv"
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["kind", "seed", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(records)
    return path
