import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional

from src.checkpoint import check_compatible, load_checkpoint, restore_model
from src.config import PRESETS, RunConfig, get_settings, resolve_config
from src.data import SceneDataset, look_at_camera, save_png
from src.engine import Evaluator, Trainer, mean_row, run_ablation
from src.errors import TrainingDiverged
from src.field import parameter_breakdown
from src.gradcheck import run_gradcheck
from src.synthetic import generate_synthetic, load_synthetic_spec

logger = logging.getLogger("HybridCLI")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3

DEFAULT_SCENE = Path("scenes/desk-small.toml")

ENCODER_ALIASES = {
    "hybrid": "hybrid",
    "hash": "hash",
    "hash-only": "hash",
    "plane": "plane",
    "plane-only": "plane",
    "dense": "dense",
    "dense-grid": "dense",
    "hash+dense": "hash+dense",
    "hash-dense": "hash+dense",
}


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("run configuration")
    group.add_argument("--preset", choices=sorted(PRESETS), help="Preset to start from")
    group.add_argument("--config", type=Path, help="TOML config or JSON run snapshot")
    group.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable)",
    )
    group.add_argument("--iterations", type=int)
    group.add_argument("--batch-rays", type=int)
    group.add_argument("--lr", type=float, help="Adam learning rate")
    group.add_argument("--seed", type=int, help="Training seed (synth: scene seed)")
    group.add_argument("--encoder", choices=sorted(ENCODER_ALIASES), help="Foreground encoder")
    group.add_argument("--threads", type=int, help="Worker threads per batch")
    group.add_argument("--dtype", choices=["float32", "float64"])
    group.add_argument("--verbose", action="store_true", help="Debug logging")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(
        prog="hybridnerf", description="Hybrid grid + plane radiance fields"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[parent], help="Render a synthetic dataset")
    synth.add_argument("--spec", type=Path, default=DEFAULT_SCENE, help="Scene spec (TOML/JSON)")
    synth.add_argument("--out", type=Path, help="Dataset directory")

    train = sub.add_parser("train", parents=[parent], help="Train a radiance field")
    train.add_argument("--dataset", type=Path, help="Dataset directory (manifest.json)")
    train.add_argument("--synthetic-spec", type=Path, help="Generate the dataset from a spec")
    train.add_argument("--out", type=Path, help="Run directory")
    train.add_argument("--resume", type=Path, help="Checkpoint to continue from")

    evaluate = sub.add_parser("eval", parents=[parent], help="Score a checkpoint on a split")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--dataset", type=Path, required=True)
    evaluate.add_argument("--split", choices=["train", "test"])
    evaluate.add_argument("--appearance", choices=["mean", "optimize-left-half"])
    evaluate.add_argument("--out", type=Path)

    render = sub.add_parser("render", parents=[parent], help="Render one novel view")
    render.add_argument("--checkpoint", type=Path, required=True)
    render.add_argument("--position", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    render.add_argument(
        "--look-at", type=float, nargs=3, default=[0.0, 0.0, 0.0], metavar=("X", "Y", "Z")
    )
    render.add_argument("--width", type=int, default=96)
    render.add_argument("--height", type=int, default=96)
    render.add_argument("--fov", type=float, default=60.0, help="Horizontal field of view")
    render.add_argument("--app-id", type=int, help="Training embedding (default: mean)")
    render.add_argument("--out", type=Path, default=Path("render.png"))

    gradcheck = sub.add_parser("gradcheck", parents=[parent], help="Finite-difference checks")
    gradcheck.add_argument("--corrupt", help=argparse.SUPPRESS)

    params = sub.add_parser("params", parents=[parent], help="Parameter count breakdown")
    params.add_argument("--num-images", type=int, default=0, help="Training images (embeddings)")

    ablate = sub.add_parser("ablate", parents=[parent], help="Compare encoders over seeds")
    ablate.add_argument("--dataset", type=Path)
    ablate.add_argument("--synthetic-spec", type=Path)
    ablate.add_argument("--kinds", default="hybrid,hash", help="Comma-separated encoder kinds")
    ablate.add_argument("--seeds", default="0,1,2", help="Comma-separated seeds")
    ablate.add_argument("--out", type=Path)
    return parser


def _flags(args: argparse.Namespace) -> dict[str, Any]:
    """Explicit CLI flags as a nested config update."""
    flags: dict[str, Any] = {"optim": {}, "encoding": {}, "eval": {}}
    for attr, key in (
        ("iterations", "iterations"),
        ("batch_rays", "batch_rays"),
        ("lr", "learning_rate"),
        ("seed", "seed"),
        ("threads", "threads"),
        ("dtype", "dtype"),
    ):
        if getattr(args, attr, None) is not None:
            flags["optim"][key] = getattr(args, attr)
    if getattr(args, "encoder", None):
        flags["encoding"]["kind"] = ENCODER_ALIASES[args.encoder]
    for attr in ("split", "appearance"):
        if getattr(args, attr, None):
            flags["eval"][attr] = getattr(args, attr)
    for attr in ("dataset", "synthetic_spec"):
        if getattr(args, attr, None) is not None:
            flags[attr] = str(getattr(args, attr))
    return {k: v for k, v in flags.items() if v != {}}


def resolve(args: argparse.Namespace, default_preset: str = "paper-default") -> RunConfig:
    return resolve_config(
        preset=args.preset or default_preset,
        config_file=args.config,
        overrides=args.overrides,
        flags=_flags(args),
    )


def _shapes_model(args: argparse.Namespace) -> bool:
    return bool(args.preset or args.config or args.encoder or args.overrides)


def load_dataset(config: RunConfig) -> SceneDataset:
    """The run's images; a synthetic scene keeps its own seed so --seed only varies training."""
    if config.dataset is not None:
        return SceneDataset.load(config.dataset)
    if config.synthetic_spec is not None:
        return generate_synthetic(load_synthetic_spec(config.synthetic_spec))
    raise ValueError("give --dataset or --synthetic-spec")


def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_synthetic_spec(args.spec, args.seed)
    out = args.out or get_settings().output_root / "datasets" / args.spec.stem
    dataset = generate_synthetic(spec)
    dataset.save(out)
    print(
        f"{len(dataset.cameras)} views at {spec.width}x{spec.height}: "
        f"{dataset.num_train} train / {len(dataset.indices('test'))} test -> {out}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve(args)
    out = args.out or config.output_dir or get_settings().output_root / "train"
    dataset = load_dataset(config)
    summary = Trainer(config, dataset, out).train(resume=args.resume)
    print(
        f"trained {summary.steps} steps, final loss {summary.final_loss}, "
        f"checkpoint {summary.checkpoint}"
    )
    return EXIT_OK


def _checkpoint_config(args: argparse.Namespace, checkpoint) -> RunConfig:
    """The checkpoint's own config, with this command's eval and optim flags applied."""
    if _shapes_model(args):
        requested = resolve(args)
        check_compatible(checkpoint, requested)
        return requested
    snapshot = checkpoint.config.snapshot()
    for section, values in _flags(args).items():
        if isinstance(values, dict):
            snapshot.setdefault(section, {}).update(values)
    return RunConfig.model_validate(snapshot)


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = _checkpoint_config(args, checkpoint)
    dataset = SceneDataset.load(args.dataset)
    evaluator = Evaluator(restore_model(checkpoint), checkpoint.bounds, config)
    split = config.eval.split
    out = args.out or args.checkpoint.parent.parent / f"eval_{split}"
    rows = evaluator.evaluate(dataset, split, out)
    mean = mean_row(rows)
    print(f"{split}: mean PSNR {mean.psnr:.2f} dB, SSIM {mean.ssim:.4f} over {len(rows)} images")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = _checkpoint_config(args, checkpoint)
    evaluator = Evaluator(restore_model(checkpoint), checkpoint.bounds, config)
    camera = look_at_camera(args.position, args.look_at, args.width, args.height, args.fov)
    image = evaluator.render_camera(camera, app_id=args.app_id)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_png(image, args.out)
    print(f"rendered {args.width}x{args.height} view -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = resolve(args, default_preset="micro-gradcheck")
    report = run_gradcheck(config, corrupt=args.corrupt)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_params(args: argparse.Namespace) -> int:
    config = resolve(args)
    terms = parameter_breakdown(config.encoding, config.field, args.num_images)
    for name, count in terms.items():
        print(f"{name:<20} {count:>14,}")
    if config.encoding.kind in ("hybrid", "hash", "hash+dense"):
        print(f"{'hash grid L*T*F':<20} {config.encoding.hash_grid.param_bound():>14,}  (bound)")
    if config.encoding.kind in ("hybrid", "plane"):
        print(f"{'planes 3*F*sum N^2':<20} {config.encoding.planes.param_bound():>14,}  (bound)")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve(args)
    kinds = [ENCODER_ALIASES[k.strip()] for k in args.kinds.split(",") if k.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = args.out or get_settings().output_root / "ablation"
    path = run_ablation(config, load_dataset(config), kinds, seeds, out)
    print(f"ablation results -> {path}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "ablate": cmd_ablate,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        force=True,
    )
    settings = get_settings()
    logger.info(
        f"hybridnerf {settings.version} {args.command} - root seed "
        f"{args.seed if args.seed is not None else 'from config'}, output root {settings.output_root}"
    )
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as e:
        logger.error(f"Training diverged: {e}")
        return EXIT_RUNTIME
    except (KeyError, ValueError) as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_VALIDATION
    except (RuntimeError, OSError) as e:
        logger.error(f"Run failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
