"""
Command-line entry point.

    python main.py generate-data --equation burgers --out data/burgers
    python main.py train-autoencoder --data data/burgers --out runs/ae
    python main.py train-refiner --data data/burgers --ckpt runs/ae/autoencoder --out runs/ref
    python main.py evaluate --data data/burgers --ckpt runs/ref/refiner --out results/

Every command writes ``run_manifest.json`` into its output directory. Failures
derived from ``AromaLabError`` print a JSON payload on stderr and exit 1; anything
else is reported the same way with code ``internal_error``.
"""

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .config import SEED_ENV_VAR, load_config, load_solver_config, resolve_seed
from .dataio import TrajectoryDataset, read_dataset
from .errors import AromaLabError, ConfigError, DependencyError

logger = logging.getLogger(__name__)

COMMANDS = (
    "generate-data",
    "train-autoencoder",
    "train-refiner",
    "rollout",
    "evaluate",
    "analyze",
    "plot",
)


class RunManifest(BaseModel):
    """Everything needed to re-run a command."""

    command: str = Field(description="Subcommand name")
    argv: List[str] = Field(description="Full argument vector")
    config: Dict[str, Any] = Field(default_factory=dict, description="Config echo")
    seeds: Dict[str, int] = Field(default_factory=dict)
    git_describe: str = Field(default="unknown", description="Source revision")
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    started_at: str = ""
    wall_seconds: float = 0.0

    def write(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tmp = out_dir / "run_manifest.json.tmp"
        tmp.write_text(self.model_dump_json(indent=2))
        target = out_dir / "run_manifest.json"
        os.replace(tmp, target)
        return target


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


# ============================================================
# Helpers
# ============================================================


def _load_data(path: Optional[str]) -> TrajectoryDataset:
    if path is None:
        raise DependencyError("--data is required for this command")
    if not Path(path, "manifest.json").exists():
        raise DependencyError(f"No dataset found at {path}", path=str(path))
    return read_dataset(path)


def _require_ckpt(path: Optional[str]) -> Path:
    if path is None or not Path(path, "manifest.json").exists():
        raise DependencyError(f"No checkpoint archive at {path}", path=str(path))
    return Path(path)


def _eval_split(dataset: TrajectoryDataset, split: str) -> TrajectoryDataset:
    if split in dataset.manifest.get("splits", {}):
        return dataset.split(split)
    logger.warning("Dataset has no '%s' split; using all trajectories", split)
    return dataset


def _check_selection(dataset: TrajectoryDataset, item: int, t0: int) -> None:
    if not 0 <= item < dataset.n_trajectories:
        raise ConfigError(
            f"--item {item} out of range", n_trajectories=dataset.n_trajectories
        )
    if not 0 <= t0 < dataset.n_time:
        raise ConfigError(f"--t0 {t0} out of range", n_time=dataset.n_time)


def _experiment(args) -> Any:
    config = load_config(args.config, args.set, full_scale=args.full_scale)
    for section in ("train_autoencoder", "train_refiner"):
        stage = getattr(config, section)
        seed = resolve_seed(args.seed, stage.seed)
        setattr(config, section, stage.model_copy(update={"seed": seed}))
    return config


# ============================================================
# Commands
# ============================================================


def cmd_generate_data(args, manifest: RunManifest) -> None:
    from .datagen import generate_dataset

    config = load_solver_config(args.equation, args.config, args.set)
    config = config.model_copy(update={"seed": resolve_seed(args.seed, config.seed)})
    manifest.config = config.model_dump()
    manifest.seeds = {"seed": config.seed, "grid_seed": config.grid_seed}

    print(f"Generating {config.n_train} train + {config.n_test} test {args.equation} trajectories")
    dataset = generate_dataset(config)
    path = dataset.save(args.out)
    manifest.outputs = {"dataset": str(path)}
    print(f"Dataset written to {path} (u shape {dataset.u.shape})")


def cmd_train_autoencoder(args, manifest: RunManifest) -> None:
    from .training import train_autoencoder

    dataset = _load_data(args.data)
    config = _experiment(args)
    manifest.config = config.model_dump()
    manifest.seeds = {"train_autoencoder": config.train_autoencoder.seed}
    manifest.inputs = {"data": args.data}

    result = train_autoencoder(dataset, config, args.out, progress=not args.quiet)
    manifest.outputs = {
        "checkpoint": str(result.archive_dir),
        "loss_curve": str(Path(args.out) / "loss_autoencoder.csv"),
    }


def cmd_train_refiner(args, manifest: RunManifest) -> None:
    from .training import train_refiner

    dataset = _load_data(args.data)
    ckpt = _require_ckpt(args.ckpt)
    config = _experiment(args)
    manifest.config = config.model_dump()
    manifest.seeds = {"train_refiner": config.train_refiner.seed}
    manifest.inputs = {"data": args.data, "ckpt": str(ckpt)}

    result = train_refiner(dataset, ckpt, config, args.out, progress=not args.quiet)
    manifest.outputs = {
        "checkpoint": str(result.archive_dir),
        "loss_curve": str(Path(args.out) / "loss_refiner.csv"),
    }


def cmd_rollout(args, manifest: RunManifest) -> None:
    from evaluation.plots import plot_field, plot_uncertainty
    from evaluation.rollout import ensemble_uncertainty, load_pipeline, rollout

    dataset = _eval_split(_load_data(args.data), args.split)
    _check_selection(dataset, args.item, args.t0)
    pipeline = load_pipeline(_require_ckpt(args.ckpt))
    seed = resolve_seed(args.seed, 0)
    manifest.seeds = {"rollout": seed}
    manifest.inputs = {"data": args.data, "ckpt": args.ckpt}
    out = Path(args.out)

    coords = dataset.coords[args.item]
    truth = dataset.u[args.item, args.t0 : args.t0 + args.steps + 1]
    result = rollout(
        pipeline, coords, truth[0], args.steps, mode=args.mode, seed=seed, progress=not args.quiet
    )
    pred = result.fields[0]
    n_saved = min(len(pred), len(truth))
    t, point, channel = np.meshgrid(
        np.arange(n_saved), np.arange(pred.shape[1]), np.arange(pred.shape[2]), indexing="ij"
    )
    frame = pd.DataFrame(
        {
            "step": t.ravel(),
            "point": point.ravel(),
            "channel": channel.ravel(),
            "prediction": pred[:n_saved].ravel(),
            "reference": truth[:n_saved].ravel(),
        }
    )
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "rollout.csv", index=False)
    plot_field(
        coords,
        pred[n_saved - 1],
        out / "rollout_last.png",
        title=f"step {n_saved - 1}",
        reference=truth[n_saved - 1],
    )
    manifest.outputs = {"rollout": str(out / "rollout.csv")}
    if result.truncated:
        print(f"Rollout truncated after {result.completed_steps} steps (non-finite latents)")

    if args.n_samples > 1:
        ens = ensemble_uncertainty(pipeline, coords, truth[0], args.steps, args.n_samples, seed)
        std_curve = ens.std[0].reshape(ens.std.shape[1], -1).mean(axis=1)
        pd.DataFrame({"step": np.arange(len(std_curve)), "mean_std": std_curve}).to_csv(
            out / "uncertainty.csv", index=False
        )
        if coords.shape[1] == 1:
            last = min(ens.mean.shape[1], len(truth)) - 1
            plot_uncertainty(
                coords,
                ens.mean[0, last],
                ens.std[0, last],
                out / "uncertainty.png",
                truth=truth[last],
                title=f"step {last}",
            )
        manifest.outputs["uncertainty"] = str(out / "uncertainty.csv")
    print(f"Rollout of {result.completed_steps} steps written to {out}")


def cmd_evaluate(args, manifest: RunManifest) -> None:
    from evaluation import SurrogateEvaluator
    from evaluation.plots import plot_correlation
    from evaluation.rollout import load_pipeline

    dataset = _eval_split(_load_data(args.data), args.split)
    pipeline = load_pipeline(_require_ckpt(args.ckpt))
    seed = resolve_seed(args.seed, 0)
    manifest.seeds = {"evaluate": seed}
    manifest.inputs = {"data": args.data, "ckpt": args.ckpt}

    evaluator = SurrogateEvaluator(
        pipeline,
        dataset,
        t0=args.t0,
        n_steps=args.steps,
        window=args.window,
        boundary=args.boundary,
        normalized_mse=args.normalized_mse,
        seed=seed,
    )
    results = evaluator.evaluate_dataset()
    report = evaluator.generate_report(results, model_name=args.ckpt)
    print(report)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = evaluator.summary(results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "report.txt").write_text(report)
    evaluator.to_frame(results).to_csv(out / "metrics.csv", index=False)
    curve = evaluator.correlation_curve()
    pd.DataFrame({"step": np.arange(len(curve)), "correlation": curve}).to_csv(
        out / "correlation.csv", index=False
    )
    if len(curve):
        plot_correlation({pipeline.mode or "reconstruction": curve}, out / "correlation.png")
    manifest.outputs = {"summary": str(out / "summary.json"), "metrics": str(out / "metrics.csv")}
    print(f"Summary saved to {out / 'summary.json'}")


def cmd_analyze(args, manifest: RunManifest) -> None:
    from evaluation import analysis, plots
    from evaluation.metrics import energy_spectrum
    from evaluation.rollout import load_pipeline, rollout

    pipeline = load_pipeline(_require_ckpt(args.ckpt))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = resolve_seed(args.seed, 0)
    manifest.seeds = {"analyze": seed}
    manifest.inputs = {"ckpt": args.ckpt, "data": args.data or ""}
    tokens = args.tokens

    if args.kind == "complexity":
        sizes = args.sizes or [256, 512, 1024, 2048]
        frame = analysis.encode_cost(pipeline.autoencoder, sizes, n_queries=args.queries)
        cfg = pipeline.autoencoder.config
        refiner_depth = pipeline.refiner.config.depth if pipeline.refiner else 0
        steps = pipeline.refiner.config.denoising_steps if pipeline.refiner else 0
        frame["analytic_cost"] = [
            analysis.complexity_estimate(
                n,
                cfg.num_latents,
                args.steps,
                steps,
                cfg.num_self_attentions,
                refiner_depth,
                cfg.hidden_dim,
            )
            for n in frame["n_points"]
        ]
        frame.to_csv(out / "complexity.csv", index=False)
        print(frame.to_string(index=False))
        ratios = frame["scaling_ratio"].dropna()
        if len(ratios):
            print(f"Worst encode scaling ratio {ratios.max():.2f} (1.0 is linear in N)")
        manifest.outputs = {"complexity": str(out / "complexity.csv")}
        return

    dataset = _eval_split(_load_data(args.data), args.split)
    _check_selection(dataset, args.item, args.t0)
    coords = dataset.coords[args.item]
    trajectory = dataset.u[args.item]

    if args.kind == "attention":
        maps = analysis.attention_maps(
            pipeline, coords, trajectory[args.t0], args.stage, tokens=tokens, head=args.head
        )
        entropy = analysis.attention_entropy(maps)
        rows = tokens if tokens is not None else list(range(len(maps)))
        pd.DataFrame(maps, index=rows).to_csv(out / f"attention_{args.stage}.csv")
        pd.DataFrame({"token": rows, "entropy": entropy}).to_csv(
            out / f"attention_{args.stage}_entropy.csv", index=False
        )
        plots.plot_attention(
            coords, maps[:8], out / f"attention_{args.stage}.png", title=args.stage
        )
        manifest.outputs = {"attention": str(out / f"attention_{args.stage}.csv")}

    elif args.kind == "perturbation":
        records = []
        for token in tokens or range(pipeline.autoencoder.config.num_latents):
            result = analysis.token_perturbation(pipeline, coords, trajectory, token)
            records.append({"token": token, "locality": result.locality})
            plots.plot_attention(
                coords,
                np.stack([result.attention_mass, np.sqrt((result.delta**2).sum(axis=(0, 2)))]),
                out / f"perturbation_token{token}.png",
                title=f"token {token}: attention mass / perturbation energy",
            )
        frame = pd.DataFrame(records)
        frame.to_csv(out / "perturbation.csv", index=False)
        print(frame.to_string(index=False))
        manifest.outputs = {"perturbation": str(out / "perturbation.csv")}

    elif args.kind == "latents":
        predicted = None
        if pipeline.refiner is not None:
            n_steps = dataset.n_time - 1
            result = rollout(pipeline, coords, trajectory[0], n_steps, seed=seed)
            predicted = result.latents[0]
        frame = analysis.latent_dump(pipeline, coords, trajectory, predicted=predicted)
        frame.to_csv(out / "latents.csv", index=False)
        for column in ("mu", "logsigma") + (("predicted",) if predicted is not None else ()):
            plots.plot_latent_series(frame, out / f"latents_{column}.png", column=column)
        flagged = frame[frame["uninformative"]][["token", "channel"]].drop_duplicates()
        print(f"{len(flagged)} (token, channel) pairs flagged as uninformative")
        manifest.outputs = {"latents": str(out / "latents.csv")}

    elif args.kind == "spectrum":
        grid = dataset.manifest.get("grid", {})
        if grid.get("keep_fraction", 1.0) != 1.0:
            raise ConfigError("Spectra need data on the full regular grid")
        side = int(round(dataset.n_points ** (1 / dataset.spatial_dim)))
        shape = (side,) * dataset.spatial_dim
        n_steps = min(args.steps, dataset.n_time - 1 - args.t0)
        result = rollout(pipeline, coords, trajectory[args.t0], n_steps, seed=seed)
        last = result.completed_steps
        spectra = {
            "prediction": energy_spectrum(result.fields[0, last, :, 0], shape),
            "reference": energy_spectrum(trajectory[args.t0 + last, :, 0], shape),
        }
        pd.DataFrame(
            {
                "k": spectra["prediction"][0],
                "prediction": spectra["prediction"][1],
                "reference": spectra["reference"][1],
            }
        ).to_csv(out / "spectrum.csv", index=False)
        plots.plot_spectrum(spectra, out / "spectrum.png")
        manifest.outputs = {"spectrum": str(out / "spectrum.csv")}


def cmd_plot(args, manifest: RunManifest) -> None:
    from evaluation import plots

    source = Path(args.input)
    if not source.exists():
        raise DependencyError(f"No CSV at {source}", path=str(source))
    frame = pd.read_csv(source)
    out = Path(args.out)
    manifest.inputs = {"input": str(source)}
    if args.kind == "loss":
        path = plots.plot_loss_curves(frame, out / f"{source.stem}.png", title=source.stem)
    elif args.kind == "correlation":
        curves = {source.stem: frame["correlation"].to_numpy()}
        path = plots.plot_correlation(curves, out / f"{source.stem}.png")
    else:
        path = plots.plot_latent_series(frame, out / f"{source.stem}.png", column=args.column)
    manifest.outputs = {"figure": str(path)}
    print(f"Figure saved to {path}")


HANDLERS: Dict[str, Callable] = {
    "generate-data": cmd_generate_data,
    "train-autoencoder": cmd_train_autoencoder,
    "train-refiner": cmd_train_refiner,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "plot": cmd_plot,
}


# ============================================================
# Parser
# ============================================================


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config value, e.g. --set model.num_latents=64 (repeatable)",
    )
    common.add_argument("--out", required=True, help="Output directory")
    common.add_argument(
        "--seed", type=int, default=None, help=f"Global seed (falls back to ${SEED_ENV_VAR})"
    )
    common.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    common.add_argument("--quiet", action="store_true", help="Hide progress bars")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="Dataset directory")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--ckpt", help="Checkpoint archive directory")

    evaluation = argparse.ArgumentParser(add_help=False)
    evaluation.add_argument("--split", default="test", help="Dataset split to evaluate")
    evaluation.add_argument("--t0", type=int, default=0, help="Initial-condition frame")
    evaluation.add_argument("--steps", type=int, default=None, help="Rollout steps")

    parser = argparse.ArgumentParser(
        prog="aromalab", description="Latent-token surrogates for time-dependent PDEs"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", parents=[common], help="Simulate a dataset")
    gen.add_argument("--equation", required=True, choices=["burgers", "ns2d"])

    for name in ("train-autoencoder", "train-refiner"):
        train = sub.add_parser(name, parents=[common, data, ckpt], help=f"Run {name}")
        train.add_argument(
            "--full-scale",
            action="store_true",
            help="Full-length epochs (5000 autoencoder / 2000 refiner)",
        )

    roll = sub.add_parser(
        "rollout", parents=[common, data, ckpt, evaluation], help="Forecast one trajectory"
    )
    roll.add_argument("--item", type=int, default=0)
    roll.add_argument("--mode", choices=["diffusion", "deterministic", "mlp"], default=None)
    roll.add_argument("--n-samples", type=int, default=1, help="Ensemble size")

    ev = sub.add_parser(
        "evaluate", parents=[common, data, ckpt, evaluation], help="Score a checkpoint on a split"
    )
    ev.add_argument("--window", type=int, default=None, help="Evaluate sub-trajectory windows")
    ev.add_argument("--boundary", type=int, default=None, help="In-t / Out-t boundary frame")
    ev.add_argument("--normalized-mse", action="store_true")

    an = sub.add_parser(
        "analyze",
        parents=[common, data, ckpt, evaluation],
        help="Attention, perturbation, latent, spectrum or cost analysis",
    )
    an.add_argument(
        "--kind",
        required=True,
        choices=["attention", "perturbation", "latents", "complexity", "spectrum"],
    )
    an.add_argument(
        "--stage", default="observation", choices=["geometry", "prior", "observation", "decoder"]
    )
    an.add_argument("--item", type=int, default=0)
    an.add_argument("--head", type=int, default=None)
    an.add_argument("--tokens", type=int, nargs="*", default=None)
    an.add_argument("--sizes", type=int, nargs="*", default=None)
    an.add_argument("--queries", type=int, default=1024)

    pl = sub.add_parser("plot", parents=[common], help="Render a figure from a CSV")
    pl.add_argument("--input", required=True)
    pl.add_argument("--kind", required=True, choices=["loss", "correlation", "latents"])
    pl.add_argument("--column", default="mu")
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "steps", None) is None and args.command in ("rollout", "analyze"):
        args.steps = 50
    if not hasattr(args, "full_scale"):
        args.full_scale = False

    manifest = RunManifest(
        command=args.command,
        argv=argv,
        git_describe=git_describe(),
        started_at=datetime.now(timezone.utc).isoformat(),
    )
    start = time.perf_counter()
    try:
        HANDLERS[args.command](args, manifest)
    except AromaLabError as e:
        print(json.dumps(e.payload()), file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("Unhandled failure in %s", args.command)
        payload = {
            "error": type(e).__name__,
            "code": "internal_error",
            "message": str(e),
            "context": {"command": args.command},
        }
        print(json.dumps(payload), file=sys.stderr)
        return 1
    manifest.wall_seconds = time.perf_counter() - start
    manifest.write(args.out)
    return 0
