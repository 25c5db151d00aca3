"""
Command-line interface: ``kinalign gen | align | ablate | eval | config``.

Exit codes: 0 success, 1 unexpected failure (or every frame failed), 2 invalid
configuration or input, 3 file I/O failure, 130 interrupted.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from rich.box import ROUNDED  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn  # noqa: E402
from rich.table import Table  # noqa: E402
from tabulate import tabulate  # noqa: E402

from . import __version__  # noqa: E402
from .config import RunConfig, load_config, save_config  # noqa: E402
from .exceptions import ConfigError, IoError, KinalignError, ParseError, ValidationError  # noqa: E402
from .features import MeanBackground  # noqa: E402
from .geomcore import PinholeCamera, PointLight  # noqa: E402
from .kinematics import DHChain, JointConfig  # noqa: E402
from .metrics import (  # noqa: E402
    SUMMARY_HEADERS,
    EvalRecord,
    aggregate,
    dice,
    initial_dice_bins,
    joint_mae,
    prismatic_mae_mm,
    read_records_csv,
    summary_rows,
    summary_to_text,
    write_records_csv,
)
from .optimizer import KinematicState, ObservedFeatureCache, OptimizeSpec, align, segment  # noqa: E402
from .scenegen import (  # noqa: E402
    DomainSpec,
    Manifest,
    generate_dataset,
    load_manifest,
    perturb_joints,
    perturbation_seed,
)
from .utils import ensure_dir, save_png, setup_logging, write_json  # noqa: E402

logger = logging.getLogger("kinalign")
console = Console()

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_INTERRUPTED = 0, 1, 2, 3, 130
DEFAULT_CHECKPOINTS = (1, 10, 20, 30, 50, 100)
DEFAULT_ERRORS_DEG = (0.0, 1.0, 2.0, 3.0)


@dataclass
class FrameOutcome:
    """Result of one frame of a batch: a record on success, the error otherwise."""

    position: int
    frame_id: int
    record: Optional[EvalRecord] = None
    result: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"frame_id": self.frame_id, "ok": self.error is None}
        if self.error is not None:
            data["error"] = self.error
        if self.record is not None:
            data["metrics"] = self.record.__dict__.copy()
        if self.result is not None:
            data["alignment"] = self.result
        data.update(self.extra)
        return data


@dataclass
class BatchContext:
    """Everything a frame worker needs, loaded once per command."""

    manifest: Manifest
    chain: DHChain
    camera: PinholeCamera
    light: PointLight
    background: MeanBackground
    spec: OptimizeSpec
    cache: ObservedFeatureCache
    out_dir: str


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        TimeElapsedColumn(),
        console=console,
        transient=False,
    )


def run_frames(
    positions: Sequence[int],
    worker: Callable[[int], FrameOutcome],
    threads: int,
    description: str,
    quiet: bool = False,
) -> List[FrameOutcome]:
    """Run ``worker`` over frame positions on a thread pool; results come back in frame order."""
    outcomes: Dict[int, FrameOutcome] = {}
    with _progress() as progress:
        task = progress.add_task(f"[cyan]{description}", total=len(positions), visible=not quiet)
        with ThreadPoolExecutor(max_workers=threads) as executor:
            futures = {executor.submit(worker, position): position for position in positions}
            for future in as_completed(futures):
                outcome = future.result()
                outcomes[outcome.position] = outcome
                progress.update(task, advance=1)
    return [outcomes[p] for p in sorted(outcomes)]


def _guarded(worker: Callable[[int], FrameOutcome], manifest: Manifest) -> Callable[[int], FrameOutcome]:
    def run(position: int) -> FrameOutcome:
        frame_id = manifest.frames[position].index
        try:
            return worker(position)
        except KinalignError as e:
            logger.error(f"Frame {frame_id}: {type(e).__name__}: {e}")
            return FrameOutcome(position, frame_id, error=f"{type(e).__name__}: {e}")

    return run


def _load_batch(config: RunConfig, manifest_path: str, out_dir: str, **spec_overrides: Any) -> BatchContext:
    manifest = load_manifest(manifest_path)
    if not manifest.frames:
        raise ConfigError(f"manifest {manifest.path} lists no frames")
    camera = manifest.load_camera()
    return BatchContext(
        manifest=manifest,
        chain=manifest.load_chain(),
        camera=camera,
        light=manifest.load_light(),
        background=manifest.load_background(),
        spec=config.optimize_spec(camera, **spec_overrides),
        cache=ObservedFeatureCache(),
        out_dir=out_dir,
    )


def _state(ctx: BatchContext, joints: JointConfig) -> KinematicState:
    return KinematicState(ctx.chain, joints, ctx.camera, ctx.light)


def _record(
    frame_id: int,
    domain: str,
    gt: JointConfig,
    initial: JointConfig,
    final: JointConfig,
    dice_initial: float,
    dice_final: float,
    iterations: int,
    error_deg: float,
) -> EvalRecord:
    return EvalRecord(
        frame_id=frame_id,
        dice_initial=dice_initial,
        dice_final=dice_final,
        mae_initial_deg=joint_mae(initial, gt),
        mae_final_deg=joint_mae(final, gt),
        iterations=iterations,
        domain=domain,
        prismatic_initial_mm=prismatic_mae_mm(initial, gt),
        prismatic_final_mm=prismatic_mae_mm(final, gt),
        error_deg=error_deg,
    )


def _align_frame(ctx: BatchContext, position: int, no_optim: bool) -> FrameOutcome:
    frame = ctx.manifest.load_frame(position, ctx.chain)
    measured = _state(ctx, frame.measured_joints)
    initial_mask = segment(measured)
    dice_initial = dice(initial_mask, frame.gt_mask)
    mask_path = os.path.join("masks", f"{frame.index:06d}_mask.png")

    if no_optim:
        save_png(initial_mask, os.path.join(ctx.out_dir, mask_path))
        record = _record(
            frame.index, frame.domain.kind, frame.gt_joints, frame.measured_joints, frame.measured_joints,
            dice_initial, dice_initial, 0, ctx.manifest.error_deg,
        )
        return FrameOutcome(position, frame.index, record=record, extra={"mask": mask_path})

    result = align(
        measured, frame.observed_image, ctx.background, ctx.spec, cache=ctx.cache,
        observed_features=frame.observed_features,
    )
    save_png(result.mask, os.path.join(ctx.out_dir, mask_path))
    record = _record(
        frame.index, frame.domain.kind, frame.gt_joints, frame.measured_joints, result.best_state.joints,
        dice_initial, dice(result.mask, frame.gt_mask), result.iterations_run, ctx.manifest.error_deg,
    )
    logger.info(
        f"Frame {frame.index}: Dice {dice_initial:.3f} -> {record.dice_final:.3f}, "
        f"MAE {record.mae_initial_deg:.2f} -> {record.mae_final_deg:.2f} deg in {result.iterations_run} steps"
    )
    return FrameOutcome(position, frame.index, record=record, result=result.to_dict(mask_path))


def _print_summary(summary: Dict[str, Any], title: str) -> None:
    table = Table(title=title, box=ROUNDED)
    for i, header in enumerate(SUMMARY_HEADERS):
        table.add_column(header, style="cyan" if i == 0 else None)
    for row in summary_rows(summary):
        table.add_row(*row)
    console.print(table)


def _write_summary(records: List[EvalRecord], out_dir: str) -> Dict[str, Any]:
    summary = aggregate(records)
    write_json(summary, os.path.join(out_dir, "summary.json"))
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary_to_text(summary) + "\n")
    write_json(initial_dice_bins(records), os.path.join(out_dir, "initial_dice_bins.json"))
    return summary


def cmd_gen(
    config: RunConfig,
    n_frames: int,
    error_deg: float,
    domain: DomainSpec,
    seed: int,
    out_dir: str,
    quiet: bool = False,
) -> str:
    """Generate a dataset; returns the manifest path."""
    chain = config.build_chain()
    camera = config.build_camera()
    manifest = generate_dataset(
        chain,
        camera,
        config.build_light(),
        n_frames,
        error_deg,
        domain,
        seed,
        out_dir,
        render_config=config.build_renderer(),
        show_progress=not quiet,
    )
    return manifest.path


def cmd_align(
    config: RunConfig,
    manifest_path: str,
    out_dir: str,
    no_optim: bool = False,
    threads: Optional[int] = None,
    limit: Optional[int] = None,
    quiet: bool = False,
) -> Tuple[str, List[FrameOutcome]]:
    """Align (or just segment) every frame of a dataset; returns the results JSON path and outcomes."""
    ctx = _load_batch(config, manifest_path, out_dir)
    ensure_dir(os.path.join(out_dir, "masks"))
    positions = list(range(len(ctx.manifest.frames)))[:limit]
    worker = _guarded(lambda position: _align_frame(ctx, position, no_optim), ctx.manifest)
    label = "Segmenting" if no_optim else "Aligning"
    outcomes = run_frames(positions, worker, config.threads(threads), f"{label} {len(positions)} frames...", quiet)

    records = [o.record for o in outcomes if o.record is not None]
    results: Dict[str, Any] = {
        "manifest": ctx.manifest.path,
        "no_optim": no_optim,
        "frames": [o.to_dict() for o in outcomes],
    }
    if records:
        write_records_csv(records, os.path.join(out_dir, "records.csv"))
        results["summary"] = _write_summary(records, out_dir)
        if not quiet:
            _print_summary(results["summary"], "Segmentation w/o optimization" if no_optim else "Alignment summary")
    path = write_json(results, os.path.join(out_dir, "results.json"))
    return path, outcomes


def _best_before(history: List[Tuple[int, KinematicState, float]], checkpoint: int) -> KinematicState:
    candidates = [(loss, i, state) for i, state, loss in history if i <= checkpoint]
    return min(candidates, key=lambda c: (c[0], c[1]))[2]


def _iters_frame(ctx: BatchContext, position: int, checkpoints: Sequence[int]) -> FrameOutcome:
    frame = ctx.manifest.load_frame(position, ctx.chain)
    measured = _state(ctx, frame.measured_joints)
    history: List[Tuple[int, KinematicState, float]] = []
    result = align(
        measured, frame.observed_image, ctx.background, ctx.spec, cache=ctx.cache,
        on_iteration=lambda i, state, loss: history.append((i, state, loss)),
        observed_features=frame.observed_features,
    )
    dice_by_checkpoint = {str(k): dice(segment(_best_before(history, k)), frame.gt_mask) for k in checkpoints}
    record = _record(
        frame.index, frame.domain.kind, frame.gt_joints, frame.measured_joints, result.best_state.joints,
        dice(segment(measured), frame.gt_mask), dice(result.mask, frame.gt_mask), result.iterations_run,
        ctx.manifest.error_deg,
    )
    return FrameOutcome(position, frame.index, record=record, extra={"checkpoints": dice_by_checkpoint})


def _error_frame(ctx: BatchContext, position: int, magnitudes: Sequence[float]) -> FrameOutcome:
    frame = ctx.manifest.load_frame(position, ctx.chain)
    per_magnitude = {}
    records = []
    for magnitude in magnitudes:
        measured_joints = perturb_joints(frame.gt_joints, magnitude, perturbation_seed(ctx.manifest.seed, frame.index))
        measured = _state(ctx, measured_joints)
        result = align(
            measured, frame.observed_image, ctx.background, ctx.spec, cache=ctx.cache,
            observed_features=frame.observed_features,
        )
        record = _record(
            frame.index, frame.domain.kind, frame.gt_joints, measured_joints, result.best_state.joints,
            dice(segment(measured), frame.gt_mask), dice(result.mask, frame.gt_mask), result.iterations_run, magnitude,
        )
        records.append(record)
        per_magnitude[f"{magnitude:g}"] = record.__dict__.copy()
    return FrameOutcome(position, frame.index, extra={"by_error": per_magnitude, "_records": records})


def _scatter(records: List[EvalRecord], path: str, group: str) -> str:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    groups = sorted({getattr(r, group) for r in records})
    for value in groups:
        subset = [r for r in records if getattr(r, group) == value]
        label = f"{value:g} deg" if isinstance(value, float) else str(value)
        axes[0].scatter([r.dice_initial for r in subset], [r.dice_final for r in subset], s=12, label=label)
        axes[1].scatter([r.dice_initial for r in subset], [r.mae_final_deg for r in subset], s=12, label=label)
    axes[0].set_xlabel("Initial Dice")
    axes[0].set_ylabel("Optimized Dice")
    axes[1].set_xlabel("Initial Dice")
    axes[1].set_ylabel("Optimized joint MAE (deg)")
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    try:
        fig.savefig(path, dpi=120)
    except OSError as e:
        raise IoError(f"cannot write plot {path}: {e}") from e
    finally:
        plt.close(fig)
    return path


def cmd_ablate(
    config: RunConfig,
    manifest_path: str,
    sweep: str,
    out_dir: str,
    threads: Optional[int] = None,
    limit: Optional[int] = None,
    checkpoints: Sequence[int] = DEFAULT_CHECKPOINTS,
    magnitudes: Sequence[float] = DEFAULT_ERRORS_DEG,
    quiet: bool = False,
) -> Tuple[str, List[List[str]]]:
    """Iteration-count or kinematic-error sweep; returns the table path and its rows."""
    if sweep not in ("iters", "error"):
        raise ConfigError(f"sweep: expected 'iters' or 'error', got {sweep!r}")
    overrides = {"max_iters": max(checkpoints)} if sweep == "iters" else {}
    ctx = _load_batch(config, manifest_path, out_dir, **overrides)
    positions = list(range(len(ctx.manifest.frames)))[:limit]
    threads = config.threads(threads)

    if sweep == "iters":
        worker = _guarded(lambda position: _iters_frame(ctx, position, checkpoints), ctx.manifest)
        outcomes = run_frames(positions, worker, threads, f"Iteration sweep over {len(positions)} frames...", quiet)
        ok = [o for o in outcomes if o.error is None]
        headers = ["Domain"] + [str(k) for k in checkpoints]
        row = [ctx.manifest.domain.kind]
        for k in checkpoints:
            values = np.array([o.extra["checkpoints"][str(k)] for o in ok]) * 100.0
            row.append(f"{values.mean():.1f} ± {values.std():.1f}" if values.size else "n/a")
        rows = [row]
        records = [o.record for o in ok]
        group = "domain"
    else:
        worker = _guarded(lambda position: _error_frame(ctx, position, magnitudes), ctx.manifest)
        outcomes = run_frames(positions, worker, threads, f"Error sweep over {len(positions)} frames...", quiet)
        ok = [o for o in outcomes if o.error is None]
        records = [r for o in ok for r in o.extra.pop("_records")]
        headers = ["Error (deg)", "Dice initial", "Dice final", "MAE initial (deg)", "MAE final (deg)"]
        rows = []
        for magnitude in magnitudes:
            subset = [r for r in records if r.error_deg == magnitude]
            if not subset:
                rows.append([f"{magnitude:g}", "n/a", "n/a", "n/a", "n/a"])
                continue
            d0 = np.array([r.dice_initial for r in subset]) * 100.0
            d1 = np.array([r.dice_final for r in subset]) * 100.0
            m0 = np.array([r.mae_initial_deg for r in subset])
            m1 = np.array([r.mae_final_deg for r in subset])
            rows.append(
                [
                    f"{magnitude:g}",
                    f"{d0.mean():.1f} ± {d0.std():.1f}",
                    f"{d1.mean():.1f} ± {d1.std():.1f}",
                    f"{m0.mean():.2f} ± {m0.std():.2f}",
                    f"{m1.mean():.2f} ± {m1.std():.2f}",
                ]
            )
        group = "error_deg"

    if not ok:
        raise KinalignError(f"every frame of the {sweep} sweep failed")
    write_records_csv(records, os.path.join(out_dir, f"ablate_{sweep}_records.csv"))
    write_json(
        {"sweep": sweep, "headers": headers, "rows": rows, "frames": [o.to_dict() for o in outcomes]},
        os.path.join(out_dir, f"ablate_{sweep}.json"),
    )
    table_path = os.path.join(out_dir, f"ablate_{sweep}.txt")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(tabulate(rows, headers=headers, tablefmt="github") + "\n")
    _scatter(records, os.path.join(out_dir, f"ablate_{sweep}_scatter.png"), group)

    if not quiet:
        table = Table(title=f"Ablation: {sweep}", box=ROUNDED)
        for header in headers:
            table.add_column(header)
        for row in rows:
            table.add_row(*row)
        console.print(table)
    return table_path, rows


def cmd_eval(results_csv: str, out_dir: str, quiet: bool = False) -> Dict[str, Any]:
    """Re-aggregate a per-frame CSV into summary JSON / text and initial-Dice bins."""
    records = read_records_csv(results_csv)
    summary = _write_summary(records, out_dir)
    if not quiet:
        _print_summary(summary, "Evaluation summary")
    return summary


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to a JSON run configuration (defaults apply when omitted)")
    common.add_argument("--out-dir", help="Output directory")
    common.add_argument("--threads", type=int, help="Worker threads (overrides KINALIGN_THREADS)")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    common.add_argument("--verbose", action="store_true", help="Log per-iteration details")
    return common


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="kinalign",
        description="Correct robot kinematics and segment the tool by aligning a rendered model with images",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate a synthetic dataset")
    gen.add_argument("--domain", default="regular", help="regular, low_brightness, smoke, blood or background_change")
    gen.add_argument("--frames", type=int, default=300, help="Number of frames (default: 300)")
    gen.add_argument("--error-deg", type=float, default=1.0, help="Uniform joint perturbation bound in degrees")
    gen.add_argument("--seed", type=int, default=0, help="Dataset seed (same seed replays the same kinematics)")
    gen.add_argument("--brightness", type=float, help="Brightness scale for low_brightness")
    gen.add_argument("--smoke-opacity", type=float, help="Smoke opacity for smoke")
    gen.add_argument("--background-id", help="Alternate background id or PNG path for background_change")

    align_p = sub.add_parser("align", parents=[common], help="Align every frame of a dataset")
    align_p.add_argument("--manifest", required=True, help="Dataset manifest.json (or its directory)")
    align_p.add_argument("--no-optim", action="store_true", help="Segment from the measured kinematics only")
    align_p.add_argument("--limit", type=int, help="Only process the first N frames")

    ablate = sub.add_parser("ablate", parents=[common], help="Iteration-count or kinematic-error sweep")
    ablate.add_argument("--manifest", required=True, help="Dataset manifest.json (or its directory)")
    ablate.add_argument("--sweep", choices=["iters", "error"], required=True)
    ablate.add_argument("--limit", type=int, help="Only process the first N frames")

    evaluate = sub.add_parser("eval", parents=[common], help="Aggregate a per-frame records CSV")
    evaluate.add_argument("--results", required=True, help="records.csv written by align or ablate")

    config = sub.add_parser("config", parents=[common], help="Show the effective configuration")
    config.add_argument("--emit", action="store_true", help="Print the effective configuration as JSON")
    return parser.parse_args(argv)


_DEFAULT_OUT = {
    "gen": "kinalign_data",
    "align": "kinalign_results",
    "ablate": "kinalign_ablation",
    "eval": "kinalign_eval",
}


def _domain_from_args(args: argparse.Namespace) -> DomainSpec:
    overrides: Dict[str, Any] = {"seed": args.seed}
    if args.brightness is not None:
        overrides["brightness_scale"] = args.brightness
    if args.smoke_opacity is not None:
        overrides["smoke_opacity"] = args.smoke_opacity
    if args.background_id is not None:
        overrides["background_id"] = args.background_id
    return DomainSpec(args.domain, **overrides)


def _dispatch(args: argparse.Namespace, config: RunConfig, out_dir: Optional[str]) -> int:
    if args.command == "gen":
        if args.frames < 1:
            raise ValidationError(f"--frames must be >= 1, got {args.frames}")
        path = cmd_gen(config, args.frames, args.error_deg, _domain_from_args(args), args.seed, out_dir, args.quiet)
        console.print(f"[green]Manifest written to: {path}[/green]")
        return EXIT_OK
    if args.command == "align":
        path, outcomes = cmd_align(config, args.manifest, out_dir, args.no_optim, args.threads, args.limit, args.quiet)
        failed = sum(o.error is not None for o in outcomes)
        console.print(f"[green]Results written to: {path}[/green]")
        if failed:
            console.print(f"[yellow]{failed} of {len(outcomes)} frames failed[/yellow]")
        return EXIT_FAILURE if failed == len(outcomes) else EXIT_OK
    if args.command == "ablate":
        path, _ = cmd_ablate(config, args.manifest, args.sweep, out_dir, args.threads, args.limit, quiet=args.quiet)
        console.print(f"[green]Ablation table written to: {path}[/green]")
        return EXIT_OK
    if args.command == "eval":
        cmd_eval(args.results, out_dir, args.quiet)
        console.print(f"[green]Summary written to: {out_dir}[/green]")
        return EXIT_OK
    print(json.dumps(config.to_dict(), indent=2))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_arguments(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    try:
        config = load_config(args.config)
        out_dir = None
        log_file = None
        if args.command != "config":
            out_dir = ensure_dir(args.out_dir or _DEFAULT_OUT[args.command])
            log_file = os.path.join(out_dir, "run.log")
        setup_logging(level, quiet=args.quiet, log_file=log_file)
        if out_dir is not None:
            save_config(config, os.path.join(out_dir, "effective_config.json"))
        return _dispatch(args, config, out_dir)
    except KeyboardInterrupt:
        console.print("[yellow]Cancelled.[/yellow]")
        return EXIT_INTERRUPTED
    except (ConfigError, ValidationError, ParseError) as e:
        logger.error(f"Invalid input: {e}")
        console.print(f"[red]Error: {e}[/red]")
        return EXIT_CONFIG
    except (IoError, OSError) as e:
        logger.error(f"I/O failure: {e}")
        console.print(f"[red]I/O error: {e}[/red]")
        return EXIT_IO
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
