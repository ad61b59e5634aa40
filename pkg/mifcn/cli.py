"""
Command Line Interface for MIFCN.

Provides CLI commands for:
- Building the patch-tuple training archive from image pairs
- Training and checkpointing the denoiser
- Denoising test cases and evaluating them against references
- The fusion-constant sweep and the self-verification suite

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

Copyright 2025 The MIFCN Authors

Licensed under the Apache License, Version 2.0.
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from omegaconf import DictConfig, OmegaConf
from rich.console import Console

from . import __version__
from .checkpoint import load_checkpoint
from .config_manager import load_cfg, merge_overrides
from .dataset import (
    DatasetConfig,
    RoiSpec,
    TestCase,
    build_training_set,
    find_image,
    list_test_cases,
    load_archive,
    load_image,
    load_test_case,
    load_training_pairs,
    read_rois,
    save_archive,
    save_image,
)
from .errors import (
    EXIT_NUMERIC,
    EXIT_OK,
    CheckpointError,
    DataError,
    MifcnError,
    PreconditionError,
    TrainingDiverged,
    UsageError,
    describe_exit_code,
)
from .gradcheck import GradcheckConfig, run_gradcheck
from .metrics import (
    METRIC_NAMES,
    ImageMetrics,
    MetricReport,
    evaluate_image,
    report_table,
    summary_path,
    write_csv,
    write_summary_csv,
)
from .model import MifcnOutput, MifcnParams, ModelConfig, mifcn_forward
from .tensor_core import no_grad
from .training import Hyperparams, train
from .utils import setup_logging, write_json

logger = logging.getLogger(__name__)

console = Console()

RESULT_ARRAY = "final.npy"
RESULT_IMAGE = "final.png"
ROI_METRICS = ("msr", "cnr", "enl")


class MifcnArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose errors exit with the usage-error code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def load_run_config(args: argparse.Namespace) -> DictConfig:
    """Defaults, then ``--config`` files, then command-line flags.

    Raises:
        UsageError: If the merged configuration is invalid
    """
    cfg = load_cfg(overrides=getattr(args, "config", None))
    overrides: Dict[str, Any] = {}
    for section, keys in (
        ("model", ("T", "C", "A", "B", "h", "alpha")),
        ("training", ("epochs", "batch", "seed", "lr1", "lr2")),
        ("dataset", ("workers",)),
    ):
        for key in keys:
            overrides[f"{section}.{key}"] = getattr(args, key, None)
    if getattr(args, "A", None) is not None:
        # an explicit A invalidates a configured dilation schedule of another length
        dilations = cfg.model.get("dilations")
        if dilations is not None and len(dilations) != args.A:
            cfg = OmegaConf.merge(cfg, {"model": {"dilations": None}})
    return merge_overrides(cfg, overrides)


def model_config(cfg: DictConfig) -> ModelConfig:
    config = ModelConfig.from_mapping(OmegaConf.to_container(cfg.model, resolve=True))
    errors = config.validate()
    if errors:
        raise UsageError("Invalid model configuration: " + "; ".join(errors))
    return config


def hyperparams(cfg: DictConfig) -> Hyperparams:
    hyper = Hyperparams.from_mapping(OmegaConf.to_container(cfg.training, resolve=True))
    errors = hyper.validate()
    if errors:
        raise UsageError("Invalid training configuration: " + "; ".join(errors))
    return hyper


def _require_path(path: Optional[str], flag: str, kind: str = "file") -> Path:
    if path is None:
        raise UsageError(f"{flag} is required for this command")
    resolved = Path(path)
    exists = resolved.is_dir() if kind == "dir" else resolved.exists()
    if not exists:
        raise DataError(f"{flag} {kind} not found: {resolved}")
    return resolved


def _check_architecture(args: argparse.Namespace, config: ModelConfig, checkpoint: Path) -> None:
    mismatches = [
        f"{key}: checkpoint={getattr(config, key)} requested={getattr(args, key)}"
        for key in ("T", "C", "A", "B")
        if getattr(args, key, None) is not None and getattr(args, key) != getattr(config, key)
    ]
    if mismatches:
        raise CheckpointError(f"{checkpoint} does not match the requested model: " + "; ".join(mismatches))


def _rois_for(rois: Optional[Path], case: str, shape) -> Optional[RoiSpec]:
    if rois is None:
        return None
    if rois.is_dir():
        path = rois / f"{case}.txt"
        if not path.exists():
            raise DataError(f"No ROI file {path} for test case {case}")
        return read_rois(path, shape)
    return read_rois(rois, shape)


def _load_result(results: Path, case: str) -> np.ndarray:
    array_path = results / case / RESULT_ARRAY
    if array_path.exists():
        try:
            return np.load(array_path, allow_pickle=False)
        except (OSError, ValueError) as e:
            raise DataError(f"Cannot read {array_path}: {e}") from e
    image_path = find_image(results / case, "final")
    if image_path is None:
        raise DataError(f"No denoised output for test case {case} under {results}")
    return load_image(image_path)


def _reference(case_dir: Path) -> np.ndarray:
    ref_path = find_image(case_dir, "ref")
    if ref_path is None:
        raise DataError(f"{case_dir}: no ref image")
    return load_image(ref_path)


def denoise_case(case: TestCase, params: MifcnParams, config: ModelConfig, h: Optional[float] = None) -> MifcnOutput:
    """Run the model on one test case without recording the graph."""
    with no_grad():
        return mifcn_forward(case.inputs, params, config, h=h)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_dataset(args: argparse.Namespace) -> int:
    """Build the patch-tuple archive and its JSON summary."""
    cfg = load_run_config(args)
    data_dir = _require_path(args.data, "--data", "dir")
    crops = _require_path(args.crops, "--crops") if args.crops else None
    out = Path(args.out or "patches.msgpack")
    dataset_cfg = DatasetConfig(
        T=int(cfg.model.T),
        patch_size=int(cfg.dataset.patch_size),
        budget=int(cfg.dataset.budget),
        workers=int(cfg.dataset.workers),
    )

    pairs = load_training_pairs(data_dir, crops)
    try:
        tuples, sources = build_training_set(pairs, dataset_cfg)
    except PreconditionError as e:
        raise DataError(str(e)) from e
    save_archive(tuples, out, sources)
    summary = {
        "archive": str(out),
        "count": len(tuples),
        "T": dataset_cfg.T,
        "patch_size": dataset_cfg.patch_size,
        "sources": sources,
    }
    write_json(summary, out.with_suffix(".json"))
    console.print(
        f"Wrote {len(tuples)} tuples (T={dataset_cfg.T}, {dataset_cfg.patch_size}x"
        f"{dataset_cfg.patch_size}) from {len(pairs)} pairs to {out}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Train on an archive and write the checkpoint and the epoch log."""
    cfg = load_run_config(args)
    config = model_config(cfg)
    hyper = hyperparams(cfg)
    archive = _require_path(args.data, "--data")
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required for this command")
    checkpoint = Path(args.checkpoint)
    log_path = Path(args.out) if args.out else checkpoint.with_suffix(".log")

    initial = None
    if args.init:
        initial, _ = load_checkpoint(_require_path(args.init, "--init"), expected=config)

    tuples, header = load_archive(archive)
    if int(header["T"]) != config.T:
        raise DataError(f"{archive} holds tuples with T={header['T']}, model has T={config.T}")
    if log_path.exists():
        if not args.force:
            raise UsageError(f"{log_path} already exists; pass --force to overwrite it")
        log_path.unlink()

    try:
        record = train(tuples, config, hyper, params=initial, checkpoint_path=checkpoint, log_path=log_path)
    except TrainingDiverged as e:
        logger.error(f"{e}; log kept at {log_path}")
        return EXIT_NUMERIC

    console.print(
        f"Trained {config.label} for {len(record.epochs)} epochs ({record.steps} steps, "
        f"{record.wall_clock:.1f} s); mean J over the {len(tuples)} training tuples "
        f"{record.final_loss:.6g}; checkpoint {checkpoint}"
    )
    return EXIT_OK


def _write_outputs(out_dir: Path, output: MifcnOutput, emit_branches: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    final = output.final.data
    np.save(out_dir / RESULT_ARRAY, final)
    save_image(final, out_dir / RESULT_IMAGE)
    if emit_branches:
        for t, (branch, weight) in enumerate(zip(output.branch_outputs, output.weights), start=1):
            np.save(out_dir / f"branch{t}.npy", branch.data)
            save_image(branch.data, out_dir / f"branch{t}.png")
            np.save(out_dir / f"weight{t}.npy", weight.data)
            save_image(255.0 * weight.data, out_dir / f"weight{t}.png")


def cmd_denoise(args: argparse.Namespace) -> int:
    """Denoise every test case under --data into --out."""
    cfg = load_run_config(args)
    checkpoint = _require_path(args.checkpoint, "--checkpoint")
    data = _require_path(args.data, "--data", "dir")
    if args.out is None:
        raise UsageError("--out is required for this command")
    h = args.h if args.h is not None else OmegaConf.select(cfg, "inference.h", default=None)
    if h is not None and not h > 0:
        raise UsageError(f"--h must be positive, got {h}")
    h = float(h) if h is not None else None
    params, config = load_checkpoint(checkpoint)
    _check_architecture(args, config, checkpoint)
    case_dirs = list_test_cases(data)
    cases = [load_test_case(d, config.T) for d in case_dirs]
    out = Path(args.out)

    def run(case: TestCase) -> str:
        output = denoise_case(case, params, config, h)
        _write_outputs(out / case.name, output, args.emit_branches)
        return case.name

    workers = args.workers if args.workers is not None else OmegaConf.select(cfg, "inference.workers", default=1)
    workers = max(1, int(workers))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(run, cases))
    else:
        done = [run(case) for case in cases]
    console.print(f"Denoised {len(done)} test case(s) with {config.label} (h={h or config.h}) into {out}")
    return EXIT_OK


def _selected_metrics(args: argparse.Namespace) -> List[str]:
    if args.metrics:
        metrics = [m.strip().lower() for m in args.metrics.split(",") if m.strip()]
        unknown = sorted(set(metrics) - set(METRIC_NAMES))
        if unknown:
            raise UsageError(f"unknown metrics {unknown}; choose from {list(METRIC_NAMES)}")
    else:
        metrics = list(METRIC_NAMES) if args.rois else ["mse", "psnr"]
    if any(m in ROI_METRICS for m in metrics) and not args.rois:
        raise UsageError("MSR, CNR and ENL need --rois")
    return metrics


def _evaluate_dir(results: Path, case_dirs: Sequence[Path], rois: Optional[Path], peak: float) -> List[ImageMetrics]:
    rows = []
    for case_dir in case_dirs:
        reference = _reference(case_dir)
        denoised = _load_result(results, case_dir.name)
        if denoised.shape != reference.shape:
            raise DataError(f"{case_dir.name}: output {denoised.shape} and reference {reference.shape} differ")
        rows.append(evaluate_image(case_dir.name, denoised, reference, _rois_for(rois, case_dir.name, reference.shape), peak))
    return rows


def _keep_metrics(rows: List[ImageMetrics], metrics: Sequence[str]) -> List[ImageMetrics]:
    for row in rows:
        for name in ROI_METRICS:
            if name not in metrics:
                setattr(row, name, None)
    return rows


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Score denoised outputs against the references of the test cases."""
    cfg = load_run_config(args)
    metrics = _selected_metrics(args)
    data = _require_path(args.data, "--data", "dir")
    results = _require_path(args.results, "--results", "dir")
    rois = _require_path(args.rois, "--rois") if args.rois else None
    compare = _require_path(args.compare, "--compare", "dir") if args.compare else None
    peak = float(cfg.evaluation.peak)

    case_dirs = list_test_cases(data)
    report = MetricReport.from_rows(
        _keep_metrics(_evaluate_dir(results, case_dirs, rois, peak), metrics), title=f"Metrics of {results}"
    )
    if compare is not None:
        other = MetricReport.from_rows(_keep_metrics(_evaluate_dir(compare, case_dirs, rois, peak), metrics))
        report.compare(other, int(cfg.evaluation.wilcoxon_exact_max_n))

    console.print(report_table(report))
    if args.out:
        write_csv(report, args.out)
        write_summary_csv(report, summary_path(args.out))
    return EXIT_OK


def cmd_ablate_h(args: argparse.Namespace) -> int:
    """One metric row per fusion constant, averaged over the test cases."""
    cfg = load_run_config(args)
    metrics = _selected_metrics(args)
    grid = [float(h) for h in (args.h_grid or cfg.evaluation.h_grid)]
    bad = [h for h in grid if not h > 0]
    if bad:
        raise UsageError(f"fusion constants must be positive, got {bad}")
    checkpoint = _require_path(args.checkpoint, "--checkpoint")
    data = _require_path(args.data, "--data", "dir")
    rois = _require_path(args.rois, "--rois") if args.rois else None
    params, config = load_checkpoint(checkpoint)
    _check_architecture(args, config, checkpoint)
    peak = float(cfg.evaluation.peak)

    case_dirs = list_test_cases(data)
    cases = [load_test_case(d, config.T) for d in case_dirs]
    rows = []
    for h in grid:
        per_case = []
        main_weight = []
        for case, case_dir in zip(cases, case_dirs):
            output = denoise_case(case, params, config, h)
            main_weight.append(float(np.mean(output.weights[0].data)))
            per_case.append(
                evaluate_image(
                    case.name, output.final.data, case.reference, _rois_for(rois, case.name, case.reference.shape), peak
                )
            )
        logger.info(f"h={h:g}: mean main-branch weight {np.mean(main_weight):.4f}")
        summary = MetricReport.from_rows(_keep_metrics(per_case, metrics)).summary_row(f"h={h:g}")
        rows.append(summary)

    report = MetricReport.from_rows(rows, title=f"Fusion constant sweep ({config.label}, {len(cases)} cases)")
    console.print(report_table(report))
    if args.out:
        write_csv(report, args.out)
        write_summary_csv(report, summary_path(args.out))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Run the oracle, gradient and fusion sweeps; exit 3 on failure."""
    run_cfg = load_run_config(args)
    section = OmegaConf.select(run_cfg, "gradcheck", default=None)
    cfg = GradcheckConfig.from_mapping(OmegaConf.to_container(section, resolve=True) if section is not None else {})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.instances is not None:
        cfg.instances = args.instances
    if args.conv_cases is not None:
        cfg.conv_cases = args.conv_cases
    if args.all_coordinates:
        cfg.coords_per_tensor = None
    report = run_gradcheck(cfg)
    console.print(report.table())
    if not report.passed:
        logger.error("Gradient check failed")
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _number(text: str) -> float:
    try:
        return float(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from e


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser."""
    common = MifcnArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        action="append",
        metavar="FILE",
        help="Configuration file merged over the defaults (YAML, JSON or key=value; repeatable)",
    )
    common.add_argument("--verbose", "-v", action="store_true", help="Verbose output")
    common.add_argument("--seed", type=int, help="Seed for initialization and shuffling")

    model = MifcnArgumentParser(add_help=False)
    model.add_argument("--T", type=int, help="Number of input branches")
    model.add_argument("--C", type=int, help="Feature maps per hidden layer")
    model.add_argument("--A", type=int, help="3x3 layers per branch")
    model.add_argument("--B", type=int, help="3x3 layers after the fusion module")
    model.add_argument("--h", type=_number, help="Fusion decay constant")
    model.add_argument("--alpha", type=float, help="Leaky ReLU slope")

    parser = MifcnArgumentParser(
        prog="mifcn",
        description="MIFCN - multi-input fully-convolutional OCT denoising",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    build = subparsers.add_parser(
        "build-dataset",
        parents=[common, model],
        help="Build the patch-tuple training archive",
        description="Extract anchor patches and their nearest high-SNR matches from training pairs",
    )
    build.add_argument("--data", help="Directory of <id>_noisy / <id>_highsnr image pairs")
    build.add_argument("--crops", help="Crop sidecar (name top left height width per line)")
    build.add_argument("--out", "-o", help="Archive path (default: patches.msgpack)")
    build.add_argument("--workers", type=int, help="Threads for the similarity search")

    train_parser = subparsers.add_parser(
        "train",
        parents=[common, model],
        help="Train the denoiser",
        description="Train on a patch archive and write a checkpoint",
    )
    train_parser.add_argument("--data", help="Patch archive written by build-dataset")
    train_parser.add_argument("--checkpoint", help="Checkpoint to write")
    train_parser.add_argument("--init", help="Checkpoint to start from instead of identity initialization")
    train_parser.add_argument("--out", "-o", help="Epoch log (default: checkpoint path with .log)")
    train_parser.add_argument("--force", action="store_true", help="Overwrite an existing epoch log")
    train_parser.add_argument("--epochs", type=int, help="Number of epochs")
    train_parser.add_argument("--batch", type=int, help="Tuples per optimizer step")
    train_parser.add_argument("--lr1", type=float, help="Learning rate of the first phase")
    train_parser.add_argument("--lr2", type=float, help="Learning rate of the second phase")

    denoise = subparsers.add_parser(
        "denoise",
        parents=[common, model],
        help="Denoise test cases",
        description="Denoise every test case directory (main, near1.., ref) with a checkpoint",
    )
    denoise.add_argument("--checkpoint", help="Trained checkpoint")
    denoise.add_argument("--data", help="Test case directory, or a directory of them")
    denoise.add_argument("--out", "-o", help="Output directory")
    denoise.add_argument("--emit-branches", action="store_true", help="Also write every branch output and weight map")
    denoise.add_argument("--workers", type=int, help="Test cases denoised concurrently")

    evaluate = subparsers.add_parser(
        "evaluate",
        parents=[common],
        help="Score denoised outputs",
        description="Compute PSNR/MSE and the ROI metrics of denoised outputs",
    )
    evaluate.add_argument("--data", help="Test cases holding the reference images")
    evaluate.add_argument("--results", help="Output directory written by denoise")
    evaluate.add_argument("--rois", help="ROI file, or a directory of <case>.txt ROI files")
    evaluate.add_argument("--compare", help="Second result directory for paired signed-rank tests")
    evaluate.add_argument("--metrics", help=f"Comma-separated subset of {', '.join(METRIC_NAMES)}")
    evaluate.add_argument(
        "--out", "-o", help="CSV of per-image metrics; mean, SD, p and MSE go to <name>_summary.csv"
    )

    ablate = subparsers.add_parser(
        "ablate-h",
        parents=[common, model],
        help="Sweep the fusion constant h",
        description="Evaluate a trained checkpoint at several inference-time fusion constants",
    )
    ablate.add_argument("--checkpoint", help="Trained checkpoint")
    ablate.add_argument("--data", help="Test cases")
    ablate.add_argument("--rois", help="ROI file, or a directory of <case>.txt ROI files")
    ablate.add_argument("--h-grid", type=_number, nargs="+", help="Fusion constants to evaluate")
    ablate.add_argument("--metrics", help=f"Comma-separated subset of {', '.join(METRIC_NAMES)}")
    ablate.add_argument("--out", "-o", help="CSV with one row per fusion constant, plus <name>_summary.csv")

    gradcheck = subparsers.add_parser(
        "gradcheck",
        parents=[common],
        help="Verify the numeric engine",
        description="Compare convolutions, gradients and fusion weights against brute-force oracles",
    )
    gradcheck.add_argument("--instances", type=int, help="Random models in the gradient sweep")
    gradcheck.add_argument("--conv-cases", type=int, help="Random convolutions in the oracle sweep")
    gradcheck.add_argument(
        "--all-coordinates",
        action="store_true",
        help="Compare every parameter coordinate instead of a sample per tensor",
    )

    return parser


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "evaluate": cmd_evaluate,
    "ablate-h": cmd_ablate_h,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for CLI."""
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code

    if args.command is None:
        parser.print_help()
        return EXIT_OK

    setup_logging(verbose=args.verbose)
    try:
        return COMMANDS[args.command](args)
    except MifcnError as e:
        logger.error(f"{e}")
        logger.debug(f"exit {e.exit_code} ({describe_exit_code(e.exit_code)})")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
