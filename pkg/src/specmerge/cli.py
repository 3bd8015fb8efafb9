"""Command-line surface for batch merging, profiling, sweeps, and checks.

Exit codes: 0 success, 1 validation/format error, 2 numerical error.
SPECMERGE_THREADS caps internal per-layer parallelism (default 1).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    FormatError,
    NumericalError,
    ShapeError,
    TruncatedDataError,
    ValidationError,
)
from .harness import (
    SynthSpec,
    evaluate,
    method_label,
    rank_profile,
    read_scores_csv,
    recovery_experiment,
)
from .merge import MergeConfig, merge_task_vectors, prepare_task_vectors
from .tensorstore import (
    apply_delta,
    compute_task_vector,
    load_checkpoint,
    load_lora_adapter,
    save_checkpoint,
)
from .verify import run_all

ETA_SWEEP_GRID = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0)

_METHOD_ALIASES = {
    "star": "star",
    "average": "simple_average",
    "simple_average": "simple_average",
    "ta": "task_arithmetic",
    "task_arithmetic": "task_arithmetic",
    "ties": "ties",
}


class _Parser(argparse.ArgumentParser):
    """argparse variant that uses exit code 1 for flag validation errors."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specmerge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    merge_p = sub.add_parser("merge", help="merge checkpoints and write the result")
    _add_model_flags(merge_p)
    _add_method_flags(merge_p)
    merge_p.add_argument("--out", required=True, help="output checkpoint path")
    merge_p.add_argument("--scores", help="per-task score CSV for metric reporting")
    merge_p.add_argument("--report", help="diagnostics JSON path (default <out>.diagnostics.json)")

    inspect_p = sub.add_parser("inspect", help="emit a per-layer kept-rank profile CSV")
    inspect_p.add_argument("--model", required=True, help="task-vector file, or fine-tuned model with --pretrained")
    inspect_p.add_argument("--pretrained", help="subtract this checkpoint from --model first")
    inspect_p.add_argument("--eta", type=float, default=40.0, help="mass threshold percent (default 40)")
    inspect_p.add_argument("--report", help="CSV output path (default stdout)")

    sweep_p = sub.add_parser("sweep", help="merge across the mass-threshold grid 10..70")
    _add_model_flags(sweep_p)
    sweep_p.add_argument("--dare-p", type=float, default=None, help="drop-and-rescale probability")
    sweep_p.add_argument("--seed", type=int, default=0, help="seed for drop masks")
    sweep_p.add_argument("--report", help="CSV output path (default stdout)")

    verify_p = sub.add_parser("verify", help="run the numerical property battery")
    verify_p.set_defaults(command="verify")

    synth_p = sub.add_parser("synth", help="synthetic recovery experiment (decay curves)")
    synth_p.add_argument("--tasks", type=int, default=8, help="number of synthetic task vectors")
    synth_p.add_argument("--rows", type=int, default=64)
    synth_p.add_argument("--cols", type=int, default=64)
    synth_p.add_argument("--rank", type=int, default=4, help="planted rank")
    synth_p.add_argument("--noise", type=float, default=0.05, help="noise std-dev")
    synth_p.add_argument("--eta", type=float, default=40.0, help="mass threshold for the star arm")
    synth_p.add_argument("--seed", type=int, default=0)
    synth_p.add_argument("--report", help="CSV output path (default stdout)")

    return parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pretrained", required=True, help="pretrained checkpoint path")
    p.add_argument(
        "--model", action="append", required=True,
        help="fine-tuned checkpoint or LoRA factor file (repeatable)",
    )
    p.add_argument(
        "--lora", action="store_true",
        help="interpret --model paths as LoRA factor files",
    )


def _add_method_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", required=True, help="star | average | ta | ties")
    p.add_argument("--eta", type=float, default=40.0, help="star mass threshold percent (default 40)")
    p.add_argument("--k", type=float, default=20.0, help="ties keep percent (default 20)")
    p.add_argument("--alpha", type=float, default=None, help="ta scaling factor")
    p.add_argument("--dare-p", type=float, default=None, help="drop-and-rescale probability")
    p.add_argument("--seed", type=int, default=0, help="seed for drop masks")


def _build_config(args: argparse.Namespace) -> MergeConfig:
    method = _METHOD_ALIASES.get(args.method.lower(), args.method.lower())
    return MergeConfig(
        method=method,
        eta=args.eta,
        k_percent=args.k,
        alpha=args.alpha,
        drop_p=args.dare_p,
        seed=args.seed,
    )


def _load_models(paths: Sequence[str], lora: bool) -> list:
    models = []
    for path in paths:
        if lora:
            pairs, _ = load_lora_adapter(path)
            models.append(pairs)
        else:
            models.append(load_checkpoint(path))
    return models


def _write_text(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _cmd_merge(args: argparse.Namespace) -> int:
    config = _build_config(args)
    pretrained = load_checkpoint(args.pretrained, role="pretrained")
    models = _load_models(args.model, args.lora)
    task_vectors = prepare_task_vectors(pretrained, models)
    result = merge_task_vectors(task_vectors, config)
    merged = apply_delta(pretrained, result.delta)
    save_checkpoint(merged, args.out)

    diagnostics = {
        "config": asdict(config),
        "num_models": len(models),
        "output": str(args.out),
        "per_layer_ranks": {name: list(v) for name, v in result.per_layer_ranks.items()},
        "nuclear_norms": {name: dict(v) for name, v in result.diagnostics.items()},
    }
    if args.scores:
        report = evaluate(read_scores_csv(args.scores))
        diagnostics["evaluation"] = {
            "normalized_average": report.normalized_average,
            "pretrained_baseline": report.pretrained_baseline,
            "merged_beats_pretrained": report.merged_beats_pretrained,
        }
        if not report.merged_beats_pretrained:
            print(
                "warning: merged model scores below the pretrained baseline; "
                "model merging loses its purpose",
                file=sys.stderr,
            )
    report_path = args.report or f"{args.out}.diagnostics.json"
    Path(report_path).write_text(json.dumps(diagnostics, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    if args.pretrained:
        task_vector = compute_task_vector(
            load_checkpoint(args.model), load_checkpoint(args.pretrained, role="pretrained")
        )
    else:
        task_vector = load_checkpoint(args.model)
    profile = rank_profile(task_vector, args.eta)
    _write_text(profile.to_csv(), args.report)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    pretrained = load_checkpoint(args.pretrained, role="pretrained")
    models = _load_models(args.model, args.lora)
    task_vectors = prepare_task_vectors(pretrained, models)

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["eta", "mean_kept_rank", "nuclear_before", "nuclear_after", "delta_frobenius"])
    for eta in ETA_SWEEP_GRID:
        config = MergeConfig(method="star", eta=eta, drop_p=args.dare_p, seed=args.seed)
        result = merge_task_vectors(task_vectors, config)
        ranks = [r for per_task in result.per_layer_ranks.values() for r in per_task]
        before = sum(v for d in result.diagnostics.values() for v in d["nuclear_before"])
        after = sum(v for d in result.diagnostics.values() for v in d["nuclear_after"])
        frob = float(
            np.sqrt(sum(float(np.sum(arr * arr)) for arr in result.delta.entries.values()))
        )
        mean_rank = float(np.mean(ranks)) if ranks else 0.0
        writer.writerow([f"{eta:g}", repr(mean_rank), repr(before), repr(after), repr(frob)])
    _write_text(buf.getvalue(), args.report)
    return 0


def _cmd_verify(_: argparse.Namespace) -> int:
    results = run_all()
    failed = 0
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name}: {result.detail}")
        failed += 0 if result.passed else 1
    if failed:
        print(f"{failed}/{len(results)} checks failed", file=sys.stderr)
        return 2
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        num_tasks=args.tasks,
        shape=(args.rows, args.cols),
        planted_rank=args.rank,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    methods = [
        MergeConfig(method="star", eta=args.eta),
        MergeConfig(method="simple_average"),
    ]
    rows = recovery_experiment(spec, methods)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", "num_models", "value"])
    for label, num_models, value in rows:
        writer.writerow([label, num_models, repr(value)])
    _write_text(buf.getvalue(), args.report)
    return 0


_COMMANDS = {
    "merge": _cmd_merge,
    "inspect": _cmd_inspect,
    "sweep": _cmd_sweep,
    "verify": _cmd_verify,
    "synth": _cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, ValidationError, ShapeError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TruncatedDataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
