"""Metric arithmetic and desk-scale synthetic experiments.

Real benchmark scores arrive precomputed through CSV files; this module only
owns the normalized-average arithmetic over them.  The synthetic generator
plants low-rank task vectors plus Gaussian noise so merge methods can be
compared against known ground truth without any model inference.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .merge import MergeConfig, merge_task_vectors
from .spectral import rank_keep
from .tensorstore import TaskVector, TensorMap

__all__ = [
    "METRIC_KINDS",
    "TaskScore",
    "EvalReport",
    "SynthSpec",
    "RankProfile",
    "normalized_average",
    "pretrained_baseline",
    "evaluate",
    "read_scores_csv",
    "generate_synth_task_vectors",
    "rank_profile",
    "recovery_experiment",
    "method_label",
]

METRIC_KINDS = frozenset({"accuracy", "f1", "spearman"})

SCORES_CSV_HEADER = ["task_name", "metric_kind", "merged", "finetuned", "pretrained"]


@dataclass(frozen=True)
class TaskScore:
    """Externally supplied per-task scores for one merged model."""

    task_name: str
    merged_score: float
    finetuned_score: float
    pretrained_score: float
    metric_kind: str = "accuracy"

    def __post_init__(self) -> None:
        if self.metric_kind not in METRIC_KINDS:
            raise ValidationError(
                f"task '{self.task_name}': unknown metric kind {self.metric_kind!r}"
            )
        for label, value in (
            ("merged", self.merged_score),
            ("finetuned", self.finetuned_score),
            ("pretrained", self.pretrained_score),
        ):
            if not np.isfinite(value):
                raise ValidationError(f"task '{self.task_name}': {label} score is not finite")
            if not 0.0 <= value <= 100.0:
                raise ValidationError(
                    f"task '{self.task_name}': {label} score {value} outside [0, 100]"
                )
        if self.finetuned_score <= 0.0:
            raise ValidationError(
                f"task '{self.task_name}': fine-tuned score must be positive "
                "(it is the normalization denominator)"
            )


@dataclass(frozen=True)
class EvalReport:
    """Aggregate metrics plus the purpose check against the pretrained model."""

    scores: tuple[TaskScore, ...]
    normalized_average: float
    pretrained_baseline: float
    merged_beats_pretrained: bool


def normalized_average(scores: Sequence[TaskScore]) -> float:
    """Mean over tasks of merged/finetuned score ratios, as a percentage."""
    if len(scores) == 0:
        raise ValueError("need at least one task score")
    ratios = [s.merged_score / s.finetuned_score for s in scores]
    return 100.0 * float(np.mean(ratios))


def pretrained_baseline(scores: Sequence[TaskScore]) -> float:
    """Mean over tasks of pretrained/finetuned score ratios, as a percentage."""
    if len(scores) == 0:
        raise ValueError("need at least one task score")
    ratios = [s.pretrained_score / s.finetuned_score for s in scores]
    return 100.0 * float(np.mean(ratios))


def evaluate(scores: Sequence[TaskScore]) -> EvalReport:
    """Build the report; merging that loses to the pretrained model is flagged."""
    avg = normalized_average(scores)
    base = pretrained_baseline(scores)
    return EvalReport(
        scores=tuple(scores),
        normalized_average=avg,
        pretrained_baseline=base,
        merged_beats_pretrained=avg >= base,
    )


def read_scores_csv(path: str | Path) -> list[TaskScore]:
    """Parse a score file with header task_name,metric_kind,merged,finetuned,pretrained."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != SCORES_CSV_HEADER:
            raise ValidationError(
                f"{path}: expected header {','.join(SCORES_CSV_HEADER)}, "
                f"got {reader.fieldnames}"
            )
        scores = []
        for row in reader:
            try:
                scores.append(
                    TaskScore(
                        task_name=row["task_name"],
                        metric_kind=row["metric_kind"],
                        merged_score=float(row["merged"]),
                        finetuned_score=float(row["finetuned"]),
                        pretrained_score=float(row["pretrained"]),
                    )
                )
            except (TypeError, KeyError) as exc:
                raise ValidationError(f"{path}: malformed row {row!r}") from exc
    if not scores:
        raise ValidationError(f"{path}: score file contains no rows")
    return scores


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for planted low-rank task vectors with additive Gaussian noise."""

    num_tasks: int
    shape: tuple[int, int]
    planted_rank: int
    noise_sigma: float
    seed: int

    def __post_init__(self) -> None:
        m, n = self.shape
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if m < 1 or n < 1:
            raise ValueError(f"shape dims must be >= 1, got {self.shape}")
        if not 1 <= self.planted_rank <= min(m, n):
            raise ValueError(
                f"planted_rank must lie in [1, {min(m, n)}], got {self.planted_rank}"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


_SYNTH_LAYER = "weight"


def generate_synth_task_vectors(
    spec: SynthSpec,
) -> tuple[list[TaskVector], list[np.ndarray]]:
    """Deterministically generate task vectors and their planted ground truths.

    Each task vector is a product of two Gaussian factors (exact rank
    planted_rank) plus i.i.d. Gaussian noise of std noise_sigma, drawn from a
    stream keyed by (seed, task index).
    """
    m, n = spec.shape
    vectors: list[TaskVector] = []
    truths: list[np.ndarray] = []
    for task in range(spec.num_tasks):
        rng = np.random.default_rng([spec.seed, task])
        left = rng.standard_normal((m, spec.planted_rank))
        right = rng.standard_normal((spec.planted_rank, n))
        truth = left @ right
        noisy = truth
        if spec.noise_sigma > 0:
            noisy = truth + spec.noise_sigma * rng.standard_normal((m, n))
        vectors.append(
            TensorMap(entries={_SYNTH_LAYER: noisy}, model_id=f"synth[{task}]", role="delta")
        )
        truths.append(truth)
    return vectors, truths


@dataclass(frozen=True)
class RankProfile:
    """Kept rank per 2-D layer at one mass threshold, in layer order."""

    layer_names: tuple[str, ...]
    ranks: tuple[int, ...]
    eta: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layer_name", "rank"])
        for name, rank in zip(self.layer_names, self.ranks):
            writer.writerow([name, rank])
        return buf.getvalue()


def rank_profile(task_vector: TaskVector, eta: float) -> RankProfile:
    """Per-layer kept ranks for one task vector; zero layers profile as rank 0."""
    names = []
    ranks = []
    for name, arr in task_vector.items():
        if arr.ndim != 2:
            continue
        names.append(name)
        sigma = np.linalg.svd(arr.astype(np.float64), compute_uv=False)
        if float(sigma[0]) <= 0.0:
            ranks.append(0)
        else:
            ranks.append(rank_keep(sigma, eta))
    return RankProfile(layer_names=tuple(names), ranks=tuple(ranks), eta=eta)


def method_label(config: MergeConfig) -> str:
    if config.method == "star":
        label = f"star(eta={config.eta:g})"
    elif config.method == "ties":
        label = f"ties(k={config.k_percent:g})"
    elif config.method == "task_arithmetic":
        label = f"ta(alpha={config.alpha:g})"
    else:
        label = "simple_average"
    if config.drop_p is not None:
        label = f"dare(p={config.drop_p:g})+{label}"
    return label


def recovery_experiment(
    spec: SynthSpec,
    methods: Sequence[MergeConfig],
) -> list[tuple[str, int, float]]:
    """Decay-curve data: Frobenius error of the merged delta vs. ground truth.

    For each method and each prefix length t <= num_tasks, merges the first t
    synthetic task vectors and measures the Frobenius distance between the
    merged layer and the mean of the first t planted matrices.  Returns
    (method label, num_models, error) rows.
    """
    vectors, truths = generate_synth_task_vectors(spec)
    rows: list[tuple[str, int, float]] = []
    for config in methods:
        label = method_label(config)
        for t in range(1, spec.num_tasks + 1):
            result = merge_task_vectors(vectors[:t], config, collect_diagnostics=False)
            target = np.mean(truths[:t], axis=0)
            error = float(np.linalg.norm(result.delta[_SYNTH_LAYER] - target))
            rows.append((label, t, error))
    return rows
