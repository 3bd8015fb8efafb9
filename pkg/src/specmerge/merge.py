"""Merge methods over sets of task vectors.

star: per-layer spectral truncation at a cumulative-mass threshold, nuclear
norm restoring rescale, reconstruction, then simple averaging.
simple_average / task_arithmetic / ties: element-wise baselines.
dare_sparsify: random drop-and-rescale preprocessing, counter-based so masks
are reproducible and independent of iteration order.

Cross-task reductions use compensated summation, which makes results
independent of the order task vectors are supplied in.
"""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateSpectrumError, ShapeError
from .spectral import (
    nuclear_norm,
    rank_keep,
    rescale_singular_values,
    svd,
    truncate_reconstruct,
)
from .tensorstore import (
    LoraFactorPair,
    TaskVector,
    TensorMap,
    apply_delta,
    compute_task_vector,
    lora_to_task_vector,
)

__all__ = [
    "METHODS",
    "MergeConfig",
    "MergeResult",
    "star_merge",
    "simple_average",
    "task_arithmetic",
    "ties_merge",
    "dare_sparsify",
    "prepare_task_vectors",
    "merge_task_vectors",
    "merge",
]

METHODS = ("star", "simple_average", "task_arithmetic", "ties")

# Methods we know from the literature but deliberately do not implement.
_OUT_OF_SCOPE = ("metagpt", "tall_masks", "tall-masks", "emr", "emr_merging", "emr-merging")

_GOLDEN64 = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class MergeConfig:
    """Method selector plus hyperparameters.

    drop_p switches on drop-and-rescale preprocessing of every task vector
    before the base method runs; seed drives its masks.
    """

    method: str
    eta: float = 40.0
    k_percent: float = 20.0
    alpha: float | None = None
    drop_p: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method in _OUT_OF_SCOPE:
            raise ValueError(
                f"method {self.method!r} is out of scope for this toolkit; "
                f"supported methods: {', '.join(METHODS)}"
            )
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; supported: {', '.join(METHODS)}")
        if self.method == "star" and not 0.0 < self.eta <= 100.0:
            raise ValueError(f"eta must lie in (0, 100], got {self.eta}")
        if self.method == "ties" and not 0.0 < self.k_percent <= 100.0:
            raise ValueError(f"k_percent must lie in (0, 100], got {self.k_percent}")
        if self.method == "task_arithmetic":
            if self.alpha is None:
                raise ValueError("task_arithmetic requires alpha")
            if not math.isfinite(self.alpha):
                raise ValueError(f"alpha must be finite, got {self.alpha}")
        if self.drop_p is not None and not 0.0 <= self.drop_p < 1.0:
            raise ValueError(f"drop_p must lie in [0, 1), got {self.drop_p}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True, eq=False)
class MergeResult:
    """Merged delta plus per-layer bookkeeping.

    per_layer_ranks maps 2-D layer name to the kept rank per task (input
    order); diagnostics maps layer name to measured nuclear norms before and
    after processing.  Both are populated by star only.
    """

    delta: TaskVector
    per_layer_ranks: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    config: MergeConfig | None = None
    diagnostics: Mapping[str, dict[str, list[float]]] = field(default_factory=dict)


def _validate_aligned(task_vectors: Sequence[TensorMap]) -> None:
    if len(task_vectors) == 0:
        raise ValueError("need at least one task vector")
    first = task_vectors[0]
    for other in task_vectors[1:]:
        if other.keys() != first.keys():
            only_first = sorted(first.keys() - other.keys())
            only_other = sorted(other.keys() - first.keys())
            raise ShapeError(
                f"task vectors disagree on keys: {only_first} vs {only_other}"
            )
        for name in first.keys():
            if other[name].shape != first[name].shape:
                raise ShapeError(
                    f"tensor '{name}': shape {first[name].shape} vs {other[name].shape}"
                )


def _compensated_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Neumaier-compensated element-wise sum; result does not depend on order."""
    total = np.zeros_like(arrays[0], dtype=np.float64)
    comp = np.zeros_like(total)
    for arr in arrays:
        term = arr.astype(np.float64, copy=False)
        new = total + term
        comp += np.where(
            np.abs(total) >= np.abs(term),
            (total - new) + term,
            (term - new) + total,
        )
        total = new
    return total + comp


def _mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return _compensated_sum(arrays) / len(arrays)


def _thread_count(threads: int | None) -> int:
    if threads is None:
        try:
            threads = int(os.environ.get("SPECMERGE_THREADS", "1"))
        except ValueError:
            threads = 1
    return max(1, threads)


def _star_process(
    matrix: np.ndarray, eta: float, name: str, measure: bool
) -> tuple[np.ndarray, int, float, float]:
    """Truncate-and-rescale one 2-D layer; zero matrices pass through at rank 0."""
    dec = svd(matrix, name=name)
    try:
        r = rank_keep(dec.sigma, eta)
    except DegenerateSpectrumError:
        return matrix.astype(np.float64), 0, 0.0, 0.0
    resc = rescale_singular_values(dec.sigma, r)
    out = truncate_reconstruct(dec, r, resc)
    before = float(np.sum(dec.sigma))
    after = nuclear_norm(out, name=name) if measure else float(np.sum(resc))
    return out, r, before, after


def star_merge(
    task_vectors: Sequence[TaskVector],
    eta: float,
    collect_diagnostics: bool = True,
    threads: int | None = None,
) -> MergeResult:
    """Spectral truncate-and-rescale each task vector per 2-D layer, then average.

    1-D tensors skip the spectral step and are averaged directly.  Kept ranks
    and measured nuclear norms (before/after) are recorded per (layer, task).
    """
    _validate_aligned(task_vectors)
    if not 0.0 < eta <= 100.0:
        raise ValueError(f"eta must lie in (0, 100], got {eta}")

    names = list(task_vectors[0].keys())
    jobs = [
        (task_idx, name)
        for task_idx in range(len(task_vectors))
        for name in names
        if task_vectors[task_idx][name].ndim == 2
    ]

    def run(job: tuple[int, str]):
        task_idx, name = job
        return _star_process(task_vectors[task_idx][name], eta, name, collect_diagnostics)

    workers = _thread_count(threads)
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run, jobs))
    else:
        outputs = [run(job) for job in jobs]
    processed = {job: out for job, out in zip(jobs, outputs)}

    entries: dict[str, np.ndarray] = {}
    ranks: dict[str, tuple[int, ...]] = {}
    diagnostics: dict[str, dict[str, list[float]]] = {}
    for name in names:
        if task_vectors[0][name].ndim == 1:
            entries[name] = _mean([tv[name] for tv in task_vectors])
            continue
        per_task = [processed[(t, name)] for t in range(len(task_vectors))]
        entries[name] = _mean([out for out, _, _, _ in per_task])
        ranks[name] = tuple(r for _, r, _, _ in per_task)
        if collect_diagnostics:
            diagnostics[name] = {
                "nuclear_before": [before for _, _, before, _ in per_task],
                "nuclear_after": [after for _, _, _, after in per_task],
            }

    delta = TensorMap(entries=entries, model_id="star", role="delta")
    return MergeResult(
        delta=delta,
        per_layer_ranks=ranks,
        config=MergeConfig(method="star", eta=eta),
        diagnostics=diagnostics,
    )


def simple_average(task_vectors: Sequence[TaskVector]) -> MergeResult:
    """Element-wise mean of the task vectors."""
    _validate_aligned(task_vectors)
    entries = {
        name: _mean([tv[name] for tv in task_vectors]) for name in task_vectors[0].keys()
    }
    delta = TensorMap(entries=entries, model_id="simple_average", role="delta")
    return MergeResult(delta=delta, config=MergeConfig(method="simple_average"))


def task_arithmetic(task_vectors: Sequence[TaskVector], alpha: float) -> MergeResult:
    """Scaled sum alpha * sum_i delta_i (a sum, not a mean)."""
    _validate_aligned(task_vectors)
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    entries = {
        name: alpha * _compensated_sum([tv[name] for tv in task_vectors])
        for name in task_vectors[0].keys()
    }
    delta = TensorMap(entries=entries, model_id="task_arithmetic", role="delta")
    return MergeResult(delta=delta, config=MergeConfig(method="task_arithmetic", alpha=alpha))


def _keep_count(k_percent: float, n: int) -> int:
    if float(k_percent).is_integer():
        kept = -((-int(k_percent) * n) // 100)
    else:
        kept = math.ceil(k_percent / 100.0 * n)
    return max(1, min(n, kept))


def ties_merge(task_vectors: Sequence[TaskVector], k_percent: float) -> MergeResult:
    """Trim each task vector to its top-k% magnitudes, elect signs, average.

    Trimming ranks all elements of one task vector globally (layer names in
    lexicographic order, row-major within a tensor); magnitude ties at the
    cutoff keep the lower flat index.  Per element, the elected sign is that
    of the larger summed magnitude (positive on exact ties) and the merged
    value is the mean of sign-matching survivors, or 0 when there are none.
    """
    _validate_aligned(task_vectors)
    if not 0.0 < k_percent <= 100.0:
        raise ValueError(f"k_percent must lie in (0, 100], got {k_percent}")

    names = sorted(task_vectors[0].keys())
    sizes = [task_vectors[0][name].size for name in names]
    total = int(np.sum(sizes))
    keep = _keep_count(k_percent, total)

    trimmed_rows = []
    for tv in task_vectors:
        flat = np.concatenate([tv[name].ravel().astype(np.float64) for name in names])
        order = np.argsort(-np.abs(flat), kind="stable")
        trimmed = np.zeros_like(flat)
        kept_idx = order[:keep]
        trimmed[kept_idx] = flat[kept_idx]
        trimmed_rows.append(trimmed)

    pos_mass = _compensated_sum([np.where(row > 0, row, 0.0) for row in trimmed_rows])
    neg_mass = _compensated_sum([np.where(row < 0, -row, 0.0) for row in trimmed_rows])
    elected = np.where(neg_mass > pos_mass, -1.0, 1.0)

    matching = [np.where(np.sign(row) == elected, row, 0.0) for row in trimmed_rows]
    counts = np.sum([np.sign(row) == elected for row in trimmed_rows], axis=0)
    sums = _compensated_sum(matching)
    merged_flat = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)

    entries: dict[str, np.ndarray] = {}
    offset = 0
    for name, size in zip(names, sizes):
        entries[name] = merged_flat[offset : offset + size].reshape(task_vectors[0][name].shape)
        offset += size
    ordered = {name: entries[name] for name in task_vectors[0].keys()}
    delta = TensorMap(entries=ordered, model_id="ties", role="delta")
    return MergeResult(delta=delta, config=MergeConfig(method="ties", k_percent=k_percent))


def _philox_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def dare_sparsify(delta: TaskVector, p: float, seed: int) -> TaskVector:
    """Zero each element with probability p and rescale survivors by 1/(1-p).

    The mask bit for an element is a counter-based function of
    (seed, tensor name, flat index): a Philox stream keyed by a hash of
    (seed, tensor name), read at the element's flat position.  Identical
    inputs therefore give bit-identical outputs on any platform or schedule.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    entries: dict[str, np.ndarray] = {}
    for name, arr in delta.items():
        values = arr.astype(np.float64) / (1.0 - p)
        if p > 0.0:
            gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, name)))
            dropped = gen.random(arr.size) < p
            values = np.where(dropped.reshape(arr.shape), 0.0, values)
        entries[name] = values
    return TensorMap(entries=entries, model_id=delta.model_id, role="delta")


def _task_seed(seed: int, index: int) -> int:
    # Distinct deterministic sub-seed per task position.
    return (int(seed) + (index + 1) * _GOLDEN64) % 2**64


def prepare_task_vectors(
    pretrained: TensorMap,
    finetuned: Sequence[TensorMap | Sequence[LoraFactorPair]],
) -> list[TaskVector]:
    """Turn fine-tuned models or LoRA factor sets into dense task vectors.

    LoRA factor sets must all adapt the same target layers; their deltas are
    zero-filled over the full pretrained key set.
    """
    if len(finetuned) == 0:
        raise ValueError("need at least one fine-tuned model or adapter")
    vectors: list[TaskVector] = []
    lora_targets: set[frozenset[str]] = set()
    for idx, item in enumerate(finetuned):
        if isinstance(item, TensorMap):
            vectors.append(compute_task_vector(item, pretrained))
        else:
            pairs = list(item)
            if not all(isinstance(p, LoraFactorPair) for p in pairs):
                raise TypeError(
                    f"input {idx}: expected a TensorMap or a sequence of LoraFactorPair"
                )
            lora_targets.add(frozenset(p.target_name for p in pairs))
            vectors.append(lora_to_task_vector(pairs, pretrained, model_id=f"lora[{idx}]"))
    if len(lora_targets) > 1:
        raise ShapeError(
            "LoRA adapters target different layer sets; merging them is unsupported"
        )
    return vectors


def merge_task_vectors(
    task_vectors: Sequence[TaskVector],
    config: MergeConfig,
    collect_diagnostics: bool = True,
    threads: int | None = None,
) -> MergeResult:
    """Apply optional drop-and-rescale preprocessing, then the configured method."""
    _validate_aligned(task_vectors)
    if config.drop_p is not None:
        task_vectors = [
            dare_sparsify(tv, config.drop_p, _task_seed(config.seed, idx))
            for idx, tv in enumerate(task_vectors)
        ]
    if config.method == "star":
        result = star_merge(
            task_vectors, config.eta, collect_diagnostics=collect_diagnostics, threads=threads
        )
    elif config.method == "simple_average":
        result = simple_average(task_vectors)
    elif config.method == "task_arithmetic":
        result = task_arithmetic(task_vectors, config.alpha)
    else:
        result = ties_merge(task_vectors, config.k_percent)
    return replace(result, config=config)


def merge(
    pretrained: TensorMap,
    finetuned: Sequence[TensorMap | Sequence[LoraFactorPair]],
    config: MergeConfig,
) -> TensorMap:
    """Full pipeline: task vectors -> optional sparsify -> method -> apply."""
    task_vectors = prepare_task_vectors(pretrained, finetuned)
    result = merge_task_vectors(task_vectors, config)
    return apply_delta(pretrained, result.delta)
