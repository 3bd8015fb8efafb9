"""Numerical property battery: spectral invariants and the interference bound.

Each check runs a seeded randomized verification and reports pass/fail with
a short measurement summary.  The CLI `verify` subcommand runs the whole
battery; the acceptance tests call the same functions at their contract
sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .merge import simple_average, star_merge
from .spectral import (
    conflict_bound,
    nuclear_norm,
    numerical_rank,
    rank_keep,
    rescale_singular_values,
    svd,
    truncate_reconstruct,
)
from .tensorstore import TensorMap

__all__ = [
    "CheckResult",
    "check_nuclear_restoration",
    "check_eta100_degeneracy",
    "check_conflict_bound",
    "check_rank_rule",
    "check_svd_oracle",
    "check_eckart_young",
    "run_all",
]

ETA_GRID = tuple(range(10, 101, 10))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_shape(rng: np.random.Generator, max_m: int, max_n: int) -> tuple[int, int]:
    return int(rng.integers(1, max_m + 1)), int(rng.integers(1, max_n + 1))


def check_nuclear_restoration(num_matrices: int = 500, seed: int = 2001) -> CheckResult:
    """Truncate-and-rescale preserves the nuclear norm at every threshold."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_matrices):
        m, n = _random_shape(rng, 128, 96)
        mat = rng.standard_normal((m, n))
        original = nuclear_norm(mat)
        dec = svd(mat)
        for eta in ETA_GRID:
            r = rank_keep(dec.sigma, eta)
            resc = rescale_singular_values(dec.sigma, r)
            restored = nuclear_norm(truncate_reconstruct(dec, r, resc))
            worst = max(worst, abs(restored - original) / original)
    return CheckResult(
        name="nuclear_restoration",
        passed=worst <= 1e-9,
        detail=f"{num_matrices} matrices x {len(ETA_GRID)} thresholds, worst rel err {worst:.3e}",
    )


def _random_multilayer_inputs(rng: np.random.Generator) -> list[TensorMap]:
    num_tasks = int(rng.integers(2, 5))
    shapes = [
        ("attn.weight", (int(rng.integers(2, 24)), int(rng.integers(2, 24)))),
        ("mlp.weight", (int(rng.integers(2, 32)), int(rng.integers(2, 16)))),
        ("norm.bias", (int(rng.integers(2, 24)),)),
    ]
    vectors = []
    for t in range(num_tasks):
        entries = {name: rng.standard_normal(shape) for name, shape in shapes}
        vectors.append(TensorMap(entries=entries, model_id=f"deg[{t}]", role="delta"))
    return vectors


def check_eta100_degeneracy(num_inputs: int = 100, seed: int = 2002) -> CheckResult:
    """star at a 100% mass threshold coincides with plain averaging."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_inputs):
        vectors = _random_multilayer_inputs(rng)
        via_star = star_merge(vectors, eta=100.0, collect_diagnostics=False).delta
        via_mean = simple_average(vectors).delta
        for name in via_mean.keys():
            scale = max(1e-30, float(np.max(np.abs(via_mean[name]))))
            diff = float(np.max(np.abs(via_star[name] - via_mean[name])))
            worst = max(worst, diff / scale)
    return CheckResult(
        name="eta100_degeneracy",
        passed=worst <= 1e-9,
        detail=f"{num_inputs} multi-layer inputs, worst rel deviation {worst:.3e}",
    )


def check_conflict_bound(trials: int = 1000, size: int = 16, seed: int = 2003) -> CheckResult:
    """||Bx|| never exceeds rank_b*beta*sqrt(rank_a); truncation shrinks the
    bound by exactly (rank_b - r)*beta*sqrt(rank_a)."""
    rng = np.random.default_rng(seed)
    worst_margin = np.inf
    worst_identity = 0.0
    for _ in range(trials):
        a = rng.standard_normal((size, size))
        b = rng.standard_normal((size, size))
        coeffs = rng.uniform(-1.0, 1.0, size=numerical_rank(np.linalg.svd(a, compute_uv=False)))
        full = conflict_bound(a, b, coeffs, trunc_rank=0)
        worst_margin = min(worst_margin, full.bound - full.lhs)
        expected_step = full.beta * np.sqrt(full.rank_a)
        for r in range(full.rank_b + 1):
            report = conflict_bound(a, b, coeffs, trunc_rank=r)
            if report.lhs > report.bound:
                return CheckResult("conflict_bound", False, f"bound violated at r={r}")
            reduction = report.bound - report.bound_after_truncation
            expected = (report.rank_b - r) * expected_step
            err = abs(reduction - expected) / max(1.0, expected)
            worst_identity = max(worst_identity, err)
    passed = worst_margin >= 0.0 and worst_identity <= 1e-9
    return CheckResult(
        name="conflict_bound",
        passed=passed,
        detail=(
            f"{trials} trials at {size}x{size}, min slack {worst_margin:.3e}, "
            f"worst reduction-identity rel err {worst_identity:.3e}"
        ),
    )


def check_rank_rule(num_spectra: int = 1000, seed: int = 2004) -> CheckResult:
    """Hand-computed thresholds plus monotonicity in the mass threshold."""
    hand = [(40.0, 1), (70.0, 2), (100.0, 4)]
    sigma = np.array([4.0, 3.0, 2.0, 1.0])
    for eta, expected in hand:
        got = rank_keep(sigma, eta)
        if got != expected:
            return CheckResult(
                "rank_rule", False, f"sigma=[4,3,2,1] eta={eta}: expected {expected}, got {got}"
            )
    rng = np.random.default_rng(seed)
    grid = np.arange(1.0, 101.0, 1.0)
    for _ in range(num_spectra):
        k = int(rng.integers(1, 40))
        spectrum = np.sort(np.abs(rng.standard_normal(k)))[::-1]
        if rng.random() < 0.2 and k > 2:
            spectrum[-int(rng.integers(1, k)) :] = 0.0
        if spectrum[0] == 0.0:
            continue
        ranks = [rank_keep(spectrum, eta) for eta in grid]
        if any(b < a for a, b in zip(ranks, ranks[1:])):
            return CheckResult("rank_rule", False, "monotonicity violated")
    return CheckResult(
        "rank_rule", True, f"hand thresholds exact, monotone on {num_spectra} random spectra"
    )


def _gram_singular_values(mat: np.ndarray) -> np.ndarray:
    """Independent oracle: singular values via eigenvalues of the Gram matrix."""
    m, n = mat.shape
    gram = mat.T @ mat if n <= m else mat @ mat.T
    eigs = np.linalg.eigvalsh(gram)
    return np.sqrt(np.clip(eigs, 0.0, None))[::-1]


def check_svd_oracle(num_matrices: int = 200, max_dim: int = 128, seed: int = 2005) -> CheckResult:
    """Singular values match the Gram-eigenvalue oracle; factors are orthonormal
    and reconstruct the input.

    The sigma comparison runs on generic (full-rank) random matrices: the Gram
    route saturates at sqrt(eps)*sigma_max for exactly-zero singular values,
    so rank-deficient instances exercise only the factor invariants.
    """
    rng = np.random.default_rng(seed)
    worst_sigma = 0.0
    worst_ortho = 0.0
    worst_recon = 0.0
    for i in range(num_matrices):
        m, n = _random_shape(rng, max_dim, max_dim)
        mat = rng.standard_normal((m, n))
        deficient = i % 5 == 0 and min(m, n) > 2
        if deficient:
            r = int(rng.integers(1, min(m, n)))
            mat = rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
        dec = svd(mat)
        smax = float(dec.sigma[0]) if dec.sigma.size else 0.0
        if smax == 0.0:
            continue
        if not deficient:
            oracle = _gram_singular_values(mat)
            worst_sigma = max(worst_sigma, float(np.max(np.abs(dec.sigma - oracle))) / smax)
        k = dec.k
        worst_ortho = max(
            worst_ortho,
            float(np.linalg.norm(dec.u.T @ dec.u - np.eye(k))),
            float(np.linalg.norm(dec.v.T @ dec.v - np.eye(k))),
        )
        recon = (dec.u * dec.sigma) @ dec.v.T
        worst_recon = max(
            worst_recon,
            float(np.max(np.abs(recon - mat))) / (smax * np.sqrt(m * n)),
        )
    passed = worst_sigma <= 1e-8 and worst_ortho <= 1e-10 and worst_recon <= 1e-8
    return CheckResult(
        name="svd_oracle",
        passed=passed,
        detail=(
            f"{num_matrices} matrices, worst sigma err {worst_sigma:.3e}, "
            f"orthonormality {worst_ortho:.3e}, reconstruction {worst_recon:.3e}"
        ),
    )


def check_eckart_young(num_competitors: int = 100, seed: int = 2006) -> CheckResult:
    """Unrescaled rank-r truncation beats random rank-r competitors in Frobenius."""
    rng = np.random.default_rng(seed)
    for m, n, r in [(24, 16, 1), (24, 16, 3), (32, 32, 5)]:
        mat = rng.standard_normal((m, n))
        dec = svd(mat)
        trunc = truncate_reconstruct(dec, r, dec.sigma[:r])
        base_err = float(np.linalg.norm(mat - trunc))
        scale = float(np.linalg.norm(mat))
        for _ in range(num_competitors):
            candidate = rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
            candidate *= scale / float(np.linalg.norm(candidate))
            if base_err > float(np.linalg.norm(mat - candidate)) + 1e-12:
                return CheckResult("eckart_young", False, f"beaten at shape ({m},{n}) r={r}")
    return CheckResult(
        "eckart_young", True, f"{num_competitors} competitors per shape, truncation optimal"
    )


_ALL_CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_nuclear_restoration,
    check_eta100_degeneracy,
    check_conflict_bound,
    check_rank_rule,
    check_svd_oracle,
    check_eckart_young,
)


def run_all() -> list[CheckResult]:
    return [check() for check in _ALL_CHECKS]
