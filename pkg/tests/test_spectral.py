import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specmerge import (
    ConflictBoundReport,
    DegenerateSpectrumError,
    ShapeError,
    SpectralDecomposition,
    ValidationError,
    conflict_bound,
    nuclear_norm,
    numerical_rank,
    rank_keep,
    rescale_singular_values,
    svd,
    truncate_reconstruct,
)


# ---------------------------------------------------------------------------
# svd
# ---------------------------------------------------------------------------


def test_svd_identity_spectrum():
    dec = svd(np.eye(3))
    np.testing.assert_array_equal(dec.sigma, [1.0, 1.0, 1.0])


def test_svd_diagonal_matrix():
    dec = svd(np.diag([4.0, 3.0, 2.0, 1.0]))
    np.testing.assert_allclose(dec.sigma, [4.0, 3.0, 2.0, 1.0], rtol=1e-14)
    # singular vectors are (signed) identity columns; sign convention makes them +e_i
    np.testing.assert_allclose(dec.u, np.eye(4), atol=1e-14)
    np.testing.assert_allclose(dec.v, np.eye(4), atol=1e-14)


def test_svd_matches_gram_eigenvalue_oracle(rng):
    mat = rng.standard_normal((64, 48))
    dec = svd(mat)
    oracle = np.sqrt(np.clip(np.linalg.eigvalsh(mat.T @ mat), 0.0, None))[::-1]
    np.testing.assert_allclose(dec.sigma, oracle, rtol=0, atol=1e-8 * oracle[0])
    recon = (dec.u * dec.sigma) @ dec.v.T
    tol = 1e-8 * dec.sigma[0] * np.sqrt(mat.size)
    assert np.max(np.abs(recon - mat)) < tol


def test_svd_orthonormal_factors(rng):
    dec = svd(rng.standard_normal((20, 12)))
    k = dec.k
    assert np.linalg.norm(dec.u.T @ dec.u - np.eye(k)) < 1e-10
    assert np.linalg.norm(dec.v.T @ dec.v - np.eye(k)) < 1e-10


def test_svd_sign_convention_and_determinism(rng):
    mat = rng.standard_normal((9, 7))
    dec = svd(mat)
    for i in range(dec.k):
        anchor = np.argmax(np.abs(dec.u[:, i]))
        assert dec.u[anchor, i] > 0
    again = svd(mat)
    assert np.array_equal(dec.u, again.u)
    assert np.array_equal(dec.v, again.v)


def test_svd_rejects_nonfinite_and_wrong_ndim():
    with pytest.raises(ValidationError) as err:
        svd(np.array([[1.0, np.nan]]), name="layer.7")
    assert "layer.7" in str(err.value)
    with pytest.raises(ShapeError):
        svd(np.ones(4))


def test_decomposition_invariant_validation():
    with pytest.raises(ShapeError):
        SpectralDecomposition(
            u=np.eye(3), sigma=np.ones(3), v=np.eye(3), orig_shape=(3, 4)
        )
    with pytest.raises(ValidationError):
        SpectralDecomposition(
            u=np.eye(2), sigma=np.array([1.0, 2.0]), v=np.eye(2), orig_shape=(2, 2)
        )


# ---------------------------------------------------------------------------
# rank_keep
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("eta,expected", [(40.0, 1), (70.0, 2), (100.0, 4)])
def test_rank_keep_hand_cumulative_sums(eta, expected):
    assert rank_keep(np.array([4.0, 3.0, 2.0, 1.0]), eta) == expected


def test_rank_keep_full_mass_counts_nonzeros():
    assert rank_keep(np.array([4.0, 3.0, 2.0, 1.0, 0.0, 0.0]), 100.0) == 4
    assert rank_keep(np.array([5.0, 0.0, 0.0]), 100.0) == 1
    assert rank_keep(np.array([5.0, 0.0, 0.0]), 40.0) == 1
    # values at or below the relative cutoff count as zero
    assert rank_keep(np.array([1.0, 1e-13]), 100.0) == 1


def test_rank_keep_validation():
    with pytest.raises(ValueError):
        rank_keep(np.array([1.0]), 0.0)
    with pytest.raises(ValueError):
        rank_keep(np.array([1.0]), 100.5)
    with pytest.raises(DegenerateSpectrumError):
        rank_keep(np.zeros(4), 40.0)
    with pytest.raises(ValidationError):
        rank_keep(np.array([1.0, 2.0]), 40.0)  # not sorted
    with pytest.raises(ValidationError):
        rank_keep(np.array([1.0, -0.5]), 40.0)


@settings(max_examples=200, deadline=None)
@given(
    sigma=st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=30),
    eta_pair=st.tuples(st.floats(1.0, 100.0), st.floats(1.0, 100.0)),
)
def test_rank_keep_monotone_in_eta(sigma, eta_pair):
    spectrum = np.sort(np.asarray(sigma))[::-1]
    if spectrum[0] <= 0:
        return
    lo, hi = sorted(eta_pair)
    assert rank_keep(spectrum, lo) <= rank_keep(spectrum, hi)


# ---------------------------------------------------------------------------
# rescale + truncate
# ---------------------------------------------------------------------------


def test_rescale_hand_arithmetic():
    out = rescale_singular_values(np.array([4.0, 3.0, 2.0, 1.0]), 2)
    np.testing.assert_allclose(out, [40.0 / 7.0, 30.0 / 7.0], rtol=1e-15)


def test_rescale_full_rank_is_identity():
    sigma = np.array([4.0, 3.0, 2.0, 1.0])
    assert np.array_equal(rescale_singular_values(sigma, 4), sigma)


def test_rescale_concentrated_mass():
    np.testing.assert_array_equal(rescale_singular_values(np.array([5.0, 0.0, 0.0]), 1), [5.0])


def test_rescale_preserves_total_mass(rng):
    for _ in range(50):
        k = int(rng.integers(1, 40))
        sigma = np.sort(rng.uniform(0, 10, k))[::-1]
        if sigma[0] == 0:
            continue
        r = int(rng.integers(1, k + 1))
        if np.sum(sigma[:r]) == 0:
            continue
        out = rescale_singular_values(sigma, r)
        assert out.shape == (r,)
        assert np.all(np.diff(out) <= 0)
        assert abs(np.sum(out) - np.sum(sigma)) <= 1e-12 * np.sum(sigma)


def test_rescale_rejects_bad_rank():
    sigma = np.array([2.0, 1.0])
    with pytest.raises(ValueError):
        rescale_singular_values(sigma, 0)
    with pytest.raises(ValueError):
        rescale_singular_values(sigma, 3)


def test_truncate_reconstruct_full_rank_round_trip(rng):
    mat = rng.standard_normal((10, 6))
    dec = svd(mat)
    recon = truncate_reconstruct(dec, dec.k, dec.sigma)
    np.testing.assert_allclose(recon, mat, atol=1e-12 * dec.sigma[0])


def test_truncate_reconstruct_rank_one_with_rescale():
    dec = svd(np.diag([4.0, 3.0]))
    out = truncate_reconstruct(dec, 1, rescale_singular_values(dec.sigma, 1))
    np.testing.assert_allclose(out, [[7.0, 0.0], [0.0, 0.0]], atol=1e-14)


def test_truncate_reconstruct_rejects_rank_zero(rng):
    dec = svd(rng.standard_normal((4, 4)))
    with pytest.raises(ValueError):
        truncate_reconstruct(dec, 0, np.array([]))
    with pytest.raises(ValueError):
        truncate_reconstruct(dec, 2, np.array([1.0]))


def test_truncated_output_rank_and_nuclear_norm(rng):
    mat = rng.standard_normal((24, 16))
    dec = svd(mat)
    for r in (1, 3, 7):
        resc = rescale_singular_values(dec.sigma, r)
        out = truncate_reconstruct(dec, r, resc)
        sigma_out = np.linalg.svd(out, compute_uv=False)
        assert np.count_nonzero(sigma_out > 1e-8 * sigma_out[0]) <= r
        assert abs(np.sum(sigma_out) - np.sum(resc)) <= 1e-9 * np.sum(resc)


def test_nuclear_restoration_chain(rng):
    for _ in range(20):
        mat = rng.standard_normal((int(rng.integers(2, 40)), int(rng.integers(2, 30))))
        original = nuclear_norm(mat)
        dec = svd(mat)
        for eta in (10.0, 40.0, 70.0, 100.0):
            r = rank_keep(dec.sigma, eta)
            restored = nuclear_norm(truncate_reconstruct(dec, r, rescale_singular_values(dec.sigma, r)))
            assert abs(restored - original) <= 1e-9 * original


# ---------------------------------------------------------------------------
# nuclear norm
# ---------------------------------------------------------------------------


def test_nuclear_norm_diagonal():
    assert nuclear_norm(np.diag([4.0, 3.0, 2.0, 1.0])) == pytest.approx(10.0, rel=1e-14)


def test_nuclear_norm_zero_matrix():
    assert nuclear_norm(np.zeros((5, 3))) == 0.0


def test_nuclear_norm_matches_eig_oracle(rng):
    mat = rng.standard_normal((32, 32))
    oracle = float(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(mat.T @ mat), 0.0, None))))
    assert nuclear_norm(mat) == pytest.approx(oracle, rel=1e-8)


# ---------------------------------------------------------------------------
# conflict bound
# ---------------------------------------------------------------------------


def test_conflict_bound_zero_operator(rng):
    a = rng.standard_normal((4, 4))
    report = conflict_bound(a, np.zeros((4, 4)), rng.uniform(-1, 1, 4), 0)
    assert report.lhs == 0.0
    assert report.bound == 0.0
    assert report.rank_b == 0


def test_conflict_bound_identity_hand_case():
    report = conflict_bound(np.eye(2), np.eye(2), [1.0, 0.0], 1)
    assert report.rank_a == 2 and report.rank_b == 2
    assert report.beta == 1.0
    assert report.lhs == pytest.approx(1.0, rel=1e-14)
    assert report.bound == pytest.approx(2.0 * np.sqrt(2.0), rel=1e-14)
    assert report.bound_after_truncation == pytest.approx(np.sqrt(2.0), rel=1e-14)


def test_conflict_bound_reduction_identity(rng):
    a = rng.standard_normal((8, 8))
    b = rng.standard_normal((8, 8))
    coeffs = rng.uniform(-1, 1, 8)
    full = conflict_bound(a, b, coeffs, 0)
    step = full.beta * np.sqrt(full.rank_a)
    for r in range(full.rank_b + 1):
        rep = conflict_bound(a, b, coeffs, r)
        expected = (rep.rank_b - r) * step
        assert abs((rep.bound - rep.bound_after_truncation) - expected) <= 1e-9 * max(1.0, expected)


def _matrix_rank(mat):
    return numerical_rank(np.linalg.svd(mat, compute_uv=False))


def test_conflict_bound_monte_carlo(rng):
    for _ in range(200):
        a = rng.standard_normal((16, 16))
        b = rng.standard_normal((16, 16))
        coeffs = rng.uniform(-1, 1, _matrix_rank(a))
        report = conflict_bound(a, b, coeffs, int(rng.integers(0, _matrix_rank(b) + 1)))
        assert report.lhs <= report.bound


def test_conflict_bound_argument_errors(rng):
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 4))
    with pytest.raises(ValueError):
        conflict_bound(a, b, [1.0, 2.0], 0)  # coeffs length != rank of a
    with pytest.raises(ShapeError):
        conflict_bound(a, rng.standard_normal((4, 5)), np.ones(4), 0)
    with pytest.raises(ValueError):
        conflict_bound(a, b, np.ones(4), 5)  # trunc_rank beyond rank of b


def test_conflict_bound_report_rejects_violations():
    with pytest.raises(Exception):
        ConflictBoundReport(
            rank_a=1, rank_b=1, beta=1.0, lhs=5.0, bound=1.0,
            bound_after_truncation=1.0, trunc_rank=1,
        )
