import numpy as np
import pytest

from turbmend.exceptions import ConfigurationError, ShapeError
from turbmend.rpca import nuclear_norm, reference_from_lowrank, rpca_decompose, stack_frames, svt


def test_svt_zero_threshold_is_identity(rng):
    M = rng.standard_normal((6, 4))
    assert np.allclose(svt(M, 0.0), M)


def test_svt_shrinks_singular_values(rng):
    M = rng.standard_normal((8, 5))
    s = np.linalg.svd(M, compute_uv=False)
    out = np.linalg.svd(svt(M, 0.5), compute_uv=False)
    assert np.allclose(out, np.maximum(s - 0.5, 0.0), atol=1e-12)


def test_svt_large_threshold_gives_zero(rng):
    M = rng.standard_normal((5, 5))
    assert not svt(M, nuclear_norm(M) + 1).any()


def test_svt_rejects_negative_threshold_and_nan():
    with pytest.raises(ConfigurationError):
        svt(np.eye(3), -1.0)
    with pytest.raises(ShapeError):
        svt(np.array([[np.nan, 1.0]]), 0.1)


def test_zero_matrix():
    result = rpca_decompose(np.zeros((10, 4)))
    assert result.converged
    assert not result.low_rank.any()
    assert not result.sparse.any()


def test_recovers_low_rank_plus_sparse(rng):
    m, n, rank = 60, 12, 2
    low = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
    sparse = np.zeros((m, n))
    support = rng.random((m, n)) < 0.05
    sparse[support] = rng.choice([-1.0, 1.0], support.sum())
    result = rpca_decompose(low + sparse, tol=1e-9, max_iter=3000)
    assert result.converged
    assert result.primal_residual < 1e-6
    assert result.dual_residual <= 1e-9
    assert np.linalg.norm(result.low_rank - low) / np.linalg.norm(low) < 1e-3
    assert np.linalg.norm(result.low_rank + result.sparse - low - sparse) / np.linalg.norm(low + sparse) < 1e-6


def test_objective_settles(rng):
    G = rng.standard_normal((30, 8))
    result = rpca_decompose(G, tol=1e-8)
    assert len(result.objective) == result.iterations
    tail = result.objective[-5:]
    assert max(tail) - min(tail) <= 1e-3 * max(1.0, abs(tail[-1]))


def test_rank_one_input_has_negligible_sparse_part(rng):
    G = np.outer(rng.uniform(0.2, 1.0, 40), rng.uniform(0.5, 1.0, 6))
    result = rpca_decompose(G)
    assert np.linalg.norm(result.sparse) / np.linalg.norm(G) < 1e-3


def test_svt_nuclear_norm_matches_direct_svd(rng):
    M = rng.standard_normal((6, 4))
    s = np.linalg.svd(M, compute_uv=False)
    assert nuclear_norm(svt(M, 0.7)) == pytest.approx(np.maximum(s - 0.7, 0.0).sum())


def test_iteration_cap_reports_not_converged(rng):
    result = rpca_decompose(rng.standard_normal((20, 6)), tol=1e-15, max_iter=3)
    assert not result.converged
    assert result.iterations == 3


def test_bad_input():
    with pytest.raises(ShapeError):
        rpca_decompose(np.zeros(5))
    with pytest.raises(ShapeError):
        rpca_decompose(np.array([[1.0, np.inf]]))
    with pytest.raises(ConfigurationError):
        rpca_decompose(np.ones((3, 3)), lam=0.0)
    with pytest.raises(ConfigurationError):
        rpca_decompose(np.ones((3, 3)), rho=1.0)


def test_stack_and_reference_roundtrip(rng):
    frames = rng.uniform(size=(5, 4, 3))
    G = stack_frames(frames)
    assert G.shape == (12, 5)
    assert np.array_equal(G[:, 2].reshape(4, 3), frames[2])
    assert np.allclose(reference_from_lowrank(G, (4, 3)), np.median(frames, axis=0))


def test_reference_shape_mismatch():
    with pytest.raises(ShapeError):
        reference_from_lowrank(np.zeros((10, 3)), (4, 3))


def test_reference_is_per_pixel_median(rng):
    L = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 7))
    expected = np.array([sorted(row)[3] for row in L]).reshape(4, 5)
    assert np.allclose(reference_from_lowrank(L, (4, 5)), expected)
