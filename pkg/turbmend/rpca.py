import logging
from typing import NamedTuple

import numpy as np
from scipy.linalg import svd

from .exceptions import ConfigurationError, ShapeError
from .grid_ops import shrink
from .logs import log_iteration

logger = logging.getLogger(__name__)


class DecompositionResult(NamedTuple):
    low_rank: np.ndarray
    sparse: np.ndarray
    iterations: int
    primal_residual: float
    converged: bool
    objective: list[float]
    dual_residual: float = 0.0


def _check_finite(m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise ShapeError("matrix has non-finite entries")


def _thresholded_svd(M: np.ndarray, tau: float) -> tuple[np.ndarray, float]:
    U, s, Vt = svd(M, full_matrices=False, lapack_driver="gesdd")
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (U[:, keep] * s[keep]) @ Vt[keep], float(s.sum())


def svt(M, tau: float) -> np.ndarray:
    """Singular value thresholding, the prox of tau * nuclear norm."""
    M = np.asarray(M, dtype=np.float64)
    _check_finite(M)
    if tau < 0:
        raise ConfigurationError(f"tau must be non-negative, got {tau}")
    if tau == 0:
        return M.copy()
    return _thresholded_svd(M, tau)[0]


def nuclear_norm(M: np.ndarray) -> float:
    return float(svd(M, compute_uv=False).sum())


def rpca_decompose(G, lam: float | None = None, tol: float = 1e-7, max_iter: int = 500,
                   rho: float = 1.5) -> DecompositionResult:
    """Split G into low-rank plus sparse parts with the inexact augmented Lagrangian method.

    The penalty mu starts at 1.25 / ||G||_2 and is multiplied or divided by
    ``rho`` whenever the primal and dual residuals are more than ten times
    apart, staying within [mu0, 1e7 * mu0].

    Args:
        G: m x n data matrix, one frame per column.
        lam: Sparse weight; None means 1 / sqrt(max(m, n)).
        tol: Stop once ||G - L - S||_F / ||G||_F and mu * ||S - S_prev||_F / ||G||_F are both <= tol.
        max_iter: Iteration cap; hitting it returns the current iterate with converged=False.
        rho: Penalty update factor.

    Returns:
        DecompositionResult, whose objective list holds ||L||_* + lam * ||S||_1 per iteration.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.size == 0:
        raise ShapeError(f"expected a non-empty matrix, got shape {G.shape}")
    _check_finite(G)
    m, n = G.shape
    if lam is None:
        lam = 1.0 / np.sqrt(max(m, n))
    if not lam > 0:
        raise ConfigurationError(f"lambda must be positive, got {lam}")
    if not rho > 1:
        raise ConfigurationError(f"rho must exceed 1, got {rho}")

    norm_fro = np.linalg.norm(G)
    if norm_fro == 0:
        return DecompositionResult(np.zeros_like(G), np.zeros_like(G), 0, 0.0, True, [0.0])

    norm_two = np.linalg.norm(G, 2)
    dual_norm = max(norm_two, np.abs(G).max() / lam)
    Y = G / dual_norm
    mu_min = 1.25 / norm_two
    mu_max = mu_min * 1e7
    mu = mu_min
    L = np.zeros_like(G)
    S = np.zeros_like(G)
    objective = []
    residual = dual_residual = np.inf
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        L, nuclear = _thresholded_svd(G - S + Y / mu, 1.0 / mu)
        S_prev = S
        S = shrink(G - L + Y / mu, lam / mu)
        Z = G - L - S
        Y = Y + mu * Z
        residual = np.linalg.norm(Z) / norm_fro
        dual_residual = mu * np.linalg.norm(S - S_prev) / norm_fro
        objective.append(nuclear + lam * float(np.abs(S).sum()))
        log_iteration("rpca", iteration, objective[-1], residual)
        if residual <= tol and dual_residual <= tol:
            converged = True
            break
        if residual > 10 * dual_residual:
            mu = min(mu * rho, mu_max)
        elif dual_residual > 10 * residual:
            mu = max(mu / rho, mu_min)

    if not converged:
        logger.warning(
            f"RPCA stopped after {iteration} iterations with residuals {residual:.3g}, {dual_residual:.3g} > {tol:.3g}"
        )
    return DecompositionResult(L, S, iteration, float(residual), converged, objective, float(dual_residual))


def stack_frames(frames: np.ndarray) -> np.ndarray:
    """(N, H, W) frames to an (H*W, N) matrix with one frame per column."""
    frames = np.asarray(frames, dtype=np.float64)
    return frames.reshape(frames.shape[0], -1).T


def reference_from_lowrank(L, shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel median across the columns of L, reshaped to an image."""
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != shape[0] * shape[1]:
        raise ShapeError(f"columns of length {L.shape[0]} cannot form a {shape} image")
    return np.median(L, axis=1).reshape(shape)
