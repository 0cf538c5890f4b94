"""Finite differences on the pixel grid and the scalar cut/shrink maps.

Row index i is the vertical axis, column index j the horizontal one.
``grad_x`` differences along rows (first row zero), ``grad_y`` along
columns (first column zero).
"""
from functools import lru_cache

import numpy as np
from scipy import sparse

from .exceptions import ConfigurationError, ShapeError


def as_image(u, name: str = "image") -> np.ndarray:
    arr = np.asarray(u, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    return arr


def grad_x(u) -> np.ndarray:
    u = as_image(u)
    out = np.zeros_like(u)
    out[1:] = u[1:] - u[:-1]
    return out


def grad_y(u) -> np.ndarray:
    u = as_image(u)
    out = np.zeros_like(u)
    out[:, 1:] = u[:, 1:] - u[:, :-1]
    return out


def grad_x_adj(p) -> np.ndarray:
    """Transpose of grad_x.

    out[0] = -p[1], out[i] = p[i] - p[i+1] inside, out[H-1] = p[H-1].
    """
    p = as_image(p, "p")
    out = np.zeros_like(p)
    out[1:] += p[1:]
    out[:-1] -= p[1:]
    return out


def grad_y_adj(p) -> np.ndarray:
    p = as_image(p, "p")
    out = np.zeros_like(p)
    out[:, 1:] += p[:, 1:]
    out[:, :-1] -= p[:, 1:]
    return out


def laplacian(u) -> np.ndarray:
    """Five-point Laplacian, -grad_x^T grad_x - grad_y^T grad_y."""
    u = as_image(u)
    return -grad_x_adj(grad_x(u)) - grad_y_adj(grad_y(u))


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def cut(c, t):
    """Clamp c to [-t, t]; t may be a scalar or an array broadcasting against c."""
    if not np.all(np.asarray(t) > 0):
        raise ConfigurationError(f"cut threshold must be positive, got {np.min(t)}")
    return np.clip(c, -t, t)


def shrink(x, g: float):
    """Soft threshold sign(x) * max(|x| - g, 0), with sign(0) = 0."""
    if not g > 0:
        raise ConfigurationError(f"shrink threshold must be positive, got {g}")
    return np.sign(x) * np.maximum(np.abs(x) - g, 0.0)


@lru_cache(maxsize=32)
def _difference_1d(n: int) -> sparse.csr_matrix:
    # first row zero, row i: -1 at i-1, +1 at i
    rows = np.arange(1, n)
    data = np.concatenate([np.ones(n - 1), -np.ones(n - 1)])
    return sparse.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([rows, rows - 1]))), shape=(n, n)
    )


def gradient_matrices(shape: tuple[int, int]) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Sparse grad_x and grad_y acting on row-major flattened images."""
    height, width = shape
    gx = sparse.kron(_difference_1d(height), sparse.identity(width), format="csr")
    gy = sparse.kron(sparse.identity(height), _difference_1d(width), format="csr")
    return gx, gy


def laplacian_matrix(shape: tuple[int, int]) -> sparse.csr_matrix:
    gx, gy = gradient_matrices(shape)
    return -(gx.T @ gx + gy.T @ gy).tocsr()
