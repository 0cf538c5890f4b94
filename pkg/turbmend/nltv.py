"""Patch-similarity graph and the nonlocal gradient, divergence and Laplacian.

Edges are stored directed and in both directions: every (x, y) has its
reverse (y, x) at index ``rev[e]`` with the same weight.
"""
import logging
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.ndimage import uniform_filter

from .config import GraphConfig
from .exceptions import ConfigurationError, ShapeError
from .grid_ops import as_image

logger = logging.getLogger(__name__)

_OFFSET_BATCH = 32


class NltvGraph(NamedTuple):
    shape: tuple[int, int]
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    rev: np.ndarray
    k: int
    symmetrized: bool = True

    @property
    def n_pixels(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_edges(self) -> int:
        return self.src.size

    def degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n_pixels)

    def weighted_degree(self) -> np.ndarray:
        """Sum of outgoing edge weights per pixel; twice its maximum bounds the Laplacian norm."""
        return np.bincount(self.src, weights=self.weight, minlength=self.n_pixels)

    @classmethod
    def from_edges(cls, shape: tuple[int, int], src, dst, weight, k: int | None = None) -> "NltvGraph":
        """Symmetrize a directed edge list by max weight on the union of both directions."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        weight = np.asarray(weight, dtype=np.float64)
        n = shape[0] * shape[1]
        if not (src.shape == dst.shape == weight.shape):
            raise ShapeError("src, dst and weight must have equal length")
        if src.size and (src.min() < 0 or dst.min() < 0 or src.max() >= n or dst.max() >= n):
            raise ShapeError("edge endpoint outside the image")
        if np.any(src == dst):
            raise ShapeError("self-edges are not allowed")
        if np.any(~np.isfinite(weight)) or np.any(weight < 0):
            raise ConfigurationError("edge weights must be finite and non-negative")

        all_src = np.concatenate([src, dst])
        all_dst = np.concatenate([dst, src])
        all_w = np.concatenate([weight, weight])
        keys = all_src * n + all_dst
        order = np.argsort(keys, kind="stable")
        keys, all_w = keys[order], all_w[order]
        if keys.size:
            starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
            sym_w = np.maximum.reduceat(all_w, starts)
            keys = keys[starts]
        else:
            sym_w = all_w
        out_src, out_dst = keys // n, keys % n
        rev = np.searchsorted(keys, out_dst * n + out_src)
        return cls(shape=tuple(shape), src=out_src, dst=out_dst, weight=sym_w, rev=rev, k=k or 0)


def _nearest_patches(u: np.ndarray, patch: int, window: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive window search returning (neighbor index, patch distance), each (H*W, k).

    Candidates are ranked by distance then linear index; missing candidates
    near the border carry index H*W and distance inf.
    """
    height, width = u.shape
    n = height * width
    pr, wr = patch // 2, window // 2
    pad = pr + wr
    padded = np.pad(u, pad)
    base = padded[wr : wr + height + 2 * pr, wr : wr + width + 2 * pr]
    rows, cols = np.indices(u.shape)
    linear = (rows * width + cols).ravel()

    offsets = [(a, b) for a in range(-wr, wr + 1) for b in range(-wr, wr + 1) if (a, b) != (0, 0)]
    best_d = np.full((n, 0), np.inf)
    best_i = np.full((n, 0), n, dtype=np.int64)
    for start in range(0, len(offsets), _OFFSET_BATCH):
        batch = offsets[start : start + _OFFSET_BATCH]
        cand_d = np.empty((n, len(batch)))
        cand_i = np.empty((n, len(batch)), dtype=np.int64)
        for col, (a, b) in enumerate(batch):
            shifted = padded[wr + a : wr + a + height + 2 * pr, wr + b : wr + b + width + 2 * pr]
            dist = uniform_filter((shifted - base) ** 2, size=patch, mode="constant")[pr : pr + height, pr : pr + width]
            valid = ((rows + a >= 0) & (rows + a < height) & (cols + b >= 0) & (cols + b < width)).ravel()
            cand_d[:, col] = np.where(valid, dist.ravel(), np.inf)
            cand_i[:, col] = np.where(valid, linear + a * width + b, n)
        all_d = np.concatenate([best_d, cand_d], axis=1)
        all_i = np.concatenate([best_i, cand_i], axis=1)
        order = np.lexsort((all_i, all_d), axis=1)[:, :k]
        best_d = np.take_along_axis(all_d, order, axis=1)
        best_i = np.take_along_axis(all_i, order, axis=1)
    # uniform_filter can leave tiny negative round-off
    return best_i, np.maximum(best_d, 0.0)


def build_graph(u, patch: int = 5, window: int = 21, k: int = 10, h: float = 0.15) -> NltvGraph:
    """Build the symmetrized k-nearest-patch graph of an image.

    Args:
        u: Image the patch distances are measured on.
        patch: Odd patch side; patches are zero-padded at the border.
        window: Odd search window side; the window is truncated at the border.
        k: Neighbors kept per pixel before symmetrization.
        h: Filtering scale of the weight exp(-d / h^2).

    Returns:
        NltvGraph with weights in [0, 1].
    """
    u = as_image(u)
    if patch < 1 or patch % 2 == 0 or window < 1 or window % 2 == 0:
        raise ConfigurationError(f"patch and window must be positive odd sizes, got {patch} and {window}")
    if patch > window:
        raise ConfigurationError(f"patch {patch} larger than window {window}")
    if k < 1:
        raise ConfigurationError(f"k must be at least 1, got {k}")
    if not h > 0:
        raise ConfigurationError(f"h must be positive, got {h}")
    if k > window * window - 1 or k > u.size - 1:
        raise ConfigurationError(f"k={k} exceeds the number of candidates in a {window}x{window} window")

    neighbors, dist = _nearest_patches(u, patch, window, k)
    found = np.isfinite(dist)
    src = np.repeat(np.arange(u.size), k).reshape(u.size, k)[found]
    weight = np.minimum(np.exp(-dist[found] / h**2), 1.0)
    graph = NltvGraph.from_edges(u.shape, src, neighbors[found], weight, k=k)
    max_degree = int(graph.degree().max(initial=0))
    if max_degree > 2 * k:
        logger.debug(
            f"graph degree reaches {max_degree} after symmetrization (k={k}), "
            f"max weighted degree {graph.weighted_degree().max(initial=0.0):.3g}"
        )
    return graph


def graph_from_config(u, cfg: GraphConfig) -> NltvGraph:
    return build_graph(u, patch=cfg.patch, window=cfg.window, k=cfg.k, h=cfg.h)


def _check_image(u, g: NltvGraph) -> np.ndarray:
    u = as_image(u)
    if u.shape != tuple(g.shape):
        raise ShapeError(f"image shape {u.shape} does not match graph shape {g.shape}")
    return u.ravel()


def nl_grad(u, g: NltvGraph) -> np.ndarray:
    flat = _check_image(u, g)
    return (flat[g.dst] - flat[g.src]) * np.sqrt(g.weight)


def nl_div(p, g: NltvGraph) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (g.n_edges,):
        raise ShapeError(f"edge vector of length {p.size} does not match graph with {g.n_edges} edges")
    out = np.bincount(g.src, weights=(p - p[g.rev]) * np.sqrt(g.weight), minlength=g.n_pixels)
    return out.reshape(g.shape)


def nl_laplacian(u, g: NltvGraph) -> np.ndarray:
    flat = _check_image(u, g)
    out = np.bincount(g.src, weights=(flat[g.dst] - flat[g.src]) * g.weight, minlength=g.n_pixels)
    return out.reshape(g.shape)


def nltv_norm(u, g: NltvGraph) -> float:
    """Isotropic nonlocal TV: sum over pixels of the l2 norm of the outgoing edge gradients."""
    flat = _check_image(u, g)
    per_pixel = np.bincount(g.src, weights=(flat[g.dst] - flat[g.src]) ** 2 * g.weight, minlength=g.n_pixels)
    return float(np.sqrt(per_pixel).sum())


def nl_laplacian_matrix(g: NltvGraph) -> sparse.csr_matrix:
    n = g.n_pixels
    adjacency = sparse.csr_matrix((g.weight, (g.src, g.dst)), shape=(n, n))
    degree = np.bincount(g.src, weights=g.weight, minlength=n)
    return (adjacency - sparse.diags(degree)).tocsr()


def nl_grad_matrix(g: NltvGraph) -> sparse.csr_matrix:
    root = np.sqrt(g.weight)
    rows = np.arange(g.n_edges)
    return sparse.csr_matrix(
        (np.concatenate([root, -root]), (np.concatenate([rows, rows]), np.concatenate([g.dst, g.src]))),
        shape=(g.n_edges, g.n_pixels),
    )
