"""Distortion-driven fusion of registered frames into one image.

For every pixel the frame whose patch is both sharp and nearly still is
taken as the temporal reference; frames whose local motion is large are
first corrected by steering-kernel regression, then all frames are averaged
with photometric weights against the reference patch.

Patches are L x L and clamped at the image border. The scalar operations
below define the per-pixel semantics; ``fuse`` evaluates the same
quantities for the whole image with box filters.
"""
import logging
import math
from typing import NamedTuple

import numpy as np
from rich.progress import track
from scipy.ndimage import uniform_filter

from .config import FusionConfig
from .exceptions import ConfigurationError, ShapeError
from .registration import DeformationField

logger = logging.getLogger(__name__)


class PatchStats(NamedTuple):
    k: int
    s: float
    e: float


class SteeringKernelParams(NamedTuple):
    theta: float
    sigma: float
    gamma: float
    r: float = 1.0


class Orientation(NamedTuple):
    theta: float
    s1: float
    s2: float


def patch_sharpness(patch) -> float:
    """Unbiased intensity variance of a patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.size < 2:
        raise ShapeError("a patch needs at least two pixels")
    return float(patch.var(ddof=1))


def movement_energy(field_patch) -> float:
    """Sum of squared displacements over the support, field_patch shaped (2, ...)."""
    field_patch = np.asarray(field_patch, dtype=np.float64)
    return float((field_patch**2).sum())


def select_near_stationary(stats: list[PatchStats], top_k: int = 10) -> int:
    """Frame index with least movement among the ``top_k`` sharpest; ties go to the lower index."""
    if not stats:
        raise ShapeError("no frames to select from")
    sharpest = sorted(stats, key=lambda st: (-st.s, st.k))[:top_k]
    return min(sharpest, key=lambda st: (st.e, st.k)).k


def _wrap_half_turn(theta: np.ndarray) -> np.ndarray:
    # into (-pi/2, pi/2]
    theta = np.where(theta > np.pi / 2, theta - np.pi, theta)
    return np.where(theta <= -np.pi / 2, theta + np.pi, theta)


def _orient(theta: np.ndarray, mean_row: np.ndarray, mean_col: np.ndarray) -> np.ndarray:
    # point the dominant axis along the mean displacement
    theta = _wrap_half_turn(theta)
    along = np.cos(theta) * mean_row + np.sin(theta) * mean_col
    return np.where(along < 0, theta + np.pi, theta)


def dominant_orientation(field_patch) -> Orientation:
    """Dominant displacement direction of a support from the SVD of its (M, 2) displacement matrix.

    The angle is measured from the row axis towards the column axis and the
    axis is oriented along the mean displacement. An all-zero support gives
    theta = 0 and s1 = s2 = 0.
    """
    field_patch = np.asarray(field_patch, dtype=np.float64)
    m = field_patch.reshape(2, -1).T
    if not np.any(m):
        return Orientation(0.0, 0.0, 0.0)
    _, s, vt = np.linalg.svd(m, full_matrices=False)
    theta = math.atan2(vt[0, 1], vt[0, 0])
    mean = m.mean(axis=0)
    theta = float(_orient(np.array(theta), mean[0], mean[1]))
    s2 = float(s[1]) if s.size > 1 else 0.0
    return Orientation(theta, float(s[0]), s2)


def elongation_scaling(s1: float, s2: float, lp: float = 1.0, lpp: float = 0.01, m: int = 169) -> tuple[float, float]:
    if not (lp > 0 and lpp > 0):
        raise ConfigurationError("lambda' and lambda'' must be positive")
    sigma = (s1 + lp) / (s2 + lp)
    gamma = math.sqrt((s1 * s2 + lpp) / m)
    return sigma, gamma


def asymmetry(sigma):
    return np.minimum(0.5 * np.sqrt(sigma), 1.0)


def _quadratic(z, t, sigma, gamma, r):
    narrow = np.where(z <= 0, r * r, 1.0)
    return gamma * (sigma * z * z / narrow + t * t / sigma)


def steering_kernel_symmetric(params: SteeringKernelParams, offset, h: float = 2.4) -> float:
    """exp(-offset^T C offset / (2 h^2)) with C = gamma * R(theta) diag(sigma, 1/sigma) R(theta)^T."""
    dr, dc = offset
    z = math.cos(params.theta) * dr + math.sin(params.theta) * dc
    t = -math.sin(params.theta) * dr + math.cos(params.theta) * dc
    return float(np.exp(-_quadratic(z, t, params.sigma, params.gamma, 1.0) / (2 * h * h)))


def steering_kernel_asymmetric(params: SteeringKernelParams, offset, h: float = 2.4) -> float:
    """Steering kernel whose profile along the dominant axis is an asymmetric Gaussian.

    Offsets along the dominant direction fall on the narrow side (variance
    scaled by r^2), offsets against it on the wide side; r = 1 is the
    symmetric kernel.
    """
    if not 0 < params.r <= 1:
        raise ConfigurationError(f"asymmetric coefficient must lie in (0, 1], got {params.r}")
    dr, dc = offset
    z = -(math.cos(params.theta) * dr + math.sin(params.theta) * dc)
    t = -math.sin(params.theta) * dr + math.cos(params.theta) * dc
    return float(np.exp(-_quadratic(z, t, params.sigma, params.gamma, params.r) / (2 * h * h)))


def steering_params(field_patch, cfg: FusionConfig = FusionConfig()) -> SteeringKernelParams:
    field_patch = np.asarray(field_patch, dtype=np.float64)
    orientation = dominant_orientation(field_patch)
    m = field_patch[0].size
    sigma, gamma = elongation_scaling(orientation.s1, orientation.s2, cfg.lambda_p, cfg.lambda_pp, m)
    r = float(asymmetry(sigma)) if cfg.asymmetric else 1.0
    return SteeringKernelParams(orientation.theta, sigma, gamma, r)


def _offsets(patch: int) -> np.ndarray:
    half = patch // 2
    rows, cols = np.mgrid[-half : half + 1, -half : half + 1]
    return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)


def spatial_regress_pixel(rk, field_patch, tau_e: float, cfg: FusionConfig = FusionConfig()) -> float:
    """Zero-order steering-kernel regression of the patch center.

    Below the movement threshold the center value is returned unchanged.
    """
    rk = np.asarray(rk, dtype=np.float64)
    field_patch = np.asarray(field_patch, dtype=np.float64)
    if rk.ndim != 2 or rk.shape[0] != rk.shape[1] or rk.shape[0] % 2 == 0:
        raise ShapeError(f"expected an odd square patch, got shape {rk.shape}")
    if field_patch.shape != (2, *rk.shape):
        raise ShapeError(f"field support {field_patch.shape} does not match patch {rk.shape}")
    half = rk.shape[0] // 2
    center = float(rk[half, half])
    if movement_energy(field_patch) <= tau_e:
        return center
    params = steering_params(field_patch, cfg)
    kernel = steering_kernel_asymmetric if cfg.asymmetric else steering_kernel_symmetric
    weights = np.array([kernel(params, offset, cfg.h) for offset in _offsets(rk.shape[0])])
    return float((weights * rk.ravel()).sum() / weights.sum())


def temporal_weight(rk, rdelta, sigma_n2: float = 2.0, mu: float = 5.0) -> float:
    """Photometric weight exp(2 sigma_n^2 / mu^2 - |r_k - r_delta|^2 / (L^2 mu^2)).

    Patches must be on the intensity scale sigma_n^2 is expressed in.
    """
    rk = np.asarray(rk, dtype=np.float64)
    rdelta = np.asarray(rdelta, dtype=np.float64)
    if rk.shape != rdelta.shape:
        raise ShapeError(f"patch shapes differ: {rk.shape} vs {rdelta.shape}")
    distance = float(((rk - rdelta) ** 2).sum())
    return float(np.exp(2 * sigma_n2 / mu**2 - distance / (rk.size * mu**2)))


def extract_patch(image: np.ndarray, row: int, col: int, patch: int) -> np.ndarray:
    """L x L patch around (row, col) with edge clamping."""
    half = patch // 2
    rows = np.clip(np.arange(row - half, row + half + 1), 0, image.shape[-2] - 1)
    cols = np.clip(np.arange(col - half, col + half + 1), 0, image.shape[-1] - 1)
    return image[..., rows[:, None], cols[None, :]]


def _box_sum(image: np.ndarray, patch: int) -> np.ndarray:
    return uniform_filter(image, size=patch, mode="nearest") * patch * patch


class FusionMaps(NamedTuple):
    sharpness: np.ndarray
    energy: np.ndarray
    reference_index: np.ndarray


def fusion_statistics(registered: np.ndarray, fields: np.ndarray, cfg: FusionConfig) -> FusionMaps:
    """Per-frame sharpness and movement-energy maps and the per-pixel reference frame k*."""
    n = registered.shape[0]
    area = cfg.patch * cfg.patch
    sharp = np.empty_like(registered)
    energy = np.empty_like(registered)
    for k in range(n):
        mean = uniform_filter(registered[k], size=cfg.patch, mode="nearest")
        mean_sq = uniform_filter(registered[k] ** 2, size=cfg.patch, mode="nearest")
        sharp[k] = np.maximum(mean_sq - mean**2, 0.0) * area / (area - 1)
        energy[k] = _box_sum(fields[k, 0] ** 2 + fields[k, 1] ** 2, cfg.patch)

    top = np.argsort(-sharp, axis=0, kind="stable")[: cfg.top_k]
    top_energy = np.take_along_axis(energy, top, axis=0)
    pick = np.lexsort((top, top_energy), axis=0)[:1]
    reference = np.take_along_axis(top, pick, axis=0)[0]
    return FusionMaps(sharp, energy, reference)


def _regress_frame(frame: np.ndarray, field: np.ndarray, mask: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """Replace masked pixels of one frame by their steering-kernel regression."""
    out = frame.copy()
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return out
    patch = cfg.patch
    half = patch // 2
    area = patch * patch
    # patch moments of the displacement matrix
    a = _box_sum(field[0] ** 2, patch)[rows, cols]
    b = _box_sum(field[0] * field[1], patch)[rows, cols]
    c = _box_sum(field[1] ** 2, patch)[rows, cols]
    mean_row = uniform_filter(field[0], size=patch, mode="nearest")[rows, cols]
    mean_col = uniform_filter(field[1], size=patch, mode="nearest")[rows, cols]

    spread = np.sqrt(((a - c) / 2) ** 2 + b**2)
    s1 = np.sqrt(np.maximum((a + c) / 2 + spread, 0.0))
    s2 = np.sqrt(np.maximum((a + c) / 2 - spread, 0.0))
    theta = _orient(0.5 * np.arctan2(2 * b, a - c), mean_row, mean_col)
    sigma = (s1 + cfg.lambda_p) / (s2 + cfg.lambda_p)
    gamma = np.sqrt((s1 * s2 + cfg.lambda_pp) / area)
    r = asymmetry(sigma) if cfg.asymmetric else np.ones_like(sigma)

    offsets = _offsets(patch)
    padded = np.pad(frame, half, mode="edge")
    for start in range(0, rows.size, cfg.chunk):
        sl = slice(start, start + cfg.chunk)
        cos_t = np.cos(theta[sl])[:, None]
        sin_t = np.sin(theta[sl])[:, None]
        along = cos_t * offsets[None, :, 0] + sin_t * offsets[None, :, 1]
        z = -along if cfg.asymmetric else along
        t = -sin_t * offsets[None, :, 0] + cos_t * offsets[None, :, 1]
        quad = _quadratic(z, t, sigma[sl, None], gamma[sl, None], r[sl, None])
        weights = np.exp(-quad / (2 * cfg.h * cfg.h))
        values = padded[rows[sl, None] + half + offsets[None, :, 0].astype(int),
                        cols[sl, None] + half + offsets[None, :, 1].astype(int)]
        out[rows[sl], cols[sl]] = (weights * values).sum(axis=1) / weights.sum(axis=1)
    return out


def _stack_fields(fields, shape) -> np.ndarray:
    stacked = np.stack([np.asarray(f.vectors if isinstance(f, DeformationField) else f, dtype=np.float64) for f in fields])
    if stacked.shape != (shape[0], 2, *shape[1:]):
        raise ShapeError(f"fields of shape {stacked.shape} do not match frames {shape}")
    return stacked


class FusionResult(NamedTuple):
    fused: np.ndarray
    reference_index: np.ndarray
    corrected_pixels: int


def fuse(registered, fields, cfg: FusionConfig = FusionConfig(), progress: bool = False) -> FusionResult:
    """Fuse registered frames into one image.

    Args:
        registered: (N, H, W) frames aligned to the reference.
        fields: N pull-back fields (DeformationField or (2, H, W) arrays).
        cfg: Fusion parameters; sigma_n2 and mu are in units of ``cfg.intensity_scale``.
        progress: Show a progress bar over frames.

    Returns:
        FusionResult with the fused image and the per-pixel reference frame map.
    """
    registered = np.asarray(registered, dtype=np.float64)
    if registered.ndim != 3 or registered.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (N, H, W) stack, got shape {registered.shape}")
    if cfg.patch < 3 or cfg.patch % 2 == 0:
        raise ConfigurationError(f"patch size must be odd and at least 3, got {cfg.patch}")
    field_stack = _stack_fields(fields, registered.shape)
    n = registered.shape[0]
    maps = fusion_statistics(registered, field_stack, cfg)
    tau_e = cfg.movement_threshold

    frames_iter = range(n)
    if progress:
        frames_iter = track(frames_iter, description="Kernel regression")
    corrected = np.empty_like(registered)
    corrected_pixels = 0
    for k in frames_iter:
        mask = maps.energy[k] > tau_e
        corrected_pixels += int(mask.sum())
        corrected[k] = _regress_frame(registered[k], field_stack[k], mask, cfg)

    scale = cfg.intensity_scale
    area = cfg.patch * cfg.patch
    reference_value = np.take_along_axis(registered, maps.reference_index[None], axis=0)[0]
    numerator = np.zeros(registered.shape[1:])
    denominator = np.zeros(registered.shape[1:])
    for j in np.unique(maps.reference_index):
        where = maps.reference_index == j
        for k in range(n):
            distance = _box_sum(((registered[k] - registered[j]) * scale) ** 2, cfg.patch)[where]
            weight = np.exp(2 * cfg.sigma_n2 / cfg.mu**2 - distance / (area * cfg.mu**2))
            numerator[where] += weight * (corrected[k][where] - reference_value[where])
            denominator[where] += weight
    fused = reference_value + numerator / denominator
    logger.info(f"fused {n} frames, spatially corrected {corrected_pixels} frame pixels")
    return FusionResult(fused, maps.reference_index, corrected_pixels)
