"""Turbulence simulator: diffraction blur, random B-spline warp, motion-dependent
space-varying blur and sensor noise.

Frame i draws from its own PCG64 stream spawned from ``rng_seed``, so the
sequence is reproducible and frames can be generated in any order.
"""
import logging
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import parallel
from .config import TurbulenceConfig
from .deconv import convolve_invariant
from .exceptions import ConfigurationError
from .grid_ops import as_image
from .registration import BsplineGrid, DeformationField, field_from_grid, lattice_size, warp

logger = logging.getLogger(__name__)


class DegradedSequence(NamedTuple):
    frames: np.ndarray
    fields: list[DeformationField]


def frame_generators(seed: int, n_frames: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(child)) for child in np.random.SeedSequence(seed).spawn(n_frames)]


def control_offsets(shape: tuple[int, int], cfg: TurbulenceConfig, rng: np.random.Generator) -> BsplineGrid:
    """i.i.d. N(0, sigma_d2) control displacements on a d_g lattice."""
    ny, nx = lattice_size(shape[0], cfg.d_g), lattice_size(shape[1], cfg.d_g)
    offsets = rng.normal(0.0, np.sqrt(cfg.sigma_d2), size=(2, ny, nx))
    return BsplineGrid(cfg.d_g, offsets)


def random_deformation(shape: tuple[int, int], cfg: TurbulenceConfig, rng: np.random.Generator) -> DeformationField:
    if cfg.sigma_d2 == 0:
        return DeformationField.zeros(shape)
    return field_from_grid(control_offsets(shape, cfg, rng), shape, "pull-back")


def disc_psf(radius: float) -> np.ndarray:
    """Indicator of pixel centers within ``radius`` of the center, normalized to sum one."""
    if radius < 0:
        raise ConfigurationError(f"radius must be non-negative, got {radius}")
    half = int(np.floor(radius))
    rows, cols = np.mgrid[-half : half + 1, -half : half + 1]
    psf = (rows**2 + cols**2 <= radius**2).astype(np.float64)
    return psf / psf.sum()


def cell_windows(length: int, spacing: int) -> np.ndarray:
    """Raised-cosine windows (n_cells, length) centered every ``spacing`` pixels, 50% overlap."""
    centers = np.arange(-1, int(np.ceil((length - 1) / spacing)) + 2) * spacing
    t = np.arange(length)[None, :] - centers[:, None]
    windows = np.where(np.abs(t) < spacing, np.cos(np.pi * t / (2 * spacing)) ** 2, 0.0)
    windows = windows[windows.any(axis=1)]
    if not np.allclose(windows.sum(axis=0), 1.0, atol=1e-12):
        raise RuntimeError("overlap-add windows do not form a partition of unity")
    return windows


def _support(window: np.ndarray, margin: int) -> slice:
    nonzero = np.flatnonzero(window)
    return slice(max(int(nonzero[0]) - margin, 0), min(int(nonzero[-1]) + 1 + margin, window.size))


def space_varying_blur(u, field: DeformationField, cfg: TurbulenceConfig) -> np.ndarray:
    """Overlap-add blur with one Gaussian PSF per control cell.

    The PSF variance of a cell is ``cfg.blur_scale`` times the window-weighted
    mean of |f|^2 over the cell. Each cell is filtered at its own standard
    deviation on a crop of its window support widened by the kernel radius,
    which matches filtering the whole windowed image.
    """
    u = as_image(u)
    magnitude = field.magnitude2()
    row_w = cell_windows(u.shape[0], cfg.d_g)
    col_w = cell_windows(u.shape[1], cfg.d_g)

    # window-weighted motion energy per cell
    weighted = row_w @ magnitude @ col_w.T
    mass = np.outer(row_w.sum(axis=1), col_w.sum(axis=1))
    sigma = np.sqrt(cfg.blur_scale * weighted / mass)
    if not np.any(sigma):
        return u.copy()

    out = np.zeros_like(u)
    for (ci, cj), s in np.ndenumerate(sigma):
        # gaussian_filter truncates at int(4 * s + 0.5)
        margin = int(4.0 * s + 0.5) + 1 if s > 0 else 0
        rows = _support(row_w[ci], margin)
        cols = _support(col_w[cj], margin)
        masked = np.outer(row_w[ci, rows], col_w[cj, cols]) * u[rows, cols]
        out[rows, cols] += gaussian_filter(masked, s, mode="nearest") if s > 0 else masked
    return out


def degrade_frame(truth: np.ndarray, cfg: TurbulenceConfig, rng: np.random.Generator) -> tuple[np.ndarray, DeformationField]:
    blurred = convolve_invariant(truth, disc_psf(cfg.disc_radius)) if cfg.disc_radius > 0 else truth.copy()
    field = random_deformation(truth.shape, cfg, rng)
    frame = space_varying_blur(warp(blurred, field), field, cfg)
    if cfg.sigma_n2 > 0:
        frame = frame + rng.normal(0.0, np.sqrt(cfg.sigma_n2) / 255.0, size=frame.shape)
    return np.clip(frame, 0.0, 1.0), field


def degrade(truth, cfg: TurbulenceConfig = TurbulenceConfig(), progress: bool = False) -> DegradedSequence:
    """Simulate ``cfg.n_frames`` turbulent observations of a sharp image.

    Returns:
        DegradedSequence with (N, H, W) frames and the true pull-back fields.
    """
    truth = as_image(truth, "truth")
    cfg = cfg.validate()
    generators = frame_generators(cfg.rng_seed, cfg.n_frames)
    description = "Simulating frames" if progress else None
    results = parallel.ordered_map(lambda rng: degrade_frame(truth, cfg, rng), generators, description)
    frames = np.stack([frame for frame, _ in results])
    logger.info(f"simulated {cfg.n_frames} frames at sigma_d2={cfg.sigma_d2}, d_g={cfg.d_g}, sigma_n2={cfg.sigma_n2}")
    return DegradedSequence(frames, [field for _, field in results])
