"""B-spline free-form registration, bilinear warping and field inversion.

Fields are (2, H, W) arrays: plane 0 is the row (vertical) displacement,
plane 1 the column (horizontal) displacement. ``warp(u, f)`` samples u at
x + f(x), so a pull-back field registered with ``register(u, f_i)``
realizes the frame operator Phi_i.
"""
import logging
import math
from functools import lru_cache
from typing import Literal, NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import RegistrationConfig
from .exceptions import RegistrationDivergedError, ShapeError
from .grid_ops import as_image, check_same_shape
from .logs import log_iteration

logger = logging.getLogger(__name__)

Direction = Literal["pull-back", "push-forward"]


class DeformationField(NamedTuple):
    vectors: np.ndarray
    direction: Direction = "pull-back"

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[1:]

    @classmethod
    def zeros(cls, shape: tuple[int, int], direction: Direction = "pull-back") -> "DeformationField":
        return cls(np.zeros((2, *shape)), direction)

    def magnitude2(self) -> np.ndarray:
        return self.vectors[0] ** 2 + self.vectors[1] ** 2


class BsplineGrid(NamedTuple):
    spacing: int
    displacements: np.ndarray

    @classmethod
    def zeros(cls, shape: tuple[int, int], spacing: int) -> "BsplineGrid":
        return cls(spacing, np.zeros((2, lattice_size(shape[0], spacing), lattice_size(shape[1], spacing))))


class FieldInversion(NamedTuple):
    field: DeformationField
    residual: float


def lattice_size(length: int, spacing: int) -> int:
    # control k sits at (k - 1) * spacing; one extra cell of margin on each side
    return math.ceil((length - 1) / spacing) + 3


def cubic_bspline(t: np.ndarray) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    inner = t < 1
    outer = (t >= 1) & (t < 2)
    out[inner] = 2.0 / 3.0 - t[inner] ** 2 + 0.5 * t[inner] ** 3
    out[outer] = (2.0 - t[outer]) ** 3 / 6.0
    return out


@lru_cache(maxsize=64)
def _basis(n_samples: int, step: int, spacing: int, n_controls: int) -> np.ndarray:
    # samples at fine-grid positions 0, step, 2*step, ...
    positions = np.arange(n_samples) * step / spacing
    basis = cubic_bspline(positions[:, None] - (np.arange(n_controls)[None, :] - 1))
    basis.flags.writeable = False
    return basis


def field_from_grid(g: BsplineGrid, shape: tuple[int, int], direction: Direction = "pull-back") -> DeformationField:
    """Dense field from control displacements by tensor cubic B-spline interpolation."""
    height, width = shape
    ny, nx = g.displacements.shape[1:]
    if ny != lattice_size(height, g.spacing) or nx != lattice_size(width, g.spacing):
        raise ShapeError(f"control lattice {ny}x{nx} does not cover a {height}x{width} image at spacing {g.spacing}")
    by = _basis(height, 1, g.spacing, ny)
    bx = _basis(width, 1, g.spacing, nx)
    vectors = np.stack([by @ g.displacements[c] @ bx.T for c in range(2)])
    return DeformationField(vectors, direction)


def _check_field(u: np.ndarray, f: DeformationField) -> np.ndarray:
    vectors = np.asarray(f.vectors, dtype=np.float64)
    if vectors.shape != (2, *u.shape):
        raise ShapeError(f"field of shape {vectors.shape} does not match image {u.shape}")
    return vectors


def _bilinear_taps(shape: tuple[int, int], vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear indices (4, P) and weights (4, P) of bilinear sampling at clamped x + f(x)."""
    height, width = shape
    rows, cols = np.indices(shape, dtype=np.float64)
    r = np.clip(rows + vectors[0], 0, height - 1)
    c = np.clip(cols + vectors[1], 0, width - 1)
    r0 = np.minimum(np.floor(r), max(height - 2, 0)).astype(np.int64)
    c0 = np.minimum(np.floor(c), max(width - 2, 0)).astype(np.int64)
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, height - 1)
    c1 = np.minimum(c0 + 1, width - 1)
    index = np.stack([r0 * width + c0, r1 * width + c0, r0 * width + c1, r1 * width + c1]).reshape(4, -1)
    weights = np.stack([(1 - fr) * (1 - fc), fr * (1 - fc), (1 - fr) * fc, fr * fc]).reshape(4, -1)
    return index, weights


def warp(u, f: DeformationField) -> np.ndarray:
    """Bilinear sample of u at x + f(x); out-of-range coordinates clamp to the edge."""
    u = as_image(u)
    vectors = _check_field(u, f)
    if not np.any(vectors):
        return u.copy()
    index, weights = _bilinear_taps(u.shape, vectors)
    return (u.ravel()[index] * weights).sum(axis=0).reshape(u.shape)


def warp_adj(v, f: DeformationField) -> np.ndarray:
    """Exact transpose of ``warp``: scatter of v with the bilinear weights."""
    v = as_image(v)
    vectors = _check_field(v, f)
    if not np.any(vectors):
        return v.copy()
    index, weights = _bilinear_taps(v.shape, vectors)
    flat = np.bincount(index.ravel(), weights=(weights * v.ravel()).ravel(), minlength=v.size)
    return flat.reshape(v.shape)


def invert_field(f: DeformationField, iters: int = 20) -> FieldInversion:
    """Approximate inverse by the fixed point g = -f(x + g(x)).

    Returns:
        FieldInversion with the inverse (opposite direction tag) and the mean
        composition residual |f(x + g(x)) + g(x)| in pixels.
    """
    vectors = np.asarray(f.vectors, dtype=np.float64)
    g = DeformationField(-vectors, f.direction)
    for _ in range(iters):
        g = DeformationField(-np.stack([warp(vectors[c], g) for c in range(2)]), f.direction)
    composed = np.stack([warp(vectors[c], g) for c in range(2)]) + g.vectors
    residual = float(np.sqrt((composed**2).sum(axis=0)).mean())
    inverse_direction: Direction = "push-forward" if f.direction == "pull-back" else "pull-back"
    return FieldInversion(DeformationField(g.vectors, inverse_direction), residual)


def _bending(c: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of squared second differences along both lattice axes, and its gradient."""
    value = 0.0
    grad = np.zeros_like(c)
    for axis in (1, 2):
        if c.shape[axis] < 3:
            continue
        d2 = np.diff(c, n=2, axis=axis)
        value += float((d2**2).sum())
        # adjoint of the second difference: [1, -2, 1] scattered back
        back = np.zeros_like(c)
        lead = [slice(None)] * 3
        for shift, coef in ((0, 1.0), (1, -2.0), (2, 1.0)):
            lead[axis] = slice(shift, shift + d2.shape[axis])
            back[tuple(lead)] += coef * d2
        grad += 2 * back
    return value, grad


class _Level(NamedTuple):
    factor: int
    moving: np.ndarray
    fixed: np.ndarray
    moving_grad: np.ndarray
    by: np.ndarray
    bx: np.ndarray


def _make_level(moving: np.ndarray, fixed: np.ndarray, factor: int, spacing: int, ny: int, nx: int) -> _Level:
    if factor > 1:
        sigma = factor / 2.0
        moving = gaussian_filter(moving, sigma, mode="nearest")[::factor, ::factor]
        fixed = gaussian_filter(fixed, sigma, mode="nearest")[::factor, ::factor]
    moving_grad = np.stack(np.gradient(moving)) if min(moving.shape) > 1 else np.zeros((2, *moving.shape))
    by = _basis(moving.shape[0], factor, spacing, ny)
    bx = _basis(moving.shape[1], factor, spacing, nx)
    return _Level(factor, moving, fixed, moving_grad, by, bx)


def _level_energy(level: _Level, c: np.ndarray, beta: float, with_grad: bool):
    vectors = np.stack([level.by @ c[k] @ level.bx.T for k in range(2)]) / level.factor
    field = DeformationField(vectors)
    residual = warp(level.moving, field) - level.fixed
    ssd = 0.5 * float((residual**2).sum())
    bend, bend_grad = _bending(c)
    energy = ssd + 0.5 * beta * bend
    if not with_grad:
        return energy, ssd, None
    grad = np.empty_like(c)
    for k in range(2):
        dense = residual * warp(level.moving_grad[k], field)
        grad[k] = level.by.T @ dense @ level.bx / level.factor
    grad += 0.5 * beta * bend_grad
    return energy, ssd, grad


def register(moving, fixed, cfg: RegistrationConfig = RegistrationConfig()) -> BsplineGrid:
    """Find control displacements such that warp(moving, field) matches fixed.

    Minimizes 0.5 * SSD + 0.5 * beta * bending energy by gradient descent over
    ``cfg.levels`` resolutions, coarse to fine. Steps are measured in pixels
    (largest control displacement change) and adapted by Armijo halving on
    rejection and 1.5x growth on acceptance.

    A step counts towards divergence only when SSD and total energy both
    rose; the bending term alone may trade SSD for smoothness.

    Raises:
        RegistrationDivergedError: the energy became non-finite, or SSD and
            energy rose together over ``cfg.divergence_patience`` consecutive
            accepted steps.
    """
    moving = as_image(moving, "moving")
    fixed = as_image(fixed, "fixed")
    check_same_shape(moving, fixed, "moving and fixed images")
    grid = BsplineGrid.zeros(moving.shape, cfg.spacing)
    c = grid.displacements
    ny, nx = c.shape[1:]

    for level_index in reversed(range(cfg.levels)):
        factor = 2**level_index
        if min(moving.shape) // factor < 4:
            continue
        level = _make_level(moving, fixed, factor, cfg.spacing, ny, nx)
        step = cfg.initial_step * factor
        energy, ssd, grad = _level_energy(level, c, cfg.beta, with_grad=True)
        ssd_history = [ssd]
        rises = 0
        for iteration in range(cfg.max_iter):
            scale = np.abs(grad).max()
            if scale == 0 or step < cfg.min_step:
                break
            direction = -grad / scale
            slope = float((grad * direction).sum())
            while step >= cfg.min_step:
                trial = c + step * direction
                trial_energy, trial_ssd, _ = _level_energy(level, trial, cfg.beta, with_grad=False)
                if trial_energy <= energy + 1e-4 * step * slope:
                    break
                step *= 0.5
            else:
                break
            decrease = energy - trial_energy
            previous_energy = energy
            c = trial
            energy, ssd, grad = _level_energy(level, c, cfg.beta, with_grad=True)
            rises = rises + 1 if ssd > ssd_history[-1] and energy >= previous_energy else 0
            ssd_history.append(ssd)
            log_iteration(f"register[level={level_index}]", iteration, energy, ssd)
            if not np.isfinite(energy):
                raise RegistrationDivergedError(f"energy became {energy} at level {level_index}", ssd_history)
            if rises >= cfg.divergence_patience:
                raise RegistrationDivergedError(
                    f"SSD and energy increased over {rises} consecutive steps at level {level_index}", ssd_history
                )
            step = min(step * 1.5, cfg.spacing / 2.0)
            if decrease <= cfg.tol * max(energy, 1e-12):
                break

    return BsplineGrid(cfg.spacing, c)


def register_field(moving, fixed, cfg: RegistrationConfig = RegistrationConfig()) -> DeformationField:
    """Pull-back field taking ``moving`` onto ``fixed``."""
    grid = register(moving, fixed, cfg)
    return field_from_grid(grid, np.shape(moving), "pull-back")
