"""Space-invariant blind deconvolution with a heavy-tailed gradient prior.

Energy, on intensities scaled by ``DeconvConfig.intensity_scale``:

    |Z - L * h|^2 + gamma1 * sum phi(d_x L) + phi(d_y L) + gamma2 * |h|_1

with phi = -rho the piecewise penalty of the prior. L and h are estimated
alternately; the latent step uses half-quadratic splitting and conjugate
gradients, the kernel step projected gradient on the simplex-constrained
least squares in the gradient domain.
"""
import logging
from typing import NamedTuple

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import LinearOperator, cg

from .config import DeconvConfig, SparsePrior
from .exceptions import ConfigurationError, ShapeError
from .grid_ops import as_image, gradient_matrices, grad_x, grad_y
from .logs import log_iteration

logger = logging.getLogger(__name__)


class DeconvolutionResult(NamedTuple):
    latent: np.ndarray
    psf: np.ndarray
    energies: list[float]
    flagged: bool


def rho(x, p: SparsePrior = SparsePrior()):
    """Log-prior of a gradient value: -theta1 |x| up to the knee, -(theta2 x^2 + theta3) beyond."""
    ax = np.abs(x)
    return np.where(ax <= p.l_t, -p.theta1 * ax, -(p.theta2 * ax * ax + p.theta3))


def delta_psf(height: int, width: int | None = None) -> np.ndarray:
    width = height if width is None else width
    h = np.zeros((height, width))
    h[height // 2, width // 2] = 1.0
    return h


def _check_psf(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] % 2 == 0 or h.shape[1] % 2 == 0:
        raise ShapeError(f"PSF must be a 2-D array with odd sides, got shape {h.shape}")
    if np.any(h < 0) or not np.isclose(h.sum(), 1.0):
        raise ConfigurationError("PSF entries must be non-negative and sum to one")
    return h


def convolve_invariant(u, h) -> np.ndarray:
    """2-D convolution with edge-replicate padding."""
    return ndimage.convolve(as_image(u), _check_psf(h), mode="nearest")


def _shift_index(shape: tuple[int, int], kernel_shape: tuple[int, int]) -> list[tuple[int, int, np.ndarray]]:
    """For each kernel tap (a, b) the clamped source pixel of every output pixel."""
    height, width = shape
    ch, cw = kernel_shape[0] // 2, kernel_shape[1] // 2
    rows, cols = np.indices(shape)
    taps = []
    for a in range(kernel_shape[0]):
        src_r = np.clip(rows + ch - a, 0, height - 1)
        for b in range(kernel_shape[1]):
            src_c = np.clip(cols + cw - b, 0, width - 1)
            taps.append((a, b, (src_r * width + src_c).ravel()))
    return taps


def convolution_matrix(shape: tuple[int, int], h) -> sparse.csr_matrix:
    """Sparse matrix of ``convolve_invariant(., h)`` on row-major flattened images."""
    h = np.asarray(h, dtype=np.float64)
    n = shape[0] * shape[1]
    rows = np.arange(n)
    data, row_idx, col_idx = [], [], []
    for a, b, source in _shift_index(shape, h.shape):
        if h[a, b] == 0:
            continue
        data.append(np.full(n, h[a, b]))
        row_idx.append(rows)
        col_idx.append(source)
    if not data:
        return sparse.csr_matrix((n, n))
    return sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(row_idx), np.concatenate(col_idx))), shape=(n, n)
    )


def _penalty(x: np.ndarray, p: SparsePrior) -> np.ndarray:
    return -rho(x, p)


def energy(Z: np.ndarray, L: np.ndarray, h: np.ndarray, cfg: DeconvConfig) -> float:
    residual = ndimage.convolve(L, h, mode="nearest") - Z
    prior = _penalty(grad_x(L), cfg.prior).sum() + _penalty(grad_y(L), cfg.prior).sum()
    return float((residual**2).sum() + cfg.gamma1 * prior + cfg.gamma2 * np.abs(h).sum())


def _psi_step(g: np.ndarray, weight: float, beta: float, p: SparsePrior) -> np.ndarray:
    """Exact minimizer of weight * phi(psi) + beta * (psi - g)^2, element-wise."""
    ag = np.abs(g)
    sign = np.sign(g)
    # branch |psi| <= l_t: soft threshold, clipped into the branch
    inner = np.minimum(np.maximum(ag - weight * p.theta1 / (2 * beta), 0.0), p.l_t)
    # branch |psi| >= l_t: quadratic shrink, clipped into the branch
    outer = np.maximum(ag * beta / (beta + weight * p.theta2), p.l_t)

    def cost(a):
        return weight * _penalty(a, p) + beta * (a - ag) ** 2

    return sign * np.where(cost(inner) <= cost(outer), inner, outer)


def latent_step(Z: np.ndarray, h: np.ndarray, L0: np.ndarray, cfg: DeconvConfig) -> np.ndarray:
    """Half-quadratic estimate of the sharp image for a fixed kernel."""
    shape = Z.shape
    A = convolution_matrix(shape, h)
    At = A.T.tocsr()
    g_x, g_y = gradient_matrices(shape)
    z = Z.ravel()
    L = L0.ravel().copy()
    beta = cfg.hqs_beta_start
    while beta <= cfg.hqs_beta_max * (1 + 1e-12):
        psi_x = _psi_step(g_x @ L, cfg.gamma1, beta, cfg.prior)
        psi_y = _psi_step(g_y @ L, cfg.gamma1, beta, cfg.prior)

        def matvec(x, beta=beta):
            return At @ (A @ x) + beta * (g_x.T @ (g_x @ x) + g_y.T @ (g_y @ x))

        operator = LinearOperator((z.size, z.size), matvec=matvec, dtype=np.float64)
        rhs = At @ z + beta * (g_x.T @ psi_x + g_y.T @ psi_y)
        L, info = cg(operator, rhs, x0=L, rtol=cfg.cg_tol, maxiter=cfg.cg_iters)
        if info > 0:
            logger.debug(f"latent CG stopped at the iteration cap (beta={beta:.3g})")
        beta *= 2.0
    return L.reshape(shape)


def _shifted_gradients(image: np.ndarray, kernel_shape: tuple[int, int]) -> np.ndarray:
    """Columns are the gradient images shifted by every kernel tap, so X @ h.ravel() = grad * h."""
    flat = image.ravel()
    return np.stack([flat[source] for _, _, source in _shift_index(image.shape, kernel_shape)], axis=1)


def kernel_step(Z: np.ndarray, L: np.ndarray, h0: np.ndarray, cfg: DeconvConfig) -> np.ndarray:
    """Non-negative L1-regularized kernel fit in the gradient domain, renormalized to sum one."""
    kernel_shape = h0.shape
    gram = np.zeros((h0.size, h0.size))
    rhs = np.zeros(h0.size)
    for derivative in (grad_x, grad_y):
        X = _shifted_gradients(derivative(L), kernel_shape)
        target = derivative(Z).ravel()
        gram += X.T @ X
        rhs += X.T @ target
    lipschitz = 2 * np.linalg.eigvalsh(gram).max()
    h = h0.ravel().copy()
    if lipschitz <= 0:
        return h0.copy()
    for _ in range(cfg.kernel_iters):
        gradient = 2 * (gram @ h - rhs) + cfg.gamma2
        h = np.maximum(h - gradient / lipschitz, 0.0)
    total = h.sum()
    if total <= 0:
        return delta_psf(*kernel_shape)
    return (h / total).reshape(kernel_shape)


def _scaled(Z, cfg: DeconvConfig) -> np.ndarray:
    Z = as_image(Z, "Z")
    if not (cfg.noise_str > 0 and cfg.deblur_strength > 0):
        raise ConfigurationError("noiseStr and deblurStrength must be positive")
    return Z * cfg.intensity_scale


def blind_deconvolve(Z, cfg: DeconvConfig = DeconvConfig()) -> DeconvolutionResult:
    """Estimate the sharp image and the PSF from a single blurred image.

    Alternates latent and kernel steps ``cfg.alternations`` times starting from
    a delta kernel; an alternation that would raise the energy is rejected
    and ends the loop. A final latent step uses the estimated kernel.

    Returns:
        DeconvolutionResult; ``flagged`` is set when the kernel collapsed to a
        delta while the data residual stays large.
    """
    if cfg.kernel_width % 2 == 0 or cfg.kernel_height % 2 == 0:
        raise ConfigurationError("kernel sizes must be odd")
    scale = cfg.intensity_scale
    z = _scaled(Z, cfg)
    h = delta_psf(cfg.kernel_height, cfg.kernel_width)
    L = z.copy()
    energies = [energy(z, L, h, cfg)]
    for alternation in range(cfg.alternations):
        trial_L = latent_step(z, h, L, cfg)
        trial_h = kernel_step(z, trial_L, h, cfg)
        trial_energy = energy(z, trial_L, trial_h, cfg)
        log_iteration("blind_deconvolve", alternation, trial_energy, trial_energy - energies[-1])
        if trial_energy > energies[-1]:
            logger.debug(f"alternation {alternation} raised the energy; keeping the previous estimate")
            break
        L, h = trial_L, trial_h
        energies.append(trial_energy)

    L = latent_step(z, h, L, cfg)
    residual = np.linalg.norm(ndimage.convolve(L, h, mode="nearest") - z) / max(np.linalg.norm(z), 1e-12)
    center = h[h.shape[0] // 2, h.shape[1] // 2]
    flagged = bool(center >= cfg.collapse_weight and residual > cfg.collapse_residual)
    if flagged:
        logger.warning(f"kernel estimate collapsed to a delta with relative residual {residual:.3g}")
    return DeconvolutionResult(L / scale, h, energies, flagged)


def nonblind_deconvolve(Z, h, cfg: DeconvConfig = DeconvConfig()) -> np.ndarray:
    """Latent step alone with a known PSF."""
    h = _check_psf(h)
    z = _scaled(Z, cfg)
    return latent_step(z, h, z.copy(), cfg) / cfg.intensity_scale
