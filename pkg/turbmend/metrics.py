import math

import numpy as np
from scipy.ndimage import uniform_filter
from skimage.metrics import structural_similarity

from .exceptions import ConfigurationError
from .grid_ops import as_image, check_same_shape


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf.

    Both images and ``peak`` must be on the same intensity scale.
    """
    a = as_image(a, "a")
    b = as_image(b, "b")
    check_same_shape(a, b, "images")
    if not peak > 0:
        raise ConfigurationError(f"peak must be positive, got {peak}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03."""
    a = as_image(a, "a")
    b = as_image(b, "b")
    check_same_shape(a, b, "images")
    return float(
        structural_similarity(
            a,
            b,
            data_range=data_range,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def sharpness(image, patch: int = 13) -> float:
    """Mean local unbiased variance over edge-clamped patches."""
    image = as_image(image)
    area = patch * patch
    mean = uniform_filter(image, size=patch, mode="nearest")
    mean_sq = uniform_filter(image**2, size=patch, mode="nearest")
    return float((np.maximum(mean_sq - mean**2, 0.0) * area / (area - 1)).mean())


def temporal_mean(frames) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64).mean(axis=0)
