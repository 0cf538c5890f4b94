import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def smooth_image(height: int = 64, width: int = 64, offset: float = 0.0) -> np.ndarray:
    """Sum of soft blobs and a gentle ramp, sampled at column positions shifted by ``offset``."""
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    cols = cols + offset
    image = 0.2 + 0.1 * rows / height
    for (r, c, s, a) in [(0.3, 0.3, 6.0, 0.5), (0.65, 0.55, 8.0, 0.4), (0.4, 0.8, 5.0, 0.3), (0.8, 0.2, 7.0, 0.3)]:
        image = image + a * np.exp(-((rows - r * height) ** 2 + (cols - c * width) ** 2) / (2 * s * s))
    return np.clip(image, 0.0, 1.0)


def edge_image(size: int = 64) -> np.ndarray:
    """Blocks and bars with sharp edges."""
    image = np.full((size, size), 0.2)
    image[size // 8 : size // 2, size // 8 : size // 2] = 0.8
    image[size // 2 :, size // 2 : size // 2 + size // 8] = 0.6
    image[5 * size // 8 : 7 * size // 8, size // 8 : 3 * size // 8] = 0.45
    image[size // 16 : size // 8, 5 * size // 8 : 15 * size // 16] = 0.95
    return image
