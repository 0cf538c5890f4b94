import math

import numpy as np
import pytest

from turbmend.exceptions import ConfigurationError, ShapeError
from turbmend.metrics import psnr, sharpness, ssim, temporal_mean

from .conftest import smooth_image


def test_psnr_constant_offset():
    a = np.full((8, 8), 100.0)
    assert psnr(a, a + 10) == pytest.approx(28.1308, abs=1e-3)


def test_psnr_identical_is_infinite():
    a = smooth_image(8, 8)
    assert psnr(a, a, 1.0) == math.inf


def test_psnr_validation():
    with pytest.raises(ShapeError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ConfigurationError):
        psnr(np.zeros((3, 3)), np.ones((3, 3)), peak=0.0)


def test_ssim_identical_is_one():
    a = smooth_image(32, 32)
    assert ssim(a, a) == pytest.approx(1.0)


def test_ssim_drops_with_noise(rng):
    a = smooth_image(32, 32)
    noisy = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, noisy) < 0.9


def test_sharpness_of_constant_is_zero():
    assert sharpness(np.full((20, 20), 0.3)) == pytest.approx(0.0, abs=1e-15)


def test_sharpness_higher_for_texture(rng):
    smooth = smooth_image(40, 40)
    assert sharpness(rng.random((40, 40))) > sharpness(smooth)


def test_temporal_mean(rng):
    frames = rng.random((5, 4, 4))
    assert np.allclose(temporal_mean(frames), frames.mean(axis=0))


def test_ssim_of_inverted_binary_image():
    a = np.zeros((32, 32))
    a[::4, :] = 1.0
    a[:, ::5] = 1.0
    assert ssim(a, 1.0 - a) < 0.1
