import math

import numpy as np
import pytest
from scipy.ndimage import maximum_filter, minimum_filter

from turbmend.config import FusionConfig
from turbmend.exceptions import ConfigurationError, ShapeError
from turbmend.fusion import (
    PatchStats,
    SteeringKernelParams,
    asymmetry,
    dominant_orientation,
    elongation_scaling,
    extract_patch,
    fuse,
    fusion_statistics,
    movement_energy,
    patch_sharpness,
    select_near_stationary,
    spatial_regress_pixel,
    steering_kernel_asymmetric,
    steering_kernel_symmetric,
    temporal_weight,
)
from turbmend.registration import DeformationField

from .conftest import smooth_image


def test_patch_sharpness_half_and_half():
    assert patch_sharpness([[0.0, 0.0], [1.0, 1.0]]) == pytest.approx(1 / 3)


def test_patch_sharpness_needs_two_pixels():
    with pytest.raises(ShapeError):
        patch_sharpness([[0.5]])


def test_movement_energy_of_unit_diagonal():
    assert movement_energy(np.ones((2, 13, 13))) == pytest.approx(338.0)


def test_select_prefers_still_among_sharp():
    stats = [PatchStats(0, 0.9, 50.0), PatchStats(1, 0.8, 5.0), PatchStats(2, 0.1, 0.0), PatchStats(3, 0.85, 5.0)]
    assert select_near_stationary(stats, top_k=3) == 1
    assert select_near_stationary(stats, top_k=1) == 0
    assert select_near_stationary(stats, top_k=4) == 2


def test_select_empty():
    with pytest.raises(ShapeError):
        select_near_stationary([])


def test_orientation_of_zero_field():
    assert dominant_orientation(np.zeros((2, 5, 5))) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("dr, dc", [(1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (-1.0, 0.0), (0.6, -0.8)])
def test_orientation_follows_mean_displacement(dr, dc):
    field = np.stack([np.full((3, 3), dr), np.full((3, 3), dc)])
    orientation = dominant_orientation(field)
    assert math.cos(orientation.theta) == pytest.approx(dr, abs=1e-9)
    assert math.sin(orientation.theta) == pytest.approx(dc, abs=1e-9)
    assert orientation.s1 == pytest.approx(3.0)
    assert orientation.s2 == pytest.approx(0.0, abs=1e-9)


def test_elongation_scaling():
    sigma, gamma = elongation_scaling(3.0, 1.0, 1.0, 0.01, 169)
    assert sigma == pytest.approx(2.0)
    assert gamma == pytest.approx(math.sqrt(3.01 / 169))
    with pytest.raises(ConfigurationError):
        elongation_scaling(1.0, 1.0, lp=0.0)


def test_asymmetry_saturates():
    assert asymmetry(1.0) == pytest.approx(0.5)
    assert asymmetry(16.0) == 1.0


def test_kernel_peak_at_center():
    params = SteeringKernelParams(0.3, 2.0, 0.5, 0.5)
    assert steering_kernel_symmetric(params, (0, 0)) == 1.0
    assert steering_kernel_asymmetric(params, (0, 0)) == 1.0


def test_asymmetric_with_unit_ratio_is_symmetric():
    params = SteeringKernelParams(0.7, 1.8, 0.4, 1.0)
    for offset in [(1, 2), (-3, 1), (2, -2)]:
        assert steering_kernel_asymmetric(params, offset) == pytest.approx(steering_kernel_symmetric(params, offset))


def test_asymmetric_kernel_narrow_along_motion():
    params = SteeringKernelParams(0.0, 2.0, 0.5, 0.5)
    ahead = steering_kernel_asymmetric(params, (2, 0))
    behind = steering_kernel_asymmetric(params, (-2, 0))
    assert ahead < behind
    assert behind == pytest.approx(steering_kernel_symmetric(params, (2, 0)))


def test_asymmetric_ratio_range():
    with pytest.raises(ConfigurationError):
        steering_kernel_asymmetric(SteeringKernelParams(0.0, 1.0, 1.0, 0.0), (1, 1))


def test_regression_skips_still_patches(rng):
    patch = rng.random((5, 5))
    assert spatial_regress_pixel(patch, np.zeros((2, 5, 5)), tau_e=0.0) == patch[2, 2]


def test_regression_of_constant_patch():
    field = np.stack([np.full((5, 5), 2.0), np.full((5, 5), 1.0)])
    value = spatial_regress_pixel(np.full((5, 5), 0.4), field, tau_e=1.0, cfg=FusionConfig(patch=5))
    assert value == pytest.approx(0.4)


def test_regression_patch_validation():
    with pytest.raises(ShapeError):
        spatial_regress_pixel(np.zeros((4, 4)), np.zeros((2, 4, 4)), tau_e=0.0)
    with pytest.raises(ShapeError):
        spatial_regress_pixel(np.zeros((5, 5)), np.zeros((2, 3, 3)), tau_e=0.0)


def test_temporal_weight_identical_patches():
    patch = np.ones((3, 3))
    assert temporal_weight(patch, patch, 2.0, 5.0) == pytest.approx(math.exp(4 / 25))
    assert temporal_weight(patch, patch + 10, 2.0, 5.0) < temporal_weight(patch, patch + 1, 2.0, 5.0)


def test_extract_patch_clamps():
    image = np.arange(16.0).reshape(4, 4)
    patch = extract_patch(image, 0, 0, 3)
    assert np.array_equal(patch, [[0, 0, 1], [0, 0, 1], [4, 4, 5]])


def _scalar_fuse(registered, fields, cfg):
    n, height, width = registered.shape
    scale = cfg.intensity_scale
    fused = np.empty((height, width))
    reference = np.empty((height, width), dtype=int)
    for row in range(height):
        for col in range(width):
            patches = [extract_patch(registered[k], row, col, cfg.patch) for k in range(n)]
            supports = [extract_patch(fields[k], row, col, cfg.patch) for k in range(n)]
            stats = [PatchStats(k, patch_sharpness(patches[k]), movement_energy(supports[k])) for k in range(n)]
            j = select_near_stationary(stats, cfg.top_k)
            reference[row, col] = j
            ref_value = patches[j][cfg.patch // 2, cfg.patch // 2]
            numerator = denominator = 0.0
            for k in range(n):
                value = spatial_regress_pixel(patches[k], supports[k], cfg.movement_threshold, cfg)
                weight = temporal_weight(patches[k] * scale, patches[j] * scale, cfg.sigma_n2, cfg.mu)
                numerator += weight * (value - ref_value)
                denominator += weight
            fused[row, col] = ref_value + numerator / denominator
    return fused, reference


@pytest.mark.parametrize("asymmetric", [True, False])
def test_vectorized_matches_per_pixel(rng, asymmetric):
    cfg = FusionConfig(patch=3, top_k=2, tau_e=2.0, mu=40.0, asymmetric=asymmetric)
    registered = rng.random((4, 7, 8))
    fields = rng.normal(0, 0.6, (4, 2, 7, 8))
    result = fuse(registered, fields, cfg)
    fused, reference = _scalar_fuse(registered, fields, cfg)
    assert np.array_equal(result.reference_index, reference)
    assert np.allclose(result.fused, fused, atol=1e-9)
    assert result.corrected_pixels > 0


def test_identical_still_frames_fuse_to_themselves():
    image = smooth_image(20, 20)
    registered = np.stack([image] * 3)
    fields = [DeformationField.zeros(image.shape)] * 3
    result = fuse(registered, fields, FusionConfig(patch=5))
    assert np.allclose(result.fused, image)
    assert result.corrected_pixels == 0


def test_reference_index_ties_take_first_frame():
    image = smooth_image(12, 12)
    maps = fusion_statistics(np.stack([image] * 3), np.zeros((3, 2, 12, 12)), FusionConfig(patch=3))
    assert not maps.reference_index.any()


def test_fuse_validation(rng):
    with pytest.raises(ShapeError):
        fuse(rng.random((2, 6, 6)), np.zeros((3, 2, 6, 6)))
    with pytest.raises(ConfigurationError):
        fuse(rng.random((2, 6, 6)), np.zeros((2, 2, 6, 6)), FusionConfig(patch=4))


def test_kernel_level_sets_follow_orientation():
    params = SteeringKernelParams(0.4, 3.0, 0.5, 1.0)
    along = (2 * math.cos(0.4), 2 * math.sin(0.4))
    across = (-2 * math.sin(0.4), 2 * math.cos(0.4))
    assert steering_kernel_symmetric(params, along) < steering_kernel_symmetric(params, across)


def test_elongation_grows_with_dominant_spread():
    sigmas = [elongation_scaling(s1, 0.5)[0] for s1 in (0.5, 1.0, 2.0, 4.0)]
    assert sigmas == sorted(sigmas)


def test_noise_is_averaged_out(rng):
    clean = smooth_image(32, 32)
    frames = clean + rng.normal(0, 0.02, (20, 32, 32))
    result = fuse(frames, np.zeros((20, 2, 32, 32)))
    single = ((frames[0] - clean) ** 2).mean()
    assert ((result.fused - clean) ** 2).mean() < single / 4


def test_fuse_commutes_with_shifts_for_still_fields(rng):
    cfg = FusionConfig(patch=5, top_k=3)
    frames = rng.random((5, 20, 24))
    shift, half = 3, cfg.patch // 2
    fields = np.zeros((5, 2, 20, 24))
    plain = fuse(frames, fields, cfg).fused
    moved = fuse(np.roll(frames, shift, axis=2), fields, cfg).fused
    assert np.allclose(moved[:, half + shift : 24 - half], plain[:, half : 24 - half - shift], atol=1e-10)


def test_fused_pixels_stay_within_local_frame_range(rng):
    cfg = FusionConfig(patch=3, top_k=2, tau_e=2.0, mu=40.0)
    registered = rng.random((4, 9, 10))
    fields = rng.normal(0, 0.8, (4, 2, 9, 10))
    result = fuse(registered, fields, cfg)
    assert result.corrected_pixels > 0
    low = minimum_filter(registered.min(axis=0), size=cfg.patch, mode="nearest")
    high = maximum_filter(registered.max(axis=0), size=cfg.patch, mode="nearest")
    assert np.all(result.fused >= low - 1e-12)
    assert np.all(result.fused <= high + 1e-12)
