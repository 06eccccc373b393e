# vim: ai:sw=4:ts=4:sta:et:fo=croql
# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=protected-access,redefined-outer-name,invalid-name
# type: ignore
import logging

import pytest
import torch

logging.getLogger().setLevel(logging.DEBUG)

from ladder_vfi import config, model, synthesis, warping


_TEST_SHIFT: int = 4


@pytest.fixture(scope='module')
def ladder():
    torch.manual_seed(0)
    return model.LadderModel(config.small_config())


def _state(height, width, *, dx0=0.0, dx1=0.0, logits=0.0):
    value = torch.zeros(1, warping.WARP_STATE_CHANNELS, height, width)
    value[:, 0] = dx0
    value[:, 2] = dx1
    value[:, 4] = logits
    return warping.WarpState.from_tensor(value)


def test_compose_ok_zero_state_averages_frames():
    # Given
    img0 = torch.rand(1, 3, 8, 8)
    img1 = torch.rand(1, 3, 8, 8)
    # When
    result = synthesis.compose(img0, img1, _state(8, 8))
    # Then
    assert torch.allclose(result, 0.5 * (img0 + img1), atol=1e-7)


def test_compose_ok_residual_is_added_before_clamp():
    # Given
    img0 = torch.full((1, 3, 4, 4), 0.5)
    img1 = torch.full((1, 3, 4, 4), 0.5)
    residual = torch.full((1, 3, 4, 4), 0.75)
    # When
    clamped = synthesis.compose(img0, img1, _state(4, 4), residual)
    raw = synthesis.compose(img0, img1, _state(4, 4), residual, clamp=False)
    # Then
    assert torch.equal(clamped, torch.ones_like(clamped))
    assert torch.allclose(raw, torch.full_like(raw, 1.25))


def test_compose_ok_saturated_mask_selects_one_frame():
    # Given
    img0 = torch.rand(1, 3, 4, 4)
    img1 = torch.rand(1, 3, 4, 4)
    # When
    result = synthesis.compose(img0, img1, _state(4, 4, logits=100.0))
    # Then
    assert torch.allclose(result, img0, atol=1e-6)


def test_compose_ok_exact_state_reproduces_translated_middle_frame():
    # Given
    torch.manual_seed(2)
    base = torch.rand(1, 3, 32, 32 + 2 * _TEST_SHIFT)
    img0 = base[..., 2 * _TEST_SHIFT :]
    img1 = base[..., : 32]
    middle = base[..., _TEST_SHIFT : 32 + _TEST_SHIFT]
    state = _state(32, 32, dx0=-_TEST_SHIFT, dx1=_TEST_SHIFT, logits=0.3)
    # When
    result = synthesis.compose(img0, img1, state)
    # Then
    interior = slice(_TEST_SHIFT, 32 - _TEST_SHIFT)
    assert torch.allclose(result[..., interior], middle[..., interior], atol=1e-6)


@pytest.mark.parametrize(
    'shapes',
    [
        ((1, 3, 8, 8), (1, 3, 8, 9), None),
        ((1, 3, 8, 8), (1, 3, 8, 8), (1, 3, 4, 4)),
    ],
)
def test_compose_nok_shapes(shapes):
    # Given
    shape0, shape1, residual_shape = shapes
    residual = torch.zeros(residual_shape) if residual_shape else None
    # When / Then
    with pytest.raises(ValueError):
        synthesis.compose(torch.zeros(shape0), torch.zeros(shape1), _state(8, 8), residual)


@pytest.mark.parametrize('size', [(50, 70), (64, 64), (33, 97)])
def test_interpolate_ok_any_size(ladder, size):
    # Given
    img0 = torch.rand(1, 3, *size)
    img1 = torch.rand(1, 3, *size)
    # When
    result = synthesis.interpolate(img0, img1, ladder)
    # Then
    assert result.frame.shape == img0.shape
    assert result.residual.shape == img0.shape
    assert result.warp_state.spatial_size == size
    assert result.mode == synthesis.FlowMode.ORIGINAL_FLOW
    assert float(result.frame.min()) >= 0.0
    assert float(result.frame.max()) <= 1.0


def test_interpolate_ok_both_modes_same_shape(ladder):
    # Given
    img0 = torch.rand(1, 3, 96, 128)
    img1 = torch.rand(1, 3, 96, 128)
    # When
    original = synthesis.interpolate(img0, img1, ladder, synthesis.FlowMode.ORIGINAL_FLOW)
    downscaled = synthesis.interpolate(img0, img1, ladder, 'downscaled_flow')
    # Then
    assert original.frame.shape == downscaled.frame.shape == img0.shape
    assert downscaled.mode == synthesis.FlowMode.DOWNSCALED_FLOW


def test_interpolate_ok_downscaled_flow_grid_padded_to_32(ladder, monkeypatch):
    # Given
    seen = []
    estimate = ladder.estimate_warp_state

    def recording_estimate(low0, low1):
        seen.append(tuple(low0.shape[-2:]))
        return estimate(low0, low1)

    monkeypatch.setattr(ladder, 'estimate_warp_state', recording_estimate)
    img0 = torch.rand(1, 3, 72, 80)
    img1 = torch.rand(1, 3, 72, 80)
    # When
    result = synthesis.interpolate(img0, img1, ladder, synthesis.FlowMode.DOWNSCALED_FLOW)
    # Then
    assert seen == [(64, 64)]
    assert result.frame.shape == img0.shape
    assert result.warp_state.spatial_size == (72, 80)


def test_interpolate_ok_restores_training_mode(ladder):
    # Given
    ladder.train()
    img = torch.rand(1, 3, 32, 32)
    # When
    synthesis.interpolate(img, img, ladder)
    # Then
    assert ladder.training


def test_interpolate_ok_untrained_model_averages_frames(ladder):
    # Given
    img0 = torch.rand(1, 3, 40, 40)
    img1 = torch.rand(1, 3, 40, 40)
    # When
    result = synthesis.interpolate(img0, img1, ladder)
    # Then
    assert torch.allclose(result.frame, 0.5 * (img0 + img1), atol=1e-6)


def test_interpolate_nok_shape_mismatch(ladder):
    with pytest.raises(ValueError):
        synthesis.interpolate(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 64), ladder)


def test_flow_mode_ok_input_multiple():
    assert synthesis.FlowMode.ORIGINAL_FLOW.input_multiple == 32
    assert synthesis.FlowMode.DOWNSCALED_FLOW.input_multiple == 64
