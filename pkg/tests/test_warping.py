# vim: ai:sw=4:ts=4:sta:et:fo=croql
# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=protected-access,redefined-outer-name,invalid-name
# type: ignore
import logging

import pytest
import torch

logging.getLogger().setLevel(logging.DEBUG)

from ladder_vfi import warping


_TEST_BATCH: int = 2
_TEST_HEIGHT: int = 16
_TEST_WIDTH: int = 24


def _random_image(channels: int = 3, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    generator = torch.Generator().manual_seed(123)
    return torch.rand(_TEST_BATCH, channels, _TEST_HEIGHT, _TEST_WIDTH, generator=generator).to(
        dtype
    )


def _constant_flow(dx: float, dy: float) -> torch.Tensor:
    flow = torch.zeros(_TEST_BATCH, 2, _TEST_HEIGHT, _TEST_WIDTH)
    flow[:, 0] = dx
    flow[:, 1] = dy
    return flow


def test_backward_warp_ok_zero_flow_is_identity():
    # Given
    source = _random_image()
    flow = _constant_flow(0, 0)
    # When
    result = warping.backward_warp(source, flow)
    # Then
    assert torch.equal(result, source)


@pytest.mark.parametrize('dx,dy', [(2, -1), (-3, 0), (0, 4), (1, 1)])
def test_backward_warp_ok_integer_shift_matches_index_oracle(dx, dy):
    # Given
    source = _random_image()
    flow = _constant_flow(dx, dy)
    # When
    result = warping.backward_warp(source, flow)
    # Then
    rows = slice(max(0, -dy), _TEST_HEIGHT - max(0, dy))
    cols = slice(max(0, -dx), _TEST_WIDTH - max(0, dx))
    expected = source[:, :, rows.start + dy : rows.stop + dy, cols.start + dx : cols.stop + dx]
    assert torch.equal(result[:, :, rows, cols], expected)


def test_backward_warp_ok_bilinear_midpoint():
    # Given
    source = _random_image()
    flow = _constant_flow(0.5, 0)
    # When
    result = warping.backward_warp(source, flow)
    # Then
    expected = 0.5 * (source[..., :-1] + source[..., 1:])
    assert torch.allclose(result[..., :-1], expected, atol=1e-6)


def test_backward_warp_ok_border_is_replicated():
    # Given
    source = _random_image()
    flow = _constant_flow(100, 0)
    # When
    result = warping.backward_warp(source, flow)
    # Then
    assert torch.equal(result, source[..., -1:].expand_as(source))


def test_backward_warp_ok_matches_grid_sample_with_border_padding():
    # Given
    generator = torch.Generator().manual_seed(11)
    source = _random_image()
    flow = (torch.rand(_TEST_BATCH, 2, _TEST_HEIGHT, _TEST_WIDTH, generator=generator) - 0.5) * 8
    grid_y, grid_x = torch.meshgrid(
        torch.arange(_TEST_HEIGHT, dtype=torch.float32),
        torch.arange(_TEST_WIDTH, dtype=torch.float32),
        indexing='ij',
    )
    grid = torch.stack(
        [
            (2 * (grid_x + flow[:, 0]) + 1) / _TEST_WIDTH - 1,
            (2 * (grid_y + flow[:, 1]) + 1) / _TEST_HEIGHT - 1,
        ],
        dim=-1,
    )
    # When
    result = warping.backward_warp(source, flow)
    # Then
    expected = torch.nn.functional.grid_sample(
        source, grid, mode='bilinear', padding_mode='border', align_corners=False
    )
    assert torch.allclose(result, expected, atol=1e-5)


def test_backward_warp_ok_gradients_match_finite_differences():
    # Given
    generator = torch.Generator().manual_seed(7)
    source = torch.rand(1, 2, 6, 6, generator=generator, dtype=torch.float64)
    flow = (torch.rand(1, 2, 6, 6, generator=generator, dtype=torch.float64) - 0.5) * 2.6
    flow = flow + 0.1234
    source.requires_grad_(True)
    flow.requires_grad_(True)
    # When / Then
    assert torch.autograd.gradcheck(warping.backward_warp, (source, flow), eps=1e-6, atol=1e-5)


@pytest.mark.parametrize(
    'source_shape,flow_shape',
    [
        ((1, 3, 8, 8), (1, 3, 8, 8)),
        ((1, 3, 8, 8), (1, 2, 8, 4)),
        ((2, 3, 8, 8), (1, 2, 8, 8)),
        ((3, 8, 8), (1, 2, 8, 8)),
    ],
)
def test_backward_warp_nok_shapes(source_shape, flow_shape):
    with pytest.raises(ValueError):
        warping.backward_warp(torch.zeros(source_shape), torch.zeros(flow_shape))


def test_warp_state_ok_round_trip_through_tensor():
    # Given
    value = torch.randn(_TEST_BATCH, warping.WARP_STATE_CHANNELS, 4, 6)
    # When
    state = warping.WarpState.from_tensor(value)
    # Then
    assert torch.equal(state.as_tensor(), value)
    assert state.spatial_size == (4, 6)
    assert torch.equal(state.mask(), torch.sigmoid(value[:, 4:5]))


def test_warp_state_ok_zeros_mask_is_half():
    # When
    state = warping.WarpState.zeros(1, 4, 4)
    # Then
    assert torch.equal(state.mask(), torch.full((1, 1, 4, 4), 0.5))


def test_warp_state_nok_mismatched_shapes():
    with pytest.raises(ValueError):
        warping.WarpState(
            flow_to_0=torch.zeros(1, 2, 4, 4),
            flow_to_1=torch.zeros(1, 2, 4, 5),
            mask_logits=torch.zeros(1, 1, 4, 4),
        )
    with pytest.raises(ValueError):
        warping.WarpState.from_tensor(torch.zeros(1, 4, 4, 4))


def test_upsample_warp_state_ok_doubles_flow_keeps_logits():
    # Given
    value = torch.zeros(1, warping.WARP_STATE_CHANNELS, 4, 6)
    value[:, 0] = 1.5
    value[:, 3] = -2.0
    value[:, 4] = 0.7
    state = warping.WarpState.from_tensor(value)
    # When
    result = warping.upsample_warp_state(state)
    # Then
    assert result.spatial_size == (8, 12)
    assert torch.allclose(result.flow_to_0[:, 0], torch.full((1, 8, 12), 3.0))
    assert torch.allclose(result.flow_to_1[:, 1], torch.full((1, 8, 12), -4.0))
    assert torch.allclose(result.mask_logits, torch.full((1, 1, 8, 12), 0.7))


def test_downscale_warp_state_ok_inverts_upsample_for_constant_state():
    # Given
    value = torch.ones(1, warping.WARP_STATE_CHANNELS, 8, 8) * 4
    state = warping.WarpState.from_tensor(value)
    # When
    result = warping.upsample_warp_state(warping.downscale_warp_state(state, 1))
    down2 = warping.downscale_warp_state(state, 2)
    # Then
    assert torch.allclose(result.as_tensor(), value)
    assert down2.spatial_size == (2, 2)
    assert torch.allclose(down2.flow_to_0, torch.ones(1, 2, 2, 2))
    assert torch.allclose(down2.mask_logits, torch.full((1, 1, 2, 2), 4.0))


def test_downscale_warp_state_nok_negative_level():
    with pytest.raises(ValueError):
        warping.downscale_warp_state(warping.WarpState.zeros(1, 4, 4), -1)


def test_downsample_image_ok_area_average():
    # Given
    img = torch.arange(16, dtype=torch.float32).reshape(1, 1, 4, 4)
    # When
    result = warping.downsample_image(img)
    # Then
    expected = torch.tensor([[[[2.5, 4.5], [10.5, 12.5]]]])
    assert torch.equal(result, expected)


@pytest.mark.parametrize('factor', [0.0, 1.5, -0.5])
def test_downsample_image_nok_factor(factor):
    with pytest.raises(ValueError):
        warping.downsample_image(torch.zeros(1, 3, 8, 8), factor)


def test_downsample_image_nok_empty_result():
    with pytest.raises(ValueError):
        warping.downsample_image(torch.zeros(1, 3, 1, 8))


def test_image_pyramid_ok_sizes():
    # When
    result = warping.image_pyramid(torch.zeros(1, 3, 64, 96), 5)
    # Then
    assert [tuple(level.shape[-2:]) for level in result] == [
        (64, 96),
        (32, 48),
        (16, 24),
        (8, 12),
        (4, 6),
    ]
