# vim: ai:sw=4:ts=4:sta:et:fo=croql
# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=protected-access,redefined-outer-name,invalid-name
# type: ignore
import logging

import pytest
import torch

logging.getLogger().setLevel(logging.DEBUG)

from ladder_vfi import config, feature_extractor


@pytest.fixture
def extractor():
    torch.manual_seed(0)
    return feature_extractor.FeatureExtractor(config.small_config()).eval()


def test_feature_extractor_ok_pyramid_shapes(extractor):
    # Given
    img0 = torch.rand(2, 3, 64, 96)
    img1 = torch.rand(2, 3, 64, 96)
    # When
    with torch.no_grad():
        pyr0, pyr1 = extractor(img0, img1)
    # Then
    expected = [(2, 16 * 2**level, 64 >> level, 96 >> level) for level in range(5)]
    assert [tuple(level.shape) for level in pyr0] == expected
    assert [tuple(level.shape) for level in pyr1] == expected


def test_feature_extractor_ok_swapping_frames_swaps_pyramids(extractor):
    # Given
    img0 = torch.rand(1, 3, 64, 64)
    img1 = torch.rand(1, 3, 64, 64)
    # When
    with torch.no_grad():
        pyr0, pyr1 = feature_extractor.extract(img0, img1, extractor)
        swapped1, swapped0 = feature_extractor.extract(img1, img0, extractor)
    # Then
    for level in range(5):
        assert torch.allclose(pyr0[level], swapped0[level], atol=1e-6)
        assert torch.allclose(pyr1[level], swapped1[level], atol=1e-6)


def test_feature_extractor_ok_attention_levels_see_other_frame(extractor):
    # Given
    img0 = torch.rand(1, 3, 64, 64)
    img1 = torch.rand(1, 3, 64, 64)
    # When
    with torch.no_grad():
        pyr_a, _ = extractor(img0, img1)
        pyr_b, _ = extractor(img0, torch.rand(1, 3, 64, 64))
    # Then
    assert torch.equal(pyr_a[2], pyr_b[2])
    assert not torch.allclose(pyr_a[3], pyr_b[3])


@pytest.mark.parametrize('size', [(48, 64), (64, 80), (31, 32)])
def test_feature_extractor_nok_not_multiple_of_32(extractor, size):
    # Given
    img = torch.rand(1, 3, *size)
    # When / Then
    with pytest.raises(ValueError, match='pad_to_multiple'):
        extractor(img, img)


def test_feature_extractor_nok_shape_mismatch(extractor):
    with pytest.raises(ValueError):
        extractor(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 96))


@pytest.mark.parametrize(
    'size,multiple,padded',
    [((64, 96), 32, (64, 96)), ((50, 70), 32, (64, 96)), ((50, 70), 64, (64, 128))],
)
def test_pad_to_multiple_ok(size, multiple, padded):
    # Given
    img = torch.rand(1, 3, *size)
    # When
    result, record = feature_extractor.pad_to_multiple(img, multiple)
    # Then
    assert tuple(result.shape[-2:]) == padded
    assert torch.equal(feature_extractor.crop(result, record), img)
    assert record.is_empty == (size == padded)
    assert torch.equal(result[..., size[0] :, : size[1]], img[..., -1:, :].expand_as(
        result[..., size[0] :, : size[1]]
    ))


def test_pad_to_multiple_nok_multiple():
    with pytest.raises(ValueError):
        feature_extractor.pad_to_multiple(torch.rand(1, 3, 8, 8), 0)


def test_cross_frame_attention_ok_padding_is_masked():
    # Given
    torch.manual_seed(3)
    padded = feature_extractor.CrossFrameAttention(32, num_heads=2, window_size=8)
    exact = feature_extractor.CrossFrameAttention(32, num_heads=2, window_size=4)
    exact.load_state_dict(padded.state_dict())
    x = torch.randn(2, 4, 4, 32)
    other = torch.randn(2, 4, 4, 32)
    # When
    with torch.no_grad():
        result = padded(x, other)
        expected = exact(x, other)
    # Then
    for out, reference in zip(result, expected):
        assert out.shape == (2, 4, 4, 32)
        assert torch.allclose(out, reference, atol=1e-5)


def test_cross_frame_attention_ok_projects_each_frame_once():
    # Given
    torch.manual_seed(4)
    attention = feature_extractor.CrossFrameAttention(32, num_heads=2, window_size=4)
    calls = []
    attention.kv.register_forward_hook(lambda *_: calls.append(1))
    x0 = torch.randn(1, 8, 8, 32)
    x1 = torch.randn(1, 8, 8, 32)
    # When
    with torch.no_grad():
        out0, out1 = attention(x0, x1)
        swapped0, swapped1 = attention(x1, x0)
    # Then
    assert len(calls) == 4
    assert torch.allclose(out0, swapped1, atol=1e-6)
    assert torch.allclose(out1, swapped0, atol=1e-6)


def test_cross_frame_attention_nok_heads():
    with pytest.raises(ValueError):
        feature_extractor.CrossFrameAttention(30, num_heads=4, window_size=8)
