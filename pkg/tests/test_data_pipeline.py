# vim: ai:sw=4:ts=4:sta:et:fo=croql
# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=protected-access,redefined-outer-name,invalid-name
# type: ignore
import logging

import numpy as np
import pytest
import torch

logging.getLogger().setLevel(logging.DEBUG)

from ladder_vfi import data_pipeline
from ladder_vfi.synthesis import FlowMode


_TEST_SIZE: int = 64


def _triplet(height=48, width=64, seed=0, source_id='clip'):
    generator = torch.Generator().manual_seed(seed)
    frames = torch.rand(3, 3, height, width, generator=generator)
    return data_pipeline.Triplet.from_stack(frames, source_id=source_id)


def _flat(color):
    return data_pipeline.Texture(base=color, amplitude=0.0, frequencies=(), phases=())


def test_write_image_ok_read_back(tmp_path):
    # Given
    img = torch.rand(3, 20, 30)
    path = tmp_path / 'nested' / 'frame.png'
    # When
    data_pipeline.write_image(img, path)
    result = data_pipeline.read_image(path)
    # Then
    assert result.dtype == torch.float32
    assert result.shape == (3, 20, 30)
    assert torch.allclose(result, (img * 255).round() / 255, atol=1e-6)
    assert [entry.name for entry in path.parent.iterdir()] == ['frame.png']


def test_read_image_nok_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match='missing.png'):
        data_pipeline.read_image(tmp_path / 'missing.png')


def test_read_image_nok_undecodable(tmp_path):
    # Given
    path = tmp_path / 'bad.png'
    path.write_bytes(b'not an image')
    # When / Then
    with pytest.raises(ValueError, match='bad.png'):
        data_pipeline.read_image(path)


def test_triplet_nok_shapes():
    with pytest.raises(ValueError):
        data_pipeline.Triplet(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ValueError):
        data_pipeline.Triplet(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4), torch.zeros(1, 4, 4))


def test_write_triplets_ok_loaded_in_list_order(tmp_path):
    # Given
    triplets = [_triplet(seed=index, source_id=f'src{index}') for index in range(3)]
    # When
    list_file = data_pipeline.write_triplets(triplets, tmp_path)
    result = list(data_pipeline.load_vimeo_triplets(tmp_path))
    # Then
    assert list_file == tmp_path / data_pipeline.TRAIN_LIST_NAME
    assert [triplet.source_id for triplet in result] == ['00001/0001', '00001/0002', '00001/0003']
    for written, loaded in zip(triplets, result):
        assert torch.allclose(loaded.middle, (written.middle * 255).round() / 255, atol=1e-6)
    sequence = data_pipeline.VimeoTripletSequence(tmp_path)
    assert len(sequence) == 3
    assert torch.equal(sequence[1].first, result[1].first)


def test_discover_triplet_folders_ok_sorted(tmp_path):
    # Given
    data_pipeline.write_triplets([_triplet(), _triplet(seed=1)], tmp_path)
    # When
    result = data_pipeline.discover_triplet_folders(tmp_path)
    # Then
    assert result == [
        tmp_path / 'sequences' / '00001' / '0001',
        tmp_path / 'sequences' / '00001' / '0002',
    ]


def test_discover_triplet_folders_nok_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        data_pipeline.discover_triplet_folders(tmp_path / 'nowhere')


@pytest.mark.parametrize(
    'content,line',
    [
        ('00001/0001\nbad entry\n', 'line 2'),
        ('\n\n00001\n', 'line 3'),
        ('00001/0001/extra\n', 'line 1'),
    ],
)
def test_read_list_file_nok_malformed(tmp_path, content, line):
    # Given
    list_file = tmp_path / 'list.txt'
    list_file.write_text(content, encoding='utf-8')
    # When / Then
    with pytest.raises(ValueError, match=line):
        list(data_pipeline.read_list_file(list_file))


def test_read_list_file_ok_skips_blank_lines(tmp_path):
    # Given
    list_file = tmp_path / 'list.txt'
    list_file.write_text('00001/0001\n\n  \n00002/0007\n', encoding='utf-8')
    # When
    result = list(data_pipeline.read_list_file(list_file))
    # Then
    assert result == [(1, '00001/0001'), (4, '00002/0007')]


def test_load_vimeo_triplets_nok_incomplete_clip(tmp_path):
    # Given
    data_pipeline.write_triplets([_triplet()], tmp_path)
    (tmp_path / 'sequences' / '00001' / '0001' / 'im2.png').unlink()
    # When / Then
    with pytest.raises(FileNotFoundError, match='00001/0001'):
        list(data_pipeline.load_vimeo_triplets(tmp_path))


def test_augment_ok_identity_is_bitwise():
    # Given
    triplet = _triplet()
    # When
    result = data_pipeline.augment(triplet, data_pipeline.AugmentationPolicy.identity(), 7)
    # Then
    assert result is not triplet
    assert torch.equal(result.stack(), triplet.stack())
    assert result.source_id == triplet.source_id


def test_augment_ok_same_seed_same_result():
    # Given
    triplet = _triplet()
    policy = data_pipeline.AugmentationPolicy.training(32)
    # When
    first = data_pipeline.augment(triplet, policy, 11)
    second = data_pipeline.augment(triplet, policy, 11)
    other = data_pipeline.augment(triplet, policy, 12)
    # Then
    assert first.size == (32, 32)
    assert torch.equal(first.stack(), second.stack())
    assert not torch.equal(first.stack(), other.stack())
    assert float(first.stack().min()) >= 0.0
    assert float(first.stack().max()) <= 1.0


def test_augment_ok_temporal_reversal_swaps_end_frames():
    # Given
    triplet = _triplet()
    policy = data_pipeline.AugmentationPolicy(
        horizontal_flip_probability=0.0,
        vertical_flip_probability=0.0,
        scale_range=(1.0, 1.0),
        rotation_range=(0.0, 0.0),
        temporal_reversal_probability=1.0,
        crop_size=None,
    )
    # When
    result = data_pipeline.augment(triplet, policy, 0)
    # Then
    assert torch.equal(result.first, triplet.last)
    assert torch.equal(result.middle, triplet.middle)
    assert torch.equal(result.last, triplet.first)


def test_augment_nok_crop_too_large():
    # Given
    policy = data_pipeline.AugmentationPolicy(scale_range=(1.0, 1.0), crop_size=100)
    # When / Then
    with pytest.raises(ValueError, match='larger than'):
        data_pipeline.augment(_triplet(), policy, 0)


@pytest.mark.parametrize(
    'kwargs',
    [
        dict(horizontal_flip_probability=1.5),
        dict(scale_range=(0.0, 1.0)),
        dict(scale_range=(2.0, 1.0)),
        dict(rotation_range=(10.0, -10.0)),
        dict(crop_size=0),
    ],
)
def test_augmentation_policy_nok(kwargs):
    with pytest.raises(ValueError):
        data_pipeline.AugmentationPolicy(**kwargs)


def test_triplet_dataset_ok_deterministic_per_epoch():
    # Given
    triplets = [_triplet(seed=index) for index in range(4)]
    policy = data_pipeline.AugmentationPolicy.training(32)
    dataset = data_pipeline.TripletDataset(triplets, policy, seed=3)
    twin = data_pipeline.TripletDataset(triplets, policy, seed=3)
    # When
    epoch0 = dataset[2]
    dataset.set_epoch(1)
    epoch1 = dataset[2]
    # Then
    assert len(dataset) == 4
    assert epoch0.shape == (3, 3, 32, 32)
    assert torch.equal(epoch0, twin[2])
    assert not torch.equal(epoch0, epoch1)


def test_triplet_dataset_nok_empty():
    with pytest.raises(ValueError, match='empty'):
        data_pipeline.TripletDataset([], data_pipeline.AugmentationPolicy.identity())


def test_sample_seed_ok():
    # When
    result = data_pipeline.sample_seed(1, 2, 3)
    # Then
    assert isinstance(result, int)
    assert 0 <= result < 2**63
    assert result == data_pipeline.sample_seed(1, 2, 3)
    assert result != data_pipeline.sample_seed(1, 2, 4)


def test_generate_synthetic_triplets_ok_static_frames_are_equal():
    # When
    result = data_pipeline.generate_synthetic_triplets(
        2, _TEST_SIZE, data_pipeline.MotionSpec(kind='static'), seed=1
    )
    # Then
    assert [triplet.source_id for triplet in result] == ['synthetic-1-00000', 'synthetic-1-00001']
    for triplet in result:
        assert triplet.size == (_TEST_SIZE, _TEST_SIZE)
        assert torch.equal(triplet.first, triplet.middle)
        assert torch.equal(triplet.middle, triplet.last)


@pytest.mark.parametrize('kind', list(data_pipeline.MotionKind))
def test_generate_synthetic_triplets_ok_deterministic(kind):
    # When
    first = data_pipeline.generate_synthetic_triplets(
        2, _TEST_SIZE, data_pipeline.MotionSpec(kind=kind), seed=5
    )
    second = data_pipeline.generate_synthetic_triplets(
        2, _TEST_SIZE, data_pipeline.MotionSpec(kind=kind), seed=5
    )
    # Then
    for a, b in zip(first, second):
        assert torch.equal(a.stack(), b.stack())
        assert float(a.stack().min()) >= 0.0
        assert float(a.stack().max()) <= 1.0


@pytest.mark.parametrize('size,count', [(48, 1), (0, 1), (64, -1)])
def test_generate_synthetic_triplets_nok(size, count):
    with pytest.raises(ValueError):
        data_pipeline.generate_synthetic_triplets(count, size)


def test_render_scene_ok_object_at_temporal_midpoint():
    # Given
    disk = data_pipeline.SceneObject(
        shape='disk',
        center=(20.0, 32.0),
        velocity=(16.0, 0.0),
        half_size=(4.0, 4.0),
        texture=_flat((1.0, 1.0, 1.0)),
    )
    scene = data_pipeline.Scene(background=_flat((0.0, 0.0, 0.0)), objects=(disk,))
    # When
    middle = data_pipeline.render_scene(scene, _TEST_SIZE, 0.5)
    # Then
    assert torch.equal(middle[:, 32, 28], torch.ones(3))
    assert torch.equal(middle[:, 32, 20], torch.zeros(3))
    assert torch.equal(middle[:, 32, 36], torch.zeros(3))


def test_render_scene_ok_pan_shifts_background():
    # Given
    texture = data_pipeline.Texture(
        base=(0.5, 0.5, 0.5), amplitude=0.2, frequencies=((0.05, 0.0),), phases=(0.3,)
    )
    scene = data_pipeline.Scene(background=texture, background_velocity=(4.0, 0.0))
    # When
    first = data_pipeline.render_scene(scene, _TEST_SIZE, 0.0)
    middle = data_pipeline.render_scene(scene, _TEST_SIZE, 0.5)
    # Then
    assert torch.allclose(middle[..., 2:], first[..., :-2], atol=1e-6)


@pytest.mark.parametrize(
    'p,expected', [(0.0, FlowMode.ORIGINAL_FLOW), (1.0, FlowMode.DOWNSCALED_FLOW)]
)
def test_hd_flow_path_sampler_ok_extremes(p, expected):
    # Given
    rng = np.random.default_rng(0)
    # When
    result = {data_pipeline.hd_flow_path_sampler(p, rng) for _ in range(20)}
    # Then
    assert result == {expected}


def test_hd_flow_path_sampler_ok_mixes_at_half():
    # Given
    rng = np.random.default_rng(0)
    # When
    result = [data_pipeline.hd_flow_path_sampler(0.5, rng) for _ in range(200)]
    # Then
    assert 60 < result.count(FlowMode.DOWNSCALED_FLOW) < 140


@pytest.mark.parametrize('p', [-0.1, 1.1])
def test_hd_flow_path_sampler_nok(p):
    with pytest.raises(ValueError):
        data_pipeline.hd_flow_path_sampler(p)
