# vim: ai:sw=4:ts=4:sta:et:fo=croql
# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=protected-access,redefined-outer-name,invalid-name
# type: ignore
import logging

import numpy as np
import pytest
import torch

logging.getLogger().setLevel(logging.DEBUG)

from ladder_vfi import checkpoint, config, model, trainer


_TEST_CONFIG: config.ModelConfig = config.ModelConfig.from_base_width(8, attention_blocks=1)


def _model(cfg=_TEST_CONFIG, seed=0):
    torch.manual_seed(seed)
    ladder = model.LadderModel(cfg)
    with torch.no_grad():
        for head in [ladder.flow_estimator.low_res.head, ladder.refinement.blocks[-1].head]:
            head.weight.normal_(0, 0.05)
    return ladder


def _sample_output(ladder):
    generator = torch.Generator().manual_seed(9)
    img0 = torch.rand(1, 3, 64, 64, generator=generator)
    img1 = torch.rand(1, 3, 64, 64, generator=generator)
    with torch.no_grad():
        return ladder.eval()(img0, img1).prediction


def _trained_optimizer(ladder):
    optimizer = trainer.create_optimizer(ladder.parameters(), config.TrainConfig())
    ladder.train()
    img = torch.rand(1, 3, 32, 32)
    ladder(img, img).prediction.mean().backward()
    optimizer.step()
    return optimizer


def test_save_checkpoint_ok_round_trip(tmp_path):
    # Given
    source = _model(seed=0)
    target = _model(seed=1)
    ckpt = checkpoint.capture_checkpoint(
        source,
        stage=config.TrainingStage.FULL,
        epoch=2,
        step=40,
        train_config=config.TrainConfig(steps=40),
        rng_state={
            'torch': torch.get_rng_state(),
            'sampler': np.random.default_rng(3).bit_generator.state,
        },
    )
    path = tmp_path / 'stage2.ckpt'
    # When
    checkpoint.save_checkpoint(ckpt, path)
    result = checkpoint.load_checkpoint(path, expected_config=_TEST_CONFIG)
    checkpoint.apply_checkpoint(target, result)
    # Then
    assert result.stage == config.TrainingStage.FULL
    assert (result.epoch, result.step) == (2, 40)
    assert result.model_config == _TEST_CONFIG
    assert result.train_config == config.TrainConfig(steps=40)
    assert result.rng_state['sampler'] == np.random.default_rng(3).bit_generator.state
    assert torch.equal(result.rng_state['torch'], ckpt.rng_state['torch'])
    assert torch.equal(_sample_output(target), _sample_output(source))
    assert checkpoint.encode_checkpoint(result) == path.read_bytes()
    assert [entry.name for entry in tmp_path.iterdir()] == ['stage2.ckpt']


def test_encode_checkpoint_ok_deterministic():
    # Given
    ckpt = checkpoint.capture_checkpoint(_model(), stage=config.TrainingStage.FLOW_ONLY)
    # When
    first = checkpoint.encode_checkpoint(ckpt)
    second = checkpoint.encode_checkpoint(ckpt)
    # Then
    assert first == second
    assert first.startswith(checkpoint.MAGIC)


def test_decode_checkpoint_ok_optimizer_state():
    # Given
    ladder = _model()
    optimizer = _trained_optimizer(ladder)
    ckpt = checkpoint.capture_checkpoint(
        ladder, stage=config.TrainingStage.FULL, optimizer=optimizer
    )
    fresh = _model(seed=2)
    fresh_optimizer = trainer.create_optimizer(fresh.parameters(), config.TrainConfig())
    # When
    result = checkpoint.decode_checkpoint(checkpoint.encode_checkpoint(ckpt))
    checkpoint.apply_checkpoint(fresh, result, fresh_optimizer)
    # Then
    expected = optimizer.state_dict()
    loaded = fresh_optimizer.state_dict()
    assert set(loaded['state']) == set(expected['state'])
    for param_id, values in expected['state'].items():
        for key, value in values.items():
            assert torch.equal(
                torch.as_tensor(loaded['state'][param_id][key]), torch.as_tensor(value)
            )
    assert loaded['param_groups'][0]['lr'] == expected['param_groups'][0]['lr']


def test_load_checkpoint_nok_truncated(tmp_path):
    # Given
    ladder = _model()
    path = tmp_path / 'stage1.ckpt'
    checkpoint.save_checkpoint(
        checkpoint.capture_checkpoint(ladder, stage=config.TrainingStage.FLOW_ONLY), path
    )
    path.write_bytes(path.read_bytes()[:-100])
    # When / Then
    with pytest.raises(checkpoint.CheckpointError, match='Checksum mismatch'):
        checkpoint.load_checkpoint(path)


def test_decode_checkpoint_nok_flipped_byte():
    # Given
    blob = bytearray(
        checkpoint.encode_checkpoint(
            checkpoint.capture_checkpoint(_model(), stage=config.TrainingStage.FLOW_ONLY)
        )
    )
    blob[len(blob) // 2] ^= 0xFF
    # When / Then
    with pytest.raises(checkpoint.CheckpointError, match='Checksum mismatch'):
        checkpoint.decode_checkpoint(bytes(blob))


@pytest.mark.parametrize('blob', [b'', b'NOTACKPT' + bytes(64), checkpoint.MAGIC])
def test_decode_checkpoint_nok_not_a_checkpoint(blob):
    with pytest.raises(checkpoint.CheckpointError, match='not a checkpoint'):
        checkpoint.decode_checkpoint(blob)


def test_load_checkpoint_nok_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match='absent.ckpt'):
        checkpoint.load_checkpoint(tmp_path / 'absent.ckpt')


def test_load_checkpoint_nok_names_differing_fields(tmp_path):
    # Given
    path = tmp_path / 'small.ckpt'
    checkpoint.save_checkpoint(
        checkpoint.capture_checkpoint(
            model.LadderModel(config.small_config()), stage=config.TrainingStage.FULL
        ),
        path,
    )
    # When
    with pytest.raises(checkpoint.CheckpointError) as error:
        checkpoint.load_checkpoint(path, expected_config=config.large_config())
    # Then
    assert 'base_width: checkpoint 16 != expected 32' in str(error.value)
    assert 'attention_blocks: checkpoint 2 != expected 4' in str(error.value)


def test_apply_checkpoint_nok_leaves_model_untouched():
    # Given
    ckpt = checkpoint.capture_checkpoint(_model(), stage=config.TrainingStage.FULL)
    other_cfg = _TEST_CONFIG.with_refinement_levels(2)
    target = _model(other_cfg)
    before = {name: tensor.clone() for name, tensor in target.state_dict().items()}
    # When
    with pytest.raises(checkpoint.CheckpointError, match='refinement_levels'):
        checkpoint.apply_checkpoint(target, ckpt)
    # Then
    for name, tensor in target.state_dict().items():
        assert torch.equal(tensor, before[name])


def test_config_differences_ok_empty_for_equal_configs():
    assert checkpoint.config_differences(_TEST_CONFIG, _TEST_CONFIG) == []
