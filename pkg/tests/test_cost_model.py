# vim: ai:sw=4:ts=4:sta:et:fo=croql
# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=protected-access,redefined-outer-name,invalid-name
# type: ignore
import json
import logging

import pytest

logging.getLogger().setLevel(logging.DEBUG)

from ladder_vfi import config, cost_model


_TEST_HEIGHT: int = 256
_TEST_WIDTH: int = 448


@pytest.mark.parametrize(
    'cfg,params_band,reference_flops',
    [
        (config.small_config(), (2.8e6, 3.4e6), 0.14e12),
        (config.large_config(), (18e6, 22e6), 0.61e12),
    ],
)
def test_count_flops_ok_presets_within_budget(cfg, params_band, reference_flops):
    # When
    result = cost_model.count_flops(cfg, *cost_model.REFERENCE_RESOLUTION)
    # Then
    assert (result.height, result.width) == (_TEST_HEIGHT, _TEST_WIDTH)
    assert params_band[0] <= result.params <= params_band[1]
    assert 0.8 * reference_flops <= result.flops <= 1.2 * reference_flops
    assert result.flops == 2 * result.macs


@pytest.mark.parametrize(
    'cfg,params', [(config.small_config(), 3_117_949), (config.large_config(), 19_215_757)]
)
def test_count_params_ok_preset_exact_counts(cfg, params):
    assert cost_model.count_params(cfg).params == params


def test_count_params_ok_independent_of_resolution():
    # Given
    cfg = config.small_config()
    # When
    result = cost_model.count_params(cfg)
    # Then
    assert result.macs == 0
    assert result.height is None
    assert result.params == cost_model.count_flops(cfg, _TEST_HEIGHT, _TEST_WIDTH).params


def test_dsconv_cost_ok_ratio_to_plain_conv():
    # When
    _, ds_macs = cost_model.dsconv_cost(64, 64, 15)
    _, conv_macs = cost_model.conv_cost(64, 64, 3)
    # Then
    assert ds_macs * 576 == conv_macs * 289


def test_conv_cost_ok_depthwise():
    # When
    params, macs = cost_model.conv_cost(32, 32, 7, groups=32)
    # Then
    assert params == 7 * 7 * 32 + 32
    assert macs == 7 * 7 * 32


def test_decoder_ablation_ok_ordering():
    # When
    result = cost_model.decoder_ablation(config.small_config(), _TEST_HEIGHT, _TEST_WIDTH)
    # Then
    by_label = {report.label: report for report in result}
    assert list(by_label) == ['Conv[3,3,3]', 'DSConv[5,5,5]', 'DSConv[7,7,7]', 'DSConv[7,15,15]']
    assert (
        by_label['DSConv[5,5,5]'].macs
        < by_label['DSConv[7,7,7]'].macs
        < by_label['DSConv[7,15,15]'].macs
        < by_label['Conv[3,3,3]'].macs
    )
    assert max(result, key=lambda report: report.params).label == 'Conv[3,3,3]'
    small_params = cost_model.count_params(config.small_config()).params
    assert by_label['DSConv[7,15,15]'].params == small_params


def test_refinement_ablation_ok_ordering():
    # When
    result = cost_model.refinement_ablation(config.small_config(), _TEST_HEIGHT, _TEST_WIDTH)
    # Then
    assert [report.label for report in result] == [
        'UNet',
        '5L decoder-only',
        '4L decoder-only',
        '3L decoder-only',
        '2L decoder-only',
    ]
    params = [report.params for report in result]
    assert params == sorted(params, reverse=True)
    by_label = {report.label: report for report in result}
    assert by_label['3L decoder-only'].flops < by_label['UNet'].flops


def test_count_flops_ok_scales_with_pixels():
    # Given
    cfg = config.large_config()
    # When
    base = cost_model.count_flops(cfg, _TEST_HEIGHT, _TEST_WIDTH)
    doubled = cost_model.count_flops(cfg, 2 * _TEST_HEIGHT, 2 * _TEST_WIDTH)
    # Then
    assert doubled.macs == 4 * base.macs
    assert doubled.params == base.params


def test_count_flops_ok_breakdown_sums_to_total():
    # When
    result = cost_model.count_flops(config.small_config(), _TEST_HEIGHT, _TEST_WIDTH)
    # Then
    assert set(result.breakdown) == {'extractor', 'flow_estimator', 'refinement', 'synthesis'}
    assert sum(cost.params for cost in result.breakdown.values()) == result.params
    assert sum(cost.macs for cost in result.breakdown.values()) == result.macs
    assert result.breakdown['synthesis'].params == 0


def test_cost_report_ok_json_record():
    # Given
    report = cost_model.count_flops(config.small_config(), 64, 64, label='tiny')
    # When
    result = json.loads(report.to_json())
    # Then
    assert result['label'] == 'tiny'
    assert result['flops'] == report.flops
    assert result['breakdown']['refinement']['params'] == report.breakdown['refinement'].params


@pytest.mark.parametrize('size', [(250, 448), (256, 0), (16, 32)])
def test_count_flops_nok_resolution(size):
    with pytest.raises(ValueError, match='multiple of 32'):
        cost_model.count_flops(config.small_config(), *size)


def test_format_cost_table_ok():
    # Given
    reports = cost_model.decoder_ablation(config.small_config(), _TEST_HEIGHT, _TEST_WIDTH)
    # When
    result = cost_model.format_cost_table(reports)
    # Then
    lines = result.splitlines()
    assert lines[0].split()[:2] == ['config', 'resolution']
    assert set(lines[1].replace(' ', '')) == {'-'}
    assert len(lines) == 2 + len(reports)
    assert lines[-1].startswith('DSConv[7,15,15]')
    assert '448x256' in lines[-1]
