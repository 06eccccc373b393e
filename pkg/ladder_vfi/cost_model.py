# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Analytic parameter and FLOPs accounting by structural enumeration of the network.

Every convolution, linear layer and attention product of
:py:class:`ladder_vfi.model.LadderModel` is listed with its parameter count and its
multiply-accumulates per output pixel at its pyramid level, so no weights need to
be instantiated. Conventions:

* one multiply-accumulate (MAC) counts as 2 FLOPs;
* normalization, activation and interpolation costs are ignored;
* attention products count ``2 * window^2`` keys per query on unpadded tokens, so
  cost is exactly linear in pixel count.

Published model budgets are quoted as FLOPs at 448x256 (:py:data:`REFERENCE_RESOLUTION`),
the Vimeo90K frame size.
"""
import dataclasses
import json
import logging
from typing import Dict, Iterable, List, Optional, Tuple

from ladder_vfi import config
from ladder_vfi.flow_estimator import (
    IMAGE_AND_STATE_CHANNELS,
    LOW_RES_CONV_LAYERS,
    highres_block_specs,
)
from ladder_vfi.refinement import RESIDUAL_CHANNELS, UNET_DEPTH
from ladder_vfi.warping import WARP_STATE_CHANNELS


_LOGGER: logging.Logger = logging.getLogger(__name__)

FLOPS_PER_MAC: int = 2
REFERENCE_RESOLUTION: Tuple[int, int] = (256, 448)
# two bilinear warps of 3 channels (4 MACs per sample) and the mask blend
_COMPOSITION_MACS_PER_PIXEL: int = 2 * 3 * 4 + 3 * 2
_FRAMES: int = 2


@dataclasses.dataclass(frozen=True)
class LayerCost:
    """One layer: its parameters and MACs per output pixel at pyramid ``level``."""

    name: str
    params: int
    macs_per_pixel: int
    level: int
    instances: int = 1

    def macs(self, height: int, width: int) -> int:
        """MACs of every instance at input size ``height x width``."""
        pixels = (height >> self.level) * (width >> self.level)
        return self.macs_per_pixel * pixels * self.instances


@dataclasses.dataclass(frozen=True)
class ModuleCost:
    """Totals of one top-level module."""

    params: int
    macs: int

    @property
    def flops(self) -> int:
        """``2 * macs``"""
        return FLOPS_PER_MAC * self.macs


@dataclasses.dataclass(frozen=True)
class CostReport:
    """
    Parameter count and, at a stated resolution, MACs and FLOPs of one forward pass,
    with a per-module breakdown whose entries sum to the totals.
    """

    label: str
    params: int
    macs: int
    height: Optional[int]
    width: Optional[int]
    breakdown: Dict[str, ModuleCost]

    @property
    def flops(self) -> int:
        """``2 * macs``"""
        return FLOPS_PER_MAC * self.macs

    def to_record(self) -> Dict[str, object]:
        """Machine-readable view, one JSON object per report."""
        return {
            'label': self.label,
            'params': self.params,
            'macs': self.macs,
            'flops': self.flops,
            'height': self.height,
            'width': self.width,
            'breakdown': {
                name: {'params': cost.params, 'macs': cost.macs, 'flops': cost.flops}
                for name, cost in self.breakdown.items()
            },
        }

    def to_json(self) -> str:
        """:py:meth:`to_record` as a single JSON line."""
        return json.dumps(self.to_record(), sort_keys=True)


def conv_cost(
    in_channels: int,
    out_channels: int,
    kernel: int,
    *,
    groups: int = 1,
    bias: bool = True,
) -> Tuple[int, int]:
    """
    Args:
        in_channels: input channels.
        out_channels: output channels.
        kernel: square kernel size.
        groups: convolution groups, ``in_channels`` for a depth-wise convolution.
        bias: whether the layer has a bias.

    Returns:
        ``(params, macs_per_output_pixel)``
    """
    weights = in_channels // groups * out_channels * kernel * kernel
    return weights + (out_channels if bias else 0), weights


def dsconv_cost(in_channels: int, out_channels: int, kernel: int) -> Tuple[int, int]:
    """
    Depth-wise ``kernel x kernel`` plus point-wise ``1 x 1`` convolution.

    Returns:
        ``(params, macs_per_output_pixel)``
    """
    dw_params, dw_macs = conv_cost(in_channels, in_channels, kernel, groups=in_channels)
    pw_params, pw_macs = conv_cost(in_channels, out_channels, 1)
    return dw_params + pw_params, dw_macs + pw_macs


def _conv(
    name: str,
    in_channels: int,
    out_channels: int,
    kernel: int,
    level: int,
    *,
    groups: int = 1,
    instances: int = 1,
) -> LayerCost:
    params, macs = conv_cost(in_channels, out_channels, kernel, groups=groups)
    return LayerCost(name, params, macs, level, instances)


def _linear(name: str, in_features: int, out_features: int, level: int) -> LayerCost:
    return LayerCost(
        name, in_features * out_features + out_features, in_features * out_features, level, _FRAMES
    )


def extractor_layers(cfg: config.ModelConfig) -> List[LayerCost]:
    """Layers of the feature extractor; both frames run through shared weights."""
    channels = cfg.level_channels
    layers: List[LayerCost] = []
    for level in range(3):
        in_channels = 3 if level == 0 else channels[level - 1]
        layers.append(
            _conv(f'conv{level}.1', in_channels, channels[level], 3, level, instances=_FRAMES)
        )
        layers.append(
            _conv(f'conv{level}.2', channels[level], channels[level], 3, level, instances=_FRAMES)
        )
    for level in range(3, config.PYRAMID_LEVELS):
        dim = channels[level]
        hidden = dim * cfg.mlp_ratio
        keys = 2 * cfg.window_size**2
        layers.append(
            _conv(f'attn{level}.embed', channels[level - 1], dim, 3, level, instances=_FRAMES)
        )
        layers.append(LayerCost(f'attn{level}.embed_norm', 2 * dim, 0, level))
        for block in range(cfg.attention_blocks):
            prefix = f'attn{level}.block{block}'
            layers.extend(
                [
                    LayerCost(f'{prefix}.norm1', 2 * dim, 0, level),
                    _linear(f'{prefix}.q', dim, dim, level),
                    _linear(f'{prefix}.kv', dim, 2 * dim, level),
                    LayerCost(f'{prefix}.products', 0, 2 * keys * dim, level, _FRAMES),
                    _linear(f'{prefix}.proj', dim, dim, level),
                    LayerCost(f'{prefix}.norm2', 2 * dim, 0, level),
                    _linear(f'{prefix}.fc1', dim, hidden, level),
                    _linear(f'{prefix}.fc2', hidden, dim, level),
                ]
            )
    return layers


def flow_estimator_layers(cfg: config.ModelConfig) -> List[LayerCost]:
    """Layers of the low-resolution and the three high-resolution decoders."""
    width = 2 * cfg.base_width
    low_in = 2 * cfg.level_channels[4] + 2 * cfg.level_channels[3]
    layers = [_conv('low.fuse', low_in, width, 1, 3)]
    layers.extend(_conv(f'low.conv{i}', width, width, 3, 3) for i in range(LOW_RES_CONV_LAYERS))
    layers.append(_conv('low.head', width, WARP_STATE_CHANNELS, 3, 3))
    for level, spec in zip((2, 1, 0), highres_block_specs(cfg)):
        in_channels = spec.in_channels
        for index in range(spec.layer_count):
            prefix = f'high{level}.layer{index}'
            if spec.kind == config.DecoderKind.DW_SEPARABLE:
                layers.append(
                    _conv(
                        f'{prefix}.depthwise',
                        in_channels,
                        in_channels,
                        spec.kernel,
                        level,
                        groups=in_channels,
                    )
                )
                layers.append(
                    _conv(f'{prefix}.pointwise', in_channels, spec.out_channels, 1, level)
                )
            else:
                layers.append(_conv(prefix, in_channels, spec.out_channels, spec.kernel, level))
            in_channels = spec.out_channels
        layers.append(_conv(f'high{level}.head', spec.out_channels, WARP_STATE_CHANNELS, 3, level))
    return layers


def refinement_layers(cfg: config.ModelConfig) -> List[LayerCost]:
    """Layers of the configured refiner (decoder-only or UNet)."""
    if cfg.refinement_structure == config.RefinementStructure.UNET:
        return _unet_layers(cfg)
    widths = list(cfg.refinement_channels)
    layers: List[LayerCost] = []
    for index, level in enumerate(reversed(range(cfg.refinement_levels))):
        in_channels = 2 * cfg.level_channels[level] + IMAGE_AND_STATE_CHANNELS
        if index > 0:
            in_channels += widths[index]
        width = widths[index]
        layers.append(_conv(f'refine{level}.fuse', in_channels, width, 3, level))
        layers.extend(
            _conv(f'refine{level}.unit{unit}', width, width, 3, level)
            for unit in range(cfg.refinement_units)
        )
        if level > 0:
            layers.append(_conv(f'refine{level}.handoff', width, widths[index + 1], 1, level))
        else:
            layers.append(_conv(f'refine{level}.head', width, RESIDUAL_CHANNELS, 3, level))
    return layers


def _unet_layers(cfg: config.ModelConfig) -> List[LayerCost]:
    base = cfg.base_width
    channels = cfg.level_channels
    widths = [base * 2 ** (index + 2) for index in range(UNET_DEPTH)]
    layers: List[LayerCost] = []
    in_channels = 2 * channels[0] + IMAGE_AND_STATE_CHANNELS
    for index, width in enumerate(widths):
        level = index + 1
        layers.append(_conv(f'unet.down{level}.1', in_channels, width, 3, level))
        layers.append(_conv(f'unet.down{level}.2', width, width, 3, level))
        in_channels = width + (2 * channels[level] if level < UNET_DEPTH else 0)
    up_in = [widths[3], 2 * widths[2], 2 * widths[1], 2 * widths[0]]
    up_out = [widths[2], widths[1], widths[0], 2 * base]
    for index, (cin, cout) in enumerate(zip(up_in, up_out)):
        level = UNET_DEPTH - 1 - index
        layers.append(_conv(f'unet.up{level}', cin, cout, 3, level))
    layers.append(_conv('unet.head', 2 * base, RESIDUAL_CHANNELS, 3, 0))
    return layers


def model_layers(cfg: config.ModelConfig) -> Dict[str, List[LayerCost]]:
    """Every costed layer of the model grouped by top-level module."""
    return {
        'extractor': extractor_layers(cfg),
        'flow_estimator': flow_estimator_layers(cfg),
        'refinement': refinement_layers(cfg),
        'synthesis': [LayerCost('compose', 0, _COMPOSITION_MACS_PER_PIXEL, 0)],
    }


def _report(
    cfg: config.ModelConfig, label: str, height: Optional[int], width: Optional[int]
) -> CostReport:
    config.validate(cfg)
    breakdown: Dict[str, ModuleCost] = {}
    for name, layers in model_layers(cfg).items():
        macs = sum(layer.macs(height, width) for layer in layers) if height else 0
        breakdown[name] = ModuleCost(params=sum(layer.params for layer in layers), macs=macs)
    return CostReport(
        label=label,
        params=sum(cost.params for cost in breakdown.values()),
        macs=sum(cost.macs for cost in breakdown.values()),
        height=height,
        width=width,
        breakdown=breakdown,
    )


def count_params(cfg: config.ModelConfig, *, label: str = 'model') -> CostReport:
    """
    Exact parameter count of the model described by ``cfg``.

    Returns:
        :py:class:`CostReport` without a resolution (``macs == 0``).
    """
    return _report(cfg, label, None, None)


def count_flops(
    cfg: config.ModelConfig, height: int, width: int, *, label: str = 'model'
) -> CostReport:
    """
    Parameters plus MACs/FLOPs of one forward pass at ``height x width``.

    Raises:
        ValueError: if a dimension is not a positive multiple of 32.
    """
    for name, value in (('height', height), ('width', width)):
        if value < 32 or value % 32:
            raise ValueError(f'The {name} must be a multiple of 32. Got: <{value}>({type(value)}).')
    report = _report(cfg, label, height, width)
    _LOGGER.debug(
        'Cost of <%s> at <%sx%s>: <%s> params, <%s> MACs.',
        label,
        width,
        height,
        report.params,
        report.macs,
    )
    return report


def decoder_ablation(cfg: config.ModelConfig, height: int, width: int) -> List[CostReport]:
    """
    High-res decoder variants: plain 3x3 convolutions and depth-wise separable
    convolutions with kernels ``[5, 5, 5]``, ``[7, 7, 7]`` and ``[7, 15, 15]``.
    """
    variants = [
        ('Conv[3,3,3]', config.DecoderKind.NORMAL_CONV, (3, 3, 3)),
        ('DSConv[5,5,5]', config.DecoderKind.DW_SEPARABLE, (5, 5, 5)),
        ('DSConv[7,7,7]', config.DecoderKind.DW_SEPARABLE, (7, 7, 7)),
        ('DSConv[7,15,15]', config.DecoderKind.DW_SEPARABLE, (7, 15, 15)),
    ]
    return [
        count_flops(
            dataclasses.replace(cfg, highres_kind=kind, highres_kernels=kernels),
            height,
            width,
            label=label,
        )
        for label, kind, kernels in variants
    ]


def refinement_ablation(cfg: config.ModelConfig, height: int, width: int) -> List[CostReport]:
    """Refiner variants: UNet baseline and decoder-only with 5, 4, 3 and 2 levels."""
    reports = [
        count_flops(
            dataclasses.replace(cfg, refinement_structure=config.RefinementStructure.UNET),
            height,
            width,
            label='UNet',
        )
    ]
    decoder_only = dataclasses.replace(
        cfg, refinement_structure=config.RefinementStructure.DECODER_ONLY
    )
    for levels in (5, 4, 3, 2):
        reports.append(
            count_flops(
                decoder_only.with_refinement_levels(levels),
                height,
                width,
                label=f'{levels}L decoder-only',
            )
        )
    return reports


def format_cost_table(reports: Iterable[CostReport]) -> str:
    """Human-readable table: params in millions, MACs and FLOPs in tera-operations."""
    rows = [('config', 'resolution', 'params (M)', 'MACs (T)', 'FLOPs (T)')]
    for report in reports:
        resolution = f'{report.width}x{report.height}' if report.height else '-'
        rows.append(
            (
                report.label,
                resolution,
                f'{report.params / 1e6:.2f}',
                f'{report.macs / 1e12:.4f}',
                f'{report.flops / 1e12:.4f}',
            )
        )
    widths = [max(len(row[column]) for row in rows) for column in range(len(rows[0]))]
    lines = [
        '  '.join(cell.ljust(size) for cell, size in zip(row, widths)).rstrip() for row in rows
    ]
    lines.insert(1, '  '.join('-' * size for size in widths))
    return '\n'.join(lines)
