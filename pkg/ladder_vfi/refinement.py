# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Decoder-only residual synthesis.

Each block works at one pyramid level, from the top refinement level down to
level 0, and consumes the extractor features of that level, the raw and warped
images, the full-resolution warp state brought down to that level, and the output
of the block above. The level-0 block emits the residual ``R``.

A UNet refiner is kept as the ablation baseline.
"""
import logging
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ladder_vfi import config, warping
from ladder_vfi.feature_extractor import LEAKY_SLOPE, FeaturePyramid
from ladder_vfi.flow_estimator import IMAGE_AND_STATE_CHANNELS, prediction_head, warped_inputs


_LOGGER: logging.Logger = logging.getLogger(__name__)

RESIDUAL_CHANNELS: int = 3
UNET_DEPTH: int = 4


def _upsample(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=False)


class ResidualUnit(nn.Module):
    """``x + act(conv3x3(x))``"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # pylint: disable=C0116
        return x + self.act(self.conv(x))


class RefinementBlock(nn.Module):
    """
    One refinement level. Blocks above level 0 hand their output down through a
    1x1 projection to the next width and a bilinear x2 upsample; the level-0 block
    ends with the zero-initialized residual head.
    """

    def __init__(
        self,
        in_channels: int,
        width: int,
        *,
        units: int,
        next_width: Optional[int],
    ):
        super().__init__()
        self.fuse = nn.Conv2d(in_channels, width, 3, padding=1)
        self.units = nn.Sequential(*(ResidualUnit(width) for _ in range(units)))
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        if next_width is None:
            self.handoff = None
            self.head = prediction_head(width, RESIDUAL_CHANNELS)
        else:
            self.handoff = nn.Conv2d(width, next_width, 1)
            self.head = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Returns the next level's input ``O`` or, at level 0, the residual."""
        out = self.units(self.act(self.fuse(x)))
        if self.head is not None:
            return self.head(out)
        return _upsample(self.handoff(out))


class DecoderOnlyRefinement(nn.Module):
    """
    ``levels`` refinement blocks over pyramid levels ``levels - 1`` down to 0.
    Level ``l`` has internal width ``refinement_channels``, top level first.
    """

    def __init__(self, cfg: config.ModelConfig):
        super().__init__()
        self.levels = cfg.refinement_levels
        widths = list(cfg.refinement_channels)
        blocks: List[RefinementBlock] = []
        for index, level in enumerate(reversed(range(self.levels))):
            in_channels = 2 * cfg.level_channels[level] + IMAGE_AND_STATE_CHANNELS
            if index > 0:
                in_channels += widths[index]
            blocks.append(
                RefinementBlock(
                    in_channels,
                    widths[index],
                    units=cfg.refinement_units,
                    next_width=widths[index + 1] if level > 0 else None,
                )
            )
        self.blocks = nn.ModuleList(blocks)

    def forward(
        self,
        pyr0: FeaturePyramid,
        pyr1: FeaturePyramid,
        images0: Sequence[torch.Tensor],
        images1: Sequence[torch.Tensor],
        w0: warping.WarpState,
    ) -> torch.Tensor:
        """
        Args:
            pyr0, pyr1: feature pyramids of both frames.
            images0, images1: image pyramids covering every refinement level.
            w0: full-resolution warp state.

        Returns:
            ``(B, 3, H, W)`` residual, unbounded in sign.
        """
        handed_down: Optional[torch.Tensor] = None
        for block, level in zip(self.blocks, reversed(range(self.levels))):
            state = warping.downscale_warp_state(w0, level)
            x = warped_inputs(pyr0[level], pyr1[level], images0[level], images1[level], state)
            if handed_down is not None:
                x = torch.cat([x, handed_down], dim=1)
            handed_down = block(x)
        return handed_down


class UNetRefinement(nn.Module):
    """
    Encoder/decoder refiner used as the ablation baseline. The encoder starts from
    the full-resolution inputs and concatenates warped pyramid features at every
    encoder level.
    """

    def __init__(self, cfg: config.ModelConfig):
        super().__init__()
        base = cfg.base_width
        channels = cfg.level_channels
        self.widths = [base * 2 ** (index + 2) for index in range(UNET_DEPTH)]
        act = nn.LeakyReLU(LEAKY_SLOPE)
        self.down = nn.ModuleList()
        in_channels = 2 * channels[0] + IMAGE_AND_STATE_CHANNELS
        for index, width in enumerate(self.widths):
            self.down.append(
                nn.Sequential(
                    nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
                    act,
                    nn.Conv2d(width, width, 3, padding=1),
                    act,
                )
            )
            in_channels = width + (2 * channels[index + 1] if index + 1 < UNET_DEPTH else 0)
        up_in = [self.widths[3], 2 * self.widths[2], 2 * self.widths[1], 2 * self.widths[0]]
        up_out = [self.widths[2], self.widths[1], self.widths[0], 2 * base]
        self.up = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), act)
            for cin, cout in zip(up_in, up_out)
        )
        self.head = prediction_head(2 * base, RESIDUAL_CHANNELS)

    def forward(
        self,
        pyr0: FeaturePyramid,
        pyr1: FeaturePyramid,
        images0: Sequence[torch.Tensor],
        images1: Sequence[torch.Tensor],
        w0: warping.WarpState,
    ) -> torch.Tensor:  # pylint: disable=missing-function-docstring
        x = warped_inputs(pyr0[0], pyr1[0], images0[0], images1[0], w0)
        skips: List[torch.Tensor] = []
        for index, down in enumerate(self.down):
            x = down(x)
            skips.append(x)
            level = index + 1
            if level < UNET_DEPTH:
                state = warping.downscale_warp_state(w0, level)
                f0, f1 = warping.warp_pair(pyr0[level], pyr1[level], state)
                x = torch.cat([x, f0, f1], dim=1)
        x = skips[-1]
        for index, up in enumerate(self.up):
            x = up(_upsample(x))
            skip_index = UNET_DEPTH - 2 - index
            if skip_index >= 0:
                x = torch.cat([x, skips[skip_index]], dim=1)
        return self.head(x)


def build_refinement(cfg: config.ModelConfig, levels: Optional[int] = None) -> nn.Module:
    """
    Builds the refiner described by ``cfg``.

    Args:
        cfg: model configuration.
        levels: (optional) decoder-only level count in ``[2, 5]`` overriding
            ``cfg.refinement_levels``; channel widths are re-derived for it.

    Returns:
        A :py:class:`DecoderOnlyRefinement` or, for ``refinement_structure = unet``,
        a :py:class:`UNetRefinement`.
    """
    if levels is not None:
        if not config.MIN_REFINEMENT_LEVELS <= levels <= config.MAX_REFINEMENT_LEVELS:
            raise ValueError(
                f'Refinement levels must be in [{config.MIN_REFINEMENT_LEVELS}, '
                f'{config.MAX_REFINEMENT_LEVELS}]. Got: <{levels}>({type(levels)}).'
            )
        if levels != cfg.refinement_levels:
            cfg = cfg.with_refinement_levels(levels)
    config.validate(cfg)
    if cfg.refinement_structure == config.RefinementStructure.UNET:
        _LOGGER.debug('Building UNet refinement for C=<%s>.', cfg.base_width)
        return UNetRefinement(cfg)
    _LOGGER.debug('Building <%s>-level decoder-only refinement.', cfg.refinement_levels)
    return DecoderOnlyRefinement(cfg)


def refine(
    refinement: nn.Module,
    pyr0: FeaturePyramid,
    pyr1: FeaturePyramid,
    images0: Sequence[torch.Tensor],
    images1: Sequence[torch.Tensor],
    w0: warping.WarpState,
) -> torch.Tensor:
    """Runs ``refinement`` and returns the residual ``R``."""
    return refinement(pyr0, pyr1, images0, images1, w0)
