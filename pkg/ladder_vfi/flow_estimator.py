# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Coarse-to-fine estimation of the full-resolution warp state.

A low-resolution decoder predicts an initial warp state from the attention
features (levels 4 and 3). Three high-resolution decoders, one per level 2, 1, 0,
then predict residual updates from warped features, raw and warped images and the
current warp state. High-resolution decoders are built from large-kernel
depth-wise separable convolutions (or plain convolutions for the ablation).
"""
import dataclasses
import logging
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from ladder_vfi import config, warping
from ladder_vfi.feature_extractor import LEAKY_SLOPE, FeaturePyramid


_LOGGER: logging.Logger = logging.getLogger(__name__)

LOW_RES_CONV_LAYERS: int = 3
HIGHRES_LAYER_COUNT: int = 2
HIGHRES_LEVELS: Tuple[int, ...] = (2, 1, 0)
# warped I0/I1, raw I0/I1 and the incoming warp state
IMAGE_AND_STATE_CHANNELS: int = 4 * 3 + warping.WARP_STATE_CHANNELS


@dataclasses.dataclass(frozen=True)
class DecoderBlockSpec:
    """Body of one high-resolution decoder."""

    kind: config.DecoderKind
    kernel: int
    in_channels: int
    out_channels: int
    layer_count: int = HIGHRES_LAYER_COUNT

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f'Kernel must be odd. Got: <{self.kernel}>.')
        if self.kind == config.DecoderKind.DW_SEPARABLE and self.kernel < 3:
            raise ValueError(f'Depth-wise separable blocks need kernel >= 3. Got: <{self.kernel}>.')
        if self.layer_count < 1:
            raise ValueError(f'Layer count must be positive. Got: <{self.layer_count}>.')
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(
                f'Channels must be positive. Got: <{self.in_channels}>, <{self.out_channels}>.'
            )


def highres_block_specs(cfg: config.ModelConfig) -> List[DecoderBlockSpec]:
    """
    Decoder specs for levels 2, 1, 0, in that order.
    """
    return [
        DecoderBlockSpec(
            kind=cfg.highres_kind,
            kernel=kernel,
            in_channels=2 * cfg.level_channels[level] + IMAGE_AND_STATE_CHANNELS,
            out_channels=width,
        )
        for level, kernel, width in zip(HIGHRES_LEVELS, cfg.highres_kernels, cfg.highres_channels)
    ]


def prediction_head(in_channels: int, out_channels: int) -> nn.Conv2d:
    """3x3 prediction convolution, zero-initialized so its first outputs are zero."""
    head = nn.Conv2d(in_channels, out_channels, 3, padding=1)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    return head


class DepthwiseSeparableConv(nn.Module):
    """Depth-wise ``k x k`` then point-wise ``1 x 1`` convolution, each with a leaky rectifier."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels, in_channels, kernel, padding=kernel // 2, groups=in_channels
        )
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # pylint: disable=C0116
        return self.act(self.pointwise(self.act(self.depthwise(x))))


def build_decoder_body(spec: DecoderBlockSpec) -> nn.Sequential:
    """Stacks ``spec.layer_count`` layers of ``spec.kind``."""
    layers: List[nn.Module] = []
    in_channels = spec.in_channels
    for _ in range(spec.layer_count):
        if spec.kind == config.DecoderKind.DW_SEPARABLE:
            layers.append(DepthwiseSeparableConv(in_channels, spec.out_channels, spec.kernel))
        else:
            layers.append(
                nn.Conv2d(in_channels, spec.out_channels, spec.kernel, padding=spec.kernel // 2)
            )
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
        in_channels = spec.out_channels
    return nn.Sequential(*layers)


class LowResDecoder(nn.Module):
    """
    Initial warp state at level 3 from the level-4 and level-3 attention features.
    """

    def __init__(self, cfg: config.ModelConfig):
        super().__init__()
        width = 2 * cfg.base_width
        in_channels = 2 * cfg.level_channels[4] + 2 * cfg.level_channels[3]
        self.expected_channels = (cfg.level_channels[4], cfg.level_channels[3])
        self.fuse = nn.Conv2d(in_channels, width, 1)
        self.convs = nn.ModuleList(
            nn.Conv2d(width, width, 3, padding=1) for _ in range(LOW_RES_CONV_LAYERS)
        )
        self.head = prediction_head(width, warping.WARP_STATE_CHANNELS)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(
        self,
        f0_4: torch.Tensor,
        f0_3: torch.Tensor,
        f1_4: torch.Tensor,
        f1_3: torch.Tensor,
    ) -> warping.WarpState:  # pylint: disable=missing-function-docstring
        for coarse, fine in ((f0_4, f0_3), (f1_4, f1_3)):
            if (coarse.shape[1], fine.shape[1]) != self.expected_channels:
                raise ValueError(
                    f'Expected level 4/3 channels <{self.expected_channels}>. '
                    f'Got: <{(coarse.shape[1], fine.shape[1])}>.'
                )
            if tuple(fine.shape[-2:]) != (2 * coarse.shape[-2], 2 * coarse.shape[-1]):
                raise ValueError(
                    'Level 3 features must be twice the size of level 4 features. '
                    f'Got: <{tuple(fine.shape)}> and <{tuple(coarse.shape)}>.'
                )
        x = torch.cat(
            [
                F.interpolate(f0_4, scale_factor=2, mode='bilinear', align_corners=False),
                f0_3,
                F.interpolate(f1_4, scale_factor=2, mode='bilinear', align_corners=False),
                f1_3,
            ],
            dim=1,
        )
        x = self.act(self.fuse(x))
        for conv in self.convs:
            x = self.act(conv(x))
        return warping.WarpState.from_tensor(self.head(x))


class HighResDecoder(nn.Module):
    """Predicts a warp-state update at one of the levels 2, 1, 0."""

    def __init__(self, spec: DecoderBlockSpec):
        super().__init__()
        self.spec = spec
        self.body = build_decoder_body(spec)
        self.head = prediction_head(spec.out_channels, warping.WARP_STATE_CHANNELS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # pylint: disable=C0116
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f'Decoder expects <{self.spec.in_channels}> channels. Got: <{x.shape[1]}>.'
            )
        return self.head(self.body(x))


def warped_inputs(
    f0: torch.Tensor,
    f1: torch.Tensor,
    img0: torch.Tensor,
    img1: torch.Tensor,
    state: warping.WarpState,
) -> torch.Tensor:
    """
    ``[warp(f0), warp(f1), I0, I1, warp(I0), warp(I1), state]`` channel-wise, the
    input layout shared by the high-res decoders and the refinement blocks.
    """
    sizes = {tuple(t.shape[-2:]) for t in (f0, f1, img0, img1)}
    sizes.add(state.spatial_size)
    if len(sizes) != 1:
        raise ValueError(f'Level tensors and warp state differ in size. Got: <{sorted(sizes)}>.')
    warped_f0, warped_f1 = warping.warp_pair(f0, f1, state)
    warped_i0, warped_i1 = warping.warp_pair(img0, img1, state)
    return torch.cat(
        [warped_f0, warped_f1, img0, img1, warped_i0, warped_i1, state.as_tensor()], dim=1
    )


class FlowEstimator(nn.Module):
    """
    Low-resolution decoder followed by the three high-resolution decoders.
    """

    def __init__(self, cfg: config.ModelConfig):
        super().__init__()
        self.low_res = LowResDecoder(cfg)
        self.high_res = nn.ModuleList(HighResDecoder(spec) for spec in highres_block_specs(cfg))

    def estimate_initial(
        self,
        f0_4: torch.Tensor,
        f0_3: torch.Tensor,
        f1_4: torch.Tensor,
        f1_3: torch.Tensor,
    ) -> warping.WarpState:
        """
        Initial warp state predicted at level 3 and lifted to level 2.
        """
        return warping.upsample_warp_state(self.low_res(f0_4, f0_3, f1_4, f1_3))

    def refine_level(
        self,
        level: int,
        f0: torch.Tensor,
        f1: torch.Tensor,
        img0: torch.Tensor,
        img1: torch.Tensor,
        w_next: warping.WarpState,
    ) -> warping.WarpState:
        """
        Adds the level-``level`` decoder update to ``w_next``; the sum is upsampled
        for levels 2 and 1 and returned as is for level 0.
        """
        if level not in HIGHRES_LEVELS:
            raise ValueError(f'Level must be one of {HIGHRES_LEVELS}. Got: <{level}>.')
        decoder = self.high_res[HIGHRES_LEVELS.index(level)]
        delta = decoder(warped_inputs(f0, f1, img0, img1, w_next))
        result = warping.WarpState.from_tensor(delta + w_next.as_tensor())
        if level > 0:
            result = warping.upsample_warp_state(result)
        return result

    def forward(
        self,
        pyr0: FeaturePyramid,
        pyr1: FeaturePyramid,
        images0: Sequence[torch.Tensor],
        images1: Sequence[torch.Tensor],
    ) -> Tuple[warping.WarpState, List[warping.WarpState]]:
        """
        Args:
            pyr0: feature pyramid of the first frame.
            pyr1: feature pyramid of the last frame.
            images0: image pyramid of the first frame (at least levels 0 to 2).
            images1: image pyramid of the last frame.

        Returns:
            Full-resolution ``W^0`` and the warp states entering the level 2, 1 and 0
            decoders.
        """
        state = self.estimate_initial(pyr0[4], pyr0[3], pyr1[4], pyr1[3])
        intermediates: List[warping.WarpState] = []
        for level in HIGHRES_LEVELS:
            intermediates.append(state)
            state = self.refine_level(
                level, pyr0[level], pyr1[level], images0[level], images1[level], state
            )
        _LOGGER.debug('Estimated warp state of size <%s>.', state.spatial_size)
        return state, intermediates


def estimate_flow(
    pyr0: FeaturePyramid,
    pyr1: FeaturePyramid,
    images0: Sequence[torch.Tensor],
    images1: Sequence[torch.Tensor],
    estimator: FlowEstimator,
) -> Tuple[warping.WarpState, List[warping.WarpState]]:
    """Runs ``estimator``. See :py:meth:`FlowEstimator.forward`."""
    return estimator(pyr0, pyr1, images0, images1)
