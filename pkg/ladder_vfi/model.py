# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
The complete interpolation network: feature extractor, flow estimator and
refinement, wired for both flow paths.
"""
import dataclasses
import logging
from typing import List, Optional, Tuple

import torch
from torch import nn

from ladder_vfi import config, feature_extractor, flow_estimator, refinement, synthesis, warping
from ladder_vfi.feature_extractor import FeaturePyramid


_LOGGER: logging.Logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class ModelOutput:
    """Unclamped prediction plus everything needed for losses and inspection."""

    prediction: torch.Tensor
    warp_state: warping.WarpState
    residual: torch.Tensor
    intermediates: List[warping.WarpState]


class LadderModel(nn.Module):
    """
    Interpolates the middle frame of a padded frame pair.

    Proper usage::

        model = LadderModel(small_config())
        output = model(img0, img1)
        frame = output.prediction.clamp(0, 1)

    Use :py:func:`ladder_vfi.synthesis.interpolate` for arbitrary frame sizes.
    """

    def __init__(self, cfg: config.ModelConfig, *, refiner: Optional[nn.Module] = None):
        super().__init__()
        config.validate(cfg)
        self.config = cfg
        self.extractor = feature_extractor.FeatureExtractor(cfg)
        self.flow_estimator = flow_estimator.FlowEstimator(cfg)
        self.refinement = refiner if refiner is not None else refinement.build_refinement(cfg)
        _LOGGER.info(
            'Created <%s> with C=<%s> and <%s> parameters.',
            type(self).__name__,
            cfg.base_width,
            sum(param.numel() for param in self.parameters()),
        )

    def flow_parameters(self) -> List[nn.Parameter]:
        """Parameters trained in the flow-only stage."""
        return list(self.extractor.parameters()) + list(self.flow_estimator.parameters())

    def estimate_warp_state(self, img0: torch.Tensor, img1: torch.Tensor) -> Tuple[
        FeaturePyramid,
        FeaturePyramid,
        Tuple[torch.Tensor, ...],
        Tuple[torch.Tensor, ...],
        warping.WarpState,
        List[warping.WarpState],
    ]:
        """Feature and image pyramids of both frames, ``W^0`` and the intermediates."""
        images0 = warping.image_pyramid(img0, config.PYRAMID_LEVELS)
        images1 = warping.image_pyramid(img1, config.PYRAMID_LEVELS)
        pyr0, pyr1 = self.extractor(img0, img1)
        w0, intermediates = self.flow_estimator(pyr0, pyr1, images0, images1)
        return pyr0, pyr1, images0, images1, w0, intermediates

    def forward(
        self,
        img0: torch.Tensor,
        img1: torch.Tensor,
        *,
        flow_mode: synthesis.FlowMode = synthesis.FlowMode.ORIGINAL_FLOW,
        use_residual: bool = True,
    ) -> ModelOutput:
        """
        Args:
            img0: ``(B, 3, H, W)`` first frame, dims multiples of 32 (64 for the
                downscaled flow path).
            img1: last frame, same shape.
            flow_mode: estimate the warp state at native or at half resolution.
            use_residual: add the refinement residual; the flow-only stage sets
                this to ``False`` and the residual is zero.

        Returns:
            :py:class:`ModelOutput` with an unclamped prediction.
        """
        flow_mode = synthesis.FlowMode(flow_mode)
        if flow_mode == synthesis.FlowMode.DOWNSCALED_FLOW:
            height, width = img0.shape[-2:]
            if height % synthesis.DOWNSCALED_INPUT_MULTIPLE or width % (
                synthesis.DOWNSCALED_INPUT_MULTIPLE
            ):
                raise ValueError(
                    f'Frame size <{height}x{width}> must be a multiple of '
                    f'{synthesis.DOWNSCALED_INPUT_MULTIPLE} for the downscaled flow path.'
                )
            low0 = warping.downsample_image(img0)
            low1 = warping.downsample_image(img1)
            *_, low_w0, intermediates = self.estimate_warp_state(low0, low1)
            w0 = warping.upsample_warp_state(low_w0)
            if use_residual:
                images0 = warping.image_pyramid(img0, config.PYRAMID_LEVELS)
                images1 = warping.image_pyramid(img1, config.PYRAMID_LEVELS)
                pyr0, pyr1 = self.extractor(img0, img1)
        else:
            pyr0, pyr1, images0, images1, w0, intermediates = self.estimate_warp_state(img0, img1)
        if use_residual:
            residual = self.refinement(pyr0, pyr1, images0, images1, w0)
        else:
            residual = torch.zeros_like(img0)
        prediction = synthesis.compose(img0, img1, w0, residual, clamp=False)
        return ModelOutput(
            prediction=prediction,
            warp_state=w0,
            residual=residual,
            intermediates=intermediates,
        )
