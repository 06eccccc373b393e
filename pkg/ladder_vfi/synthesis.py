# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Frame synthesis: mask-weighted composition of the two warped frames plus the
residual, and the padded inference entry point for both flow paths.
"""
import dataclasses
import enum
import logging
from typing import TYPE_CHECKING, Optional

import torch

from ladder_vfi import feature_extractor, warping


if TYPE_CHECKING:  # pragma: no cover
    from ladder_vfi.model import LadderModel

_LOGGER: logging.Logger = logging.getLogger(__name__)

DOWNSCALED_INPUT_MULTIPLE: int = 2 * feature_extractor.INPUT_MULTIPLE


class FlowMode(str, enum.Enum):
    """Resolution at which the warp state is estimated."""

    ORIGINAL_FLOW = 'original_flow'
    DOWNSCALED_FLOW = 'downscaled_flow'

    @property
    def input_multiple(self) -> int:
        """Padding multiple the model input needs in this mode."""
        if self == FlowMode.DOWNSCALED_FLOW:
            return DOWNSCALED_INPUT_MULTIPLE
        return feature_extractor.INPUT_MULTIPLE


@dataclasses.dataclass(frozen=True)
class InterpolationResult:
    """Interpolated middle frame and the quantities that produced it."""

    frame: torch.Tensor
    warp_state: warping.WarpState
    residual: torch.Tensor
    mode: FlowMode


def compose(
    img0: torch.Tensor,
    img1: torch.Tensor,
    w0: warping.WarpState,
    residual: Optional[torch.Tensor] = None,
    *,
    clamp: bool = True,
) -> torch.Tensor:
    """
    ``sigmoid(m) * warp(I0, F_t0) + (1 - sigmoid(m)) * warp(I1, F_t1) + R``

    Args:
        img0: ``(B, 3, H, W)`` first frame.
        img1: ``(B, 3, H, W)`` last frame.
        w0: full-resolution warp state.
        residual: (optional) ``(B, 3, H, W)`` residual, zero when absent.
        clamp: clip the result to ``[0, 1]``. Training losses use ``clamp=False``.

    Returns:
        ``(B, 3, H, W)`` interpolated frame.
    """
    if img0.shape != img1.shape:
        raise ValueError(
            f'Frames must share a shape. Got: <{tuple(img0.shape)}> and <{tuple(img1.shape)}>.'
        )
    if residual is not None and residual.shape != img0.shape:
        raise ValueError(
            f'Residual shape <{tuple(residual.shape)}> differs from <{tuple(img0.shape)}>.'
        )
    warped0, warped1 = warping.warp_pair(img0, img1, w0)
    mask = w0.mask()
    result = mask * warped0 + (1 - mask) * warped1
    if residual is not None:
        result = result + residual
    if clamp:
        result = result.clamp(0, 1)
    return result


def interpolate(
    img0: torch.Tensor,
    img1: torch.Tensor,
    model: 'LadderModel',
    mode: FlowMode = FlowMode.ORIGINAL_FLOW,
) -> InterpolationResult:
    """
    Interpolates the middle frame of ``(img0, img1)`` at any size.

    Frames are replication-padded to the multiple the flow path needs (32, or 64 when
    the warp state is estimated at half resolution), run through ``model`` in
    evaluation mode and cropped back. The half-resolution grid is half the padded
    size, e.g. 640x384 for a 1280x720 frame, the same grid as padding the
    downsampled frame to a multiple of 32.

    Args:
        img0: ``(B, 3, H, W)`` first frame in ``[0, 1]``.
        img1: last frame, same shape.
        model: trained :py:class:`ladder_vfi.model.LadderModel`.
        mode: flow path.

    Returns:
        :py:class:`InterpolationResult` with a frame clamped to ``[0, 1]``.
    """
    if img0.shape != img1.shape:
        raise ValueError(
            f'Frames must share a shape. Got: <{tuple(img0.shape)}> and <{tuple(img1.shape)}>.'
        )
    mode = FlowMode(mode)
    padded0, record = feature_extractor.pad_to_multiple(img0, mode.input_multiple)
    padded1, _ = feature_extractor.pad_to_multiple(img1, mode.input_multiple)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            output = model(padded0, padded1, flow_mode=mode)
    finally:
        model.train(was_training)
    _LOGGER.debug('Interpolated <%s> frames in mode <%s>.', tuple(img0.shape), mode.value)
    return InterpolationResult(
        frame=feature_extractor.crop(output.prediction, record).clamp(0, 1),
        warp_state=output.warp_state.crop(record.height, record.width),
        residual=feature_extractor.crop(output.residual, record),
        mode=mode,
    )
