# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Differentiable backward warping of images/features by flow fields, and warp-state
resampling between pyramid levels.

Flows are in pixel units of the grid they live on: ``flow[:, 0]`` is the horizontal
displacement ``dx`` and ``flow[:, 1]`` the vertical ``dy``.
"""
import dataclasses
import logging
from typing import Tuple

import cachetools
import torch
import torch.nn.functional as F


_LOGGER: logging.Logger = logging.getLogger(__name__)

FLOW_CHANNELS: int = 2
MASK_CHANNELS: int = 1
WARP_STATE_CHANNELS: int = 2 * FLOW_CHANNELS + MASK_CHANNELS


@dataclasses.dataclass(frozen=True)
class WarpState:
    """
    Flows from the intermediate frame towards each input frame plus the
    pre-activation composition mask, all at one resolution.
    """

    flow_to_0: torch.Tensor
    flow_to_1: torch.Tensor
    mask_logits: torch.Tensor

    def __post_init__(self):
        expected = tuple(self.flow_to_0.shape)
        if len(expected) != 4 or expected[1] != FLOW_CHANNELS:
            raise ValueError(f'Flows must be (B, 2, H, W). Got: <{expected}>.')
        if tuple(self.flow_to_1.shape) != expected:
            raise ValueError(
                f'Flows must share a shape. Got: <{expected}> and <{tuple(self.flow_to_1.shape)}>.'
            )
        mask_shape = (expected[0], MASK_CHANNELS, *expected[2:])
        if tuple(self.mask_logits.shape) != mask_shape:
            raise ValueError(
                f'Mask logits must be <{mask_shape}>. Got: <{tuple(self.mask_logits.shape)}>.'
            )

    @classmethod
    def from_tensor(cls, value: torch.Tensor) -> 'WarpState':
        """Splits a ``(B, 5, H, W)`` tensor into flows and mask logits."""
        if value.dim() != 4 or value.shape[1] != WARP_STATE_CHANNELS:
            raise ValueError(f'Expected a (B, 5, H, W) tensor. Got: <{tuple(value.shape)}>.')
        flow_to_0, flow_to_1, mask_logits = torch.split(
            value, [FLOW_CHANNELS, FLOW_CHANNELS, MASK_CHANNELS], dim=1
        )
        return cls(flow_to_0=flow_to_0, flow_to_1=flow_to_1, mask_logits=mask_logits)

    @classmethod
    def zeros(
        cls,
        batch: int,
        height: int,
        width: int,
        *,
        device: torch.device = None,
        dtype: torch.dtype = torch.float32,
    ) -> 'WarpState':
        """All-zero flows and logits (mask 0.5)."""
        return cls.from_tensor(
            torch.zeros(batch, WARP_STATE_CHANNELS, height, width, device=device, dtype=dtype)
        )

    def as_tensor(self) -> torch.Tensor:
        """Channel-wise concatenation ``[flow_to_0, flow_to_1, mask_logits]``."""
        return torch.cat([self.flow_to_0, self.flow_to_1, self.mask_logits], dim=1)

    @property
    def spatial_size(self) -> Tuple[int, int]:
        """``(height, width)``"""
        return tuple(self.flow_to_0.shape[-2:])

    def mask(self) -> torch.Tensor:
        """Composition mask in ``[0, 1]``."""
        return torch.sigmoid(self.mask_logits)

    def __add__(self, other: 'WarpState') -> 'WarpState':
        return WarpState.from_tensor(self.as_tensor() + other.as_tensor())

    def crop(self, height: int, width: int) -> 'WarpState':
        """Top-left ``height`` x ``width`` window."""
        return WarpState.from_tensor(self.as_tensor()[..., :height, :width])


@cachetools.cached(cache=cachetools.LRUCache(maxsize=32))
def _pixel_grid(
    height: int, width: int, device: torch.device, dtype: torch.dtype
) -> Tuple[torch.Tensor, torch.Tensor]:
    grid_y, grid_x = torch.meshgrid(
        torch.arange(height, device=device, dtype=dtype),
        torch.arange(width, device=device, dtype=dtype),
        indexing='ij',
    )
    return grid_y, grid_x


def backward_warp(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """
    Samples ``source`` at ``x + flow(x)`` with bilinear interpolation and border
    replication. Differentiable w.r.t. both arguments.

    Sampling weights are computed from pixel coordinates directly, so integer flows
    reproduce exact index shifts and a zero flow returns ``source`` unchanged.

    Args:
        source: ``(B, C, H, W)`` image or feature map.
        flow: ``(B, 2, H, W)`` displacement in pixels.

    Returns:
        ``(B, C, H, W)`` warped tensor.
    """
    if source.dim() != 4 or flow.dim() != 4 or flow.shape[1] != FLOW_CHANNELS:
        raise ValueError(
            'Expected source (B, C, H, W) and flow (B, 2, H, W). '
            f'Got: <{tuple(source.shape)}> and <{tuple(flow.shape)}>.'
        )
    if source.shape[0] != flow.shape[0] or source.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            'Source and flow must share batch and spatial size. '
            f'Got: <{tuple(source.shape)}> and <{tuple(flow.shape)}>.'
        )
    batch, channels, height, width = source.shape
    grid_y, grid_x = _pixel_grid(height, width, flow.device, flow.dtype)
    pos_x = (grid_x + flow[:, 0]).clamp(0, width - 1)
    pos_y = (grid_y + flow[:, 1]).clamp(0, height - 1)
    left = pos_x.detach().floor()
    top = pos_y.detach().floor()
    weight_x = (pos_x - left).unsqueeze(1)
    weight_y = (pos_y - top).unsqueeze(1)
    left = left.long()
    top = top.long()
    right = (left + 1).clamp(max=width - 1)
    bottom = (top + 1).clamp(max=height - 1)
    flat = source.reshape(batch, channels, height * width)

    def gather(rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        index = (rows * width + cols).reshape(batch, 1, height * width)
        return flat.gather(2, index.expand(-1, channels, -1)).reshape(
            batch, channels, height, width
        )

    upper = gather(top, left) * (1 - weight_x) + gather(top, right) * weight_x
    lower = gather(bottom, left) * (1 - weight_x) + gather(bottom, right) * weight_x
    return upper * (1 - weight_y) + lower * weight_y


def warp_pair(
    first: torch.Tensor, last: torch.Tensor, state: WarpState
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Warps ``first`` by ``flow_to_0`` and ``last`` by ``flow_to_1``."""
    return backward_warp(first, state.flow_to_0), backward_warp(last, state.flow_to_1)


def upsample_warp_state(state: WarpState) -> WarpState:
    """
    Doubles the resolution of a warp state: bilinear resampling of all channels,
    flow values multiplied by 2, mask logits unscaled.
    """
    resized = F.interpolate(state.as_tensor(), scale_factor=2, mode='bilinear', align_corners=False)
    result = WarpState.from_tensor(resized)
    return WarpState(
        flow_to_0=result.flow_to_0 * 2,
        flow_to_1=result.flow_to_1 * 2,
        mask_logits=result.mask_logits,
    )


def downscale_warp_state(state: WarpState, level: int) -> WarpState:
    """
    Brings a full-resolution warp state to pyramid ``level``: ``level`` bilinear
    halvings, each halving the flow values. Inverse of :py:func:`upsample_warp_state`.
    """
    if level < 0:
        raise ValueError(f'Level must be non-negative. Got: <{level}>.')
    result = state
    for _ in range(level):
        height, width = result.spatial_size
        if height < 2 or width < 2:
            raise ValueError(f'Cannot halve a <{height}x{width}> warp state.')
        resized = WarpState.from_tensor(
            F.interpolate(
                result.as_tensor(), scale_factor=0.5, mode='bilinear', align_corners=False
            )
        )
        result = WarpState(
            flow_to_0=resized.flow_to_0 * 0.5,
            flow_to_1=resized.flow_to_1 * 0.5,
            mask_logits=resized.mask_logits,
        )
    return result


def downsample_image(img: torch.Tensor, factor: float = 0.5) -> torch.Tensor:
    """
    Area-averaged downsampling by ``factor`` (0.5 per pyramid level).

    Raises:
        ValueError: on a factor outside ``(0, 1]`` or an empty result.
    """
    if img.dim() != 4:
        raise ValueError(f'Expected a (B, C, H, W) tensor. Got: <{tuple(img.shape)}>.')
    if not 0 < factor <= 1:
        raise ValueError(f'Downsample factor must be in (0, 1]. Got: <{factor}>.')
    height, width = img.shape[-2:]
    size = (int(height * factor), int(width * factor))
    if min(size) < 1:
        raise ValueError(
            f'Downsampling <{height}x{width}> by <{factor}> leaves no pixels. Got: <{size}>.'
        )
    return F.interpolate(img, size=size, mode='area')


def image_pyramid(img: torch.Tensor, levels: int) -> Tuple[torch.Tensor, ...]:
    """``img`` followed by ``levels - 1`` successive halvings."""
    result = [img]
    for _ in range(levels - 1):
        result.append(downsample_image(result[-1]))
    return tuple(result)
