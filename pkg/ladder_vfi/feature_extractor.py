# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Five-level per-frame feature pyramids.

Levels 0 to 2 come from strided convolution blocks applied to each frame
independently. Levels 3 and 4 come from a patch embedding followed by windowed
cross-frame attention blocks, where each frame's tokens query both frames.
Weights are shared between the two frames.
"""
import dataclasses
import logging
from typing import List, Optional, Tuple

import einops
import torch
import torch.nn.functional as F
from torch import nn

from ladder_vfi import config


_LOGGER: logging.Logger = logging.getLogger(__name__)

INPUT_MULTIPLE: int = 2 ** config.PYRAMID_LEVELS
LEAKY_SLOPE: float = 0.1
_CONV_LEVELS: int = 3

FeaturePyramid = List[torch.Tensor]


@dataclasses.dataclass(frozen=True)
class CropRecord:
    """Original size of a padded image."""

    height: int
    width: int
    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def is_empty(self) -> bool:
        """True when nothing was padded."""
        return not self.pad_bottom and not self.pad_right


def pad_to_multiple(img: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, CropRecord]:
    """
    Replication-pads the bottom and right edges of ``img`` so both spatial dims are
    multiples of ``multiple``.

    Returns:
        The padded image and the :py:class:`CropRecord` to undo it with :py:func:`crop`.
    """
    if multiple < 1:
        raise ValueError(f'Multiple must be at least 1. Got: <{multiple}>({type(multiple)}).')
    height, width = img.shape[-2:]
    pad_bottom = -height % multiple
    pad_right = -width % multiple
    record = CropRecord(height=height, width=width, pad_bottom=pad_bottom, pad_right=pad_right)
    if record.is_empty:
        return img, record
    _LOGGER.debug(
        'Padding <%sx%s> by <%s> rows and <%s> columns.', height, width, pad_bottom, pad_right
    )
    return F.pad(img, (0, pad_right, 0, pad_bottom), mode='replicate'), record


def crop(img: torch.Tensor, record: CropRecord) -> torch.Tensor:
    """Inverse of :py:func:`pad_to_multiple`."""
    return img[..., : record.height, : record.width]


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with leaky rectifiers, the first one strided."""

    def __init__(self, in_channels: int, out_channels: int, *, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # pylint: disable=C0116
        return self.act(self.conv2(self.act(self.conv1(x))))


class PatchEmbed(nn.Module):
    """Strided 3x3 convolution followed by a channel LayerNorm, channels-last output."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # pylint: disable=C0116
        return self.norm(einops.rearrange(self.proj(x), 'b c h w -> b h w c'))


class CrossFrameAttention(nn.Module):
    """
    Windowed multi-head attention whose queries come from one frame and whose
    keys/values come from the same window in both frames.
    """

    def __init__(self, dim: int, *, num_heads: int, window_size: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f'Width <{dim}> is not divisible by <{num_heads}> heads.')
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x0: torch.Tensor, x1: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            x0: ``(B, H, W, C)`` tokens of the first frame.
            x1: ``(B, H, W, C)`` tokens of the second frame.

        Returns:
            The outputs with ``x0`` and with ``x1`` as queries. Each frame's key/value
            projection is computed once for both.
        """
        _, height, width, _ = x0.shape
        size = self.window_size
        pad_h = -height % size
        pad_w = -width % size
        win0 = self._partition(F.pad(x0, (0, 0, 0, pad_w, 0, pad_h)))
        win1 = self._partition(F.pad(x1, (0, 0, 0, pad_w, 0, pad_h)))
        kv0 = self.kv(win0)
        kv1 = self.kv(win1)
        mask = None
        if pad_h or pad_w:
            mask = self._padding_mask(x0.shape[0], height, width, x0.device)
        out0 = self._attend(self.q(win0), torch.cat([kv0, kv1], dim=1), mask)
        out1 = self._attend(self.q(win1), torch.cat([kv1, kv0], dim=1), mask)
        return (
            self._merge(self.proj(out0), height + pad_h, width + pad_w)[:, :height, :width],
            self._merge(self.proj(out1), height + pad_h, width + pad_w)[:, :height, :width],
        )

    def _attend(
        self, q: torch.Tensor, kv: torch.Tensor, mask: Optional[torch.Tensor]
    ) -> torch.Tensor:
        heads = self.num_heads
        q = einops.rearrange(q, 'n t (h d) -> n h t d', h=heads)
        k, v = einops.rearrange(kv, 'n t (two h d) -> two n h t d', two=2, h=heads)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            attn = attn.masked_fill(mask, float('-inf'))
        return einops.rearrange(attn.softmax(dim=-1) @ v, 'n h t d -> n t (h d)')

    def _partition(self, x: torch.Tensor) -> torch.Tensor:
        size = self.window_size
        return einops.rearrange(x, 'b (nh sh) (nw sw) c -> (b nh nw) (sh sw) c', sh=size, sw=size)

    def _merge(self, windows: torch.Tensor, height: int, width: int) -> torch.Tensor:
        size = self.window_size
        return einops.rearrange(
            windows,
            '(b nh nw) (sh sw) c -> b (nh sh) (nw sw) c',
            nh=height // size,
            nw=width // size,
            sh=size,
            sw=size,
        )

    def _padding_mask(
        self, batch: int, height: int, width: int, device: torch.device
    ) -> torch.Tensor:
        size = self.window_size
        valid = torch.ones(1, height, width, 1, device=device)
        valid = F.pad(valid, (0, 0, 0, -width % size, 0, -height % size))
        valid = self._partition(valid)[..., 0]
        # keys are [own window, other window]
        invalid_keys = torch.cat([valid, valid], dim=1) == 0
        return invalid_keys.repeat(batch, 1)[:, None, None, :]


class CrossFrameAttentionBlock(nn.Module):
    """Pre-norm cross-frame attention plus a feed-forward sublayer."""

    def __init__(self, dim: int, *, num_heads: int, window_size: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CrossFrameAttention(dim, num_heads=num_heads, window_size=window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(
        self, x0: torch.Tensor, x1: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:  # pylint: disable=missing-function-docstring
        n0 = self.norm1(x0)
        n1 = self.norm1(x1)
        attended0, attended1 = self.attn(n0, n1)
        x0 = x0 + attended0
        x1 = x1 + attended1
        return x0 + self.mlp(self.norm2(x0)), x1 + self.mlp(self.norm2(x1))


class AttentionLevel(nn.Module):
    """One attention-based pyramid level: patch embedding and attention blocks."""

    def __init__(self, in_channels: int, out_channels: int, cfg: config.ModelConfig):
        super().__init__()
        self.embed = PatchEmbed(in_channels, out_channels)
        self.blocks = nn.ModuleList(
            CrossFrameAttentionBlock(
                out_channels,
                num_heads=out_channels // cfg.head_width,
                window_size=cfg.window_size,
                mlp_ratio=cfg.mlp_ratio,
            )
            for _ in range(cfg.attention_blocks)
        )

    def forward(
        self, x0: torch.Tensor, x1: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:  # pylint: disable=missing-function-docstring
        t0 = self.embed(x0)
        t1 = self.embed(x1)
        for block in self.blocks:
            t0, t1 = block(t0, t1)
        return (
            einops.rearrange(t0, 'b h w c -> b c h w').contiguous(),
            einops.rearrange(t1, 'b h w c -> b c h w').contiguous(),
        )


class FeatureExtractor(nn.Module):
    """
    Produces the two five-level pyramids of a frame pair.
    """

    def __init__(self, cfg: config.ModelConfig):
        super().__init__()
        channels = cfg.level_channels
        self.conv_levels = nn.ModuleList(
            ConvBlock(
                3 if level == 0 else channels[level - 1],
                channels[level],
                stride=1 if level == 0 else 2,
            )
            for level in range(_CONV_LEVELS)
        )
        self.attention_levels = nn.ModuleList(
            AttentionLevel(channels[level - 1], channels[level], cfg)
            for level in range(_CONV_LEVELS, config.PYRAMID_LEVELS)
        )

    def forward(
        self, img0: torch.Tensor, img1: torch.Tensor
    ) -> Tuple[FeaturePyramid, FeaturePyramid]:
        """
        Args:
            img0: ``(B, 3, H, W)`` first frame, ``H`` and ``W`` multiples of 32.
            img1: last frame, same shape.

        Returns:
            Both pyramids; level ``l`` is ``(B, level_channels[l], H / 2^l, W / 2^l)``.
        """
        if img0.shape != img1.shape:
            raise ValueError(
                f'Frames must share a shape. Got: <{tuple(img0.shape)}> and <{tuple(img1.shape)}>.'
            )
        height, width = img0.shape[-2:]
        if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
            raise ValueError(
                f'Frame size <{height}x{width}> is not a multiple of {INPUT_MULTIPLE}; '
                'pad the frames with pad_to_multiple first.'
            )
        pyr0: FeaturePyramid = []
        pyr1: FeaturePyramid = []
        x0, x1 = img0, img1
        for block in self.conv_levels:
            x0, x1 = block(x0), block(x1)
            pyr0.append(x0)
            pyr1.append(x1)
        for level in self.attention_levels:
            x0, x1 = level(x0, x1)
            pyr0.append(x0)
            pyr1.append(x1)
        return pyr0, pyr1


def extract(
    img0: torch.Tensor, img1: torch.Tensor, extractor: FeatureExtractor
) -> Tuple[FeaturePyramid, FeaturePyramid]:
    """Runs ``extractor`` on a frame pair. See :py:meth:`FeatureExtractor.forward`."""
    return extractor(img0, img1)
