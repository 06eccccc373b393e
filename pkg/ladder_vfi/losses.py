# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Training losses: Charbonnier penalty, Laplacian pyramid L1 and a frequency-domain
amplitude/phase L1, plus their weighted sum.

Every term is a mean so the weights stay comparable across image sizes.
"""
import dataclasses
import logging
from typing import Dict, List

import cachetools
import torch
import torch.nn.functional as F

from ladder_vfi import config


_LOGGER: logging.Logger = logging.getLogger(__name__)

CHARBONNIER_EPSILON: float = 1e-6
LAPLACIAN_LEVELS: int = 5
PHASE_AMPLITUDE_FLOOR: float = 1e-8
_BINOMIAL_TAPS: List[float] = [1.0, 4.0, 6.0, 4.0, 1.0]


@dataclasses.dataclass(frozen=True)
class LossReport:
    """Per-batch means of each term and their weighted total."""

    charbonnier: torch.Tensor
    laplacian: torch.Tensor
    frequency: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        """Detached float view, e.g. for the metrics log."""
        return {
            field.name: float(getattr(self, field.name).detach())
            for field in dataclasses.fields(self)
        }


def _check_shapes(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(
            f'Prediction and target shapes differ. Got: <{tuple(pred.shape)}> '
            f'and <{tuple(gt.shape)}>.'
        )


def charbonnier_loss(
    pred: torch.Tensor, gt: torch.Tensor, *, epsilon: float = CHARBONNIER_EPSILON
) -> torch.Tensor:
    """Mean of ``sqrt((pred - gt)^2 + epsilon^2)``."""
    _check_shapes(pred, gt)
    return torch.sqrt((pred - gt) ** 2 + epsilon**2).mean()


@cachetools.cached(cache=cachetools.LRUCache(maxsize=16))
def binomial_kernel(channels: int, device: torch.device, dtype: torch.dtype) -> torch.Tensor:
    """
    Depth-wise 5x5 binomial blur kernel, ``[1, 4, 6, 4, 1] / 16`` in each direction.
    """
    taps = torch.tensor(_BINOMIAL_TAPS, device=device, dtype=dtype) / 16
    return torch.outer(taps, taps).expand(channels, 1, 5, 5).contiguous()


def _blur(img: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    channels = img.shape[1]
    kernel = binomial_kernel(channels, img.device, img.dtype)
    if scale != 1.0:
        kernel = kernel * scale
    return F.conv2d(F.pad(img, (2, 2, 2, 2), mode='reflect'), kernel, groups=channels)


def _pyramid_down(img: torch.Tensor) -> torch.Tensor:
    return _blur(img)[..., ::2, ::2]


def _pyramid_up(img: torch.Tensor, height: int, width: int) -> torch.Tensor:
    batch, channels, low_h, low_w = img.shape
    spread = img.new_zeros(batch, channels, 2 * low_h, 2 * low_w)
    spread[..., ::2, ::2] = img
    return _blur(spread, scale=4.0)[..., :height, :width]


def laplacian_pyramid(img: torch.Tensor, levels: int = LAPLACIAN_LEVELS) -> List[torch.Tensor]:
    """
    Band-pass levels ``1 .. levels - 1`` followed by the low-pass residual.

    Raises:
        ValueError: if the image cannot be halved ``levels`` times.
    """
    height, width = img.shape[-2:]
    if min(height, width) < 2**levels:
        raise ValueError(
            f'Image <{height}x{width}> is too small for a {levels}-level pyramid '
            f'(needs at least {2 ** levels} pixels per side).'
        )
    bands: List[torch.Tensor] = []
    current = img
    for _ in range(levels - 1):
        down = _pyramid_down(current)
        bands.append(current - _pyramid_up(down, *current.shape[-2:]))
        current = down
    bands.append(current)
    return bands


def laplacian_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """
    ``sum_i 2^(i-1) * mean|L_i(pred) - L_i(gt)|`` over the five pyramid levels,
    with the coarsest level weighted most.
    """
    _check_shapes(pred, gt)
    total = pred.new_zeros(())
    for index, (band_pred, band_gt) in enumerate(
        zip(laplacian_pyramid(pred), laplacian_pyramid(gt))
    ):
        total = total + 2**index * (band_pred - band_gt).abs().mean()
    return total


def frequency_loss(pred: torch.Tensor, gt: torch.Tensor, *, norm: str = 'ortho') -> torch.Tensor:
    """
    ``0.5 * mean|amp(pred) - amp(gt)| + 0.5 * mean|phase(pred) - phase(gt)|`` of the
    per-channel 2D FFT.

    The phase difference is the raw angle difference, without wrap correction, and
    bins whose target amplitude is below ``1e-8`` are left out of the phase mean.
    """
    _check_shapes(pred, gt)
    spectrum_pred = torch.fft.fft2(pred, norm=norm)
    spectrum_gt = torch.fft.fft2(gt, norm=norm)
    amplitude_pred = spectrum_pred.abs()
    amplitude_gt = spectrum_gt.abs()
    amplitude = (amplitude_pred - amplitude_gt).abs().mean()
    valid = amplitude_gt >= PHASE_AMPLITUDE_FLOOR
    if not bool(valid.any()):
        return 0.5 * amplitude
    one = torch.ones_like(spectrum_pred)
    # angle() has no usable gradient at the origin
    phase_pred = torch.angle(torch.where(amplitude_pred > 0, spectrum_pred, one))
    phase_gt = torch.angle(torch.where(valid, spectrum_gt, one))
    phase = (phase_pred - phase_gt).abs()[valid].mean()
    return 0.5 * amplitude + 0.5 * phase


def total_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    weights: config.LossWeights = config.LossWeights(),
) -> LossReport:
    """
    Weighted sum of the three terms.

    Args:
        pred: ``(B, 3, H, W)`` unclamped prediction.
        gt: ``(B, 3, H, W)`` ground-truth middle frame.
        weights: term weights.

    Returns:
        :py:class:`LossReport` whose ``total`` is differentiable.
    """
    charbonnier = charbonnier_loss(pred, gt)
    laplacian = laplacian_loss(pred, gt)
    frequency = frequency_loss(pred, gt)
    total = (
        weights.lambda_ch * charbonnier
        + weights.lambda_lap * laplacian
        + weights.lambda_f * frequency
    )
    return LossReport(
        charbonnier=charbonnier, laplacian=laplacian, frequency=frequency, total=total
    )
