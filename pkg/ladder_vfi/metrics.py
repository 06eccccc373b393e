# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
PSNR and SSIM on ``[0, 1]`` RGB tensors (no luma conversion).
"""
import logging
import math

import cachetools
import torch
import torch.nn.functional as F


_LOGGER: logging.Logger = logging.getLogger(__name__)

PSNR_CAP_DB: float = 99.0
SSIM_WINDOW: int = 11
SSIM_SIGMA: float = 1.5
SSIM_K1: float = 0.01
SSIM_K2: float = 0.03
DATA_RANGE: float = 1.0


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f'Shapes differ. Got: <{tuple(a.shape)}> and <{tuple(b.shape)}>.')


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """
    ``10 * log10(1 / MSE)`` over every element, capped at 99 dB for identical inputs.
    """
    _check_pair(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10 * math.log10(DATA_RANGE**2 / mse))


@cachetools.cached(cache=cachetools.LRUCache(maxsize=8))
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Normalized ``size x size`` Gaussian window in float64."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    taps = torch.exp(-(coords**2) / (2 * sigma**2))
    taps = taps / taps.sum()
    return torch.outer(taps, taps)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """
    Mean structural similarity over channels and every full 11x11 Gaussian window.

    Args:
        a: ``(C, H, W)`` or ``(B, C, H, W)`` image in ``[0, 1]``.
        b: same shape as ``a``.

    Returns:
        SSIM in ``[-1, 1]``.
    """
    _check_pair(a, b)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(
            f'SSIM needs at least {SSIM_WINDOW} pixels per side. Got: <{tuple(a.shape)}>.'
        )
    channels = a.shape[1]
    window = gaussian_window().to(a.device).expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)
    x = a.double()
    y = b.double()

    def local_mean(value: torch.Tensor) -> torch.Tensor:
        return F.conv2d(value, window, groups=channels)

    mean_x = local_mean(x)
    mean_y = local_mean(y)
    var_x = local_mean(x * x) - mean_x**2
    var_y = local_mean(y * y) - mean_y**2
    cov_xy = local_mean(x * y) - mean_x * mean_y
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    numerator = (2 * mean_x * mean_y + c1) * (2 * cov_xy + c2)
    denominator = (mean_x**2 + mean_y**2 + c1) * (var_x + var_y + c2)
    return float((numerator / denominator).mean())
