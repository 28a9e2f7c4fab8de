"""Reconstruction metrics.

Both metrics operate on [0, 1]-scaled pixels (inputs arrive in [-1, 1]).
PSNR uses a unit dynamic range; SSIM uses a 7x7 Gaussian window with
sigma 1.5 and the standard stability constants K1 = 0.01, K2 = 0.03.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def to_unit(x: Tensor) -> Tensor:
    return ((torch.as_tensor(x) + 1.0) / 2.0).clamp(0.0, 1.0)


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    a, b = to_unit(a), to_unit(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(dtype) -> Tensor:
    half = (SSIM_WINDOW - 1) / 2
    x = torch.arange(SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: Tensor, b: Tensor) -> float:
    """Mean structural similarity over channels of a (3, h, w) image pair."""
    a, b = to_unit(a), to_unit(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    a = a[None].to(torch.float64)
    b = b[None].to(torch.float64)
    ch = a.shape[1]
    win = _gaussian_window(a.dtype).expand(ch, 1, -1, -1)

    def filt(x):
        return F.conv2d(x, win, groups=ch)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
    return float((num / den).mean())
