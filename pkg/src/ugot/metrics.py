"""Image and depth quality metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import ValidationError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    depth_rmse: float

    def to_dict(self):
        return asdict(self)


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99 dB."""
    a = np.asarray(a.detach() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def to_luminance(img):
    if img.ndim == 3:
        if img.shape[-1] != 3:
            raise ValidationError("color images must have 3 channels")
        w = torch.tensor(LUMA, dtype=img.dtype)
        return (img * w).sum(-1)
    return img


def ssim_map(a, b):
    """Local SSIM over all valid 11x11 window positions (torch, differentiable)."""
    a = torch.as_tensor(a, dtype=torch.float64) if not isinstance(a, torch.Tensor) else a
    b = torch.as_tensor(b, dtype=a.dtype) if not isinstance(b, torch.Tensor) else b.to(a.dtype)
    _same_shape(a, b)
    x, y = to_luminance(a), to_luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValidationError(f"image {tuple(x.shape)} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    # the window is an outer product, so filter rows then columns
    g = gaussian_window(dtype=x.dtype).sum(0)
    stack = torch.stack([x, y, x * x, y * y, x * y])[None]
    f = F.conv2d(stack, g.reshape(1, 1, 1, -1).expand(5, 1, 1, -1), groups=5)
    f = F.conv2d(f, g.reshape(1, 1, -1, 1).expand(5, 1, -1, 1), groups=5)[0]
    mu_x, mu_y = f[0], f[1]
    sxx = f[2] - mu_x ** 2
    syy = f[3] - mu_y ** 2
    sxy = f[4] - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(a, b):
    """Mean SSIM; returns a tensor when given tensors, else a float."""
    out = ssim_map(a, b).mean()
    if isinstance(a, torch.Tensor):
        return out
    return float(out)


def depth_rmse(pred, gt, mask=None):
    """RMSE over masked pixels after least-squares scale/shift alignment of ``pred``."""
    from .priors import scale_align

    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt)
    if mask is None:
        mask = np.isfinite(gt)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("depth_rmse needs a non-empty mask")
    s, t = scale_align(pred, gt, mask, min_pixels=1)
    err = (s * pred + t - gt)[mask]
    return float(np.sqrt(np.mean(err ** 2)))


def evaluate(pred_rgb, gt_rgb, pred_depth=None, gt_depth=None, mask=None) -> MetricReport:
    p = psnr(pred_rgb, gt_rgb)
    s = ssim(np.asarray(pred_rgb, dtype=np.float64), np.asarray(gt_rgb, dtype=np.float64))
    d = float("nan") if pred_depth is None else depth_rmse(pred_depth, gt_depth, mask)
    return MetricReport(p, s, d)
