"""Resampling and filtering helpers shared by the influence, CAM and loss code.

Torch variants are differentiable; the numpy wrappers are for frozen quantities.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .diffmodel import DTYPE

LUMA = (0.299, 0.587, 0.114)

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
SOBEL_Y = ((-1.0, -2.0, -1.0), (0.0, 0.0, 0.0), (1.0, 2.0, 1.0))


def upsample_t(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize (half-pixel centres) of a (..., H, W) tensor."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    lead = x.shape[:-2]
    flat = x.reshape(1, -1, *x.shape[-2:])
    out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def upsample(x, size) -> np.ndarray:
    return upsample_t(torch.as_tensor(np.asarray(x, dtype=np.float64)), tuple(size)).numpy()


def area_downsample_t(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    lead = x.shape[:-2]
    flat = x.reshape(1, -1, *x.shape[-2:])
    out = F.adaptive_avg_pool2d(flat, size)
    return out.reshape(*lead, *size)


def area_downsample(x, size) -> np.ndarray:
    return area_downsample_t(torch.as_tensor(np.asarray(x, dtype=np.float64)), tuple(size)).numpy()


def minmax_normalize_t(x: torch.Tensor) -> torch.Tensor:
    """Per-leading-index min-max normalisation of (..., H, W); constant maps become 0."""
    flat = x.reshape(*x.shape[:-2], -1)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = torch.where(span > 0, (flat - lo) / safe, torch.zeros_like(flat))
    return out.reshape(x.shape)


def luminance(image_hwc) -> np.ndarray:
    img = np.asarray(image_hwc, dtype=np.float64)
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def sobel_t(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """3x3 Sobel responses of an (H, W) map with replicate padding."""
    k = torch.tensor([SOBEL_X, SOBEL_Y], dtype=DTYPE).unsqueeze(1)
    padded = F.pad(x.reshape(1, 1, *x.shape), (1, 1, 1, 1), mode="replicate")
    # conv2d is cross-correlation, which is what the kernels above encode
    out = F.conv2d(padded, k)
    return out[0, 0], out[0, 1]


def sobel(x) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = sobel_t(torch.as_tensor(np.asarray(x, dtype=np.float64)))
    return gx.numpy(), gy.numpy()
