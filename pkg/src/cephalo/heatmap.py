"""Heatmap targets (Gaussian-blurred one-hot) and the softmax-2D cross-entropy loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .region import round_half_away


@dataclass
class TargetHeatmap:
    """Per-landmark target planes plus a validity mask.

    ``maps`` is (L, H, W) float32. Valid landmarks carry a blurred one-hot
    that sums to 1 away from borders; landmarks outside the crop get an
    all-zero plane and are excluded from the loss.
    """

    maps: torch.Tensor
    valid: torch.Tensor  # (L,) bool


def gaussian_kernel_2d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Normalized 2D Gaussian on a square window of radius int(truncate * sigma + 0.5)."""
    radius = int(truncate * sigma + 0.5)
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    kernel = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def encode_target(
    coords: np.ndarray,
    height: int,
    width: int,
    blur_sigma: float = 1.0,
    truncate: float = 4.0,
) -> TargetHeatmap:
    """Encode (L, 2) crop-space (x, y) coordinates as blurred one-hot planes.

    Each coordinate is discretised to the nearest pixel (half away from
    zero) and convolved with a normalized Gaussian truncated at
    ``truncate * sigma``; the kernel is simply cropped at borders, so border
    targets sum to less than 1. ``blur_sigma = 0`` gives the exact one-hot.
    Landmarks outside [0, width) x [0, height) are masked invalid.
    """
    if height < 1 or width < 1:
        raise ValueError(f"degenerate target size {height}x{width}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = coords.shape[0]
    maps = np.zeros((n, height, width), dtype=np.float32)
    valid = np.zeros(n, dtype=bool)

    kernel = gaussian_kernel_2d(blur_sigma, truncate) if blur_sigma > 0 else None
    radius = 0 if kernel is None else kernel.shape[0] // 2

    for i, (x, y) in enumerate(coords):
        if not (0 <= x < width and 0 <= y < height) or not (math.isfinite(x) and math.isfinite(y)):
            continue
        valid[i] = True
        px = min(round_half_away(x), width - 1)
        py = min(round_half_away(y), height - 1)
        if kernel is None:
            maps[i, py, px] = 1.0
            continue
        y0, y1 = max(py - radius, 0), min(py + radius + 1, height)
        x0, x1 = max(px - radius, 0), min(px + radius + 1, width)
        ky0, kx0 = y0 - (py - radius), x0 - (px - radius)
        maps[i, y0:y1, x0:x1] = kernel[ky0:ky0 + (y1 - y0), kx0:kx0 + (x1 - x0)]

    return TargetHeatmap(maps=torch.from_numpy(maps), valid=torch.from_numpy(valid))


def heatmap_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    valid: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross entropy between targets and a 2D softmax over each landmark plane.

    Accepts (B, L, H, W) or unbatched (L, H, W) tensors. The softmax is taken
    over the flattened H*W plane (log-sum-exp stabilised via log_softmax);
    the loss is the mean over each sample's valid landmarks, then the mean
    over the batch. A batch with no valid landmark anywhere is an error.
    """
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        targets = targets.unsqueeze(0)
        if valid is not None:
            valid = valid.unsqueeze(0)
    if logits.shape != targets.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != targets {tuple(targets.shape)}")
    b, l, h, w = logits.shape
    if valid is None:
        valid = torch.ones(b, l, dtype=torch.bool, device=logits.device)

    log_probs = F.log_softmax(logits.reshape(b, l, h * w), dim=-1)
    per_landmark = -(targets.reshape(b, l, h * w) * log_probs).sum(dim=-1)

    valid = valid.to(per_landmark.dtype)
    counts = valid.sum(dim=1)
    if counts.sum() == 0:
        raise ValueError("all landmarks invalid: no training signal")
    per_sample = (per_landmark * valid).sum(dim=1) / counts.clamp(min=1)
    # samples with zero valid landmarks contribute nothing
    has_valid = counts > 0
    return per_sample[has_valid].mean()
