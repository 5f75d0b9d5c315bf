"""RGB-D feature trunk and cascaded hourglass refinement stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .errors import InputError
from .tensor_nn import Conv2d, check_finite, elu, resize_to

SCALES = (0.25, 0.5, 1.0)


@dataclass
class StageOutput:
    depth: torch.Tensor  # H_s x W_s, meters
    confidence: torch.Tensor  # H_s x W_s, in [0, 1]


def hole_fill(depth: np.ndarray) -> np.ndarray:
    """Replace zeros with the value of a nearest valid pixel (Euclidean distance)."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    if valid.all() or not valid.any():
        return depth.copy()
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return depth[iy, ix]


def inverse_softplus(y: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    y = y.clamp_min(floor)
    return y + torch.log(-torch.expm1(-y))


class ResBlock(nn.Module):
    def __init__(self, c: int, generator=None):
        super().__init__()
        self.c1 = Conv2d(c, c, 3, generator=generator)
        self.c2 = Conv2d(c, c, 3, generator=generator)

    def forward(self, x):
        return elu(x + self.c2(elu(self.c1(x))))


class FeatureExtractor(nn.Module):
    """Small residual trunk over RGB + normalised depth with taps at strides 1, 2, 4."""

    def __init__(self, widths: dict[float, int], generator=None):
        super().__init__()
        wq, wh, wf = widths[0.25], widths[0.5], widths[1.0]
        self.stem = Conv2d(4, wf, 3, generator=generator)
        self.res_full = ResBlock(wf, generator)
        self.down_half = Conv2d(wf, wh, 3, stride=2, generator=generator)
        self.res_half = ResBlock(wh, generator)
        self.down_quarter = Conv2d(wh, wq, 3, stride=2, generator=generator)
        self.res_quarter = ResBlock(wq, generator)

    def forward(self, rgb: torch.Tensor, depth_norm: torch.Tensor) -> dict[float, torch.Tensor]:
        H, W = rgb.shape[-2:]
        if H % 4 or W % 4:
            raise InputError(f"image size {W}x{H} must be divisible by 4")
        x = torch.cat([rgb, depth_norm[None]], dim=0)
        full = self.res_full(elu(self.stem(x)))
        half = self.res_half(elu(self.down_half(full)))
        quarter = self.res_quarter(elu(self.down_quarter(half)))
        return {1.0: full, 0.5: half, 0.25: quarter}


class HourglassStage(nn.Module):
    """Two-level encoder-decoder with skips; the last decoder level also takes the fused features."""

    def __init__(self, c: int, max_depth: float = 3.0, generator=None):
        super().__init__()
        self.c = c
        self.max_depth = max_depth
        self.inp = Conv2d(c + 1, c, 3, generator=generator)
        self.down1 = Conv2d(c, c, 3, stride=2, generator=generator)
        self.down2 = Conv2d(c, c, 3, stride=2, generator=generator)
        self.up1 = Conv2d(2 * c, c, 3, generator=generator)
        self.up0 = Conv2d(3 * c, c, 3, generator=generator)
        # zero-initialised so an untrained stage reproduces its reference depth
        self.depth_head = Conv2d(c, 1, 3, init="zeros", generator=generator)
        self.conf_head = Conv2d(c, 1, 3, generator=generator)

    def forward(self, depth_ref: torch.Tensor, features: torch.Tensor,
                fused: torch.Tensor | None = None) -> StageOutput:
        if depth_ref.shape != features.shape[-2:]:
            raise InputError(f"reference depth {tuple(depth_ref.shape)} vs features {tuple(features.shape[-2:])}")
        if fused is None:
            fused = features
        if fused.shape != features.shape:
            raise InputError("fused features must match stage features")
        e0 = elu(self.inp(torch.cat([depth_ref[None] / self.max_depth, features], dim=0)))
        e1 = elu(self.down1(e0))
        e2 = elu(self.down2(e1))
        d1 = elu(self.up1(torch.cat([resize_to(e2, e1.shape[-2:]), e1], dim=0)))
        d0 = elu(self.up0(torch.cat([resize_to(d1, e0.shape[-2:]), e0, fused], dim=0)))
        base = inverse_softplus(depth_ref / self.max_depth)
        depth = F.softplus(base + self.depth_head(d0)[0]) * self.max_depth
        conf = torch.sigmoid(self.conf_head(d0)[0])
        check_finite(depth, "stage depth")
        return StageOutput(depth, conf)
