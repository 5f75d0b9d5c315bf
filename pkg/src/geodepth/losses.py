"""Joint training objective and the masked evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .errors import InputError
from .image_branch import StageOutput
from .point_branch import PmdStepOutput, point_loss
from .tensor_nn import area_downsample, stop_gradient

STAGE_WEIGHTS = (0.25, 0.5, 1.0)
CONF_WEIGHT = 0.5
TAU = 0.05
LAMBDA = 0.01
DELTA_THRESHOLDS = (1.05, 1.10, 1.25)


@dataclass
class LossTerms:
    total: torch.Tensor
    image: torch.Tensor
    point: torch.Tensor


def gt_pyramid(gt: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Ground truth and its validity at 1/4, 1/2 and 1/1, area-averaged over valid pixels."""
    valid = gt > 0
    out = []
    for f in (4, 2, 1):
        g = area_downsample(gt, f, valid)
        out.append((g, g > 0))
    return out


def image_loss(stages: list[StageOutput], gt_levels, stage_weights=STAGE_WEIGHTS, tau: float = TAU) -> torch.Tensor:
    """Per stage: L1 on valid ground truth plus a confidence regression towards exp(-|err|/tau)."""
    total = None
    for stage, (g, valid), w in zip(stages, gt_levels, stage_weights):
        if stage.depth.shape != g.shape:
            raise InputError(f"stage depth {tuple(stage.depth.shape)} vs ground truth {tuple(g.shape)}")
        if not valid.any():
            raise InputError("no valid ground-truth pixels")
        err = (stage.depth - g)[valid]
        l1 = err.abs().mean()
        target = torch.exp(-stop_gradient(err).abs() / tau)
        conf = ((stage.confidence[valid] - target) ** 2).mean()
        term = w * (l1 + CONF_WEIGHT * conf)
        total = term if total is None else total + term
    return total


def joint_loss(stages: list[StageOutput], gt_depth: torch.Tensor, point_outputs: list[PmdStepOutput] | None,
               gt_cloud: torch.Tensor | None, lam: float = LAMBDA, beta: float = 0.01,
               stage_weights=STAGE_WEIGHTS, tau: float = TAU, gt_levels=None) -> LossTerms:
    """Image loss plus ``lam`` times the point-branch loss (zero without a point branch)."""
    if gt_levels is None:
        gt_levels = gt_pyramid(gt_depth)
    li = image_loss(stages, gt_levels, stage_weights, tau)
    if point_outputs and gt_cloud is not None:
        lp = point_loss(point_outputs, gt_cloud, beta)
    else:
        lp = li.new_zeros(())
    return LossTerms(li + lam * lp, li, lp)


class Metrics(NamedTuple):
    rmse: float
    rel: float
    mae: float
    delta_105: float
    delta_110: float
    delta_125: float


def metrics(pred, gt, mask) -> Metrics:
    """Depth metrics restricted to ``mask``; deltas are percentages with a strict ``<`` threshold."""
    pred = np.asarray(pred.detach().cpu() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt.detach().cpu() if isinstance(gt, torch.Tensor) else gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise InputError("prediction, ground truth and mask must share a shape")
    if not mask.any():
        raise InputError("evaluation mask is empty")
    p, g = pred[mask], gt[mask]
    if np.any(g <= 0):
        raise InputError("ground truth must be positive inside the mask")
    err = p - g
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    deltas = [100.0 * float(np.mean(ratio < t)) for t in DELTA_THRESHOLDS]
    return Metrics(float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err) / g)),
                   float(np.mean(np.abs(err))), *deltas)
