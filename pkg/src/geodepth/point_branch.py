"""Point-cloud completion branch: three cascaded point-moving steps.

Each step encodes points per-point, max-pools a global descriptor, broadcasts
it back to every point and predicts per-point features plus a displacement.
The displacement head starts at zero, so an untrained branch is the identity
on point positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InputError
from .geometry import PointSet
from .tensor_nn import Dense, check_finite, elu

SCALE_OF_STEP = {1: 0.25, 2: 0.5, 3: 1.0}


def farthest_point_indices(P: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    P = np.asarray(P, dtype=np.float64)
    picked = np.empty(n, dtype=np.int64)
    picked[0] = start
    nearest = np.sum((P - P[start]) ** 2, axis=1)
    for i in range(1, n):
        j = int(np.argmax(nearest))
        picked[i] = j
        nearest = np.minimum(nearest, np.sum((P - P[j]) ** 2, axis=1))
    return picked


def sample_fixed(points, n_fixed: int) -> PointSet:
    """Exactly ``n_fixed`` points: FPS from index 0, or cyclic replication if too few."""
    P = points.positions if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    if len(P) == 0:
        raise InputError("cannot sample from an empty point set")
    if len(P) <= n_fixed:
        idx = np.arange(n_fixed) % len(P)
    else:
        idx = farthest_point_indices(P, n_fixed)
    feats = None
    origin = None
    if isinstance(points, PointSet):
        feats = None if points.features is None else points.features[idx]
        origin = None if points.pixel_origin is None else points.pixel_origin[idx]
    return PointSet(P[idx], feats, origin)


def chamfer_distance(A, B) -> torch.Tensor | float:
    """Mean squared nearest-neighbour distance, A to B plus B to A.

    Accepts torch tensors (differentiable) or arrays / PointSets (returns float).
    """
    as_float = not isinstance(A, torch.Tensor)
    if isinstance(A, PointSet):
        A = A.positions
    if isinstance(B, PointSet):
        B = B.positions
    A = torch.as_tensor(A, dtype=torch.float64) if as_float else A
    B = torch.as_tensor(B, dtype=A.dtype) if not isinstance(B, torch.Tensor) else B.to(A.dtype)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise InputError("chamfer distance needs non-empty point sets")
    diff = A[:, None, :] - B[None, :, :]
    d2 = (diff * diff).sum(-1)
    cd = d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()
    return float(cd) if as_float else cd


@dataclass
class PmdStepOutput:
    features: torch.Tensor  # N x F_p
    displacement: torch.Tensor  # N x 3
    moved_points: torch.Tensor  # N x 3


MAX_STEP = 0.01  # meters a point may move in one step


class PmdStep(nn.Module):
    """Encode points, propagate a max-pooled global feature, and emit a bounded displacement."""

    def __init__(self, in_features: int, hidden: int = 64, out_features: int = 64, generator=None,
                 max_step: float = MAX_STEP):
        super().__init__()
        self.in_features = in_features
        self.max_step = max_step
        self.enc1 = Dense(3 + in_features, hidden, generator=generator)
        self.enc2 = Dense(hidden, hidden, generator=generator)
        self.dec1 = Dense(2 * hidden, hidden, generator=generator)
        self.dec2 = Dense(hidden, out_features, generator=generator)
        self.disp = Dense(out_features, 3, init="zeros")

    def forward(self, points: torch.Tensor, prev_features: torch.Tensor | None = None) -> PmdStepOutput:
        if points.dim() != 2 or points.shape[1] != 3:
            raise InputError(f"points must be N x 3, got {tuple(points.shape)}")
        x = points
        if self.in_features:
            if prev_features is None or prev_features.shape != (points.shape[0], self.in_features):
                raise InputError("previous step features missing or mis-shaped")
            x = torch.cat([points, prev_features], dim=1)
        local = elu(self.enc2(elu(self.enc1(x))))
        glob = local.max(dim=0, keepdim=True).values.expand_as(local)
        feat = self.dec2(elu(self.dec1(torch.cat([local, glob], dim=1))))
        check_finite(feat, "point features")
        # tanh bound: a zero-initialised head under Adam otherwise jumps by lr * fan_in on its first update
        disp = self.max_step * torch.tanh(self.disp(feat))
        return PmdStepOutput(feat, disp, points + disp)


class PointCompletion(nn.Module):
    """Three chained point-moving steps; step t feeds fusion at scale 1/4, 1/2, 1/1."""

    def __init__(self, feature_dim: int = 64, hidden: int = 64, generator=None):
        super().__init__()
        self.feature_dim = feature_dim
        self.steps = nn.ModuleList([
            PmdStep(0, hidden, feature_dim, generator),
            PmdStep(feature_dim, hidden, feature_dim, generator),
            PmdStep(feature_dim, hidden, feature_dim, generator),
        ])

    def forward(self, points: torch.Tensor) -> tuple[list[PmdStepOutput], torch.Tensor]:
        outs = []
        x, f = points, None
        for step in self.steps:
            o = step(x, f)
            outs.append(o)
            x, f = o.moved_points, o.features
        return outs, x


def point_loss(outputs: list[PmdStepOutput], gt_cloud: torch.Tensor, beta: float = 0.01) -> torch.Tensor:
    """Sum over steps of Chamfer(moved, gt) + beta * mean squared displacement norm."""
    total = gt_cloud.new_zeros(())
    for o in outputs:
        total = total + chamfer_distance(o.moved_points, gt_cloud)
        total = total + beta * (o.displacement ** 2).sum(-1).mean()
    return total


def complete(branch: PointCompletion, points: PointSet, n_fixed: int,
             dtype=torch.float32) -> tuple[list[PmdStepOutput], PointSet]:
    """Sample ``points`` to ``n_fixed`` and run the three steps."""
    sampled = sample_fixed(points, n_fixed)
    x = torch.as_tensor(sampled.positions, dtype=dtype)
    outs, final = branch(x)
    return outs, PointSet(final.detach().cpu().numpy().astype(np.float64))
