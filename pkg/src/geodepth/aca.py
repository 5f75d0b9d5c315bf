"""Adaptive correlation aggregation: pulling 3D point features onto an image grid.

For every pixel a reference point is lifted from the current depth estimate.
Neighbouring points are gathered by a ball query whose radius shrinks as the
depth confidence grows, weighted per channel by a small attention MLP, and
summed into one feature vector per pixel.

Neighbour selection is hard; gradients reach the point features and the
weight MLPs only, never the query geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError
from .geometry import CameraModel, back_project_pixels
from .spatial import SpatialIndex
from .tensor_nn import mlp, sigmoid, stop_gradient

STRATEGIES = ("none", "knn", "fixed_ball", "adaptive")
# CLI spelling -> internal strategy name
STRATEGY_ALIASES = {"none": "none", "knn": "knn", "ball": "fixed_ball", "fixed_ball": "fixed_ball",
                    "adaptive": "adaptive", "aca": "adaptive"}


@dataclass(frozen=True)
class AcaConfig:
    K: int = 16
    r_min: float = 0.05
    r_max: float = 0.1
    strategy: str = "adaptive"

    def __post_init__(self):
        if not 0 < self.r_min < self.r_max:
            raise ConfigError("need 0 < r_min < r_max")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown aggregation strategy {self.strategy!r}")


@dataclass
class AggregatedFeatureMap:
    values: torch.Tensor  # F x H x W
    fallback_mask: np.ndarray  # H x W bool

    def tokens(self) -> torch.Tensor:
        return self.values.reshape(self.values.shape[0], -1).T


def adaptive_radius(confidence, r_min: float = 0.05, r_max: float = 0.1):
    """Linear blend: full confidence gives ``r_min``, zero confidence ``r_max``."""
    if isinstance(confidence, torch.Tensor):
        c = confidence.clamp(0.0, 1.0)
    else:
        c = np.clip(np.asarray(confidence, dtype=np.float64), 0.0, 1.0)
    r = c * r_min + (1 - c) * r_max
    return float(r) if np.ndim(r) == 0 and not isinstance(r, torch.Tensor) else r


def position_encoding(ref: torch.Tensor, nbr: torch.Tensor) -> torch.Tensor:
    """[ref, nbr, ref - nbr, |ref - nbr|] along the last axis (3+3+3+1 = 10)."""
    ref = torch.broadcast_to(ref, nbr.shape)
    diff = ref - nbr
    dist = torch.sqrt((diff * diff).sum(-1, keepdim=True))
    return torch.cat([ref, nbr, diff, dist], dim=-1)


def aggregate(features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Sum over the neighbour axis (-2) of ``weights * features``."""
    if features.shape != weights.shape:
        raise InputError(f"features {tuple(features.shape)} and weights {tuple(weights.shape)} differ")
    return (weights * features).sum(dim=-2)


class AttentionWeights(nn.Module):
    """Per-channel neighbour weights from point features and position encodings."""

    def __init__(self, feature_dim: int = 64, pos_hidden: int = 32, zero_init: bool = False, generator=None):
        super().__init__()
        self.feature_dim = feature_dim
        self.pos_mlp = mlp([10, pos_hidden, feature_dim], generator)
        self.out_mlp = mlp([2 * feature_dim, feature_dim, feature_dim], generator)
        if zero_init:
            for p in self.parameters():
                nn.init.zeros_(p)

    def forward(self, nbr_features: torch.Tensor, pos_enc: torch.Tensor) -> torch.Tensor:
        if nbr_features.shape[:-1] != pos_enc.shape[:-1] or pos_enc.shape[-1] != 10:
            raise InputError("neighbour features and position encodings disagree on K")
        if nbr_features.shape[-1] != self.feature_dim:
            raise InputError(f"expected {self.feature_dim} feature channels, got {nbr_features.shape[-1]}")
        h = torch.cat([nbr_features, self.pos_mlp(pos_enc)], dim=-1)
        return sigmoid(self.out_mlp(h))


class Aggregator(nn.Module):
    """Dense per-pixel aggregation of point features at one image scale."""

    def __init__(self, cfg: AcaConfig, feature_dim: int = 64, generator=None):
        super().__init__()
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.weights = AttentionWeights(feature_dim, generator=generator)

    def forward(self, prev_depth, prev_conf, camera: CameraModel, index: SpatialIndex | None,
                point_features: torch.Tensor, unit_weights: bool = False) -> AggregatedFeatureMap:
        return aggregate_relevant_features(prev_depth, prev_conf, camera, index, point_features,
                                           self.cfg, self.weights, unit_weights)


def aggregate_relevant_features(prev_depth, prev_conf, camera: CameraModel, index: SpatialIndex | None,
                                point_features: torch.Tensor, cfg: AcaConfig,
                                weight_net: AttentionWeights | None = None,
                                unit_weights: bool = False) -> AggregatedFeatureMap:
    """Aggregate point features for every pixel of an ``H x W`` depth estimate.

    ``unit_weights`` skips the attention MLP (all weights 1), which reduces the
    result to a plain neighbourhood feature sum.
    """
    depth = _to_numpy(prev_depth)
    conf = _to_numpy(prev_conf)
    H, W = depth.shape
    if conf.shape != (H, W):
        raise InputError("depth and confidence maps differ in shape")
    if camera.image_size != (W, H):
        raise InputError(f"camera is {camera.image_size}, depth is {(W, H)}")
    F = point_features.shape[-1]
    out = point_features.new_zeros(H * W, F)
    fallback = np.zeros(H * W, dtype=bool)
    if cfg.strategy == "none":
        return AggregatedFeatureMap(out.T.reshape(F, H, W), fallback.reshape(H, W))
    if index is None or len(index) == 0:
        raise ConfigError("aggregation needs a non-empty spatial index")
    if len(index) != point_features.shape[0]:
        raise InputError("spatial index and point features disagree on point count")

    v, u = np.mgrid[0:H, 0:W]
    d = depth.reshape(-1)
    valid = d > 0
    fallback[~valid] = True
    pix = np.nonzero(valid)[0]
    if len(pix) == 0:
        return AggregatedFeatureMap(out.T.reshape(F, H, W), fallback.reshape(H, W))
    ref = back_project_pixels(u.reshape(-1)[pix], v.reshape(-1)[pix], d[pix], camera)

    K = cfg.K
    if cfg.strategy == "knn":
        nbr, _ = index.knn(ref, min(K, len(index)))
        if nbr.shape[1] < K:
            nbr = nbr[:, np.arange(K) % nbr.shape[1]]
    else:
        if cfg.strategy == "adaptive":
            r = adaptive_radius(conf.reshape(-1)[pix], cfg.r_min, cfg.r_max)
        else:
            r = cfg.r_max
        res = index.ball_query(ref, r, K)
        nbr = res.indices
        fallback[pix[res.out_of_ball]] = True

    nbr_t = torch.as_tensor(nbr, dtype=torch.long)
    feats = point_features[nbr_t]  # P x K x F
    if unit_weights:
        w = torch.ones_like(feats)
    else:
        if weight_net is None:
            raise ConfigError("attention weights network required unless unit_weights is set")
        dt = point_features.dtype
        ref_t = torch.as_tensor(ref, dtype=dt)[:, None, :]
        nbr_pos = torch.tensor(index.positions, dtype=dt)[nbr_t]
        w = weight_net(feats, position_encoding(ref_t, nbr_pos))
    agg = aggregate(feats, w)
    out = out.index_copy(0, torch.as_tensor(pix, dtype=torch.long), agg)
    return AggregatedFeatureMap(out.T.reshape(F, H, W), fallback.reshape(H, W))


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return stop_gradient(x).cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)
