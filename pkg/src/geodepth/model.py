"""Full depth-completion network: image branch, point branch and their fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .aca import AcaConfig, AggregatedFeatureMap, Aggregator
from .errors import InputError, NumericError
from .gcmf import GCMFBlock, SumFusion
from .geometry import CameraModel, back_project, validate_depth
from .image_branch import SCALES, FeatureExtractor, HourglassStage, StageOutput, hole_fill
from .point_branch import PmdStepOutput, PointCompletion, sample_fixed
from .spatial import SpatialIndex
from .tensor_nn import area_downsample, resize_bilinear, stop_gradient


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, int, int] = (32, 48, 64)  # channels at 1/4, 1/2, 1/1
    point_features: int = 64
    point_hidden: int = 64
    n_fixed: int = 256
    max_depth: float = 3.0
    use_point_branch: bool = True
    gcmf_scales: tuple[float, ...] = SCALES
    aca: AcaConfig = field(default_factory=AcaConfig)
    layer_norm: bool = True
    detach_point_features: bool = False

    def width(self, s: float) -> int:
        return self.widths[SCALES.index(s)]


@dataclass
class PreparedInput:
    """Per-sample tensors that do not depend on network parameters."""

    rgb: torch.Tensor  # 3 x H x W
    raw_depth: torch.Tensor  # H x W
    camera: CameraModel
    ref_quarter: torch.Tensor  # hole-filled raw depth, area-averaged to 1/4
    conf_quarter: torch.Tensor  # fraction of valid raw pixels per 4x4 block
    points: torch.Tensor | None  # n_fixed x 3 sampled raw cloud, None if raw depth is empty


@dataclass
class Prediction:
    stages: list[StageOutput]
    point_outputs: list[PmdStepOutput] = field(default_factory=list)
    depth_refs: list[torch.Tensor] = field(default_factory=list)
    conf_refs: list[torch.Tensor] = field(default_factory=list)
    aggregated: list[AggregatedFeatureMap | None] = field(default_factory=list)

    @property
    def depth(self) -> torch.Tensor:
        return self.stages[-1].depth

    @property
    def confidence(self) -> torch.Tensor:
        return self.stages[-1].confidence


def prepare_input(rgb, raw_depth, camera: CameraModel, n_fixed: int, dtype=torch.float32) -> PreparedInput:
    raw = validate_depth(raw_depth)
    H, W = raw.shape
    if (W, H) != camera.image_size:
        raise InputError(f"raw depth is {W}x{H}, camera expects {camera.image_size}")
    if H % 4 or W % 4:
        raise InputError(f"image size {W}x{H} must be divisible by 4")
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape != (3, H, W):
        raise InputError(f"rgb must be 3x{H}x{W}, got {rgb.shape}")
    filled = torch.as_tensor(hole_fill(raw), dtype=dtype)
    valid = torch.as_tensor(raw > 0, dtype=dtype)
    ref_q = area_downsample(filled, 4, filled > 0)
    conf_q = area_downsample(valid, 4)
    cloud = back_project(raw, camera)
    pts = None
    if len(cloud):
        pts = torch.as_tensor(sample_fixed(cloud, n_fixed).positions, dtype=dtype)
    return PreparedInput(torch.as_tensor(rgb, dtype=dtype), torch.as_tensor(raw, dtype=dtype),
                         camera, ref_q, conf_q, pts)


class DepthCompletionNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        widths = {s: cfg.width(s) for s in SCALES}
        self.extractor = FeatureExtractor(widths, g)
        self.stages = nn.ModuleList([HourglassStage(widths[s], cfg.max_depth, g) for s in SCALES])
        self.point_branch = None
        self.aggregators = None
        self.fusions = None
        if cfg.use_point_branch:
            self.point_branch = PointCompletion(cfg.point_features, cfg.point_hidden, g)
            self.aggregators = nn.ModuleList([Aggregator(cfg.aca, cfg.point_features, g) for _ in SCALES])
            self.fusions = nn.ModuleList([
                GCMFBlock(widths[s], cfg.point_features, layer_norm=cfg.layer_norm, generator=g)
                if s in cfg.gcmf_scales else SumFusion(widths[s], cfg.point_features, g)
                for s in SCALES
            ])
        # counts point-branch forward passes; stays 0 on the image-only path
        self.point_branch_calls = 0

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def prepare(self, rgb, raw_depth, camera: CameraModel) -> PreparedInput:
        return prepare_input(rgb, raw_depth, camera, self.cfg.n_fixed, self.dtype)

    def forward(self, inp: PreparedInput) -> Prediction:
        cfg = self.cfg
        feats = self.extractor(inp.rgb, inp.raw_depth / cfg.max_depth)

        point_outs: list[PmdStepOutput] = []
        if self.point_branch is not None and inp.points is not None:
            self.point_branch_calls += 1
            point_outs, _ = self.point_branch(inp.points)

        pred = Prediction([], point_outs)
        depth_ref, conf_ref = inp.ref_quarter, inp.conf_quarter
        for t, s in enumerate(SCALES):
            if t > 0:
                depth_ref = resize_bilinear(pred.stages[-1].depth, 2)
                conf_ref = resize_bilinear(pred.stages[-1].confidence, 2)
            feat = feats[s]
            fused = feat
            agg = None
            if self.point_branch is not None:
                agg = self._aggregate(t, s, depth_ref, conf_ref, inp, point_outs, feat)
                fused = self.fusions[t](feat, agg)
            pred.depth_refs.append(depth_ref)
            pred.conf_refs.append(conf_ref)
            pred.aggregated.append(agg)
            pred.stages.append(self.stages[t](depth_ref, feat, fused))
        return pred

    def _aggregate(self, t, s, depth_ref, conf_ref, inp, point_outs, feat) -> AggregatedFeatureMap:
        cam_s = inp.camera.scaled(s)
        if not point_outs:
            H, W = feat.shape[-2:]
            zeros = feat.new_zeros(self.cfg.point_features, H, W)
            return AggregatedFeatureMap(zeros, np.ones((H, W), dtype=bool))
        step = point_outs[t]
        if not torch.isfinite(step.moved_points).all():
            raise NumericError(f"point branch produced non-finite positions at step {t}")
        features = step.features.detach() if self.cfg.detach_point_features else step.features
        index = None
        if self.cfg.aca.strategy != "none":
            index = SpatialIndex(stop_gradient(step.moved_points).cpu().numpy().astype(np.float64))
        return self.aggregators[t](depth_ref, conf_ref, cam_s, index, features)

    def point_parameters(self) -> list[nn.Parameter]:
        return [] if self.point_branch is None else list(self.point_branch.parameters())


def predict(model: DepthCompletionNet, rgb, raw_depth, camera: CameraModel) -> Prediction:
    return model(model.prepare(rgb, raw_depth, camera))
