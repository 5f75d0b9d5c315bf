"""Finite-difference gradient suite over the differentiable operations and blocks.

Every case builds a float64 closure ending in a random linear readout, so each
output element contributes to the scalar being differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import gcmf, tensor_nn
from .aca import AttentionWeights, aggregate, position_encoding
from .image_branch import FeatureExtractor, HourglassStage, StageOutput
from .losses import gt_pyramid, image_loss
from .point_branch import PmdStep, chamfer_distance
from .tensor_nn import grad_check

TOLERANCE = 1e-4


@dataclass
class Case:
    closure: Callable[..., torch.Tensor]
    inputs: list[torch.Tensor]
    max_coords: int | None = None
    freeze_stopped: bool = False


def _readout(out: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    return (out * R).sum()


def _module_case(module: torch.nn.Module, args: list[torch.Tensor], fn, gen, max_coords=None) -> Case:
    """Check a module w.r.t. its inputs and all of its parameters."""
    module.double()
    params = list(module.parameters())
    n = len(args)
    with torch.no_grad():
        R = torch.randn(fn(*args).shape, generator=gen, dtype=torch.float64)
    return Case(lambda *xs: _readout(fn(*xs[:n]), R), args + params, max_coords)


def _randn(gen, *shape, scale=1.0):
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * scale


def _elementwise(fn):
    def build(gen):
        x = _randn(gen, 5, 7)
        x = x + 0.05 * torch.sign(x)  # keep clear of kinks at 0
        R = _randn(gen, 5, 7)
        return Case(lambda a: _readout(fn(a), R), [x])
    return build


def _dense(gen):
    x, W, b, R = _randn(gen, 6, 5), _randn(gen, 5, 4), _randn(gen, 4), _randn(gen, 6, 4)
    return Case(lambda a, w, c: _readout(tensor_nn.dense(a, w, c), R), [x, W, b])


def _conv(stride, padding):
    def build(gen):
        x, k, b = _randn(gen, 3, 9, 8), _randn(gen, 4, 3, 3, 3), _randn(gen, 4)
        with torch.no_grad():
            R = torch.randn(tensor_nn.conv2d(x, k, b, stride, padding).shape, generator=gen, dtype=torch.float64)
        return Case(lambda a, w, c: _readout(tensor_nn.conv2d(a, w, c, stride, padding), R), [x, k, b])
    return build


def _softmax(gen):
    x, R = _randn(gen, 4, 6, scale=3.0), _randn(gen, 4, 6)
    return Case(lambda a: _readout(tensor_nn.softmax(a, -1), R), [x])


def _resize(factor):
    def build(gen):
        x = _randn(gen, 2, 6, 8)
        with torch.no_grad():
            R = torch.randn(tensor_nn.resize_bilinear(x, factor).shape, generator=gen, dtype=torch.float64)
        return Case(lambda a: _readout(tensor_nn.resize_bilinear(a, factor), R), [x])
    return build


def _area(gen):
    x = _randn(gen, 8, 12).abs() + 0.5
    valid = torch.rand(8, 12, generator=gen, dtype=torch.float64) > 0.3
    R = _randn(gen, 2, 3)
    return Case(lambda a: _readout(tensor_nn.area_downsample(a, 4, valid), R), [x])


def _attention(fn):
    def build(gen):
        Q, K, V = _randn(gen, 7, 4), _randn(gen, 9, 4), _randn(gen, 9, 5)
        R = _randn(gen, 7, 5)
        return Case(lambda q, k, v: _readout(fn(q, k, v), R), [Q, K, V])
    return build


def _layer_norm(gen):
    m = gcmf.LayerNorm(6)
    with torch.no_grad():
        m.gamma.add_(0.1 * torch.randn(6, generator=gen))
    return _module_case(m, [_randn(gen, 5, 6)], m, gen)


def _self_attend(gen):
    m = gcmf.SelfAttend(6, generator=gen)
    return _module_case(m, [_randn(gen, 10, 6)], m, gen)


def _cross_attend(gen):
    m = gcmf.CrossAttend(6, 5, generator=gen)
    return _module_case(m, [_randn(gen, 10, 6), _randn(gen, 10, 5)], m, gen)


def _conv_gru(gen):
    m = gcmf.ConvGRUFuse(3, generator=gen)
    return _module_case(m, [_randn(gen, 3, 5, 6), _randn(gen, 3, 5, 6)], m, gen, max_coords=40)


def _gcmf_block(gen):
    m = gcmf.GCMFBlock(4, kv_dim=5, generator=gen)
    return _module_case(m, [_randn(gen, 4, 4, 6), _randn(gen, 5, 4, 6)], m, gen, max_coords=30)


def _aca_weights(gen):
    m = AttentionWeights(6, pos_hidden=8, generator=gen)
    ref = _randn(gen, 5, 1, 3)
    nbr = ref + _randn(gen, 5, 4, 3, scale=0.1)
    feats = _randn(gen, 5, 4, 6)

    def fn(f, r, n):
        return aggregate(f, m(f, position_encoding(r, n)))
    return _module_case(m, [feats, ref, nbr], fn, gen, max_coords=40)


def _hourglass(gen):
    m = HourglassStage(3, max_depth=3.0, generator=gen)
    with torch.no_grad():
        m.depth_head.weight.normal_(0.0, 0.2, generator=gen)
    depth = 0.5 + torch.rand(8, 12, generator=gen, dtype=torch.float64)
    feats, fused = _randn(gen, 3, 8, 12), _randn(gen, 3, 8, 12)

    def fn(d, f, g):
        out = m(d, f, g)
        return torch.stack([out.depth, out.confidence])
    return _module_case(m, [depth, feats, fused], fn, gen, max_coords=25)


def _feature_extractor(gen):
    m = FeatureExtractor({0.25: 2, 0.5: 2, 1.0: 2}, gen)
    rgb = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64)
    depth = torch.rand(8, 8, generator=gen, dtype=torch.float64)

    def fn(x, d):
        return torch.cat([f.reshape(-1) for f in m(x, d).values()])
    return _module_case(m, [rgb, depth], fn, gen, max_coords=25)


def _image_loss(gen):
    gt = 0.5 + torch.rand(8, 8, generator=gen, dtype=torch.float64)
    gt[0, :3] = 0.0
    levels = gt_pyramid(gt)
    # predictions sit a fixed distance from the target so |err| stays clear of its kink
    shift = [0.03 * torch.sign(_randn(gen, n, n)) for n in (2, 4, 8)]
    depths = [g + s for (g, _), s in zip(levels, shift)]
    confs = [torch.rand(n, n, generator=gen, dtype=torch.float64) for n in (2, 4, 8)]

    def fn(*xs):
        return image_loss([StageOutput(d, c) for d, c in zip(xs[:3], xs[3:])], levels)
    return Case(fn, depths + confs, freeze_stopped=True)


def _pmd_step(gen):
    m = PmdStep(4, hidden=6, out_features=5, generator=gen)
    with torch.no_grad():
        m.disp.W.normal_(0.0, 0.3, generator=gen)

    def fn(p, f):
        o = m(p, f)
        return torch.cat([o.features, o.moved_points], dim=1)
    return _module_case(m, [_randn(gen, 9, 3), _randn(gen, 9, 4)], fn, gen, max_coords=30)


def _chamfer(gen):
    A, B = _randn(gen, 7, 3), _randn(gen, 5, 3)
    return Case(lambda a, b: chamfer_distance(a, b), [A, B])


CASES: dict[str, Callable[[torch.Generator], Case]] = {
    "dense": _dense,
    "conv2d_same": _conv(1, "same"),
    "conv2d_stride2": _conv(2, "same"),
    "conv2d_valid": _conv(1, "valid"),
    "sigmoid": _elementwise(tensor_nn.sigmoid),
    "elu": _elementwise(tensor_nn.elu),
    "relu": _elementwise(tensor_nn.relu),
    "softmax": _softmax,
    "resize_up": _resize(2.0),
    "resize_down": _resize(0.5),
    "area_downsample": _area,
    "softmax_attention": _attention(gcmf.softmax_attention),
    "linear_attention": _attention(gcmf.linear_attention),
    "layer_norm": _layer_norm,
    "self_attend": _self_attend,
    "cross_attend": _cross_attend,
    "conv_gru": _conv_gru,
    "gcmf_block": _gcmf_block,
    "aca_weights": _aca_weights,
    "hourglass": _hourglass,
    "feature_extractor": _feature_extractor,
    "image_loss": _image_loss,
    "pmd_step": _pmd_step,
    "chamfer": _chamfer,
}


def run_case(name: str, seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    case = CASES[name](gen)
    return grad_check(case.closure, case.inputs, max_coords=case.max_coords, seed=seed,
                      freeze_stopped=case.freeze_stopped)


def run_suite(names=None, seeds=range(10)) -> list[tuple[str, int, float]]:
    names = list(CASES) if names is None else list(names)
    return [(n, s, run_case(n, s)) for n in names for s in seeds]


def summarize(results) -> dict[str, float]:
    worst: dict[str, float] = {}
    for name, _, err in results:
        worst[name] = max(worst.get(name, 0.0), err)
    return worst


def passed(results, tol: float = TOLERANCE) -> bool:
    return all(np.isfinite(e) and e < tol for _, _, e in results)
