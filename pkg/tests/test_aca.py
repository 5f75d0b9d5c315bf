import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from geodepth.aca import (AcaConfig, Aggregator, AttentionWeights, adaptive_radius, aggregate,
                          aggregate_relevant_features, position_encoding)
from geodepth.errors import ConfigError, InputError
from geodepth.geometry import CameraModel, back_project_pixels
from geodepth.gradcheck import run_case
from geodepth.spatial import SpatialIndex, brute_force_ball_query, brute_force_knn

f64 = torch.float64


def test_radius_endpoints():
    assert adaptive_radius(1.0) == 0.05
    assert adaptive_radius(0.0) == 0.1
    assert adaptive_radius(0.5) == pytest.approx(0.075, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10, allow_nan=False))
def test_radius_clamped(c):
    r = adaptive_radius(c)
    assert 0.05 <= r <= 0.1


def test_config_validation():
    with pytest.raises(ConfigError):
        AcaConfig(r_min=0.1, r_max=0.05)
    with pytest.raises(ConfigError):
        AcaConfig(K=0)
    with pytest.raises(ConfigError):
        AcaConfig(strategy="mean")


def test_position_encoding_examples():
    p = torch.tensor([1.0, 2.0, 3.0], dtype=f64)
    assert position_encoding(p, p).tolist() == [1, 2, 3, 1, 2, 3, 0, 0, 0, 0]
    got = position_encoding(torch.zeros(3, dtype=f64), torch.tensor([1.0, 0, 0], dtype=f64))
    assert got.tolist() == [0, 0, 0, 1, 0, 0, -1, 0, 0, 1]


def test_position_encoding_norm_consistency():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(100, 3, generator=g, dtype=f64), torch.randn(100, 3, generator=g, dtype=f64)
    e = position_encoding(a, b)
    assert torch.allclose(e[:, 9], e[:, 6:9].norm(dim=-1), atol=1e-9, rtol=0)


def test_zero_init_weights_are_half():
    net = AttentionWeights(8, zero_init=True)
    w = net(torch.randn(5, 3, 8), torch.randn(5, 3, 10))
    assert w.shape == (5, 3, 8) and torch.all(w == 0.5)
    with pytest.raises(InputError):
        net(torch.randn(5, 3, 8), torch.randn(5, 4, 10))


def test_weights_in_open_interval():
    net = AttentionWeights(8, generator=torch.Generator().manual_seed(1))
    w = net(torch.randn(7, 8), torch.randn(7, 10))
    assert w.shape == (7, 8) and torch.all((w > 0) & (w < 1))


def test_aggregate_cases():
    F = torch.randn(1, 6, dtype=f64)
    assert torch.equal(aggregate(F, torch.ones_like(F)), F[0])
    assert torch.equal(aggregate(F.expand(4, 6), torch.zeros(4, 6, dtype=f64)), torch.zeros(6, dtype=f64))
    rng = np.random.default_rng(2)
    Fk, wk = rng.normal(size=(5, 4)), rng.random((5, 4))
    loop = np.zeros(4)
    for k in range(5):
        for c in range(4):
            loop[c] += wk[k, c] * Fk[k, c]
    np.testing.assert_allclose(aggregate(torch.tensor(Fk), torch.tensor(wk)).numpy(), loop, atol=1e-9)
    assert torch.allclose(aggregate(3.0 * torch.tensor(Fk), torch.tensor(wk)),
                          3.0 * aggregate(torch.tensor(Fk), torch.tensor(wk)))


def scene(seed=0, H=6, W=8, n=60):
    rng = np.random.default_rng(seed)
    cam = CameraModel.from_pinhole(6.0, 6.0, (W - 1) / 2, (H - 1) / 2, W, H)
    depth = rng.uniform(0.8, 1.0, (H, W))
    v, u = np.mgrid[0:H, 0:W]
    surface = back_project_pixels(u.ravel(), v.ravel(), depth.ravel(), cam)
    pts = surface[rng.integers(0, H * W, n)] + rng.normal(0, 0.03, (n, 3))
    conf = rng.random((H, W))
    return cam, depth, conf, pts


def loop_oracle(depth, conf, cam, pts, feats, cfg, net):
    H, W = depth.shape
    out = torch.zeros(feats.shape[1], H, W, dtype=feats.dtype)
    for v in range(H):
        for u in range(W):
            ref = back_project_pixels(np.array([u]), np.array([v]), np.array([depth[v, u]]), cam)
            if cfg.strategy == "knn":
                nbr = brute_force_knn(pts, ref, cfg.K)[0][0]
            else:
                r = adaptive_radius(conf[v, u], cfg.r_min, cfg.r_max) if cfg.strategy == "adaptive" else cfg.r_max
                nbr = brute_force_ball_query(pts, ref, r, cfg.K).indices[0]
            acc = torch.zeros(feats.shape[1], dtype=feats.dtype)
            for k in nbr:
                f = feats[k]
                w = net(f[None], position_encoding(torch.tensor(ref[0], dtype=feats.dtype),
                                                   torch.tensor(pts[k], dtype=feats.dtype))[None])[0]
                acc = acc + w * f
            out[:, v, u] = acc
    return out


@pytest.mark.parametrize("strategy", ["adaptive", "fixed_ball", "knn"])
def test_matches_loop_oracle(strategy):
    cam, depth, conf, pts = scene()
    cfg = AcaConfig(K=4, strategy=strategy)
    net = AttentionWeights(5, pos_hidden=6, generator=torch.Generator().manual_seed(0)).double()
    feats = torch.randn(len(pts), 5, generator=torch.Generator().manual_seed(1), dtype=f64)
    got = aggregate_relevant_features(depth, conf, cam, SpatialIndex(pts), feats, cfg, net)
    ref = loop_oracle(depth, conf, cam, pts, feats, cfg, net)
    torch.testing.assert_close(got.values, ref, rtol=0, atol=1e-9)


def test_none_strategy_is_zero():
    cam, depth, conf, pts = scene()
    got = aggregate_relevant_features(depth, conf, cam, None, torch.randn(len(pts), 5), AcaConfig(strategy="none"))
    assert got.values.shape == (5, 6, 8) and torch.all(got.values == 0)


def test_full_confidence_uses_r_min(monkeypatch):
    cam, depth, _, pts = scene()
    index = SpatialIndex(pts)
    seen = []
    orig = index.ball_query
    monkeypatch.setattr(index, "ball_query", lambda c, r, K: seen.append(np.asarray(r)) or orig(c, r, K))
    aggregate_relevant_features(depth, np.ones_like(depth), cam, index, torch.randn(len(pts), 3),
                                AcaConfig(K=3), unit_weights=True)
    assert np.all(seen[0] == 0.05)


def test_unit_weights_equal_plain_ball_sum():
    cam, depth, conf, pts = scene(3)
    feats = torch.randn(len(pts), 4, dtype=f64)
    cfg = AcaConfig(K=5, strategy="fixed_ball")
    got = aggregate_relevant_features(depth, conf, cam, SpatialIndex(pts), feats, cfg, unit_weights=True)
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W]
    refs = back_project_pixels(u.ravel(), v.ravel(), depth.ravel(), cam)
    nbr = brute_force_ball_query(pts, refs, cfg.r_max, cfg.K).indices
    expect = feats[torch.tensor(nbr)].sum(1).T.reshape(4, H, W)
    torch.testing.assert_close(got.values, expect, rtol=0, atol=1e-12)


def test_single_point_cloud():
    cam, depth, conf, _ = scene()
    pts = np.array([[0.0, 0.0, 5.0]])  # far away: every ball is empty, fallback to this point
    feats = torch.tensor([[1.0, -2.0, 0.5]], dtype=f64)
    net = AttentionWeights(3, pos_hidden=4, generator=torch.Generator().manual_seed(2)).double()
    got = aggregate_relevant_features(depth, conf, cam, SpatialIndex(pts), feats, AcaConfig(K=3), net)
    assert got.fallback_mask.all()
    for v, u in [(0, 0), (3, 5)]:
        ref = back_project_pixels(np.array([u]), np.array([v]), np.array([depth[v, u]]), cam)[0]
        w = net(feats, position_encoding(torch.tensor(ref), torch.tensor(pts[0]))[None])
        torch.testing.assert_close(got.values[:, v, u], 3 * (w[0] * feats[0]), rtol=0, atol=1e-12)


def test_zero_reference_depth_sets_fallback():
    cam, depth, conf, pts = scene()
    depth[0, :] = 0
    got = aggregate_relevant_features(depth, conf, cam, SpatialIndex(pts), torch.randn(len(pts), 3),
                                      AcaConfig(K=2), unit_weights=True)
    assert got.fallback_mask[0].all()
    assert torch.all(got.values[:, 0] == 0)


def test_errors():
    cam, depth, conf, pts = scene()
    with pytest.raises(ConfigError):
        aggregate_relevant_features(depth, conf, cam, None, torch.randn(len(pts), 3), AcaConfig())
    with pytest.raises(InputError):
        aggregate_relevant_features(depth, conf[:, :4], cam, SpatialIndex(pts), torch.randn(len(pts), 3), AcaConfig())
    with pytest.raises(InputError):
        aggregate_relevant_features(depth, conf, cam.scaled(0.5), SpatialIndex(pts), torch.randn(len(pts), 3),
                                    AcaConfig())


def test_gradients_reach_features_not_geometry():
    cam, depth, conf, pts = scene()
    feats = torch.randn(len(pts), 4, dtype=f64, requires_grad=True)
    d = torch.tensor(depth, requires_grad=True)
    agg = Aggregator(AcaConfig(K=4), 4, generator=torch.Generator().manual_seed(0)).double()
    out = agg(d, torch.tensor(conf), cam, SpatialIndex(pts), feats)
    out.values.sum().backward()
    assert feats.grad is not None and feats.grad.abs().sum() > 0
    assert d.grad is None


@pytest.mark.parametrize("seed", range(3))
def test_weight_and_aggregate_gradients(seed):
    assert run_case("aca_weights", seed) < 1e-4


def test_feature_gradient_through_full_aggregation():
    from geodepth.tensor_nn import grad_check

    cam, depth, conf, pts = scene(5, 4, 4, 30)
    net = AttentionWeights(3, pos_hidden=4, generator=torch.Generator().manual_seed(3)).double()
    index = SpatialIndex(pts)
    R = torch.randn(3, 4, 4, dtype=f64)

    def f(feats):
        return (aggregate_relevant_features(depth, conf, cam, index, feats, AcaConfig(K=3), net).values * R).sum()

    assert grad_check(f, [torch.randn(30, 3, dtype=f64)]) < 1e-4
