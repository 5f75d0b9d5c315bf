"""Acceptance run: one PASS/FAIL line per criterion.

The overfit and ablation checks train real models and are marked ``slow``;
``pytest -m "not slow"`` skips them.
"""

import time

import numpy as np
import pytest
import torch
from scipy import ndimage
from conftest import random_camera, random_depth

from geodepth import checkpoint as ckpt_io
from geodepth.aca import adaptive_radius
from geodepth.bench import scaling_factor
from geodepth.config import PROFILES
from geodepth.data import generate_dataset, generate_scene, load_dataset, load_sample, save_sample
from geodepth.gcmf import ConvGRUFuse, linear_attention, softmax_attention
from geodepth.geometry import back_project, project
from geodepth.gradcheck import CASES, TOLERANCE, run_suite, summarize
from geodepth.losses import metrics
from geodepth.spatial import SpatialIndex, brute_force_ball_query, brute_force_knn
from geodepth.model import predict
from geodepth.train import ablate, evaluate, make_model, train
from test_pipeline import metrics_oracle


def test_spatial_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    queries = mismatches = 0
    for trial in range(10):
        n = int(rng.integers(50, 3000))
        P = rng.random((n, 3))
        if trial % 3 == 0:
            P = np.round(P, 1)  # lattice points: exact ties and duplicates
        C = rng.random((1000, 3))
        r = rng.uniform(0.02, 0.2, len(C))
        K = int(rng.integers(1, 33))
        index = SpatialIndex(P)
        fast, slow = index.ball_query(C, r, K), brute_force_ball_query(P, C, r, K)
        same = (np.all(fast.indices == slow.indices, axis=1) & np.all(fast.distances == slow.distances, axis=1)
                & (fast.found == slow.found) & (fast.out_of_ball == slow.out_of_ball))
        k = min(K, n)
        (fi, fd), (bi, bd) = index.knn(C, k), brute_force_knn(P, C, k)
        same &= np.all(fi == bi, axis=1) & np.all(fd == bd, axis=1)
        queries += len(C)
        mismatches += int((~same).sum())
    elapsed = time.perf_counter() - t0
    ok = criterion(1, mismatches == 0 and queries >= 10_000 and elapsed < 60,
                   f"{queries} ball+knn queries, {mismatches} mismatches, {elapsed:.1f} s")
    assert ok


def test_geometry_round_trip(criterion):
    rng = np.random.default_rng(99)
    worst_px = worst_m = 0.0
    for _ in range(100):
        w, h = (int(x) for x in rng.integers(4, 40, size=2))
        cam = random_camera(rng, w, h)
        depth = random_depth(rng, w, h)
        ps = back_project(depth, cam)
        proj = project(ps, cam)
        assert proj.behind_count == 0
        u, v = ps.pixel_origin[:, 0], ps.pixel_origin[:, 1]
        worst_px = max(worst_px, np.max(np.abs(proj.uvd[:, :2] - np.stack([u, v], 1)), initial=0))
        worst_m = max(worst_m, np.max(np.abs(proj.uvd[:, 2] - depth[v, u]), initial=0))
    ok = criterion(2, worst_px < 1e-5 and worst_m < 1e-9,
                   f"100 pairs, max pixel error {worst_px:.2e} px, max depth error {worst_m:.2e} m")
    assert ok


def test_adaptive_radius(criterion):
    exact = [adaptive_radius(c, 0.05, 0.1) for c in (0.0, 0.5, 1.0)]
    exact_ok = np.allclose(exact, [0.10, 0.075, 0.05], rtol=0, atol=1e-15)
    C = np.random.default_rng(3).uniform(-2.0, 3.0, 1000)
    r = adaptive_radius(C)
    bounded = bool(np.all((r >= 0.05) & (r <= 0.1)))
    ok = criterion(3, exact_ok and bounded,
                   f"r(0, 0.5, 1) = {tuple(round(x, 6) for x in exact)}, 1000 clamped draws in bounds: {bounded}")
    assert ok


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst = summarize(run_suite(list(CASES), range(10)))
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = criterion(4, err < TOLERANCE and elapsed < 600,
                   f"{len(worst)} cases x 10 seeds, worst {name} {err:.2e}, {elapsed:.0f} s")
    assert ok, worst


# Below a few MB of working set the ratio mostly measures whether the larger
# problem still fits in L2 (2 MiB here) and jumps between 2 and 4.5. At 32768
# tokens both sizes are out of cache and what remains is the algorithm.
SCALING_N = 32768


def test_attention_invariants(criterion):
    rng = np.random.default_rng(5)
    outside = 0
    for _ in range(1000):
        n, m, d, e = (int(x) for x in rng.integers(1, 12, size=4))
        scale = rng.uniform(0.1, 5.0)
        Q = torch.as_tensor(rng.normal(0, scale, (n, d)))
        K = torch.as_tensor(rng.normal(0, scale, (m, d)))
        V = torch.as_tensor(rng.normal(0, 1, (m, e)))
        out = linear_attention(Q, K, V)
        outside += int(torch.any(out > V.max(0).values + 1e-6) or torch.any(out < V.min(0).values - 1e-6))
    single = all(
        torch.equal(linear_attention(Q, K, V), softmax_attention(Q, K, V))
        for Q, K, V in ((torch.randn(n, 4, dtype=torch.float64), torch.randn(1, 4, dtype=torch.float64),
                         torch.randn(1, 3, dtype=torch.float64)) for n in (1, 5, 50))
    )
    ratios = [scaling_factor(SCALING_N) for _ in range(5)]
    factor = float(np.median(ratios))
    ok = criterion(5, outside == 0 and single and factor <= 2.6,
                   f"{outside}/1000 outside hull, M=1 exact: {single}, time({2 * SCALING_N})/time({SCALING_N}) median {factor:.2f} "
                   f"of {[round(r, 2) for r in ratios]}")
    assert ok


def test_gru_gating(criterion):
    rng = np.random.default_rng(11)
    results = []
    for _ in range(10):
        shape = tuple(int(x) for x in rng.integers(1, 9, size=3))
        m = ConvGRUFuse(shape[0], generator=torch.Generator().manual_seed(int(rng.integers(1 << 30)))).double()
        h = torch.as_tensor(rng.normal(size=shape))
        x = torch.as_tensor(rng.normal(size=shape))
        m.force_update_gate(float("-inf"))
        keep = torch.equal(m(h, x), h)
        m.force_update_gate(float("inf"))
        take = torch.equal(m(h, x), m.candidate(h, x))
        results.append(keep and take)
    ok = criterion(6, all(results), f"{sum(results)}/10 random shapes bit-identical for z=0 and z=1")
    assert ok


def test_metrics_correctness(criterion):
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(int(x) for x in rng.integers(1, 9, size=2))
        gt = rng.uniform(0.1, 4.0, shape)
        pred = gt * rng.uniform(0.7, 1.4, shape)
        pred[rng.random(shape) < 0.05] = 0.0
        mask = rng.random(shape) < 0.6
        mask.flat[rng.integers(mask.size)] = True
        diff = np.abs(np.subtract(metrics(pred, gt, mask), metrics_oracle(pred, gt, mask)))
        worst = max(worst, float(diff.max()))
    b = metrics(np.array([1.1]), np.array([1.0]), np.array([True]))
    boundary = (b.delta_105, b.delta_110, b.delta_125) == (0.0, 0.0, 100.0)
    ok = criterion(7, worst < 1e-9 and boundary,
                   f"1000 cases, max deviation {worst:.1e}; (1.1, 1.0) -> {b.delta_105, b.delta_110, b.delta_125}")
    assert ok


# The desk profile schedules in epochs; with a single scene an "epoch" is
# OVERFIT_STEPS repetitions of it, so the milestones fall at 500 and 1500.
# A batch of one identical scene is unstable at the desk rate of 1e-3, so the
# overfit run starts from OVERFIT_LR.
OVERFIT_STEPS = 100
OVERFIT_EPOCHS = 20
OVERFIT_LR = 3e-4


@pytest.mark.slow
def test_overfit_single_scene(criterion):
    cfg = PROFILES["desk"].replace(steps_per_epoch=OVERFIT_STEPS, epochs=OVERFIT_EPOCHS, lr=OVERFIT_LR)
    scene = generate_scene(0, cfg.scene_spec(), "overfit")
    t0 = time.perf_counter()
    res = train(cfg, [scene])
    elapsed = time.perf_counter() - t0
    L = res.step_losses
    ratio = L[199] / L[0]
    row = evaluate(res.model, [scene])
    with torch.no_grad():
        depth = predict(res.model, scene.rgb, scene.raw_depth, scene.camera).depth.double().numpy()
    # Valid raw depth outside the mask is already right and should be left
    # alone, except within a couple of pixels of a silhouette, where the
    # cascade's upsampling blurs the step between two surfaces.
    gy, gx = np.gradient(scene.gt_depth)
    edge = ndimage.binary_dilation(np.hypot(gx, gy) > 0.02, iterations=2)
    keep = (scene.raw_depth > 0) & ~scene.mask & ~edge
    drift = float(np.max(np.abs(depth[keep] - scene.raw_depth[keep])))
    ok = criterion(8, ratio <= 0.1 and row["rmse"] < 0.01 and elapsed <= 900,
                   f"loss[200]/loss[0] = {ratio:.3f}, masked RMSE {row['rmse']:.4f} m after {len(L)} iterations, "
                   f"{elapsed:.0f} s; reliable raw pixels away from edges move <= {drift * 1000:.1f} mm")
    assert ok
    assert drift < 0.01


@pytest.mark.slow
def test_ablation_direction(criterion, tmp_path):
    cfg = PROFILES["desk"].replace(epochs=10)
    generate_dataset(tmp_path / "train", 100, seed=0, spec=cfg.scene_spec())
    generate_dataset(tmp_path / "eval", 20, seed=1, spec=cfg.scene_spec())
    train_set, eval_set = load_dataset(tmp_path / "train"), load_dataset(tmp_path / "eval")
    seeds = [0, 1, 2]
    cache = {}
    t0 = time.perf_counter()
    rows = ablate(cfg, train_set, eval_set, "gcmf", seeds, cache=cache, labels=["Baseline", "+3D", "Ours"])
    rows += ablate(cfg, train_set, eval_set, "strategy", seeds, cache=cache)
    elapsed = time.perf_counter() - t0
    rmse = {(r["config"], r["seed"]): r["rmse"] for r in rows}
    for r in rows:
        print(f"{r['sweep']:>8s} {r['config']:>10s} seed {r['seed']} rmse {r['rmse']:.4f}")
    gcmf_ok = sum(rmse["Baseline", s] >= rmse["+3D", s] >= rmse["Ours", s] for s in seeds)
    strat_ok = sum(rmse["None", s] >= max(rmse["KNN", s], rmse["Ball Query", s])
                   and min(rmse["KNN", s], rmse["Ball Query", s]) >= rmse["ACA", s] for s in seeds)
    mean = {c: np.mean([rmse[c, s] for s in seeds]) for c in ("Baseline", "+3D", "Ours", "None", "KNN",
                                                              "Ball Query", "ACA")}
    summary = ", ".join(f"{c} {v:.4f}" for c, v in mean.items())
    ok = criterion(9, gcmf_ok >= 2 and strat_ok >= 2 and elapsed <= 7200,
                   f"GCMF order holds in {gcmf_ok}/3 seeds, strategy order in {strat_ok}/3; mean RMSE {summary}; "
                   f"{elapsed / 60:.0f} min")
    assert ok


def test_determinism_and_persistence(criterion, tmp_path):
    cfg = PROFILES["desk"].replace(widths=(8, 8, 8), point_features=16, n_fixed=64, width=32, height=24,
                                   epochs=3, steps_per_epoch=2)
    samples = [generate_scene(s, cfg.scene_spec(), f"d{s}") for s in (1, 2, 3)]
    a = train(cfg, samples, out_dir=tmp_path / "a")
    b = train(cfg, samples, out_dir=tmp_path / "b")
    logs_equal = (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    losses_equal = a.step_losses == b.step_losses

    ck = ckpt_io.load_checkpoint(a.checkpoint)
    again = ckpt_io.load_checkpoint(ckpt_io.save_checkpoint(ck, tmp_path / "copy.gaat"))
    bit_exact = (tmp_path / "copy.gaat").read_bytes() == a.checkpoint.read_bytes() and all(
        ck.params[k].tobytes() == again.params[k].tobytes() for k in ck.params)
    model = make_model(cfg)
    ckpt_io.restore(again, model)
    bit_exact &= all(torch.equal(p, q) for p, q in zip(model.parameters(), a.model.parameters()))

    worst_mm = 0.0
    for s in samples:
        back = load_sample(save_sample(s, tmp_path / "files" / s.id))
        worst_mm = max(worst_mm, 1000 * np.max(np.abs(back.gt_depth - s.gt_depth)),
                       1000 * np.max(np.abs(back.raw_depth - s.raw_depth)))
    ok = criterion(10, logs_equal and losses_equal and bit_exact and worst_mm <= 1.0,
                   f"identical loss logs: {logs_equal and losses_equal}, checkpoint bit-exact: {bit_exact}, "
                   f"depth file error {worst_mm:.2f} mm")
    assert ok
