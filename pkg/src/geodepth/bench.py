"""Throughput measurements for the spatial index and the attention kernels."""

from __future__ import annotations

import gc
import time
from contextlib import contextmanager

import numpy as np
import torch

from .gcmf import linear_attention, softmax_attention
from .spatial import SpatialIndex, brute_force_ball_query


@contextmanager
def _no_gc():
    # as timeit does: a collection landing inside one timing skews it
    was = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def best_time(fn, repeats: int = 5) -> float:
    """Minimum wall time of ``repeats`` calls, which is the least noisy estimate on a shared CPU."""
    fn()
    best = float("inf")
    with _no_gc():
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
    return best


def attention_time(n: int, d: int = 32, kind: str = "linear", repeats: int = 5, seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    Q, K, V = (torch.randn(n, d, generator=g) for _ in range(3))
    fn = linear_attention if kind == "linear" else softmax_attention
    with torch.no_grad():
        return best_time(lambda: fn(Q, K, V), repeats)


def scaling_factor(n: int, d: int = 32, repeats: int = 7, seed: int = 0) -> float:
    """Time ratio of linear attention at 2n versus n tokens.

    The two sizes are timed alternately so that drift in machine load affects
    both sides of the ratio alike.
    """
    g = torch.Generator().manual_seed(seed)
    small = [torch.randn(n, d, generator=g) for _ in range(3)]
    large = [torch.randn(2 * n, d, generator=g) for _ in range(3)]
    best = {n: float("inf"), 2 * n: float("inf")}
    with torch.no_grad(), _no_gc():
        linear_attention(*small), linear_attention(*large)
        for _ in range(repeats):
            for size, args in ((n, small), (2 * n, large)):
                t0 = time.perf_counter()
                linear_attention(*args)
                best[size] = min(best[size], time.perf_counter() - t0)
    return best[2 * n] / best[n]


def spatial_rows(sizes=(1024, 4096, 16384), n_queries: int = 4096, K: int = 16, radius: float = 0.1,
                 seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        pts = rng.random((n, 3))
        centers = rng.random((n_queries, 3))
        t_build = best_time(lambda: SpatialIndex(pts), 3)
        index = SpatialIndex(pts)
        t_knn = best_time(lambda: index.knn(centers, K), 3)
        t_ball = best_time(lambda: index.ball_query(centers, radius, K), 3)
        sub = centers[:256]
        fast = index.ball_query(sub, radius, K)
        ref = brute_force_ball_query(pts, sub, radius, K)
        agree = np.mean(np.all(fast.indices == ref.indices, axis=1))
        rows.append({"bench": "spatial", "n": n, "queries": n_queries, "build_s": t_build,
                     "knn_qps": n_queries / t_knn, "ball_qps": n_queries / t_ball,
                     "oracle_agreement": float(agree)})
    return rows


def attention_rows(sizes=(1024, 2048, 4096, 8192), d: int = 32) -> list[dict]:
    rows = []
    for n in sizes:
        lin = attention_time(n, d, "linear")
        soft = attention_time(n, d, "softmax") if n <= 4096 else float("nan")
        rows.append({"bench": "attention", "n": n, "d": d, "linear_tokens_per_s": n / lin,
                     "softmax_tokens_per_s": n / soft if soft == soft else float("nan")})
    return rows
