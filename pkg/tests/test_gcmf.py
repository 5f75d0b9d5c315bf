import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from geodepth import gcmf
from geodepth.aca import AggregatedFeatureMap
from geodepth.errors import InputError
from geodepth.gradcheck import run_case

f64 = torch.float64


def rand(*shape, seed=0, scale=1.0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=f64) * scale


def softmax_loop_oracle(Q, K, V):
    Q, K, V = Q.tolist(), K.tolist(), V.tolist()
    d = len(Q[0])
    out = []
    for q in Q:
        s = [sum(a * b for a, b in zip(q, k)) / math.sqrt(d) for k in K]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        z = math.fsum(e)
        out.append([math.fsum(e[j] / z * V[j][c] for j in range(len(K))) for c in range(len(V[0]))])
    return torch.tensor(out, dtype=f64)


def linear_loop_oracle(Q, K, V):
    phi = lambda x: [v + 1 if v > 0 else math.exp(v) for v in x]  # noqa: E731
    Q, K, V = Q.tolist(), K.tolist(), V.tolist()
    out = []
    for q in Q:
        pq = phi(q)
        w = [sum(a * b for a, b in zip(pq, phi(k))) for k in K]
        z = math.fsum(w)
        out.append([math.fsum(w[j] * V[j][c] for j in range(len(K))) / z for c in range(len(V[0]))])
    return torch.tensor(out, dtype=f64)


def test_token_round_trip():
    x = rand(5, 3, 4)
    t = gcmf.to_tokens(x)
    assert t.shape == (12, 5)
    assert torch.equal(t[1 * 4 + 2], x[:, 1, 2])  # row-major pixel order
    assert torch.equal(gcmf.from_tokens(t, 3, 4), x)
    with pytest.raises(InputError):
        gcmf.from_tokens(t, 4, 4)


def test_softmax_attention_cases():
    v = torch.tensor([[3.0, -1.0]], dtype=f64)
    q = torch.tensor([[0.2, 0.4]], dtype=f64)
    assert torch.equal(gcmf.softmax_attention(q, q, v), v)
    K = torch.tensor([[1.0, 2.0], [1.0, 2.0]], dtype=f64)
    V = torch.tensor([[0.0, 4.0], [2.0, 0.0]], dtype=f64)
    assert torch.allclose(gcmf.softmax_attention(q, K, V), torch.tensor([[1.0, 2.0]], dtype=f64))
    with pytest.raises(InputError):
        gcmf.softmax_attention(rand(2, 3), rand(2, 4), rand(2, 3))


def test_softmax_attention_vs_loop():
    Q, K, V = rand(5, 8, seed=1), rand(6, 8, seed=2), rand(6, 8, seed=3)
    torch.testing.assert_close(gcmf.softmax_attention(Q, K, V), softmax_loop_oracle(Q, K, V), rtol=0, atol=1e-6)


def test_linear_attention_vs_loop():
    Q, K, V = rand(5, 8, seed=4), rand(7, 8, seed=5), rand(7, 3, seed=6)
    torch.testing.assert_close(gcmf.linear_attention(Q, K, V), linear_loop_oracle(Q, K, V), rtol=0, atol=1e-9)


def test_single_key_returns_value_exactly():
    Q, K, V = rand(9, 4, seed=7), rand(1, 4, seed=8), rand(1, 4, seed=9)
    lin = gcmf.linear_attention(Q, K, V)
    soft = gcmf.softmax_attention(Q, K, V)
    assert torch.equal(lin, V.expand(9, 4))
    assert torch.equal(lin, soft)


def test_denominator_floor():
    Q = torch.full((1, 2), -800.0, dtype=f64)  # phi(Q) underflows to 0
    K = torch.zeros(3, 2, dtype=f64)
    V = torch.ones(3, 2, dtype=f64)
    out = gcmf.linear_attention(Q, K, V)
    assert torch.isfinite(out).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 12), st.integers(1, 6))
def test_convex_hull(seed, n, m, d):
    Q, K, V = rand(n, d, seed=seed, scale=3), rand(m, d, seed=seed + 1, scale=3), rand(m, 4, seed=seed + 2)
    out = gcmf.linear_attention(Q, K, V)
    assert torch.all(out <= V.max(0).values + 1e-6)
    assert torch.all(out >= V.min(0).values - 1e-6)


def test_self_attend_zero_init_is_layer_norm():
    m = gcmf.SelfAttend(6, zero_init=True).double()
    x = rand(10, 6)
    expect = (x - x.mean(-1, keepdim=True)) / torch.sqrt(x.var(-1, unbiased=False, keepdim=True) + 1e-5)
    torch.testing.assert_close(m(x), expect)
    raw = gcmf.SelfAttend(6, layer_norm=False, zero_init=True).double()
    assert torch.equal(raw(x), x)


def test_cross_attend_zero_kv_is_identity():
    m = gcmf.CrossAttend(6, 4, generator=torch.Generator().manual_seed(0)).double()
    q = rand(10, 6)
    assert torch.equal(m(q, torch.zeros(10, 4, dtype=f64)), q)
    with pytest.raises(InputError):
        m(q, torch.zeros(9, 4, dtype=f64))


@pytest.mark.parametrize("shape", [(3, 4, 5), (8, 2, 7), (1, 6, 6)])
def test_gru_forced_gates(shape):
    g = torch.Generator().manual_seed(sum(shape))
    m = gcmf.ConvGRUFuse(shape[0], generator=g).double()
    h, x = rand(*shape, seed=1), rand(*shape, seed=2)
    m.force_update_gate(float("-inf"))
    assert torch.equal(m(h, x), h)
    m.force_update_gate(float("inf"))
    assert torch.equal(m(h, x), m.candidate(h, x))
    with pytest.raises(InputError):
        m(h, x[:, :-1])


def test_block_disabled_and_shapes():
    off = gcmf.GCMFBlock(4, 5, enabled=False)
    x = torch.randn(4, 3, 6)
    assert off(x, torch.randn(5, 3, 6)) is x
    on = gcmf.GCMFBlock(4, 5, generator=torch.Generator().manual_seed(1))
    agg = AggregatedFeatureMap(torch.randn(5, 3, 6), np.zeros((3, 6), bool))
    out = on(x, agg)
    assert out.shape == x.shape
    assert torch.equal(out, on(x, agg))
    with pytest.raises(InputError):
        on(x, torch.randn(5, 2, 6))


def test_sum_fusion():
    m = gcmf.SumFusion(4, 3, generator=torch.Generator().manual_seed(2))
    x = torch.randn(4, 2, 2)
    assert torch.equal(m(x, torch.zeros(3, 2, 2)), x)
    # untrained: identity whatever the 3D features are
    assert torch.equal(m(x, 100 * torch.randn(3, 2, 2)), x)


def test_sum_fusion_ignores_feature_scale():
    # exact once the per-pixel variance dwarfs the norm's epsilon
    m = gcmf.SumFusion(4, 16, generator=torch.Generator().manual_seed(2)).double()
    with torch.no_grad():
        m.proj.weight.normal_()
    x = torch.randn(4, 5, 6, dtype=torch.float64)
    kv = torch.randn(16, 5, 6, dtype=torch.float64)
    out = m(x, 10.0 * kv)
    assert not torch.allclose(out, x)
    assert torch.allclose(m(x, 1000.0 * kv), out, atol=1e-6)


@pytest.mark.parametrize("name", ["softmax_attention", "linear_attention", "layer_norm", "self_attend",
                                  "cross_attend", "conv_gru", "gcmf_block"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients(name, seed):
    assert run_case(name, seed) < 1e-4
