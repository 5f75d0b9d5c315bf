"""Gated cross-modal fusion of 2D image features with aggregated 3D features.

Image features are flattened to tokens (row-major pixel order), refined by
linear self-attention, used as queries into the aggregated point features by
linear cross-attention, and finally merged back into the image features by a
convolutional GRU step.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .aca import AggregatedFeatureMap
from .errors import InputError
from .tensor_nn import Conv2d, Dense, elu, sigmoid, softmax

DENOM_FLOOR = 1e-12
DENOM_EPS = 1e-6


def to_tokens(fmap: torch.Tensor) -> torch.Tensor:
    """(d, H, W) -> (H*W, d)."""
    return fmap.reshape(fmap.shape[0], -1).T


def from_tokens(tokens: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """(H*W, d) -> (d, H, W)."""
    if tokens.shape[0] != H * W:
        raise InputError(f"{tokens.shape[0]} tokens cannot fill a {H}x{W} map")
    return tokens.T.reshape(tokens.shape[1], H, W)


def _check_qkv(Q, K, V):
    if Q.shape[-1] != K.shape[-1]:
        raise InputError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise InputError("keys and values differ in length")


def softmax_attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
    _check_qkv(Q, K, V)
    scores = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    return softmax(scores, axis=-1) @ V


def feature_map(x: torch.Tensor) -> torch.Tensor:
    return elu(x) + 1


def linear_attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
    """Kernelised attention with phi = elu + 1, linear in the number of tokens."""
    _check_qkv(Q, K, V)
    if K.shape[-2] == 1:
        # a single key always gets normalised weight 1
        return V.expand(*Q.shape[:-1], V.shape[-1])
    q = feature_map(Q)
    k = feature_map(K)
    kv = k.transpose(-1, -2) @ V  # d x dv
    ksum = k.sum(dim=-2)  # d
    num = q @ kv
    den = (q * ksum).sum(-1, keepdim=True)
    den = torch.where(den < DENOM_FLOOR, den + DENOM_EPS, den)
    return num / den


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d))
        self.beta = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(-1, keepdim=True)
        var = ((x - mu) ** 2).mean(-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.gamma + self.beta


class SelfAttend(nn.Module):
    def __init__(self, d: int, layer_norm: bool = True, zero_init: bool = False, generator=None):
        super().__init__()
        init = "zeros" if zero_init else "kaiming"
        self.q = Dense(d, d, bias=False, init=init, generator=generator)
        self.k = Dense(d, d, bias=False, init=init, generator=generator)
        self.v = Dense(d, d, bias=False, init=init, generator=generator)
        self.norm = LayerNorm(d) if layer_norm else None

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        out = tokens + linear_attention(self.q(tokens), self.k(tokens), self.v(tokens))
        return self.norm(out) if self.norm is not None else out


class CrossAttend(nn.Module):
    """Image tokens query aggregated point features (keys and values)."""

    def __init__(self, d: int, kv_dim: int, generator=None):
        super().__init__()
        # no biases: all-zero 3D features must produce all-zero values
        self.q = Dense(d, d, bias=False, generator=generator)
        self.k = Dense(kv_dim, d, bias=False, generator=generator)
        self.v = Dense(kv_dim, d, bias=False, generator=generator)

    def forward(self, queries: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if queries.shape[0] != kv.shape[0]:
            raise InputError(f"{queries.shape[0]} image tokens vs {kv.shape[0]} point tokens; scales differ")
        return queries + linear_attention(self.q(queries), self.k(kv), self.v(kv))


class ConvGRUFuse(nn.Module):
    """One convolutional GRU update with the image features as the hidden state."""

    def __init__(self, d: int, generator=None):
        super().__init__()
        self.conv_z = Conv2d(2 * d, d, 3, generator=generator)
        self.conv_r = Conv2d(2 * d, d, 3, generator=generator)
        self.conv_h = Conv2d(2 * d, d, 3, generator=generator)

    def force_update_gate(self, value: float) -> None:
        """Test hook: pin z to 0 (``-inf``) or 1 (``+inf``) through the gate bias."""
        with torch.no_grad():
            self.conv_z.bias.fill_(value)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if h.shape != x.shape:
            raise InputError(f"hidden {tuple(h.shape)} and input {tuple(x.shape)} differ")
        z = sigmoid(self.conv_z(torch.cat([h, x], dim=-3)))
        return (1 - z) * h + z * self.candidate(h, x)

    def candidate(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        r = sigmoid(self.conv_r(torch.cat([h, x], dim=-3)))
        return torch.tanh(self.conv_h(torch.cat([r * h, x], dim=-3)))


class GCMFBlock(nn.Module):
    def __init__(self, d: int, kv_dim: int = 64, enabled: bool = True, layer_norm: bool = True, generator=None):
        super().__init__()
        self.enabled = enabled
        self.self_attn = SelfAttend(d, layer_norm, generator=generator)
        self.cross_attn = CrossAttend(d, kv_dim, generator=generator)
        self.gru = ConvGRUFuse(d, generator=generator)

    def forward(self, feat2d: torch.Tensor, agg3d: AggregatedFeatureMap | torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return feat2d
        kv = agg3d.values if isinstance(agg3d, AggregatedFeatureMap) else agg3d
        H, W = feat2d.shape[-2:]
        if kv.shape[-2:] != (H, W):
            raise InputError(f"3D feature map {tuple(kv.shape[-2:])} does not match image scale {(H, W)}")
        tokens = self.self_attn(to_tokens(feat2d))
        tokens = self.cross_attn(tokens, to_tokens(kv))
        return self.gru(feat2d, from_tokens(tokens, H, W))


class SumFusion(nn.Module):
    """Plain additive injection of projected 3D features (no attention, no gating).

    Aggregated features are sums over neighbours and easily reach magnitudes
    in the hundreds, so they are layer-normalised per pixel before the 1x1
    projection. The projection starts at zero, which makes an untrained block
    the identity on the image features.
    """

    def __init__(self, d: int, kv_dim: int = 64, generator=None):
        super().__init__()
        self.norm = LayerNorm(kv_dim)
        self.proj = Conv2d(kv_dim, d, 1, bias=False, init="zeros", generator=generator)

    def forward(self, feat2d, agg3d):
        kv = agg3d.values if isinstance(agg3d, AggregatedFeatureMap) else agg3d
        kv = self.norm(kv.movedim(-3, -1)).movedim(-1, -3)
        return feat2d + self.proj(kv)

