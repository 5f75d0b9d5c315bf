"""Numeric core: layers, optimizer, learning-rate schedule and gradient checking.

Tensors, the gradient tape and reverse-mode differentiation come from PyTorch;
this module pins down the layer contracts the rest of the package relies on
(orientation of weights, padding rules, initialisation) and provides an
independent finite-difference checker for them.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import HarnessError, InputError, NumericError

DEBUG_FINITE = os.environ.get("GEODEPTH_DEBUG", "0") not in ("", "0")

LR_MILESTONES = (5, 15, 25, 35)
LR_BASE = 1e-3
LR_DECAY = 5.0


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if DEBUG_FINITE and not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# functional layers


def dense(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``y = x @ W + b`` with ``W`` laid out as (in, out)."""
    if x.shape[-1] != W.shape[0]:
        raise InputError(f"dense: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    if b is not None and b.shape != (W.shape[1],):
        raise InputError(f"dense: bias shape {tuple(b.shape)} != ({W.shape[1]},)")
    y = x @ W
    return y if b is None else y + b


def conv2d(x, k, b=None, stride: int = 1, padding: str | int = "same") -> torch.Tensor:
    """2-D cross-correlation over (C, H, W) or (B, C, H, W) inputs.

    ``padding="same"`` pads by ``k//2`` on each side, ``"valid"`` pads nothing.
    """
    kh, kw = k.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise InputError("conv2d: kernel sizes must be odd")
    if stride not in (1, 2):
        raise InputError("conv2d: stride must be 1 or 2")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        ph = pw = int(padding)
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.shape[1] != k.shape[1]:
        raise InputError(f"conv2d: input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    if x.shape[-2] + 2 * ph < kh or x.shape[-1] + 2 * pw < kw:
        raise InputError("conv2d: kernel larger than padded input")
    y = F.conv2d(x, k, b, stride=stride, padding=(ph, pw))
    return y[0] if unbatched else y


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def elu(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def resize_bilinear(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Bilinear resize by 2 or 1/2 (half-pixel centers, align_corners=False)."""
    if factor not in (0.5, 2, 2.0):
        raise InputError("resize_bilinear: factor must be 1/2 or 2")
    h, w = x.shape[-2:]
    if factor == 0.5 and (h % 2 or w % 2):
        raise InputError("resize_bilinear: dims must be even to downscale")
    size = (h * 2, w * 2) if factor != 0.5 else (h // 2, w // 2)
    return resize_to(x, size)


def resize_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    lead = x.shape[:-2]
    y = F.interpolate(x.reshape(1, -1, *x.shape[-2:]), size=size, mode="bilinear", align_corners=False)
    return y.reshape(*lead, *size)


def area_downsample(x: torch.Tensor, factor: int, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Block-average by an integer factor, counting only ``valid`` pixels when given.

    Blocks without any valid pixel come out as 0.
    """
    if factor == 1:
        return x if valid is None else x * valid
    lead = x.shape[:-2]
    x4 = x.reshape(1, -1, *x.shape[-2:])
    if valid is None:
        return F.avg_pool2d(x4, factor).reshape(*lead, x.shape[-2] // factor, x.shape[-1] // factor)
    m4 = valid.to(x.dtype).reshape(1, -1, *valid.shape[-2:]).expand_as(x4)
    num = F.avg_pool2d(x4 * m4, factor)
    den = F.avg_pool2d(m4, factor)
    out = torch.where(den > 0, num / den.clamp_min(1e-12), torch.zeros_like(num))
    return out.reshape(*lead, *out.shape[-2:])


# ---------------------------------------------------------------------------
# modules


def kaiming_uniform_(w: torch.Tensor, fan_in: int, generator: torch.Generator | None = None):
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=generator)
    return w


class Dense(nn.Module):
    def __init__(self, cin: int, cout: int, bias: bool = True, init: str = "kaiming", generator=None):
        super().__init__()
        self.W = nn.Parameter(torch.empty(cin, cout))
        self.b = nn.Parameter(torch.zeros(cout)) if bias else None
        if init == "zeros":
            nn.init.zeros_(self.W)
        else:
            kaiming_uniform_(self.W, cin, generator)

    def forward(self, x):
        return dense(x, self.W, self.b)


class Conv2d(nn.Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True,
                 init: str = "kaiming", generator=None):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        if init == "zeros":
            nn.init.zeros_(self.weight)
        else:
            kaiming_uniform_(self.weight, cin * k * k, generator)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, "same")


def mlp(widths: Sequence[int], generator=None, last_init: str = "kaiming") -> nn.Sequential:
    """Dense stack with ELU between layers and a linear output."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        layers.append(Dense(a, b, init=last_init if last else "kaiming", generator=generator))
        if not last:
            layers.append(nn.ELU())
    return nn.Sequential(*layers)


# ---------------------------------------------------------------------------
# optimisation


class AdamState:
    def __init__(self, params: Sequence[torch.Tensor]):
        self.t = 0
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    A ``None`` gradient is treated as zero.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / c1
            v_hat = v / c2
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.betas = betas
        self.eps = eps
        self.state = AdamState(self.params)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr,
                  self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(epoch: int, base: float = LR_BASE, milestones: Sequence[int] = LR_MILESTONES,
                decay: float = LR_DECAY) -> float:
    if epoch < 0:
        raise InputError("epoch must be non-negative")
    m = sum(1 for e in milestones if e <= epoch)
    return base / decay ** m


# ---------------------------------------------------------------------------
# gradient checking


def _flat_coords(t: torch.Tensor, max_coords: int | None, rng: np.random.Generator):
    n = t.numel()
    if max_coords is None or n <= max_coords:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_coords, replace=False))


class _Replay:
    def __init__(self):
        self.values: list[torch.Tensor] = []
        self.recording = True
        self.pos = 0


_replay: _Replay | None = None


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """``x`` detached from the tape.

    While ``grad_check(..., freeze_stopped=True)`` runs, the first evaluation
    records every stopped value and later evaluations get those recorded
    values back. Central differences then hold the stopped quantities fixed,
    which is exactly what the tape gradient assumes.
    """
    if _replay is None:
        return x.detach()
    if _replay.recording:
        _replay.values.append(x.detach().clone())
        return _replay.values[-1]
    if _replay.pos >= len(_replay.values) or _replay.values[_replay.pos].shape != x.shape:
        raise HarnessError("stop-gradient sites differ between evaluations")
    _replay.pos += 1
    return _replay.values[_replay.pos - 1]


def _frozen(closure: Callable[..., torch.Tensor]) -> Callable[..., torch.Tensor]:
    state = _Replay()

    def run(*xs):
        global _replay
        state.pos = 0
        _replay = state
        try:
            out = closure(*xs)
        finally:
            _replay = None
        if not state.recording and state.pos != len(state.values):
            raise HarnessError("stop-gradient sites differ between evaluations")
        state.recording = False
        return out
    return run


def grad_check(closure: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               h: float = 1e-4, max_coords: int | None = None, seed: int = 0,
               freeze_stopped: bool = False) -> float:
    """Max relative error between tape gradients and central differences.

    ``closure(*inputs)`` must return a scalar. Error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``. ``max_coords`` caps the number of
    coordinates checked per input (chosen at random with ``seed``); leave it
    ``None`` to check every coordinate. With ``freeze_stopped`` every value
    passed through :func:`stop_gradient` is pinned to its value at ``inputs``.
    """
    inputs = list(inputs)
    if freeze_stopped:
        closure = _frozen(closure)
    for x in inputs:
        if x.dtype != torch.float64:
            raise HarnessError("grad_check requires float64 inputs")
    with torch.no_grad():
        f0 = closure(*inputs)
        f1 = closure(*inputs)
    if f0.numel() != 1:
        raise HarnessError("closure must return a scalar")
    if not torch.equal(f0, f1):
        raise HarnessError("closure is not deterministic")

    leaves = [x.detach().clone().requires_grad_(True) if not x.requires_grad else x for x in inputs]
    for x in leaves:
        x.grad = None
    out = closure(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(leaves, grads):
            flat = x.view(-1)
            ga = torch.zeros_like(flat) if g is None else g.reshape(-1)
            for i in _flat_coords(x, max_coords, rng):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = closure(*leaves).item()
                flat[i] = orig - h
                fm = closure(*leaves).item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = ga[i].item()
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                worst = max(worst, err)
    return worst

