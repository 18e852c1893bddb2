"""Four-directional diagonal state-space block with an input-driven gate.

Along each scan direction every channel runs the recurrence

    h_t = exp(delta * a) h_{t-1} + delta * b x_t,    y_t = c . h_t

with ``a = -softplus(a_raw)`` and ``delta = softplus(delta_raw)`` so the
per-step decay always sits in (0, 1). The parameters do not depend on the
input, so each scan is a causal convolution; it is evaluated exactly as a
Toeplitz matrix product instead of a Python loop.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

# Floors keep the decay strictly below 1 (even in float32) when softplus underflows.
_A_FLOOR = 1e-3
_DELTA_FLOOR = 1e-2
N_DIRECTIONS = 4


def _inv_softplus(x: torch.Tensor) -> torch.Tensor:
    return x + torch.log(-torch.expm1(-x))


class SSMAttention(nn.Module):
    def __init__(self, channels: int, state_dim: int = 8):
        super().__init__()
        self.channels = channels
        self.state_dim = state_dim
        a0 = torch.linspace(0.1, 2.0, state_dim).expand(N_DIRECTIONS, channels, state_dim)
        self.a_raw = nn.Parameter(_inv_softplus(a0.clone()))
        self.delta_raw = nn.Parameter(torch.full((N_DIRECTIONS, channels), _inv_softplus(torch.tensor(0.5)).item()))
        scale = 1.0 / math.sqrt(state_dim)
        self.b = nn.Parameter(torch.randn(N_DIRECTIONS, channels, state_dim) * scale)
        self.c = nn.Parameter(torch.randn(N_DIRECTIONS, channels, state_dim) * 0.1 * scale)
        self.gate = nn.Conv2d(channels, channels, 1)

    @property
    def a(self) -> torch.Tensor:
        return -(F.softplus(self.a_raw) + _A_FLOOR)

    @property
    def delta(self) -> torch.Tensor:
        return F.softplus(self.delta_raw) + _DELTA_FLOOR

    def decay(self) -> torch.Tensor:
        """Discretised per-step decay ``exp(delta * a)``, shape (4, C, N)."""
        return torch.exp(self.delta[..., None] * self.a)

    def kernels(self, length: int) -> torch.Tensor:
        """Impulse responses ``K[d, c, k] = sum_n c * delta * b * decay**k``."""
        k = torch.arange(length, dtype=self.a.dtype, device=self.a.device)
        log_decay = self.delta[..., None] * self.a                     # (4, C, N)
        powers = torch.exp(log_decay[..., None] * k)                    # (4, C, N, L)
        gain = self.c * self.b * self.delta[..., None]                  # (4, C, N)
        return torch.einsum("dcn,dcnl->dcl", gain, powers)

    @staticmethod
    def toeplitz(kernel: torch.Tensor, length: int) -> torch.Tensor:
        """Lower-triangular ``T[..., t, s] = K[..., t - s]`` for t >= s."""
        idx = torch.arange(length)
        diff = idx[:, None] - idx[None, :]
        t = kernel[..., diff.clamp(min=0)]
        return t * (diff >= 0).to(kernel.dtype)

    def scan(self, x: torch.Tensor) -> torch.Tensor:
        """Sum of the four directional scans of ``x`` (B, C, H, W)."""
        _, _, h, w = x.shape
        ker = self.kernels(max(h, w))
        tw = self.toeplitz(ker[:2, :, :w], w)   # (2, C, W, W)
        th = self.toeplitz(ker[2:, :, :h], h)
        y = torch.einsum("bchs,cts->bcht", x, tw[0])        # left -> right
        y = y + torch.einsum("bchs,cst->bcht", x, tw[1])    # right -> left
        y = y + torch.einsum("bcsw,cts->bctw", x, th[0])    # top -> bottom
        y = y + torch.einsum("bcsw,cst->bctw", x, th[1])    # bottom -> top
        return y

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + torch.sigmoid(self.gate(x)) * self.scan(x)


def ssm_attention(feature_map: torch.Tensor, block: SSMAttention) -> torch.Tensor:
    return block(feature_map)
