"""S-PAFPN: path-aggregation pyramid with an extra stride-4 level fed by the
earliest backbone stage."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv(cin, cout, k=3, s=1):
    return nn.Sequential(nn.Conv2d(cin, cout, k, s, k // 2), nn.SiLU())


class SPAFPN(nn.Module):
    """Fuses C2..C5 (strides 4/8/16/32) into P2..P5 at ``width`` channels.

    Top-down: ``T5 = L5``, ``T_i = L_i + up(T_{i+1})`` down to the C2 lateral.
    Bottom-up: ``P2 = S2(T2)``, ``P_i = S_i(T_i + down(P_{i-1}))``.
    Fusion is plain summation after 1x1 projection. Given three stages
    (C3..C5) the same wiring is the plain PAFPN of the baseline detector.
    """

    def __init__(self, in_channels: Sequence[int], width: int):
        super().__init__()
        if len(in_channels) not in (3, 4):
            raise ValueError("expected three (C3..C5) or four (C2..C5) stage widths")
        self.in_channels = tuple(in_channels)
        n = len(in_channels)
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_channels)
        self.smooth = nn.ModuleList(conv(width, width) for _ in in_channels)
        self.down = nn.ModuleList(conv(width, width, 3, 2) for _ in range(n - 1))

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        n = len(self.in_channels)
        first = 6 - n
        if len(feats) != n:
            raise ValueError(f"expected {n} stage features, got {len(feats)}")
        for k, (f, c) in enumerate(zip(feats, self.in_channels)):
            if f.shape[1] != c:
                raise ValueError(f"C{k + first} has {f.shape[1]} channels, expected {c}")
        for k in range(n - 1):
            if tuple(feats[k].shape[-2:]) != tuple(2 * s for s in feats[k + 1].shape[-2:]):
                raise ValueError(f"C{k + first} is not twice the resolution of C{k + first + 1}")

        lat = [l(f) for l, f in zip(self.lateral, feats)]
        td = list(lat)
        for i in range(n - 2, -1, -1):
            td[i] = lat[i] + F.interpolate(td[i + 1], scale_factor=2.0, mode="nearest")
        out = [self.smooth[0](td[0])]
        for i in range(1, n):
            out.append(self.smooth[i](td[i] + self.down[i - 1](out[-1])))
        return out


def spafpn_forward(stage_features, neck: SPAFPN):
    return neck(stage_features)
