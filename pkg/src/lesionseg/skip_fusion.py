"""Cross-stream skip fusion: concatenation, 1x1 projection, then CBAM."""
from typing import List, NamedTuple

import torch
import torch.nn as nn

from .encoder import FeaturePyramid


class FusedSkips(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


class ProjectLevel(nn.Module):
    """Concatenate N same-shaped maps and project N*c channels back to c."""

    def __init__(self, num_streams, channels, bias=True):
        super().__init__()
        self.proj = nn.Conv2d(num_streams * channels, channels, 1, bias=bias)

    def forward(self, maps):
        shapes = {tuple(m.shape) for m in maps}
        if len(shapes) != 1:
            raise ValueError(f"cannot fuse heterogeneous maps: {sorted(shapes)}")
        return self.proj(torch.cat(list(maps), dim=1))


class CBAM(nn.Module):
    def __init__(self, channels, reduction=8, min_hidden=4, kernel_size=7):
        super().__init__()
        hidden = max(channels // reduction, min_hidden)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, channels, 1))
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def channel_attention(self, x):
        avg = x.mean(dim=(2, 3), keepdim=True)
        mx = x.amax(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))

    def spatial_attention(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(pooled))

    def forward(self, x):
        x = self.channel_attention(x) * x
        return self.spatial_attention(x) * x


class SkipFusion(nn.Module):
    """Fuse levels 1-4 of N pyramids; f5 is left for the bottleneck."""

    def __init__(self, num_streams, stage_channels, reduction=8):
        super().__init__()
        chans = list(stage_channels)[:4]
        self.project = nn.ModuleList(ProjectLevel(num_streams, c) for c in chans)
        self.cbam = nn.ModuleList(CBAM(c, reduction) for c in chans)

    def forward(self, pyramids: List[FeaturePyramid]) -> FusedSkips:
        if not pyramids:
            raise ValueError("need at least one pyramid")
        out = []
        for i in range(4):
            fused = self.project[i]([p.levels[i] for p in pyramids])
            out.append(self.cbam[i](fused))
        return FusedSkips(*out)
