import torch
import torch.nn as nn


def group_count(channels: int, max_groups: int = 8) -> int:
    # largest divisor <= max_groups that keeps >= 2 channels per group
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0 and (channels // g >= 2 or channels == 1):
            return g
    return 1


def norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(group_count(channels), channels)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, k=3):
        super().__init__(
            nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
            norm(cout),
            nn.LeakyReLU(0.01, inplace=True),
        )


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(ConvNormAct(cin, cout), ConvNormAct(cout, cout))


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a 1x1 projection shortcut when widths differ."""

    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            norm(cout),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            norm(cout),
        )
        self.shortcut = nn.Identity() if cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, bias=False), norm(cout))
        self.act = nn.LeakyReLU(0.01, inplace=True)

    def forward(self, x):
        return self.act(self.body(x) + self.shortcut(x))


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    return nn.functional.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
