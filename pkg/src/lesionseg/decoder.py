"""Hierarchically gated UNet++ decoder with deep-supervision heads."""
from typing import NamedTuple

import torch
import torch.nn as nn

from .layers import ConvNormAct, ResidualBlock, upsample_to
from .skip_fusion import FusedSkips

DEPTH = 4  # rows 0..3 of the dense grid

# skip row i is gated by this guidance node; row 3 (f4) stays ungated
GATE_GUIDANCE = {2: "center", 1: (3, 1), 0: (2, 2)}


class HeadOutputs(NamedTuple):
    main: torch.Tensor
    aux1: torch.Tensor
    aux2: torch.Tensor
    lesion: torch.Tensor


def node_inputs(i: int, j: int):
    """Keys feeding node (i, j): same-row predecessors plus the upsampled node below.

    (i, 0) is the (gated) skip of row i; the bottleneck is keyed ``"center"``.
    """
    if not (0 <= i < DEPTH and 1 <= j <= DEPTH - i):
        raise ValueError(f"no decoder node ({i},{j})")
    below = "center" if i == DEPTH - 1 else (i + 1, j - 1)
    return [(i, k) for k in range(j)] + [below]


class LesionGate(nn.Module):
    """f + f * sigmoid(C(U(g))): C is two 3x3 convs ending in one logit channel."""

    def __init__(self, guide_channels, hidden=8):
        super().__init__()
        self.conv = ConvNormAct(guide_channels, hidden)
        self.logit = nn.Conv2d(hidden, 1, 3, padding=1)

    def gate_logits(self, g, size):
        return self.logit(self.conv(upsample_to(g, size)))

    def forward(self, f, g):
        s = self.gate_logits(g, f.shape[-2:])
        if s.shape[-2:] != f.shape[-2:]:
            raise ValueError("gate and skip sizes differ")
        return f + f * torch.sigmoid(s)


def lesion_gate(f, g, gate: LesionGate):
    return gate(f, g)


class GatedUNetPPDecoder(nn.Module):
    def __init__(self, stage_channels, num_classes, lesion_channels=1):
        super().__init__()
        ch = list(stage_channels)  # row i has width ch[i]; center has ch[4]
        self.ch = ch
        nodes = {}
        for i in range(DEPTH):
            for j in range(1, DEPTH - i + 1):
                below = ch[i + 1]
                nodes[f"{i}_{j}"] = ResidualBlock(j * ch[i] + below, ch[i])
        self.nodes = nn.ModuleDict(nodes)
        self.gates = nn.ModuleDict({
            "2": LesionGate(ch[4]),
            "1": LesionGate(ch[3]),  # guided by x_{3,1}
            "0": LesionGate(ch[2]),  # guided by x_{2,2}
        })
        self.head_main = nn.Conv2d(ch[0], num_classes, 1)
        self.head_aux1 = nn.Conv2d(ch[0], num_classes, 1)
        self.head_aux2 = nn.Conv2d(ch[0], num_classes, 1)
        self.head_lesion = nn.Conv2d(ch[4], lesion_channels, 1)

    def forward(self, center, skips: FusedSkips, return_state=False):
        # dict insertion order records the evaluation order
        state = {"center": center, (3, 0): skips.f4}
        raw = {0: skips.f1, 1: skips.f2, 2: skips.f3}

        def resolve(key):
            if key in state:
                return state[key]
            i, j = key
            if j == 0:
                guide = resolve(GATE_GUIDANCE[i])
                state[key] = self.gates[str(i)](raw[i], guide)
                return state[key]
            keys = node_inputs(i, j)
            same_row = [resolve(k) for k in keys[:-1]]
            up = upsample_to(resolve(keys[-1]), same_row[0].shape[-2:])
            state[key] = self.nodes[f"{i}_{j}"](torch.cat(same_row + [up], dim=1))
            return state[key]

        resolve((0, 4))
        out = HeadOutputs(
            main=self.head_main(state[(0, 4)]),
            aux1=self.head_aux1(state[(0, 2)]),
            aux2=self.head_aux2(state[(0, 3)]),
            lesion=self.head_lesion(center),
        )
        if return_state:
            return out, state
        return out


def decode(center, skips, decoder: GatedUNetPPDecoder) -> HeadOutputs:
    return decoder(center, skips)
