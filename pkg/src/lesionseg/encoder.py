"""Per-modality five-stage CNN encoders."""
from typing import List, NamedTuple

import torch
import torch.nn as nn

from .core_types import ConfigError
from .layers import DoubleConv


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    f5: torch.Tensor
    modality: str = ""

    @property
    def levels(self):
        return (self.f1, self.f2, self.f3, self.f4, self.f5)


class StreamEncoder(nn.Module):
    """Five stages of two 3x3 convs; stages 2-5 start with a 2x2 max-pool."""

    def __init__(self, stage_channels, in_channels=1, input_size=None):
        super().__init__()
        chans = [in_channels, *stage_channels]
        self.stages = nn.ModuleList(DoubleConv(a, b) for a, b in zip(chans, chans[1:]))
        self.pool = nn.MaxPool2d(2)
        self.input_size = tuple(input_size) if input_size else None

    def forward(self, x, modality=""):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ConfigError(f"encoder expects [B,1,H,W] input, got {tuple(x.shape)}")
        if self.input_size and tuple(x.shape[-2:]) != self.input_size:
            raise ConfigError(f"input size {tuple(x.shape[-2:])} != configured {self.input_size}")
        feats = []
        for i, stage in enumerate(self.stages):
            if i:
                x = self.pool(x)
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats, modality=modality)


def encode_stream(x, encoder: StreamEncoder, modality="") -> FeaturePyramid:
    return encoder(x, modality)


class MultiStreamEncoder(nn.Module):
    """N independent encoders; no weights are shared between streams."""

    def __init__(self, modalities, stage_channels, input_size=None):
        super().__init__()
        self.modalities = list(modalities)
        self.streams = nn.ModuleList(
            StreamEncoder(stage_channels, input_size=input_size) for _ in self.modalities)

    def forward(self, x) -> List[FeaturePyramid]:
        if x.ndim != 4 or x.shape[1] != len(self.streams):
            raise ConfigError(
                f"expected {len(self.streams)} modality channels, got input {tuple(x.shape)}")
        return [enc(x[:, m:m + 1], name)
                for m, (enc, name) in enumerate(zip(self.streams, self.modalities))]


def encode_all(x, encoder: MultiStreamEncoder) -> List[FeaturePyramid]:
    return encoder(x)
