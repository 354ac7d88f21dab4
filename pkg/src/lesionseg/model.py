"""End-to-end multi-stream segmentation network."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bottleneck import HybridBottleneck
from .core_types import ConfigError, ModelConfig
from .decoder import GatedUNetPPDecoder, HeadOutputs
from .encoder import MultiStreamEncoder
from .skip_fusion import SkipFusion


class SegmentationNet(nn.Module):
    """encoders -> skip fusion -> Swin + cross-modal bottleneck -> gated UNet++ decoder.

    Input ``[B, M, H, W]`` with one channel per modality; H and W must be
    multiples of 16. Only ``HeadOutputs.main`` is meant for inference.
    """

    def __init__(self, cfg: ModelConfig, modalities):
        super().__init__()
        modalities = list(modalities)
        if len(modalities) != cfg.num_streams:
            raise ConfigError("stream/modality mismatch")
        self.cfg = cfg
        self.modalities = modalities
        ch = cfg.stage_channels
        self.encoder = MultiStreamEncoder(modalities, ch)
        self.skip_fusion = SkipFusion(cfg.num_streams, ch, cfg.cbam_reduction)
        self.bottleneck = HybridBottleneck(modalities, ch[4], cfg.swin_layers, cfg.swin_heads,
                                           cfg.swin_window, cfg.cross_heads)
        self.decoder = GatedUNetPPDecoder(ch, cfg.num_classes)

    def forward(self, x) -> HeadOutputs:
        if x.ndim != 4 or x.shape[1] != self.cfg.num_streams:
            raise ConfigError(f"expected [B,{self.cfg.num_streams},H,W], got {tuple(x.shape)}")
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ConfigError(f"spatial size {tuple(x.shape[-2:])} not divisible by 16")
        pyramids = self.encoder(x)
        skips = self.skip_fusion(pyramids)
        center = self.bottleneck([p.f5 for p in pyramids])
        return self.decoder(center, skips)


def predict_logits(x, model: SegmentationNet) -> HeadOutputs:
    return model(x)


def forward_padded(model: SegmentationNet, x) -> HeadOutputs:
    """Forward pass for any H, W: zero-pad at the bottom/right to the next multiple of 16,
    then crop the full-resolution heads to H x W and the lesion head to ceil(H/16) x ceil(W/16).
    """
    h, w = x.shape[-2:]
    ph, pw = -h % 16, -w % 16
    out = model(F.pad(x, (0, pw, 0, ph)) if ph or pw else x)
    lh, lw = -(-h // 16), -(-w // 16)
    return HeadOutputs(out.main[..., :h, :w], out.aux1[..., :h, :w], out.aux2[..., :h, :w],
                       out.lesion[..., :lh, :lw])


def build_model(cfg: ModelConfig, modalities, seed=None) -> SegmentationNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SegmentationNet(cfg, modalities)
