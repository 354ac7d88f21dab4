"""Hybrid bottleneck: per-stream Swin refinement, then paired cross-modal fusion."""
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ResidualBlock

NATURAL_PAIRS = (("T1w", "T1c"), ("FLAIR", "T2w"), ("DWI", "ADC"))

# additive mask value; exp() of it underflows to exactly 0 in float32 and float64
_NEG = -1e9


def tokenize(x: torch.Tensor) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """[B, C, h, w] -> ([B, h*w, C], (h, w))"""
    b, c, h, w = x.shape
    return x.flatten(2).transpose(1, 2), (h, w)


def detokenize(tokens: torch.Tensor, grid) -> torch.Tensor:
    h, w = grid
    b, n, c = tokens.shape
    if n != h * w:
        raise ValueError(f"{n} tokens do not fill a {h}x{w} grid")
    return tokens.transpose(1, 2).reshape(b, c, h, w)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    flat = coords.flatten(1)
    rel = (flat[:, :, None] - flat[:, None, :]).permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class WindowAttention(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.register_buffer("relative_position_index", relative_position_index(window),
                             persistent=False)

    def position_bias(self):
        n = self.window * self.window
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        return bias.reshape(n, n, self.heads).permute(2, 0, 1)  # heads, N, N

    def forward(self, x, mask=None):
        """x: [B*nW, N, C]; mask: [nW, N, N] additive or None."""
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.position_bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


def _pad_amounts(size, window):
    total = (-size) % window
    return total // 2, total - total // 2


def _windows(x, w):
    """[B, H, W, C] -> [B*nW, w*w, C]"""
    b, h, wd, c = x.shape
    x = x.view(b, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def _merge(windows, w, h, wd):
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // w) * (wd // w))
    x = windows.view(b, h // w, wd // w, w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, wd, c)


class SwinBlock(nn.Module):
    """Pre-norm (shifted) window attention followed by an MLP, both residual.

    Grids that are not a multiple of the window are zero-padded symmetrically
    (extra cell trailing); padded tokens are masked out as keys and cropped away.
    """

    def __init__(self, dim, heads=4, window=7, shift=0, mlp_ratio=4.0):
        super().__init__()
        if window < 1 or not 0 <= shift < window:
            raise ValueError(f"invalid window/shift ({window}, {shift})")
        self.window, self.shift = window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def attention_mask(self, h, wd, device=None):
        """Additive mask [nW, N, N] for a grid of (unpadded) size h x wd."""
        w, s = self.window, self.shift
        (pt, pb), (pl, pr) = _pad_amounts(h, w), _pad_amounts(wd, w)
        hp, wp = h + pt + pb, wd + pl + pr
        valid = torch.zeros(hp, wp, dtype=torch.bool, device=device)
        valid[pt:pt + h, pl:pl + wd] = True
        region = torch.zeros(hp, wp, device=device)
        if s:
            valid = torch.roll(valid, (-s, -s), (0, 1))
            cnt = 0
            for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
                for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
                    region[hs, ws] = cnt
                    cnt += 1
        rw = _windows(region[None, :, :, None], w).squeeze(-1)
        vw = _windows(valid[None, :, :, None].float(), w).squeeze(-1) > 0.5
        allowed = (rw[:, :, None] == rw[:, None, :]) & vw[:, None, :]
        zero = torch.zeros((), device=device)
        return torch.where(allowed, zero, torch.full((), _NEG, device=device))

    def forward(self, x):
        """x: [B, C, h, w] -> same shape."""
        b, c, h, wd = x.shape
        w, s = self.window, self.shift
        t = x.permute(0, 2, 3, 1)
        y = self.norm1(t)
        (pt, pb), (pl, pr) = _pad_amounts(h, w), _pad_amounts(wd, w)
        y = F.pad(y, (0, 0, pl, pr, pt, pb))
        hp, wp = y.shape[1:3]
        if s:
            y = torch.roll(y, (-s, -s), (1, 2))
        mask = self.attention_mask(h, wd, x.device).to(y.dtype)
        y = _merge(self.attn(_windows(y, w), mask), w, hp, wp)
        if s:
            y = torch.roll(y, (s, s), (1, 2))
        t = t + y[:, pt:pt + h, pl:pl + wd]
        t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)


class SwinStage(nn.Module):
    """``layers`` pairs of (unshifted, shifted) blocks."""

    def __init__(self, dim, layers=1, heads=4, window=7):
        super().__init__()
        blocks = []
        for _ in range(layers):
            blocks.append(SwinBlock(dim, heads, window, 0))
            blocks.append(SwinBlock(dim, heads, window, window // 2))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


def swin_refine(f5, stage: SwinStage):
    return stage(f5)


def pairing_plan(modalities: Sequence[str]) -> Tuple[List[str], List[str]]:
    """Split modality names into the two token groups that cross-attend.

    Natural pairs are taken first; leftovers keep their input order.
    """
    mods = list(modalities)
    if len(mods) < 2:
        raise ValueError("cross-modal fusion needs at least two streams")
    if len(set(mods)) != len(mods):
        raise ValueError("duplicate modalities")
    rest = list(mods)
    pairs = []
    for a, b in NATURAL_PAIRS:
        if a in rest and b in rest:
            pairs.append([a, b])
            rest.remove(a)
            rest.remove(b)
    if len(pairs) >= 2:
        ctx = [m for p in pairs[2:] for m in p] + rest
        return pairs[0] + ctx, pairs[1] + ctx
    if len(pairs) == 1 and len(rest) == 1:
        return pairs[0], rest
    if len(pairs) == 1 and len(rest) == 2:
        return pairs[0] + [rest[1]], [rest[0], rest[1]]
    if len(pairs) == 1 and not rest:
        # a lone natural pair cross-attends member to member
        return [pairs[0][0]], [pairs[0][1]]
    k = len(rest) // 2
    return [m for p in pairs for m in p] + rest[:k], rest[k:]


def pair_streams(tokens: Dict[str, torch.Tensor], modalities=None):
    """Concatenate token sequences along the token axis per the pairing plan."""
    names_a, names_b = pairing_plan(modalities or list(tokens))
    t_a = torch.cat([tokens[n] for n in names_a], dim=1)
    t_b = torch.cat([tokens[n] for n in names_b], dim=1)
    return t_a, t_b


class CrossAttention(nn.Module):
    def __init__(self, dim, heads=4):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query, context):
        b, nq, c = query.shape
        nk = context.shape[1]
        hd = c // self.heads
        q = self.q(query).view(b, nq, self.heads, hd).transpose(1, 2)
        k = self.k(context).view(b, nk, self.heads, hd).transpose(1, 2)
        v = self.v(context).view(b, nk, self.heads, hd).transpose(1, 2)
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, nq, c))


class CrossModalFusion(nn.Module):
    """Bi-directional cross-attention between the two token groups, then
    de-tokenize, concatenate, 1x1 projection and a residual block."""

    def __init__(self, modalities, dim, heads=4):
        super().__init__()
        self.modalities = list(modalities)
        self.names_a, self.names_b = pairing_plan(self.modalities)
        self.attn_ab = CrossAttention(dim, heads)
        self.attn_ba = CrossAttention(dim, heads)
        self.norm_a = nn.LayerNorm(dim)
        self.norm_b = nn.LayerNorm(dim)
        n_grids = len(self.names_a) + len(self.names_b)
        self.proj = nn.Conv2d(n_grids * dim, dim, 1)
        self.block = ResidualBlock(dim, dim)

    def enrich(self, t_a, t_b):
        a = self.norm_a(t_a + self.attn_ab(t_a, t_b))
        b = self.norm_b(t_b + self.attn_ba(t_b, t_a))
        return a, b

    def forward(self, maps: Dict[str, torch.Tensor]):
        grids = {tuple(m.shape) for m in maps.values()}
        if len(grids) != 1:
            raise ValueError(f"stream grids differ: {sorted(grids)}")
        tokens, grid = {}, None
        for name, m in maps.items():
            tokens[name], grid = tokenize(m)
        t_a, t_b = pair_streams(tokens, self.modalities)
        return cross_modal_fuse(t_a, t_b, self, grid)


def cross_modal_fuse(t_a, t_b, fusion: CrossModalFusion, grid):
    """Fuse already-paired token sequences into the bottleneck map."""
    a, b = fusion.enrich(t_a, t_b)
    n = grid[0] * grid[1]
    if a.shape[1] % n or b.shape[1] % n:
        raise ValueError("token counts are not whole grids")
    parts = [detokenize(chunk, grid) for chunk in (*a.split(n, dim=1), *b.split(n, dim=1))]
    return fusion.block(fusion.proj(torch.cat(parts, dim=1)))


class HybridBottleneck(nn.Module):
    def __init__(self, modalities, dim, swin_layers=1, swin_heads=4, window=7, cross_heads=4):
        super().__init__()
        self.modalities = list(modalities)
        self.swin = nn.ModuleList(
            SwinStage(dim, swin_layers, swin_heads, window) for _ in self.modalities)
        if len(self.modalities) > 1:
            self.fusion = CrossModalFusion(self.modalities, dim, cross_heads)
        else:
            # single stream: nothing to cross-attend, keep the final residual block
            self.fusion = ResidualBlock(dim, dim)

    def forward(self, f5s: List[torch.Tensor]) -> torch.Tensor:
        refined = [stage(f) for stage, f in zip(self.swin, f5s)]
        if len(refined) == 1:
            return self.fusion(refined[0])
        return self.fusion(dict(zip(self.modalities, refined)))
