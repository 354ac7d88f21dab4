import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_attention
from lesionseg.bottleneck import (CrossAttention, CrossModalFusion, SwinBlock, SwinStage,
                                  WindowAttention, detokenize, pairing_plan, swin_refine,
                                  tokenize)
from lesionseg.core_types import ConfigError, ModelConfig
from lesionseg.decoder import (DEPTH, GATE_GUIDANCE, GatedUNetPPDecoder, LesionGate,
                               lesion_gate, node_inputs)
from lesionseg.encoder import MultiStreamEncoder, StreamEncoder
from lesionseg.model import SegmentationNet, build_model, forward_padded
from lesionseg.skip_fusion import CBAM, FusedSkips, ProjectLevel, SkipFusion


# ------------------------------------------------------------------ encoder


def test_encoder_shapes_208():
    enc = StreamEncoder((16, 32, 64, 128, 256))
    with torch.no_grad():
        pyr = enc(torch.randn(1, 1, 208, 208))
    assert [tuple(f.shape[1:]) for f in pyr.levels] == [
        (16, 208, 208), (32, 104, 104), (64, 52, 52), (128, 26, 26), (256, 13, 13)]


def test_encoder_batch_and_streams():
    enc = MultiStreamEncoder(["T1w", "T1c", "T2w", "FLAIR"], (4, 8, 16, 32, 64))
    pyrs = enc(torch.randn(3, 4, 64, 64))
    assert len(pyrs) == 4
    assert [p.modality for p in pyrs] == ["T1w", "T1c", "T2w", "FLAIR"]
    assert all(f.shape[0] == 3 for p in pyrs for f in p.levels)
    assert pyrs[0].f5.shape == (3, 64, 4, 4)


def test_encoder_stream_independence():
    torch.manual_seed(0)
    enc = MultiStreamEncoder(["FLAIR", "T1w"], (4, 8, 16, 32, 64))
    x = torch.randn(2, 2, 32, 32)
    y = x.clone()
    y[:, 1] += torch.randn(2, 32, 32)
    with torch.no_grad():
        a, b = enc(x), enc(y)
    for fa, fb in zip(a[0].levels, b[0].levels):
        assert torch.equal(fa, fb)
    assert not torch.equal(a[1].f1, b[1].f1)


def test_encoder_bad_input():
    enc = MultiStreamEncoder(["FLAIR", "T1w"], (4, 8, 16, 32, 64))
    with pytest.raises(ConfigError):
        enc(torch.randn(1, 3, 32, 32))


# ------------------------------------------------------------ skip fusion


def test_projection_mean_oracle():
    proj = ProjectLevel(2, 3, bias=False)
    eye = torch.eye(3)
    with torch.no_grad():
        proj.proj.weight.copy_(0.5 * torch.cat([eye, eye], dim=1)[:, :, None, None])
    a, b = torch.randn(1, 3, 2, 2), torch.randn(1, 3, 2, 2)
    assert torch.allclose(proj([a, b]), (a + b) / 2, atol=1e-7)


def test_projection_identity_single_stream_and_zero():
    proj = ProjectLevel(1, 4, bias=False)
    with torch.no_grad():
        proj.proj.weight.copy_(torch.eye(4)[:, :, None, None])
    x = torch.randn(2, 4, 3, 3)
    assert torch.allclose(proj([x]), x)
    assert torch.equal(ProjectLevel(2, 4, bias=False)([torch.zeros(1, 4, 3, 3)] * 2),
                       torch.zeros(1, 4, 3, 3))
    with pytest.raises(ValueError):
        proj([torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 2, 2)])


def test_cbam_hand_computed():
    # one channel, 2x2 input; MLP weights set by hand, spatial kernel = centre tap only
    cbam = CBAM(1, reduction=8, min_hidden=4)
    with torch.no_grad():
        cbam.mlp[0].weight.fill_(0.5)
        cbam.mlp[0].bias.zero_()
        cbam.mlp[2].weight.fill_(0.25)
        cbam.mlp[2].bias.zero_()
        cbam.spatial.weight.zero_()
        cbam.spatial.bias.zero_()
        cbam.spatial.weight[0, 0, 3, 3] = 1.0  # avg map
        cbam.spatial.weight[0, 1, 3, 3] = 2.0  # max map
    x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])

    def mlp(v):  # 4 hidden units each 0.5*v, relu, output sum 0.25*h
        return 4 * 0.25 * max(0.5 * v, 0.0)

    sig = lambda v: 1 / (1 + np.exp(-v))
    ca = sig(mlp(2.5) + mlp(4.0))
    y = ca * np.array([[1.0, 2.0], [3.0, 4.0]])
    expected = sig(1.0 * y + 2.0 * y) * y  # single channel: mean == max == y
    assert np.allclose(cbam(x)[0, 0].detach().numpy(), expected, atol=1e-6)


def test_cbam_constant_and_contraction():
    torch.manual_seed(0)
    cbam = CBAM(16)
    x = torch.full((1, 16, 8, 8), 0.7)
    out = cbam(x)
    # interior is constant (zero padding of the 7x7 conv only affects the border)
    core = out[..., 3:5, 3:5]
    assert torch.allclose(core, core[..., :1, :1].expand_as(core))
    x = torch.randn(2, 16, 8, 8)
    ca = cbam.channel_attention(x)
    sa = cbam.spatial_attention(ca * x)
    assert ((ca > 0) & (ca < 1)).all() and ((sa > 0) & (sa < 1)).all()
    assert (cbam(x).abs() <= x.abs() + 1e-7).all()


def test_skip_fusion_channels_and_no_f5():
    sf = SkipFusion(2, (16, 32, 64, 128, 256))
    enc = MultiStreamEncoder(["FLAIR", "T1w"], (16, 32, 64, 128, 256))
    with torch.no_grad():
        skips = sf(enc(torch.randn(1, 2, 32, 32)))
    assert isinstance(skips, FusedSkips) and len(skips) == 4
    assert [s.shape[1] for s in skips] == [16, 32, 64, 128]
    assert [s.shape[-1] for s in skips] == [32, 16, 8, 4]


# -------------------------------------------------------------- bottleneck


@pytest.mark.parametrize("grid", [4, 7])
def test_window_equals_dense_attention(grid):
    torch.manual_seed(grid)
    blk = SwinBlock(16, heads=4, window=grid, shift=0)
    x = torch.randn(2, 16, grid, grid)
    with torch.no_grad():
        t = x.permute(0, 2, 3, 1).reshape(2, grid * grid, 16)
        y = t + dense_attention(blk.attn, blk.norm1(t))
        y = y + blk.mlp(blk.norm2(y))
        expected = y.reshape(2, grid, grid, 16).permute(0, 3, 1, 2)
        assert torch.allclose(blk(x), expected, atol=1e-5)


def test_padding_masks_pad_tokens():
    blk = SwinBlock(8, heads=2, window=7, shift=0)
    mask = blk.attention_mask(13, 13)
    # 13 -> 14: one pad row/col trailing; pad keys get -1e9, real keys 0
    assert mask.shape == (4, 49, 49)
    valid = torch.zeros(14, 14, dtype=torch.bool)
    valid[:13, :13] = True
    first = valid[:7, :7].reshape(-1)
    last = valid[7:, 7:].reshape(-1)
    assert (mask[0][:, first] == 0).all()
    assert (mask[3][:, ~last] < -1e8).all() and (mask[3][:, last] == 0).all()
    x = torch.randn(1, 8, 13, 13)
    with torch.no_grad():
        assert blk(x).shape == x.shape


def test_constant_input_stays_constant_without_bias():
    blk = SwinBlock(8, heads=2, window=4, shift=0)
    with torch.no_grad():
        blk.attn.relative_position_bias_table.zero_()
        x = torch.randn(1, 8, 1, 1).expand(1, 8, 8, 8).contiguous()
        y = blk(x)
    assert torch.allclose(y, y[..., :1, :1].expand_as(y), atol=1e-5)


def test_shift_changes_output():
    torch.manual_seed(0)
    a = SwinBlock(8, heads=2, window=4, shift=0)
    b = SwinBlock(8, heads=2, window=4, shift=2)
    b.load_state_dict(a.state_dict())
    x = torch.randn(1, 8, 8, 8)
    with torch.no_grad():
        assert not torch.allclose(a(x), b(x))


def test_invalid_window_shift():
    with pytest.raises(ValueError):
        SwinBlock(8, heads=2, window=4, shift=4)
    with pytest.raises(ValueError):
        SwinBlock(8, heads=2, window=0)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(4, 16), w=st.integers(4, 16), window=st.sampled_from([2, 4, 7]))
def test_swin_refine_preserves_shape(h, w, window):
    torch.manual_seed(0)
    stage = SwinStage(8, layers=1, heads=2, window=window)
    with torch.no_grad():
        assert swin_refine(torch.randn(1, 8, h, w), stage).shape == (1, 8, h, w)


def test_tokenize_round_trip():
    x = torch.randn(2, 5, 3, 4)
    t, grid = tokenize(x)
    assert t.shape == (2, 12, 5)
    assert torch.equal(detokenize(t, grid), x)


@pytest.mark.parametrize("mods,expected", [
    (["T1w", "T1c", "T2w", "FLAIR"], (["T1w", "T1c"], ["FLAIR", "T2w"])),
    (["T1w", "T1c", "DWI"], (["T1w", "T1c"], ["DWI"])),
    (["FLAIR", "T1w"], (["FLAIR"], ["T1w"])),
    (["DWI", "ADC"], (["DWI"], ["ADC"])),
    (["T1w", "T1c", "T2w", "FLAIR", "DWI"], (["T1w", "T1c", "DWI"], ["FLAIR", "T2w", "DWI"])),
    (["T1w", "T1c", "DWI", "T2w"], (["T1w", "T1c", "T2w"], ["DWI", "T2w"])),
    (["T1w", "DWI", "T2w"], (["T1w"], ["DWI", "T2w"])),
])
def test_pairing_plan(mods, expected):
    assert pairing_plan(mods) == expected


def test_pairing_plan_errors():
    with pytest.raises(ValueError):
        pairing_plan(["FLAIR"])
    with pytest.raises(ValueError):
        pairing_plan(["FLAIR", "FLAIR"])


def test_cross_attention_hand_computed():
    ca = CrossAttention(2, heads=1)
    with torch.no_grad():
        for lin in (ca.q, ca.k, ca.v, ca.proj):
            lin.weight.copy_(torch.eye(2))
            lin.bias.zero_()
    q = torch.tensor([[[1.0, 0.0]]])
    ctx = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]])
    s = np.array([1.0, 0.0]) / np.sqrt(2)
    w = np.exp(s) / np.exp(s).sum()
    expected = w[0] * np.array([1.0, 0.0]) + w[1] * np.array([0.0, 2.0])
    assert np.allclose(ca(q, ctx)[0, 0].detach().numpy(), expected, atol=1e-6)


def test_cross_modal_zero_value_is_layernorm_residual():
    f = CrossModalFusion(["FLAIR", "T1w"], 8, heads=2)
    with torch.no_grad():
        for attn in (f.attn_ab, f.attn_ba):
            attn.v.weight.zero_()
            attn.v.bias.zero_()
            attn.proj.bias.zero_()
    ta, tb = torch.randn(1, 6, 8), torch.randn(1, 6, 8)
    a, b = f.enrich(ta, tb)
    assert torch.allclose(a, f.norm_a(ta), atol=1e-6)
    assert torch.allclose(b, f.norm_b(tb), atol=1e-6)


def test_cross_modal_symmetric_streams():
    f = CrossModalFusion(["FLAIR", "T1w"], 8, heads=2)
    f.attn_ba.load_state_dict(f.attn_ab.state_dict())
    f.norm_b.load_state_dict(f.norm_a.state_dict())
    t = torch.randn(1, 6, 8)
    a, b = f.enrich(t, t.clone())
    assert torch.allclose(a, b)


def test_cross_modal_bidirectional_gradients():
    torch.manual_seed(0)
    f = CrossModalFusion(["FLAIR", "T1w"], 8, heads=2)
    maps = {"FLAIR": torch.randn(1, 8, 3, 3, requires_grad=True),
            "T1w": torch.randn(1, 8, 3, 3, requires_grad=True)}
    f(maps).sum().backward()
    assert maps["FLAIR"].grad.abs().sum() > 0 and maps["T1w"].grad.abs().sum() > 0
    # sensitivity of the A-side output to the B-side input
    ta = torch.randn(1, 9, 8)
    tb = torch.randn(1, 9, 8, requires_grad=True)
    a, _ = f.enrich(ta, tb)
    a.sum().backward()
    assert tb.grad.abs().sum() > 0


# ----------------------------------------------------------------- decoder


def test_node_inputs_structure():
    assert node_inputs(0, 1) == [(0, 0), (1, 0)]
    assert node_inputs(0, 4) == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 3)]
    assert node_inputs(3, 1) == [(3, 0), "center"]
    assert node_inputs(2, 2) == [(2, 0), (2, 1), (3, 1)]
    with pytest.raises(ValueError):
        node_inputs(3, 2)
    n_nodes = sum(DEPTH - i for i in range(DEPTH))
    assert n_nodes == 10
    assert GATE_GUIDANCE == {2: "center", 1: (3, 1), 0: (2, 2)}


def test_decoder_evaluation_respects_dependencies():
    ch = (4, 8, 16, 32, 64)
    dec = GatedUNetPPDecoder(ch, 1)
    skips = FusedSkips(*(torch.randn(1, c, 32 >> i, 32 >> i) for i, c in enumerate(ch[:4])))
    with torch.no_grad():
        _, state = dec(torch.randn(1, 64, 2, 2), skips, return_state=True)
    order = list(state)
    for key in order:
        if isinstance(key, tuple) and key[1] > 0:
            for dep in node_inputs(*key):
                assert order.index(dep) < order.index(key)
        if isinstance(key, tuple) and key[1] == 0 and key[0] in GATE_GUIDANCE:
            assert order.index(GATE_GUIDANCE[key[0]]) < order.index(key)
    assert len([k for k in order if isinstance(k, tuple) and k[1] > 0]) == 10
    for (i, j), v in ((k, state[k]) for k in order if isinstance(k, tuple)):
        assert v.shape[1] == ch[i]


def test_gate_identity_and_half():
    gate = LesionGate(8)
    f = torch.rand(2, 4, 8, 8)
    g = torch.randn(2, 8, 4, 4)
    with torch.no_grad():
        gate.logit.weight.zero_()
        gate.logit.bias.fill_(-1e3)
        assert (lesion_gate(f, g, gate) - f).abs().max() < 1e-6
        gate.logit.bias.fill_(0.0)
        assert torch.allclose(lesion_gate(f, g, gate), 1.5 * f)


@pytest.mark.parametrize("seed", range(100))
def test_gate_bounds_random(seed):
    torch.manual_seed(seed)
    gate = LesionGate(4)
    f = torch.rand(1, 3, 6, 6)
    with torch.no_grad():
        out = gate(f, torch.randn(1, 4, 3, 3))
    assert (out >= f).all() and (out <= 2 * f).all()


def test_zero_heads_give_half_probability(tiny_cfg):
    model = build_model(tiny_cfg, ["FLAIR", "T1w"], seed=0)
    dec = model.decoder
    with torch.no_grad():
        for head in (dec.head_main, dec.head_aux1, dec.head_aux2, dec.head_lesion):
            head.weight.zero_()
            head.bias.zero_()
        out = model(torch.randn(1, 2, 16, 16))
    for z in out:
        assert torch.equal(torch.sigmoid(z), torch.full_like(z, 0.5))


# ------------------------------------------------------------------- model


@pytest.mark.parametrize("size", [64, 96, 208])
def test_model_shape_contracts(size):
    cfg = ModelConfig(stage_channels=(4, 8, 16, 32, 64), swin_heads=2, cross_heads=2,
                      input_size=(size, size))
    model = build_model(cfg, ["FLAIR", "T1w"], seed=0)
    with torch.no_grad():
        out = model(torch.randn(1, 2, size, size))
    assert out.main.shape == (1, 1, size, size)
    assert out.aux1.shape == out.aux2.shape == out.main.shape
    assert out.lesion.shape == (1, 1, size // 16, size // 16)


def test_brats_model_three_classes():
    cfg = ModelConfig(num_streams=4, stage_channels=(4, 8, 16, 32, 64), num_classes=3,
                      swin_heads=2, cross_heads=2, input_size=(32, 32))
    model = build_model(cfg, ["T1w", "T1c", "T2w", "FLAIR"], seed=0)
    x = torch.randn(2, 4, 32, 32)
    with torch.no_grad():
        a, b = model(x), model(x)
    assert a.main.shape == (2, 3, 32, 32) and a.lesion.shape == (2, 1, 2, 2)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_model_rejects_bad_input(tiny_cfg):
    model = build_model(tiny_cfg, ["FLAIR", "T1w"], seed=0)
    with pytest.raises(ConfigError):
        model(torch.randn(1, 3, 16, 16))
    with pytest.raises(ConfigError):
        model(torch.randn(1, 2, 24, 24))
    with pytest.raises(ConfigError):
        SegmentationNet(tiny_cfg, ["FLAIR"])


def test_single_stream_model():
    cfg = ModelConfig(num_streams=1, stage_channels=(4, 8, 16, 32, 64), swin_heads=2,
                      cross_heads=2, input_size=(16, 16))
    model = build_model(cfg, ["FLAIR"], seed=0)
    assert model(torch.randn(1, 1, 16, 16)).main.shape == (1, 1, 16, 16)


def test_all_heads_and_groups_receive_gradient(tiny_cfg):
    model = build_model(tiny_cfg, ["FLAIR", "T1w"], seed=0)
    out = model(torch.randn(2, 2, 16, 16))
    sum(z.square().mean() for z in out).backward()
    groups = ["encoder", "skip_fusion.cbam", "bottleneck.swin", "bottleneck.fusion",
              "decoder.gates", "decoder.head_main", "decoder.head_aux1", "decoder.head_aux2",
              "decoder.head_lesion"]
    for g in groups:
        grads = [p.grad for n, p in model.named_parameters() if n.startswith(g)]
        assert grads and all(gr is not None for gr in grads), g
        assert sum(gr.abs().sum() for gr in grads) > 0, g


def test_decoder_gradient_reaches_gated_skips_and_center():
    ch = (4, 8, 16, 32, 64)
    dec = GatedUNetPPDecoder(ch, 1)
    skips = [torch.randn(1, c, 32 >> i, 32 >> i, requires_grad=True) for i, c in enumerate(ch[:4])]
    center = torch.randn(1, 64, 2, 2, requires_grad=True)
    dec(center, FusedSkips(*skips)).main.sum().backward()
    assert center.grad.abs().sum() > 0
    assert all(s.grad.abs().sum() > 0 for s in skips)


def test_forward_padded_small_and_exact_sizes(tiny_cfg):
    model = build_model(tiny_cfg, ["FLAIR", "T1w"], seed=0)
    x = torch.randn(2, 2, 8, 8)
    out = forward_padded(model, x)
    assert out.main.shape == (2, 1, 8, 8) and out.lesion.shape == (2, 1, 1, 1)
    with torch.no_grad():
        ref = model(torch.nn.functional.pad(x, (0, 8, 0, 8)))
    assert torch.equal(out.main, ref.main[..., :8, :8])
    x16 = torch.randn(1, 2, 16, 16)
    with torch.no_grad():
        assert all(torch.equal(a, b) for a, b in zip(forward_padded(model, x16), model(x16)))
    assert forward_padded(model, torch.randn(1, 2, 20, 12)).lesion.shape == (1, 1, 2, 1)
