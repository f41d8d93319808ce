import numpy as np
import pytest
import torch

from audistill import encoder as E
from audistill.frontend import FeatureSequence


def tiny(**kw):
    base = dict(d_model=32, n_layers=3, n_heads=4, conv_pos_groups=4, dropout=0.0)
    base.update(kw)
    return E.EncoderConfig(**base)


def test_presets_match_table_sizes():
    assert (E.ENCODER_PRESETS["small"].d_model, E.ENCODER_PRESETS["small"].n_layers) == (384, 12)
    assert (E.ENCODER_PRESETS["base"].d_model, E.ENCODER_PRESETS["base"].n_layers) == (768, 12)
    assert (E.ENCODER_PRESETS["large"].d_model, E.ENCODER_PRESETS["large"].n_layers) == (1024, 24)


def test_tap_shapes_and_final():
    enc = E.Encoder(tiny(), seed=1)
    out = enc(torch.randn(2, 20, 32), tap_layers=[1, 3], keep_hidden=True)
    assert set(out.taps) == {1, 3}
    assert out.taps[1].shape == (2, 20, 32)
    assert torch.equal(out.final, out.hidden[3])
    assert set(out.hidden) == {0, 1, 2, 3}


def test_bad_tap_layers():
    enc = E.Encoder(tiny())
    with pytest.raises(ValueError):
        enc(torch.randn(1, 5, 32), tap_layers=[4])
    with pytest.raises(ValueError):
        enc(torch.randn(1, 5, 32), tap_layers=[2, 1])


def test_zero_layer_encoder_is_positional_encoding_only():
    cfg = tiny(n_layers=0)
    enc = E.Encoder(cfg)
    x = torch.randn(1, 9, 32)
    out = enc(x)
    torch.testing.assert_close(out.final, enc.pos_conv(x, None))


def test_seed_determinism():
    a, b = E.Encoder(tiny(), seed=3), E.Encoder(tiny(), seed=3)
    x = torch.randn(1, 12, 32)
    assert torch.equal(a(x).final, b(x).final)
    c = E.Encoder(tiny(), seed=4)
    assert not torch.equal(a(x).final, c(x).final)


def test_padding_invariance():
    enc = E.Encoder(tiny(), seed=0).eval()
    x = torch.randn(1, 15, 32)
    pad = torch.cat([x, 10 * torch.randn(1, 7, 32)], dim=1)
    mask = torch.zeros(1, 22, dtype=torch.bool)
    mask[0, 15:] = True
    full = enc(x, tap_layers=[1, 2, 3])
    padded = enc(pad, mask, tap_layers=[1, 2, 3])
    torch.testing.assert_close(padded.final[:, :15], full.final, atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(padded.taps[2][:, :15], full.taps[2], atol=1e-5, rtol=1e-5)


def test_batch_items_do_not_interact():
    enc = E.Encoder(tiny(), seed=0).eval()
    x = torch.randn(3, 10, 32)
    both = enc(x).final
    torch.testing.assert_close(enc(x[1:2]).final, both[1:2], atol=1e-5, rtol=1e-5)


def _naive_attention(att, x):
    t, d = x.shape
    h, hd, r = att.n_heads, att.head_dim, att.max_distance
    q, k, v = att.qkv(x).view(t, 3, h, hd).unbind(1)
    out = torch.zeros(t, h, hd, dtype=x.dtype)
    for head in range(h):
        for i in range(t):
            s = torch.stack([q[i, head] @ k[j, head] + q[i, head] @ att.rel_key[max(-r, min(r, j - i)) + r, :]
                             for j in range(t)]) / hd**0.5
            out[i, head] = s.softmax(0) @ v[:, head]
    return att.out(out.reshape(t, d))


@pytest.mark.parametrize("max_distance", [2, 160])
def test_relative_attention_matches_naive_loop(max_distance):
    cfg = tiny(rel_pos_max_distance=max_distance)
    att = E.RelativeSelfAttention(cfg).eval()
    torch.nn.init.normal_(att.rel_key)
    x = torch.randn(7, 32)
    with torch.no_grad():
        torch.testing.assert_close(att(x[None], None)[0], _naive_attention(att, x), atol=1e-5, rtol=1e-5)


def test_gradients_match_finite_differences():
    cfg = tiny(d_model=8, n_layers=2, n_heads=2, conv_pos_groups=2, conv_pos_layers=2, conv_pos_kernel=3)
    enc = E.Encoder(cfg, seed=0).double()
    x = torch.randn(1, 5, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda inp: enc(inp, tap_layers=[1]).taps[1].sum(), (x,), eps=1e-6, atol=1e-6)


def test_audio_encoder_mask_embedding():
    model = E.AudioEncoder(tiny(), "frame", seed=0, mask_embedding=True).eval()
    mel = torch.randn(1, 40, 128)
    mask = torch.zeros(1, 20, dtype=torch.bool)
    mask[0, 5:9] = True
    a = model(mel).final
    b = model(mel, mask=mask).final
    assert not torch.equal(a, b)
    plain = E.AudioEncoder(tiny(), "frame")
    with pytest.raises(ValueError, match="mask embedding"):
        plain(mel, mask=mask)


def test_encode_wrapper_checks_mask_length():
    seq = FeatureSequence(torch.randn(10, 32), 50.0, "frame")
    out = E.encode(seq, tiny(), [2])
    assert out.taps[2].shape == (10, 32)
    with pytest.raises(ValueError, match="pad_mask"):
        E.encode(seq, tiny(), [2], pad_mask=np.zeros(9, bool))


def _manual_macs(cfg, t, extraction):
    d, L = cfg.d_model, cfg.n_layers
    per_layer = 3 * d * d * t + d * d * t + 3 * t * t * d + 2 * t * d * 4 * d
    emb = {"frame": 3 * 128 * d * t, "patch": 256 * d * t, "fused": (3 * 128 + 256) * d * t}[extraction]
    pos = cfg.conv_pos_layers * t * cfg.conv_pos_kernel * d * d // cfg.conv_pos_groups
    return L * per_layer + emb + pos


@pytest.mark.parametrize("extraction", ["frame", "patch", "fused"])
def test_flops_against_hand_count(extraction):
    cfg = E.ENCODER_PRESETS["base"]
    fc = E.count_flops(cfg, 499, extraction)
    assert fc.total == _manual_macs(cfg, 499, extraction)


def test_flops_scaling():
    cfg = E.ENCODER_PRESETS["small"]
    a, b = E.count_flops(cfg, 100), E.count_flops(cfg, 200)
    assert b.attention == 4 * a.attention
    assert b.ffn == 2 * a.ffn
    with pytest.raises(ValueError):
        E.count_flops(cfg, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        E.EncoderConfig(d_model=30, n_layers=2, n_heads=4)
