import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from audistill import frontend as F


def _reference_logmel(x):
    """Direct DFT per frame with explicitly built HTK filters."""
    n_frames = (len(x) - 400) // 160 + 1
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400)
    mel = lambda f: 2595 * math.log10(1 + f / 700)
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)
    edges = [inv(mel(8000) * i / 129) for i in range(130)]
    freqs = np.arange(513) * 16000 / 1024
    fb = np.zeros((513, 128))
    for j in range(128):
        lo, c, hi = edges[j], edges[j + 1], edges[j + 2]
        for i, f in enumerate(freqs):
            if lo < f <= c:
                fb[i, j] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[i, j] = (hi - f) / (hi - c)
    k = np.arange(513)[:, None] * np.arange(1024)[None, :]
    basis = np.exp(-2j * np.pi * k / 1024)[:, :400]
    out = np.zeros((n_frames, 128))
    for t in range(n_frames):
        spec = basis @ (x[t * 160 : t * 160 + 400] * win)
        out[t] = np.log(np.maximum(np.abs(spec) ** 2 @ fb, 1e-10))
    return out


def test_logmel_matches_direct_dft(rng):
    x = rng.standard_normal(1600) * 0.1
    got = F.compute_logmel(x).data
    ref = _reference_logmel(x)
    assert got.shape == (8, 128)
    np.testing.assert_allclose(got, ref, atol=2e-4)


def test_logmel_frame_count_and_shape():
    assert F.n_mel_frames(160000) == 998
    assert F.compute_logmel(np.zeros(16000, np.float32)).data.shape == (98, 128)


def test_silence_hits_log_floor():
    m = F.compute_logmel(np.zeros(800))
    np.testing.assert_allclose(m.data, math.log(1e-10), rtol=1e-6)


def test_filterbank_covers_every_band():
    fb = F.mel_filterbank()
    assert fb.shape == (513, 128)
    assert (fb.sum(axis=0) > 0).all()
    assert fb.max() <= 1.0 + 1e-12


def test_logmel_rejects_wrong_rate_and_short_input():
    with pytest.raises(ValueError, match="resample required"):
        F.compute_logmel(np.zeros(8000), sample_rate=8000)
    with pytest.raises(ValueError, match="too short"):
        F.compute_logmel(np.zeros(399))


def test_normalization_formula_and_double_apply():
    stats = F.NormStats(mean=-3.0, std=2.0)
    m = F.MelFrames(np.full((4, 128), 1.0, np.float32))
    out = F.normalize(m, stats)
    np.testing.assert_allclose(out.data, 1.0)  # (1 - -3) / (2 * 2)
    with pytest.raises(ValueError, match="already normalized"):
        F.normalize(out, stats)
    with pytest.raises(ValueError):
        F.NormStats(0.0, 0.0)


def test_norm_stats_pool_all_entries(rng):
    a, b = rng.standard_normal((5, 128)), rng.standard_normal((3, 128)) + 2
    st_ = F.compute_norm_stats([a, b])
    both = np.concatenate([a, b])
    assert st_.mean == pytest.approx(both.mean())
    assert st_.std == pytest.approx(both.std())
    assert st_.count == both.size


def _mel(t, seed=0):
    g = torch.Generator().manual_seed(seed)
    return F.MelFrames(torch.randn(t, 128, generator=g).numpy(), norm_applied=True)


def test_frame_embed_halves_length():
    seq = F.frame_embed(_mel(101), 32)
    assert seq.data.shape == (51, 32)
    assert seq.framerate == 50.0 and seq.effective_rate == 50.0


def test_patch_embed_token_count_and_rate():
    seq = F.patch_embed(_mel(100), 32)
    assert seq.data.shape == (6 * 8, 32)
    assert seq.framerate == 50.0
    assert seq.effective_rate == 6.25


def test_patch_flatten_order_is_time_major():
    pe = F.PatchEmbed(4)
    with torch.no_grad():
        pe.proj.weight.zero_()
        pe.proj.bias.zero_()
        pe.proj.weight[0, 1] = 1.0  # picks patch element (t=0, f=1)
        pe.proj.weight[1, 16] = 1.0  # picks patch element (t=1, f=0)
    pe.norm = torch.nn.Identity()
    mel = torch.zeros(1, 16, 128)
    mel[0, 0, 1] = 3.0
    mel[0, 1, 0] = -5.0
    mel[0, 0, 17] = 7.0  # second frequency patch
    out = pe(mel)
    assert out.shape == (1, 8, 4)
    assert out[0, 0, 0] == 3.0 and out[0, 0, 1] == -5.0
    assert out[0, 1, 0] == 7.0


def test_embedding_errors():
    with pytest.raises(ValueError, match="normalized"):
        F.frame_embed(F.MelFrames(np.zeros((10, 128), np.float32)), 8)
    with pytest.raises(ValueError):
        F.frame_embed(_mel(1), 8)
    with pytest.raises(ValueError):
        F.patch_embed(_mel(15), 8)
    a = F.frame_embed(_mel(40), 16)
    with pytest.raises(ValueError, match="framerate"):
        F.fuse_features(a, F.FeatureSequence(a.data, 25.0, "patch"))
    with pytest.raises(ValueError, match="dimension"):
        F.fuse_features(a, F.FeatureSequence(a.data[:, :8], 50.0, "patch"))


def test_fuse_truncates_to_shorter():
    a = F.frame_embed(_mel(64), 16)
    b = F.patch_embed(_mel(64), 16)
    fused = F.fuse_features(a, b)
    assert len(fused) == min(len(a), len(b)) == 32
    torch.testing.assert_close(fused.data, a.data[:32] + b.data[:32])


def test_frontend_padding_is_invisible():
    fe = F.AudioFrontend(16, "fused")
    mel = torch.randn(1, 70, 128)
    padded = torch.cat([mel, torch.randn(1, 30, 128)], dim=1)
    x1, m1 = fe(mel)
    x2, m2 = fe(padded, torch.tensor([70]))
    n = x1.shape[1]
    torch.testing.assert_close(x2[:, :n], x1)
    assert not m2[0, :n].any() and m2[0, n:].all()


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 300))
def test_frame_embed_length_property(t):
    assert F.FrameEmbed.output_length(t) == math.ceil(t / 2)
    seq = F.frame_embed(_mel(t), 8)
    assert len(seq) == math.ceil(t / 2)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 5.0))
def test_logmel_gain_shifts_by_log_power(gain):
    x = np.random.default_rng(0).standard_normal(1200) * 0.1
    a = F.compute_logmel(x).data
    b = F.compute_logmel(x * gain).data
    np.testing.assert_allclose(b - a, 2 * math.log(gain), atol=1e-3)
