import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from audistill import tensorio
from audistill import teachers as T
from audistill.encoder import LayerTapSet
from audistill.frontend import MelFrames, NormStats, compute_logmel, n_mel_frames


def _mel(t, seed=0):
    g = torch.Generator().manual_seed(seed)
    return MelFrames(torch.randn(t, 128, generator=g).numpy() * 0.5, norm_applied=True)


def test_pooling_pairwise_means():
    x = np.arange(10, dtype=np.float64).reshape(5, 2)
    np.testing.assert_array_equal(T.adapt_framerate(x), [[1, 2], [5, 6]])
    t = torch.arange(12.0).reshape(1, 6, 2)
    torch.testing.assert_close(T.adapt_framerate(t), torch.tensor([[[1.0, 2.0], [5.0, 6.0], [9.0, 10.0]]]))
    with pytest.raises(ValueError):
        T.adapt_framerate(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        T.adapt_framerate(np.zeros((4, 3)), kernel=3)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(1, 5)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_pooling_property(x):
    y = T.adapt_framerate(x)
    assert y.shape == (x.shape[0] // 2, x.shape[1])
    np.testing.assert_allclose(y, (x[0 : 2 * len(y) : 2] + x[1 : 2 * len(y) : 2]) / 2)
    np.testing.assert_allclose(y.mean(axis=0) * len(y) * 2, x[: 2 * len(y)].sum(axis=0), atol=1e-6)


def test_ten_second_alignment():
    n_tok = (n_mel_frames(160000) + 1) // 2
    assert n_tok == 499
    taps = LayerTapSet(taps={1: torch.randn(1, n_tok, 4)}, final=torch.randn(1, n_tok, 4),
                       pad_mask=torch.zeros(1, n_tok, dtype=torch.bool))
    out = T.align_student_to_teacher(taps, 25.0)
    assert out.final.shape[1] == 249 and out.taps[1].shape[1] == 249 and out.pad_mask.shape[1] == 249
    same = T.align_student_to_teacher(taps, 50.0)
    assert same.final.shape[1] == 499
    with pytest.raises(ValueError):
        T.align_student_to_teacher(taps, 12.5)


def test_pad_mask_pooling_is_or():
    m = torch.tensor([[False, False, False, True, True, True]])
    assert T.pool_pad_mask(m).tolist() == [[False, True, True]]


def test_parse_teacher_specs():
    s = T.parse_teacher("synthetic:12x192@25:seed=4:std=0.2", "T2")
    assert (s.n_layers, s.target_dim, s.framerate, s.seed, s.init_std) == (12, 192, 25.0, 4, 0.2)
    with pytest.raises(ValueError):
        T.parse_teacher("synthetic:12", "T1")
    with pytest.raises(ValueError, match="framerate"):
        T.parse_teacher("synthetic:2x8@30", "T1")


def test_synthetic_teacher_is_frozen_and_deterministic():
    spec = T.TeacherSpec("T1", 3, 16, 50.0, seed=9)
    a, b = T.SyntheticTeacher(spec), T.SyntheticTeacher(spec)
    assert a.parameter_hash() == b.parameter_hash()
    assert all(not p.requires_grad for p in a.model.parameters())
    ta, tb = a.clip_targets(_mel(40), [1, 3]), b.clip_targets(_mel(40), [1, 3])
    assert torch.equal(ta.layers[3], tb.layers[3])
    assert ta.layers[1].shape == (20, 16)


def test_25hz_teacher_pools_its_features():
    spec50 = T.TeacherSpec("T", 2, 8, 50.0, seed=1)
    spec25 = T.TeacherSpec("T", 2, 8, 25.0, seed=1)
    f50 = T.SyntheticTeacher(spec50).clip_targets(_mel(41), [2]).layers[2]
    f25 = T.SyntheticTeacher(spec25).clip_targets(_mel(41), [2]).layers[2]
    assert f50.shape[0] == 21 and f25.shape[0] == 10
    torch.testing.assert_close(f25, T.adapt_framerate(f50))


def test_batched_targets_match_single_clip():
    t = T.SyntheticTeacher(T.TeacherSpec("T", 2, 8, 25.0, seed=1))
    a, b = _mel(30, 1), _mel(44, 2)
    mel = torch.zeros(2, 44, 128)
    mel[0, :30] = torch.from_numpy(a.data)
    mel[1] = torch.from_numpy(b.data)
    batch = t.batch_targets(mel, torch.tensor([30, 44]), [1, 2])
    assert batch.lengths.tolist() == [7, 11]
    single = t.clip_targets(a, [2]).layers[2]
    torch.testing.assert_close(batch.layers[2][0, :7], single, atol=1e-5, rtol=1e-5)


def test_raw_mel_needs_stats():
    t = T.SyntheticTeacher(T.TeacherSpec("T", 1, 8))
    raw = compute_logmel(np.random.default_rng(0).standard_normal(4000) * 0.1)
    with pytest.raises(ValueError, match="NormStats"):
        t.clip_targets(raw, [1])
    t2 = T.SyntheticTeacher(T.TeacherSpec("T", 1, 8), NormStats(-5.0, 3.0))
    assert t2.clip_targets(raw, [1]).layers[1].shape[0] == (raw.n_frames + 1) // 2


def test_dump_round_trip(tmp_path):
    spec = T.TeacherSpec("T", 3, 8, 25.0, seed=2)
    teacher = T.SyntheticTeacher(spec)
    clips = [("a", _mel(40, 1)), ("b", _mel(60, 2))]
    T.write_teacher_dump(teacher, clips, [1, 3], tmp_path / "dump")
    dspec = T.parse_teacher(f"dump:{tmp_path / 'dump'}", "T1")
    assert (dspec.n_layers, dspec.target_dim, dspec.framerate) == (3, 8, 25.0)
    dump = T.DumpTeacher(dspec)
    direct = teacher.clip_targets(clips[1][1], [3]).layers[3]
    assert torch.equal(T.teacher_targets(dspec, "b", [3], teacher=dump).layers[3], direct)
    batch = dump.batch_targets_for(["a", "b"], [1, 3])
    assert batch.lengths.tolist() == [10, 15]
    with pytest.raises(ValueError, match="lacks layers"):
        dump.clip_targets("a", [2])
    with pytest.raises(KeyError):
        dump.clip_targets("zzz", [1])


def test_dump_detects_dimension_mismatch(tmp_path):
    teacher = T.SyntheticTeacher(T.TeacherSpec("T", 2, 8, 50.0))
    T.write_teacher_dump(teacher, [("a", _mel(20))], [1, 2], tmp_path)
    entry = next(iter(T.read_dump_index(tmp_path)["clips"].values()))
    tensorio.write_features(tmp_path / entry["path"], np.zeros((2, 10, 7), np.float32), 50.0)
    dump = T.DumpTeacher(T.parse_teacher(f"dump:{tmp_path}", "T"))
    with pytest.raises(tensorio.FormatError, match="dims"):
        dump.clip_targets("a", [1])


def test_feature_file_round_trip_and_corruption(tmp_path):
    x = np.random.default_rng(0).standard_normal((2, 5, 3)).astype(np.float32)
    p = tmp_path / "x.feat"
    tensorio.write_features(p, x, 25.0)
    y, rate = tensorio.read_features(p)
    assert rate == 25.0 and np.array_equal(x, y)
    raw = p.read_bytes()
    assert raw[:8] == b"USADFEAT"
    with pytest.raises(tensorio.FormatError):
        tensorio.decode_features(b"NOTMAGIC" + raw[8:])
    with pytest.raises(tensorio.FormatError):
        tensorio.decode_features(raw[:-4])


def test_container_round_trip(tmp_path):
    tensors = {"a.w": np.ones((2, 3), np.float32), "b": np.arange(4, dtype=np.float32)}
    tensorio.write_container(tmp_path / "c.ckpt", tensors, {"step": 3, "note": "x"})
    got, meta = tensorio.read_container(tmp_path / "c.ckpt")
    assert meta["step"] == 3 and set(got) == set(tensors)
    assert np.array_equal(got["b"], tensors["b"])
