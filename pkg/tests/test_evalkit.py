import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from audistill import evalkit as V
from audistill.encoder import AudioEncoder, EncoderConfig
from audistill.frontend import NormStats
from audistill.teachers import parameter_hash


@pytest.fixture(scope="module")
def model():
    return AudioEncoder(EncoderConfig(16, 2, 2, conv_pos_groups=4, dropout=0.0), seed=0).eval()


def _mels(n, t=40, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(t + i, 128, generator=g).numpy() for i in range(n)]


def test_one_hot_final_layer_equals_final_output(model):
    mels = _mels(2)
    feats = V.extract_representations(model, mels, "frame", layer_weights=2)
    with torch.no_grad():
        ref = model(torch.from_numpy(mels[0])[None]).final[0].numpy()
    np.testing.assert_allclose(feats[0], ref, rtol=1e-6, atol=1e-6)


def test_instance_pooling_is_mean_of_frames(model):
    mels = _mels(3)
    frames = V.extract_representations(model, mels, "frame")
    inst = V.extract_representations(model, mels, "instance")
    assert inst.shape == (3, 3, 16)
    np.testing.assert_allclose(inst[1], frames[1].mean(axis=0), rtol=1e-5, atol=1e-6)


def test_uniform_weights_over_identical_layers():
    stacks = np.repeat(np.random.default_rng(0).standard_normal((4, 1, 6)), 3, axis=1)
    np.testing.assert_allclose(V.combine_layers(stacks, np.full(3, 1 / 3)), stacks[:, 0], rtol=1e-6)
    np.testing.assert_allclose(V.combine_layers(stacks, 2), stacks[:, 2], rtol=1e-6)
    with pytest.raises(ValueError):
        V.combine_layers(stacks, np.ones(2))


def test_constant_sequence_pools_to_constant():
    seq = np.tile(np.arange(5.0), (13, 1))
    np.testing.assert_array_equal(V.pool_frames(seq), np.arange(5.0))


def test_parse_layer_weights():
    assert V.parse_layer_weights("softmax", 12) is None
    assert V.parse_layer_weights("one-hot:12", 12) == 12
    with pytest.raises(ValueError):
        V.parse_layer_weights("one-hot:13", 12)
    with pytest.raises(ValueError):
        V.parse_layer_weights("mean", 12)


def _separable(n, seed, dim=10):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, dim))
    x[:, 0] += np.where(y == 1, 3.0, -3.0)
    return x.astype(np.float32), y


def test_separable_instances_are_learned():
    x, y = _separable(200, 0)
    res = V.train_probe(x, y, "instance", seed=0)
    assert res.metric >= 0.95


def test_shuffled_labels_give_chance():
    x, y = _separable(400, 1)
    y = np.random.default_rng(5).permutation(y)
    res = V.train_probe(x, y, "instance", seed=0)
    assert abs(res.metric - 0.5) <= 0.10


def test_duplicated_training_set_gives_same_decision_function():
    x, y = _separable(100, 2)
    a = V.fit_linear_probe(x, y, seed=0)
    b = V.fit_linear_probe(np.concatenate([x, x]), np.concatenate([y, y]), seed=0)
    xt, _ = _separable(50, 3)
    za = a.probe(torch.from_numpy(((V._as_stacks(xt) - a.mean) / a.std).astype(np.float32)))
    zb = b.probe(torch.from_numpy(((V._as_stacks(xt) - b.mean) / b.std).astype(np.float32)))
    torch.testing.assert_close(za, zb, atol=1e-4, rtol=1e-4)


def test_single_class_labels_raise():
    with pytest.raises(ValueError, match="single class"):
        V.train_probe(np.zeros((10, 3)), np.zeros(10, int), "instance")
    with pytest.raises(ValueError, match="single class"):
        V.train_probe([np.zeros((5, 3))] * 4, [np.ones(5, int)] * 4, "frame")


def test_frame_probe_checks_alignment_and_learns():
    rng = np.random.default_rng(0)
    feats, labels = [], []
    for _ in range(20):
        y = rng.integers(0, 3, 30)
        x = rng.standard_normal((30, 6)) * 0.3
        x[np.arange(30), y] += 2.0
        feats.append(x.astype(np.float32))
        labels.append(y)
    assert V.train_probe(feats, labels, "frame").metric >= 0.95
    with pytest.raises(ValueError, match="misaligned"):
        V.train_probe(feats, [l[:-1] for l in labels], "frame")


def test_softmax_layer_weights_prefer_informative_layer():
    x, y = _separable(200, 4)
    noise = np.random.default_rng(9).standard_normal(x.shape).astype(np.float32)
    stacks = np.stack([noise, x, noise], axis=1)
    res = V.train_probe(stacks, y, "instance", seed=0)
    assert res.metric >= 0.95
    assert np.argmax(res.layer_weights) == 1
    assert res.layer_weights.sum() == pytest.approx(1.0, abs=1e-6)


def _table(*rows):
    return V.ScoreTable({f"t{i}": V.TaskScore(*r) for i, r in enumerate(rows)})


def test_superb_score_examples():
    assert V.superb_score(_table((100, 0, 100), (0.9, 0.5, 0.9))) == pytest.approx(1000)
    assert V.superb_score(_table((0, 0, 100), (0.5, 0.5, 0.9))) == pytest.approx(0)
    assert V.superb_score(_table((50, 0, 100))) == pytest.approx(500)
    assert V.superb_score(_table((10, 20, 5, "lower_better"))) == pytest.approx(666.67, abs=0.01)
    with pytest.raises(ValueError, match="degenerate anchor"):
        V.superb_score(_table((1, 2, 2)))


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10),
       st.floats(0.1, 10).flatmap(lambda a: st.sampled_from([a, -a])), st.floats(-100, 100))
def test_superb_affine_invariance(s, b, sota, a, off):
    if abs(sota - b) < 1e-3:
        return
    base = V.superb_score(_table((s, b, sota), (0.7, 0.2, 0.9)))
    moved = V.superb_score(_table((a * s + off, a * b + off, a * sota + off), (0.7, 0.2, 0.9)))
    assert moved == pytest.approx(base, abs=1e-9 * max(1.0, abs(base)) * 1e3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 0.4), st.floats(0.6, 1)), min_size=1, max_size=6),
       st.randoms())
def test_superb_permutation_invariance(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    assert V.superb_score(_table(*rows)) == pytest.approx(V.superb_score(_table(*shuffled)), abs=1e-9)


def test_superb_monotone_in_each_task():
    lo = V.superb_score(_table((10, 20, 5, "lower_better"), (0.6, 0.5, 0.9)))
    hi = V.superb_score(_table((9, 20, 5, "lower_better"), (0.6, 0.5, 0.9)))
    assert hi > lo


def test_task_direction_invariant():
    with pytest.raises(ValueError):
        V.ProbeTask("asr", "frame", metric="wer", direction="higher_better")
    V.ProbeTask("asr", "frame", metric="wer", direction="lower_better")


def test_results_csv_and_report(tmp_path):
    rows = [{"model": m, "task": t, "metric": "accuracy", "value": v, "baseline": 0.5, "sota": 1.0,
             "direction": "higher_better", "layers": "one-hot:2"}
            for m, t, v in [("avg", "a", 0.75), ("avg", "b", 1.0), ("final", "a", 0.5), ("final", "b", 0.5)]]
    V.write_results(tmp_path / "r.csv", rows)
    back = V.read_results(tmp_path / "r.csv")
    tables = V.tables_from_results(back)
    assert V.superb_score(tables["avg"]) == pytest.approx(750)
    report = V.markdown_report(back)
    assert "| avg |" in report and "| final |" in report and "one-hot:2" in report


def test_read_anchors(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("task,baseline,sota\nx,0.1,0.9\n")
    assert V.read_anchors(p) == {"x": (0.1, 0.9, "higher_better")}
    p.write_text("task,baseline,sota\nx,0.5,0.5\n")
    with pytest.raises(ValueError, match="degenerate anchor"):
        V.read_anchors(p)
    with pytest.raises(FileNotFoundError):
        V.read_anchors(tmp_path / "missing.csv")


def test_task_suite_leaves_model_untouched(model):
    tasks = (V.ProbeTask("domain_id", "instance", dataset="synth.domain_id_task", seed=1, size=6),
             V.ProbeTask("frame_source", "frame", dataset="synth.frame_task", seed=2, size=4))
    anchors = {"domain_id": (0.5, 1.0, "higher_better"), "frame_source": (0.33, 1.0, "higher_better")}
    before = parameter_hash(model)
    rows = V.run_task_suite(model, NormStats(-5.0, 4.0), anchors, tasks, layers="one-hot:1")
    assert parameter_hash(model) == before
    assert [r["task"] for r in rows] == ["domain_id", "frame_source"]
    assert all(0.0 <= r["value"] <= 1.0 for r in rows)
    with pytest.raises(KeyError):
        V.run_task_suite(model, NormStats(-5.0, 4.0), {}, tasks)
