"""Frozen-encoder probing and SUPERB-style score aggregation.

Representations are the block outputs of every layer of a frozen encoder,
combined either by a one-hot layer choice or by learnable softmax weights
trained jointly with a linear probe. Instance tasks mean-pool over valid
frames; frame tasks classify every 50 Hz frame.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import synth
from .encoder import AudioEncoder
from .frontend import NormStats, compute_logmel, normalize
from .teachers import parameter_hash

Granularity = Literal["frame", "instance"]
Direction = Literal["higher_better", "lower_better"]


@dataclass(frozen=True)
class ProbeTask:
    name: str
    granularity: Granularity
    metric: str = "accuracy"
    direction: Direction = "higher_better"
    dataset: str = ""
    seed: int = 0
    size: int = 100

    def __post_init__(self):
        lower = {"wer", "per", "der", "error", "error_rate"}
        expected = "lower_better" if self.metric.lower() in lower else "higher_better"
        if self.direction != expected:
            raise ValueError(f"metric {self.metric!r} should be {expected}, got {self.direction}")


DEFAULT_TASKS = (
    ProbeTask("frame_source", "frame", dataset="synth.frame_task", seed=101, size=60),
    ProbeTask("domain_id", "instance", dataset="synth.domain_id_task", seed=102, size=120),
    ProbeTask("channel_id", "instance", dataset="synth.channel_id_task", seed=103, size=40),
)


def load_task(task: ProbeTask):
    if task.dataset == "synth.frame_task":
        return synth.frame_task(task.size, task.seed)
    if task.dataset == "synth.domain_id_task":
        return synth.domain_id_task(task.size, task.seed)
    if task.dataset == "synth.channel_id_task":
        return synth.channel_id_task(task.size, task.seed)
    raise ValueError(f"unknown task dataset {task.dataset!r}")


@torch.no_grad()
def layer_stack(model: AudioEncoder, mel: np.ndarray) -> np.ndarray:
    """[T, L + 1, d] block outputs (index 0 = after positional encoding)."""
    was_training = model.training
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(mel))[None]
    out = model(x, None, keep_hidden=True)
    model.train(was_training)
    return torch.stack([out.hidden[l][0] for l in sorted(out.hidden)], dim=1).numpy()


def parse_layer_weights(spec: str | int | None, n_layers: int) -> int | None:
    """``None``/"softmax" -> learnable weights; ``one-hot:l`` or int -> that layer."""
    if spec is None or spec == "softmax":
        return None
    if isinstance(spec, str):
        if not spec.startswith("one-hot:"):
            raise ValueError(f"layer weights must be 'softmax' or 'one-hot:<layer>', got {spec!r}")
        spec = int(spec.split(":", 1)[1])
    if not 0 <= spec <= n_layers:
        raise ValueError(f"one-hot layer {spec} outside [0, {n_layers}]")
    return int(spec)


def extract_representations(model: AudioEncoder, mels: Sequence[np.ndarray], granularity: Granularity,
                            layer_weights: int | np.ndarray | None = None):
    """Per-clip features from a frozen model.

    Returns layer stacks ([N, L+1, d] for instance tasks, a list of [T, L+1, d]
    for frame tasks) when ``layer_weights`` is None; otherwise the stacks are
    collapsed with the given one-hot index or weight vector.
    """
    stacks = [layer_stack(model, m) for m in mels]
    if granularity == "instance":
        stacks = np.stack([pool_frames(s) for s in stacks])
    if layer_weights is None:
        return stacks
    if granularity == "instance":
        return combine_layers(stacks, layer_weights)
    return [combine_layers(s, layer_weights) for s in stacks]


def pool_frames(frames: np.ndarray) -> np.ndarray:
    """Mean over the leading (time) axis."""
    return np.asarray(frames).mean(axis=0)


def combine_layers(stacks: np.ndarray, weights: int | np.ndarray) -> np.ndarray:
    """Weighted sum over the layer axis (second to last) of ``[..., L, d]``."""
    n_layers = stacks.shape[-2]
    if isinstance(weights, (int, np.integer)):
        w = np.zeros(n_layers)
        w[int(weights)] = 1.0
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n_layers,):
            raise ValueError(f"need {n_layers} layer weights, got shape {w.shape}")
    return np.einsum("...ld,l->...d", stacks, w).astype(np.float32)


class LinearProbe(nn.Module):
    def __init__(self, n_layers: int, dim: int, n_classes: int, one_hot: int | None):
        super().__init__()
        self.one_hot = one_hot
        self.layer_logits = nn.Parameter(torch.zeros(n_layers))
        self.linear = nn.Linear(dim, n_classes)

    def layer_weights(self) -> torch.Tensor:
        if self.one_hot is not None:
            return F.one_hot(torch.tensor(self.one_hot), self.layer_logits.shape[0]).to(self.layer_logits.dtype)
        return self.layer_logits.softmax(0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [N, L, d]
        return self.linear(torch.einsum("nld,l->nd", x, self.layer_weights()))


@dataclass
class ProbeResult:
    metric: float
    probe: LinearProbe
    mean: np.ndarray
    std: np.ndarray
    layer_weights: np.ndarray
    train_metric: float = float("nan")

    def predict(self, stacks: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(((stacks - self.mean) / self.std).astype(np.float32))
        with torch.no_grad():
            return self.probe(x).argmax(-1).numpy()


def _as_stacks(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return x[:, None, :] if x.ndim == 2 else x


def fit_linear_probe(x_train: np.ndarray, y_train: np.ndarray, one_hot: int | None = None, epochs: int = 300,
                     lr: float = 0.05, weight_decay: float = 1e-3, seed: int = 0) -> ProbeResult:
    """Full-batch Adam on mean cross-entropy plus an L2 penalty."""
    x_train = _as_stacks(x_train)
    y_train = np.asarray(y_train)
    classes = np.unique(y_train)
    if classes.size < 2:
        raise ValueError("probe labels contain a single class")
    mean = x_train.mean(axis=0, keepdims=True)
    std = x_train.std(axis=0, keepdims=True) + 1e-6
    x = torch.from_numpy((x_train - mean) / std)
    y = torch.from_numpy(y_train.astype(np.int64))
    torch.manual_seed(seed)
    probe = LinearProbe(x.shape[1], x.shape[2], int(y_train.max()) + 1, one_hot)
    nn.init.zeros_(probe.linear.weight)
    nn.init.zeros_(probe.linear.bias)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = F.cross_entropy(probe(x), y) + weight_decay * probe.linear.weight.square().sum()
        loss.backward()
        opt.step()
    res = ProbeResult(float("nan"), probe, mean, std, probe.layer_weights().detach().numpy())
    res.train_metric = float((res.predict(x_train) == y_train).mean())
    return res


def _split(n: int, labels: np.ndarray, seed: int, train_frac: float):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(train_frac * idx.size))
        train.extend(idx[:k])
        test.extend(idx[k:])
    return np.sort(train), np.sort(test)


def train_probe(features, labels, granularity: Granularity, one_hot: int | None = None, seed: int = 0,
                train_frac: float = 0.5, **fit_kw) -> ProbeResult:
    """Split by clip, fit a linear probe, and return held-out accuracy."""
    if granularity == "instance":
        x = _as_stacks(features)
        y = np.asarray(labels)
        if np.unique(y).size < 2:
            raise ValueError("probe labels contain a single class")
        tr, te = _split(len(y), y, seed, train_frac)
        res = fit_linear_probe(x[tr], y[tr], one_hot, seed=seed, **fit_kw)
        res.metric = float((res.predict(x[te]) == y[te]).mean())
        return res
    if len(features) != len(labels):
        raise ValueError("frame task needs one label vector per clip")
    for f, l in zip(features, labels):
        if len(f) != len(l):
            raise ValueError(f"frame labels ({len(l)}) misaligned with features ({len(f)})")
    all_labels = np.concatenate(labels)
    if np.unique(all_labels).size < 2:
        raise ValueError("probe labels contain a single class")
    # split clips, not frames
    clip_ids = np.arange(len(features))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(clip_ids)
    k = int(round(train_frac * len(perm)))
    tr, te = np.sort(perm[:k]), np.sort(perm[k:])
    xtr = np.concatenate([_as_stacks(features[i]) for i in tr])
    ytr = np.concatenate([labels[i] for i in tr])
    res = fit_linear_probe(xtr, ytr, one_hot, seed=seed, **fit_kw)
    xte = np.concatenate([_as_stacks(features[i]) for i in te])
    yte = np.concatenate([labels[i] for i in te])
    res.metric = float((res.predict(xte) == yte).mean())
    return res


@dataclass(frozen=True)
class TaskScore:
    value: float
    baseline: float
    sota: float
    direction: Direction = "higher_better"


@dataclass
class ScoreTable:
    tasks: dict[str, TaskScore] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.tasks:
            raise ValueError("score table is empty")
        for name, t in self.tasks.items():
            if t.sota == t.baseline:
                raise ValueError(f"degenerate anchor for task {name!r}: baseline == SOTA == {t.sota}")


def superb_score(table: ScoreTable) -> float:
    """1000 / |tasks| * sum of (model - baseline) / (SOTA - baseline)."""
    table.validate()
    total = math.fsum((t.value - t.baseline) / (t.sota - t.baseline) for t in table.tasks.values())
    return 1000.0 * total / len(table.tasks)


def read_anchors(path) -> dict[str, tuple[float, float, str]]:
    """CSV with columns task, baseline, sota[, direction]."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"anchors file {p} not found")
    out = {}
    with open(p, newline="") as fh:
        for row in csv.DictReader(fh):
            baseline, sota = float(row["baseline"]), float(row["sota"])
            if baseline == sota:
                raise ValueError(f"degenerate anchor for task {row['task']!r}: baseline == SOTA")
            out[row["task"]] = (baseline, sota, row.get("direction") or "higher_better")
    return out


RESULT_FIELDS = ["model", "task", "metric", "value", "baseline", "sota", "direction", "layers"]


def write_results(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in RESULT_FIELDS})


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tables_from_results(rows: Sequence[Mapping]) -> dict[str, ScoreTable]:
    tables: dict[str, ScoreTable] = {}
    for r in rows:
        t = tables.setdefault(r.get("model") or "model", ScoreTable())
        t.tasks[r["task"]] = TaskScore(float(r["value"]), float(r["baseline"]), float(r["sota"]),
                                       r.get("direction") or "higher_better")
    return tables


def markdown_report(rows: Sequence[Mapping]) -> str:
    tables = tables_from_results(rows)
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    layers = sorted({r.get("layers", "") for r in rows if r.get("layers")})
    buf = io.StringIO()
    buf.write("| Model | " + " | ".join(tasks) + " | Score |\n")
    buf.write("|---|" + "---|" * len(tasks) + "---|\n")
    for model, table in tables.items():
        cells = [f"{table.tasks[t].value:.4g}" if t in table.tasks else "" for t in tasks]
        buf.write(f"| {model} | " + " | ".join(cells) + f" | {superb_score(table):.1f} |\n")
    if layers:
        buf.write(f"\nLayer selection: {', '.join(layers)}\n")
    return buf.getvalue()


def run_task_suite(model: AudioEncoder, norm_stats: NormStats, anchors: Mapping[str, tuple[float, float, str]],
                   tasks: Sequence[ProbeTask] = DEFAULT_TASKS, layers: str | None = None, model_name: str = "model",
                   seed: int = 0) -> list[dict]:
    """Probe every task and return result rows; the model must stay untouched."""
    before = parameter_hash(model)
    one_hot = parse_layer_weights(layers, model.cfg.n_layers)
    rows = []
    for task in tasks:
        if task.name not in anchors:
            raise KeyError(f"no anchors for task {task.name!r}")
        clips, labels = load_task(task)
        mels = [normalize(compute_logmel(c.waveform), norm_stats).data for c in clips]
        feats = extract_representations(model, mels, task.granularity)
        res = train_probe(feats, labels, task.granularity, one_hot=one_hot, seed=seed)
        baseline, sota, direction = anchors[task.name]
        rows.append({"model": model_name, "task": task.name, "metric": task.metric, "value": res.metric,
                     "baseline": baseline, "sota": sota, "direction": direction,
                     "layers": layers or "softmax"})
    if parameter_hash(model) != before:
        raise RuntimeError("probing modified encoder parameters")
    return rows
