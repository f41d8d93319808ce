"""Distillation training loop, schedule, checkpoints and weight averaging."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch

from . import tensorio
from .datapipe import ManifestEntry, batch_by_seconds, load_clip
from .distill import DistillHeads, DistillPlan, LossConfig, distill_step
from .encoder import AudioEncoder, EncoderConfig, count_flops
from .frontend import FrameEmbed, NormStats, compute_logmel, normalize
from .teachers import DumpTeacher, SyntheticTeacher, TeacherTargets, parameter_hash

log = logging.getLogger(__name__)

# backward pass costed as twice the forward
FLOPS_TRAIN_MULTIPLIER = 3


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "micro"
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_seconds: float = 32.0
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    grad_clip: float = 1.0
    checkpoint_every: int | None = None
    average_fractions: tuple[float, ...] = (0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)
    ema_decay: float = 0.98
    deterministic: bool = True
    prefetch: int = 2

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")

    @property
    def checkpoint_interval(self) -> int:
        if self.checkpoint_every:
            return self.checkpoint_every
        return max(self.total_steps // 20, 500)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["average_fractions"] = list(self.average_fractions)
        return d


# Reference training schedules; "micro" is a desk-scale preset for CI.
TRAIN_PRESETS = {
    "small_ablation": TrainConfig("small_ablation", 5e-4, 4_000, 150_000, 200.0),
    "small": TrainConfig("small", 8e-4, 8_000, 400_000, 800.0),
    "base": TrainConfig("base", 1e-3, 8_000, 400_000, 800.0),
    "large": TrainConfig("large", 1.5e-3, 8_000, 400_000, 800.0),
    "micro": TrainConfig("micro", 1e-3, 200, 2_000, 32.0),
}


def lr_at_step(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear warmup to ``peak`` at ``warmup``, then linear decay to 0 at ``total``."""
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    return peak * (total - step) / (total - warmup)


class TrainingDiverged(RuntimeError):
    pass


class ClipStore:
    """Normalized log-Mel matrices by clip id, computed once and cached.

    Clips come either from manifest entries on disk or from in-memory
    waveforms passed as ``waveforms``.
    """

    def __init__(self, entries: Sequence[ManifestEntry], norm_stats: NormStats,
                 waveforms: Mapping[str, np.ndarray] | None = None, root=None):
        self.entries = list(entries)
        self.norm_stats = norm_stats
        self._waveforms = dict(waveforms or {})
        self._root = root
        self._mels: dict[str, np.ndarray] = {}
        self._by_id = {e.clip_id: e for e in self.entries}
        self._lock = threading.Lock()

    def mel(self, clip_id: str) -> np.ndarray:
        m = self._mels.get(clip_id)
        if m is None:
            wav = self._waveforms.get(clip_id)
            if wav is None:
                wav = load_clip(self._by_id[clip_id], self._root)
            m = normalize(compute_logmel(wav), self.norm_stats).data
            with self._lock:
                self._mels.setdefault(clip_id, m)
        return m

    def collate(self, clip_ids: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        mels = [self.mel(c) for c in clip_ids]
        t = max(m.shape[0] for m in mels)
        buf = np.zeros((len(mels), t, mels[0].shape[1]), dtype=np.float32)
        for i, m in enumerate(mels):
            buf[i, : m.shape[0]] = m
        return torch.from_numpy(buf), torch.tensor([m.shape[0] for m in mels])


class TargetProvider:
    """Batched teacher targets. Synthetic teachers are run per clip and
    cached so that targets do not depend on batch composition."""

    def __init__(self, teacher, layers: Sequence[int], store: ClipStore):
        self.teacher = teacher
        self.layers = list(layers)
        self.store = store
        self._cache: dict[str, dict[int, torch.Tensor]] = {}

    @property
    def framerate(self) -> float:
        return self.teacher.spec.framerate

    def _clip(self, clip_id: str) -> dict[int, torch.Tensor]:
        hit = self._cache.get(clip_id)
        if hit is None:
            mel = torch.from_numpy(self.store.mel(clip_id))[None]
            out = self.teacher.batch_targets(mel, torch.tensor([mel.shape[1]]), self.layers)
            hit = {l: v[0] for l, v in out.layers.items()}
            self._cache[clip_id] = hit
        return hit

    def batch(self, clip_ids: Sequence[str]) -> TeacherTargets:
        if isinstance(self.teacher, DumpTeacher):
            return self.teacher.batch_targets_for(clip_ids, self.layers)
        items = [self._clip(c) for c in clip_ids]
        t = max(next(iter(i.values())).shape[0] for i in items)
        out = {}
        for l in self.layers:
            d = items[0][l].shape[-1]
            buf = torch.zeros(len(items), t, d)
            for i, it in enumerate(items):
                buf[i, : it[l].shape[0]] = it[l]
            out[l] = buf
        lengths = torch.tensor([next(iter(i.values())).shape[0] for i in items])
        return TeacherTargets(out, self.framerate, lengths)


def _prefetch(it: Iterator, depth: int) -> Iterator:
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in it:
                q.put(item)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while (item := q.get()) is not done:
        yield item


def config_hash(payload: Mapping) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _rng_to_tensor(state: torch.Tensor) -> np.ndarray:
    return state.numpy().astype(np.float32)


def save_checkpoint(path, *, step: int, student: AudioEncoder, heads: DistillHeads,
                    optimizer: torch.optim.Optimizer | None, meta: Mapping) -> Path:
    tensors = {f"student.{k}": v.detach().numpy() for k, v in student.state_dict().items()}
    tensors.update({f"heads.{k}": v.detach().numpy() for k, v in heads.state_dict().items()})
    if optimizer is not None:
        names = _param_names(student, heads)
        state = optimizer.state_dict()["state"]
        for idx, st in state.items():
            for key, val in st.items():
                tensors[f"optim.{names[idx]}.{key}"] = torch.as_tensor(val).detach().numpy()
        tensors["rng.torch"] = _rng_to_tensor(torch.get_rng_state())
    full_meta = dict(meta)
    full_meta["step"] = step
    tensorio.write_container(path, tensors, full_meta)
    return Path(path)


def _param_names(student: AudioEncoder, heads: DistillHeads) -> list[str]:
    return [f"student.{n}" for n, _ in student.named_parameters()] + [f"heads.{n}" for n, _ in heads.named_parameters()]


def load_checkpoint(path):
    """``(tensors, meta)`` straight from the container."""
    return tensorio.read_container(path)


def _split(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, torch.Tensor]:
    return {k[len(prefix) :]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}


def restore(path, student: AudioEncoder, heads: DistillHeads, optimizer: torch.optim.Optimizer | None = None,
            expected_hash: str | None = None) -> dict:
    tensors, meta = load_checkpoint(path)
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise ValueError(f"config hash mismatch on resume: checkpoint {meta.get('config_hash')} vs run {expected_hash}")
    student.load_state_dict(_split(tensors, "student."))
    heads.load_state_dict(_split(tensors, "heads."))
    if optimizer is not None:
        names = _param_names(student, heads)
        sd = optimizer.state_dict()
        state = {}
        for idx, name in enumerate(names):
            entry = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arr = tensors.get(f"optim.{name}.{key}")
                if arr is not None:
                    entry[key] = torch.from_numpy(arr.copy())
            if entry:
                state[idx] = entry
        optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})
        if "rng.torch" in tensors:
            torch.set_rng_state(torch.from_numpy(tensors["rng.torch"].astype(np.uint8)))
    return meta


def average_checkpoints(paths: Sequence) -> tuple[dict[str, np.ndarray], dict]:
    """Arithmetic mean of every student/head tensor; optimizer state dropped."""
    if not paths:
        raise ValueError("average_checkpoints needs at least one checkpoint")
    acc: dict[str, np.ndarray] = {}
    meta0 = None
    for p in paths:
        tensors, meta = load_checkpoint(p)
        if meta0 is None:
            meta0 = meta
        elif meta.get("config_hash") != meta0.get("config_hash"):
            raise ValueError(f"config mismatch: {p} has hash {meta.get('config_hash')}, expected {meta0.get('config_hash')}")
        for k, v in tensors.items():
            if k.startswith(("student.", "heads.")):
                acc[k] = acc.get(k, 0.0) + v.astype(np.float64)
    avg = {k: (v / len(paths)).astype(np.float32) for k, v in acc.items()}
    meta = {k: v for k, v in meta0.items() if k not in ("step",)}
    meta["averaged_from"] = [Path(p).name for p in paths]
    meta["step"] = max(load_checkpoint(p)[1]["step"] for p in paths) if len(paths) > 1 else meta0["step"]
    return avg, meta


def write_averaged(path, paths: Sequence) -> Path:
    tensors, meta = average_checkpoints(paths)
    tensorio.write_container(path, tensors, meta)
    return Path(path)


def averaging_window(steps: Sequence[int], total: int, fractions: Sequence[float]) -> list[int]:
    """Saved steps nearest to ``fractions * total``, deduplicated, in order."""
    if not steps:
        return []
    picked = []
    for f in fractions:
        target = f * total
        best = min(steps, key=lambda s: (abs(s - target), s))
        if best not in picked:
            picked.append(best)
    return sorted(picked)


@dataclass
class TrainResult:
    checkpoints: list[Path]
    log_path: Path
    losses: list[float]
    ema: list[float]
    flops_cum: float
    final_step: int
    averaged: Path | None = None
    teacher_hashes: dict[str, str] = field(default_factory=dict)


def run_payload(config: TrainConfig, plan: DistillPlan, student: AudioEncoder, loss_cfg: LossConfig,
                teachers: Mapping) -> dict:
    return {
        "train": config.to_dict(),
        "encoder": student.cfg.to_dict(),
        "extraction": student.extraction,
        "plan": plan.to_dict(),
        "loss": loss_cfg.to_dict(),
        "teachers": {k: t.spec.key for k, t in teachers.items()},
    }


def validate(plan: DistillPlan, student: AudioEncoder, heads: DistillHeads, teachers: Mapping) -> None:
    if list(plan.teacher_layers) != list(teachers):
        raise ValueError(f"plan teachers {plan.teachers} != provided teachers {list(teachers)}")
    if max(plan.student_layers) > student.cfg.n_layers:
        raise ValueError("plan references student layers beyond the encoder depth")
    for slot, t in teachers.items():
        if max(plan.teacher_layers[slot]) > t.spec.n_layers:
            raise ValueError(f"plan references layers beyond teacher {slot} depth {t.spec.n_layers}")
        for k in range(1, plan.K + 1):
            d = heads.head(slot, k)[-1].out_features
            if d != t.spec.target_dim:
                raise ValueError(f"head ({slot}, k={k}) outputs {d}, teacher dim is {t.spec.target_dim}")


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + step)


def _batch_stream(entries, budget, seed, start_epoch: int, start_index: int):
    epoch, index = start_epoch, start_index
    while True:
        batches = batch_by_seconds(entries, budget, seed, epoch)
        while index < len(batches):
            yield epoch, index, batches[index]
            index += 1
        epoch, index = epoch + 1, 0


def train(config: TrainConfig, plan: DistillPlan, student: AudioEncoder, heads: DistillHeads,
          teachers: Mapping, data: ClipStore, loss_cfg: LossConfig, out_dir, *,
          resume: str | Path | None = None, stop_after: int | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run (or resume) distillation, writing checkpoints and a JSONL metric log to ``out_dir``."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    validate(plan, student, heads, teachers)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    run_hash = config_hash(run_payload(config, plan, student, loss_cfg, teachers))

    params = list(student.parameters()) + list(heads.parameters())
    optimizer = torch.optim.AdamW(params, lr=0.0, betas=config.betas, eps=config.eps,
                                  weight_decay=config.weight_decay)
    providers = {slot: TargetProvider(t, plan.teacher_layers[slot], data) for slot, t in teachers.items()}
    teacher_hashes = {slot: _teacher_hash(t) for slot, t in teachers.items()}

    step, epoch, index = 0, 0, 0
    ema = None
    flops_cum = 0.0
    losses: list[float] = []
    emas: list[float] = []
    checkpoints: list[Path] = []
    log_path = out / "metrics.jsonl"
    if resume is not None:
        meta = restore(resume, student, heads, optimizer, expected_hash=run_hash)
        step = meta["step"]
        epoch, index = meta["data_pos"]
        ema, flops_cum = meta["ema"], meta["flops_cum"]
        checkpoints = [out / "checkpoints" / name for name in meta.get("checkpoints", [])]
        losses, emas = _replay_log(log_path, step, config.ema_decay)
    else:
        log_path.write_text("")

    stream = _batch_stream(data.entries, config.batch_seconds, config.seed, epoch, index)

    def load(item):
        ep, idx, batch = item
        ids = [e.clip_id for e in batch]
        mel, lengths = data.collate(ids)
        return ep, idx, ids, mel, lengths, {s: p.batch(ids) for s, p in providers.items()}

    loader = (load(item) for item in stream)
    if not config.deterministic and config.prefetch > 0:
        loader = _prefetch(loader, config.prefetch)

    end = config.total_steps if stop_after is None else min(stop_after, config.total_steps)
    student.train()
    heads.train()
    interval = config.checkpoint_interval

    def meta_for(s, ep, idx):
        return {"config_hash": run_hash, "config": run_payload(config, plan, student, loss_cfg, teachers),
                "data_pos": [ep, idx], "ema": ema, "flops_cum": flops_cum,
                "checkpoints": [p.name for p in checkpoints], "norm_stats": data.norm_stats.to_dict(),
                "format": "audistill-checkpoint"}

    with open(log_path, "a") as log_fh:
        while step < end:
            t0 = time.perf_counter()
            ep, idx, ids, mel, lengths, targets = next(loader)
            step += 1
            lr = lr_at_step(step, config.warmup_steps, config.total_steps, config.peak_lr)
            for g in optimizer.param_groups:
                g["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            result = distill_step(student, heads, plan, mel, lengths, targets, loss_cfg,
                                  _step_generator(config.seed, step))
            loss = result.loss.item()
            if not math.isfinite(loss):
                snap = {"step": step, "lr": lr, "clip_ids": ids, "layer_means": result.layer_means.tolist()}
                (out / "nan_snapshot.json").write_text(json.dumps(snap, indent=1))
                save_checkpoint(out / "nan_snapshot.ckpt", step=step, student=student, heads=heads,
                                optimizer=None, meta=meta_for(step, ep, idx + 1))
                raise TrainingDiverged(f"non-finite loss {loss} at step {step}; snapshot in {out}")
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            ema = loss if ema is None else config.ema_decay * ema + (1 - config.ema_decay) * loss
            tokens = student.frontend.output_lengths(lengths)
            flops_cum += FLOPS_TRAIN_MULTIPLIER * sum(
                count_flops(student.cfg, int(t), student.extraction).total for t in tokens)
            losses.append(loss)
            emas.append(ema)
            rec = {"step": step, "loss": loss, "lr": lr, "flops_cum": flops_cum,
                   "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            log_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(step, loss)
            if step % interval == 0 or step == config.total_steps:
                p = out / "checkpoints" / f"step{step:07d}.ckpt"
                checkpoints.append(p)
                save_checkpoint(p, step=step, student=student, heads=heads, optimizer=optimizer,
                                meta=meta_for(step, ep, idx + 1))
        if step < config.total_steps and (not checkpoints or checkpoints[-1].name != f"step{step:07d}.ckpt"):
            p = out / "checkpoints" / f"step{step:07d}.ckpt"
            checkpoints.append(p)
            save_checkpoint(p, step=step, student=student, heads=heads, optimizer=optimizer,
                            meta=meta_for(step, ep, idx + 1))

    for slot, t in teachers.items():
        if _teacher_hash(t) != teacher_hashes[slot]:
            raise RuntimeError(f"teacher {slot} changed during training")

    averaged = None
    if step == config.total_steps:
        saved = {int(p.stem[4:]): p for p in checkpoints}
        window = averaging_window(sorted(saved), config.total_steps, config.average_fractions)
        averaged = write_averaged(out / "averaged.ckpt", [saved[s] for s in window])
    return TrainResult(checkpoints, log_path, losses, emas, flops_cum, step, averaged, teacher_hashes)


def _replay_log(log_path: Path, step: int, decay: float) -> tuple[list[float], list[float]]:
    """Drop log records past ``step`` and rebuild the loss/EMA history."""
    recs = []
    if log_path.exists():
        recs = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
    recs = [r for r in recs if r["step"] <= step]
    log_path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    losses, emas, ema = [], [], None
    for r in recs:
        ema = r["loss"] if ema is None else decay * ema + (1 - decay) * r["loss"]
        losses.append(r["loss"])
        emas.append(ema)
    return losses, emas


def _teacher_hash(teacher) -> str:
    if isinstance(teacher, SyntheticTeacher):
        return teacher.parameter_hash()
    idx = json.dumps(teacher.index, sort_keys=True).encode()
    return hashlib.sha256(idx).hexdigest()


def build_student(encoder_cfg: EncoderConfig, extraction: str, loss_cfg: LossConfig, seed: int) -> AudioEncoder:
    return AudioEncoder(encoder_cfg, extraction, seed=seed, mask_embedding=loss_cfg.masking != "none")


def load_student(path) -> tuple[AudioEncoder, dict]:
    """Rebuild the student encoder stored in a checkpoint (heads ignored)."""
    tensors, meta = load_checkpoint(path)
    cfg = meta["config"]
    enc = EncoderConfig(**cfg["encoder"])
    masking = cfg["loss"]["masking"] != "none"
    model = AudioEncoder(enc, cfg["extraction"], mask_embedding=masking)
    model.load_state_dict(_split(tensors, "student."))
    model.eval()
    return model, meta
