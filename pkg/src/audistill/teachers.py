"""Frozen teacher targets.

Teachers are either precomputed activation dumps (one USADFEAT file per clip
plus a JSON index) or frozen, fixed-seed synthetic encoders built from
:mod:`audistill.encoder`. Either way the distiller only ever sees per-layer FFN
features at the teacher's native framerate.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import tensorio
from .encoder import AudioEncoder, EncoderConfig, LayerTapSet, check_tap_layers
from .frontend import TOKEN_FRAMERATE, MelFrames, NormStats, compute_logmel, normalize

SUPPORTED_RATES = (25.0, 50.0)
DUMP_INDEX = "index.json"
DUMP_FORMAT = "audistill-teacher-dump"


@dataclass(frozen=True)
class TeacherSpec:
    id: str
    n_layers: int
    target_dim: int
    framerate: float = 50.0
    source: Literal["dump", "synthetic"] = "synthetic"
    seed: int = 0
    path: str | None = None
    init_std: float = 0.02

    def __post_init__(self):
        if float(self.framerate) not in SUPPORTED_RATES:
            raise ValueError(f"teacher framerate must be 25 or 50 Hz, got {self.framerate}")
        if self.target_dim <= 0 or self.n_layers <= 0:
            raise ValueError("teacher depth and target dim must be positive")

    @property
    def key(self) -> str:
        """Identity string; stable across slot order (T1/T2)."""
        if self.source == "dump":
            return f"dump:{self.path}"
        return f"synthetic:{self.n_layers}x{self.target_dim}@{self.framerate:g}:seed={self.seed}:std={self.init_std:g}"

    def to_dict(self) -> dict:
        return asdict(self)


_SYNTH_RE = re.compile(r"^synthetic:(\d+)x(\d+)(?:@(\d+))?(?::seed=(\d+))?(?::std=([0-9.eE+-]+))?$")


def parse_teacher(text: str, slot: str, default_seed: int = 0) -> TeacherSpec:
    """Parse ``synthetic:LxD[@rate][:seed=N][:std=S]`` or ``dump:<dir>``."""
    text = text.strip()
    if text.startswith("dump:"):
        path = text[5:]
        index = read_dump_index(path)
        return TeacherSpec(slot, int(index["n_layers"]), int(index["dim"]), float(index["framerate"]),
                           "dump", path=path)
    m = _SYNTH_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse teacher spec {text!r}; expected synthetic:LxD[@rate] or dump:<dir>")
    layers, dim, rate, seed, std = m.groups()
    return TeacherSpec(slot, int(layers), int(dim), float(rate or 50), "synthetic",
                       seed=int(seed) if seed is not None else default_seed,
                       init_std=float(std) if std is not None else 0.02)


def adapt_framerate(seq, kernel: int = 2, stride: int = 2):
    """Mean-pool along the time axis (second to last); trailing odd row dropped."""
    if kernel != 2 or stride != 2:
        raise ValueError("only kernel=2, stride=2 pooling is supported")
    t = seq.shape[-2]
    if t < 2:
        raise ValueError(f"adapt_framerate needs at least 2 rows, got {t}")
    n = t // 2
    if isinstance(seq, torch.Tensor):
        x = seq[..., : 2 * n, :]
        return 0.5 * (x[..., 0::2, :] + x[..., 1::2, :])
    x = np.asarray(seq)[..., : 2 * n, :]
    return 0.5 * (x[..., 0::2, :] + x[..., 1::2, :])


def pool_pad_mask(pad_mask: torch.Tensor) -> torch.Tensor:
    """A pooled frame is padding if either source frame is."""
    n = pad_mask.shape[-1] // 2
    m = pad_mask[..., : 2 * n]
    return m[..., 0::2] | m[..., 1::2]


def align_student_to_teacher(student: LayerTapSet, teacher_rate: float, student_rate: float = TOKEN_FRAMERATE,
                             teacher_length: int | None = None) -> LayerTapSet:
    if float(student_rate) != 50.0 or float(teacher_rate) not in SUPPORTED_RATES:
        raise ValueError(f"unsupported rate pair: student {student_rate} Hz -> teacher {teacher_rate} Hz")
    taps, hidden, final, mask = student.taps, student.hidden, student.final, student.pad_mask
    if float(teacher_rate) == 25.0:
        taps = {l: adapt_framerate(v) for l, v in taps.items()}
        hidden = {l: adapt_framerate(v) for l, v in hidden.items()}
        final = adapt_framerate(final)
        mask = None if mask is None else pool_pad_mask(mask)
    if teacher_length is not None:
        n = min(final.shape[-2], teacher_length)
        taps = {l: v[..., :n, :] for l, v in taps.items()}
        hidden = {l: v[..., :n, :] for l, v in hidden.items()}
        final = final[..., :n, :]
        mask = None if mask is None else mask[..., :n]
    return LayerTapSet(taps=taps, final=final, hidden=hidden, pad_mask=mask)


@dataclass
class TeacherTargets:
    """Per-layer FFN features. Arrays are [T, D] for one clip or [B, T, D]
    for a batch, with ``lengths`` giving valid rows per item."""

    layers: dict[int, torch.Tensor]
    framerate: float
    lengths: torch.Tensor | None = None

    @property
    def length(self) -> int:
        return next(iter(self.layers.values())).shape[-2]


def _synth_heads(dim: int) -> int:
    for h in (dim // 64, 4, 2, 1):
        if h >= 1 and dim % h == 0 and (dim // h) >= 1:
            return h
    return 1


class SyntheticTeacher:
    """A frozen randomly initialised encoder with a fixed seed."""

    def __init__(self, spec: TeacherSpec, norm_stats: NormStats | None = None):
        if spec.source != "synthetic":
            raise ValueError("SyntheticTeacher needs a synthetic spec")
        self.spec = spec
        self.norm_stats = norm_stats
        cfg = EncoderConfig(d_model=spec.target_dim, n_layers=spec.n_layers, n_heads=_synth_heads(spec.target_dim),
                            conv_pos_groups=math.gcd(16, spec.target_dim), dropout=0.0, init_std=spec.init_std)
        self.model = AudioEncoder(cfg, "frame", seed=spec.seed)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def parameter_hash(self) -> str:
        return parameter_hash(self.model)

    @torch.no_grad()
    def batch_targets(self, mel: torch.Tensor, mel_lengths: torch.Tensor, layers: Sequence[int]) -> TeacherTargets:
        layers = check_tap_layers(layers, self.spec.n_layers)
        out = self.model(mel, mel_lengths, layers)
        lengths = (mel_lengths + 1) // 2
        feats = {l: out.taps[l] for l in layers}
        if self.spec.framerate == 25.0:
            feats = {l: adapt_framerate(v) for l, v in feats.items()}
            lengths = lengths // 2
        return TeacherTargets(feats, self.spec.framerate, lengths)

    def clip_targets(self, mel: MelFrames, layers: Sequence[int]) -> TeacherTargets:
        if not mel.norm_applied:
            if self.norm_stats is None:
                raise ValueError("synthetic teacher has no NormStats to normalize raw Mel input")
            mel = normalize(mel, self.norm_stats)
        x = torch.from_numpy(np.ascontiguousarray(mel.data))[None]
        out = self.batch_targets(x, torch.tensor([mel.n_frames]), layers)
        return TeacherTargets({l: v[0] for l, v in out.layers.items()}, out.framerate)


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def read_dump_index(path) -> dict:
    p = Path(path) / DUMP_INDEX
    if not p.exists():
        raise FileNotFoundError(f"no teacher dump index at {p}")
    index = json.loads(p.read_text())
    if index.get("format") != DUMP_FORMAT or index.get("version") != 1:
        raise tensorio.FormatError(f"{p}: not a version-1 {DUMP_FORMAT} index")
    return index


class DumpTeacher:
    """Reads precomputed per-clip FFN features; results are cached in memory."""

    def __init__(self, spec: TeacherSpec):
        if spec.source != "dump" or spec.path is None:
            raise ValueError("DumpTeacher needs a dump spec with a path")
        self.spec = spec
        self.root = Path(spec.path)
        self.index = read_dump_index(self.root)
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _load(self, clip_id: str) -> np.ndarray:
        arr = self._cache.get(clip_id)
        if arr is not None:
            return arr
        entry = self.index["clips"].get(clip_id)
        if entry is None:
            raise KeyError(f"teacher dump {self.root} has no entry for clip {clip_id!r}")
        arr, rate = tensorio.read_features(self.root / entry["path"])
        layers = entry.get("layers", self.index["layers"])
        if arr.ndim != 3 or arr.shape[0] != len(layers) or arr.shape[2] != self.spec.target_dim:
            raise tensorio.FormatError(
                f"dump for {clip_id!r} has dims {arr.shape}, index expects [{len(layers)}, T, {self.spec.target_dim}]")
        if rate != self.spec.framerate:
            raise tensorio.FormatError(f"dump for {clip_id!r} framerate {rate} != index {self.spec.framerate}")
        arr.setflags(write=False)
        with self._lock:
            self._cache.setdefault(clip_id, arr)
        return self._cache[clip_id]

    def _rows(self, layers: Sequence[int]) -> list[int]:
        layers = check_tap_layers(layers, self.spec.n_layers)
        stored = list(self.index["layers"])
        missing = [l for l in layers if l not in stored]
        if missing:
            raise ValueError(f"teacher dump lacks layers {missing}; stored layers {stored}")
        return [stored.index(l) for l in layers]

    def clip_targets(self, clip_id: str, layers: Sequence[int]) -> TeacherTargets:
        rows = self._rows(layers)
        arr = self._load(clip_id)
        return TeacherTargets({l: torch.from_numpy(arr[r].copy()) for l, r in zip(layers, rows)}, self.spec.framerate)

    def batch_targets_for(self, clip_ids: Sequence[str], layers: Sequence[int]) -> TeacherTargets:
        rows = self._rows(layers)
        arrs = [self._load(c) for c in clip_ids]
        t_max = max(a.shape[1] for a in arrs)
        out = {}
        for l, r in zip(layers, rows):
            buf = np.zeros((len(arrs), t_max, self.spec.target_dim), dtype=np.float32)
            for i, a in enumerate(arrs):
                buf[i, : a.shape[1]] = a[r]
            out[l] = torch.from_numpy(buf)
        return TeacherTargets(out, self.spec.framerate, torch.tensor([a.shape[1] for a in arrs]))


def build_teacher(spec: TeacherSpec, norm_stats: NormStats | None = None):
    return SyntheticTeacher(spec, norm_stats) if spec.source == "synthetic" else DumpTeacher(spec)


def teacher_targets(spec: TeacherSpec, input, layers: Sequence[int], teacher=None,
                    norm_stats: NormStats | None = None) -> TeacherTargets:
    """Frozen targets for one clip.

    ``input`` is a clip id (dump teachers), a :class:`MelFrames`, or a 16 kHz
    waveform array (synthetic teachers; needs ``norm_stats``).
    """
    teacher = teacher if teacher is not None else build_teacher(spec, norm_stats)
    if spec.source == "dump":
        if not isinstance(input, str):
            raise TypeError("dump teachers are queried by clip id")
        return teacher.clip_targets(input, layers)
    if isinstance(input, MelFrames):
        return teacher.clip_targets(input, layers)
    return teacher.clip_targets(compute_logmel(np.asarray(input)), layers)


def write_teacher_dump(teacher: SyntheticTeacher, clips: Sequence[tuple[str, MelFrames]], layers: Sequence[int],
                       out_dir) -> Path:
    """Run a synthetic teacher over normalized clips and store a dump."""
    layers = check_tap_layers(layers, teacher.spec.n_layers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for clip_id, mel in clips:
        tg = teacher.clip_targets(mel, layers)
        arr = np.stack([tg.layers[l].numpy() for l in layers])
        fname = hashlib.sha1(clip_id.encode()).hexdigest()[:16] + ".feat"
        tensorio.write_features(out / fname, arr, teacher.spec.framerate)
        entries[clip_id] = {"path": fname, "layers": layers, "framerate": teacher.spec.framerate,
                            "dim": teacher.spec.target_dim}
    index = {
        "format": DUMP_FORMAT,
        "version": 1,
        "n_layers": teacher.spec.n_layers,
        "dim": teacher.spec.target_dim,
        "framerate": teacher.spec.framerate,
        "layers": layers,
        "source_teacher": teacher.spec.key,
        "clips": entries,
    }
    (out / DUMP_INDEX).write_text(json.dumps(index, indent=1, sort_keys=True))
    return out


def normalize_targets(x: torch.Tensor) -> torch.Tensor:
    """Per-frame layer normalization without affine parameters."""
    return F.layer_norm(x, x.shape[-1:])
