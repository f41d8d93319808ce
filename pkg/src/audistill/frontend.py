"""Log-Mel frontend and token embedders.

Waveforms at 16 kHz become 128-bin log-Mel matrices (25 ms Hann window,
10 ms hop, no edge padding), are normalized with corpus statistics, and are
then embedded either frame-wise (strided conv, 50 Hz) or patch-wise (16x16
spectrogram patches). When both embedders are active their outputs are summed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Iterable, Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

SAMPLE_RATE = 16000
N_MELS = 128
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 1024
LOG_FLOOR = 1e-10
PATCH = 16
MEL_FRAMERATE = 100.0
TOKEN_FRAMERATE = 50.0

Extraction = Literal["frame", "patch", "fused"]


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    source: str = "unknown"
    count: int = 0

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise ValueError(f"NormStats.std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "source": self.source, "count": self.count}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["mean"]), float(d["std"]), d.get("source", "unknown"), int(d.get("count", 0)))


@dataclass(frozen=True)
class MelFrames:
    data: np.ndarray  # [T_mel, 128] float32
    norm_applied: bool = False
    framerate: float = MEL_FRAMERATE
    window_ms: float = 25.0
    hop_ms: float = 10.0

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class FeatureSequence:
    data: torch.Tensor  # [T, d_model]
    framerate: float
    extraction: Extraction

    @property
    def effective_rate(self) -> float:
        # a 16-frame patch window spans 160 ms of audio regardless of token rate
        return MEL_FRAMERATE / PATCH if self.extraction == "patch" else self.framerate

    def __len__(self) -> int:
        return self.data.shape[0]


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    """HTK-spaced triangular filters, shape [n_fft // 2 + 1, n_mels]."""
    freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    pts = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    lo, ctr, hi = pts[:-2], pts[1:-1], pts[2:]
    up = (freqs[:, None] - lo) / (ctr - lo)
    down = (hi - freqs[:, None]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=1)
def _window() -> np.ndarray:
    # periodic Hann
    n = np.arange(WIN_LENGTH)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LENGTH)


def n_mel_frames(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        return 0
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def compute_logmel(waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> MelFrames:
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"resample required: got {sample_rate} Hz, frontend expects {SAMPLE_RATE} Hz")
    wav = np.asarray(waveform, dtype=np.float64)
    if wav.ndim != 1:
        raise ValueError(f"expected mono waveform, got shape {wav.shape}")
    n = n_mel_frames(wav.shape[0])
    if n == 0:
        raise ValueError(f"waveform too short: {wav.shape[0]} samples < one {WIN_LENGTH}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(wav, WIN_LENGTH)[::HOP_LENGTH][:n]
    spec = np.fft.rfft(frames * _window(), n=N_FFT, axis=-1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank()
    logmel = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    return MelFrames(logmel)


def compute_norm_stats(mels: Iterable[MelFrames | np.ndarray], source: str = "corpus") -> NormStats:
    """Pooled mean and std over every entry of every matrix."""
    total = 0
    s1 = 0.0
    s2 = 0.0
    for m in mels:
        x = np.asarray(m.data if isinstance(m, MelFrames) else m, dtype=np.float64)
        total += x.size
        s1 += x.sum()
        s2 += np.square(x).sum()
    if total == 0:
        raise ValueError("cannot compute normalization statistics over an empty corpus")
    mean = s1 / total
    var = max(s2 / total - mean * mean, 0.0)
    return NormStats(float(mean), float(math.sqrt(var)), source, total)


def normalize(mel: MelFrames, stats: NormStats) -> MelFrames:
    if mel.norm_applied:
        raise ValueError("MelFrames already normalized; refusing to normalize twice")
    data = ((mel.data.astype(np.float64) - stats.mean) / (2.0 * stats.std)).astype(np.float32)
    return replace(mel, data=data, norm_applied=True)


class FrameEmbed(nn.Module):
    """Strided temporal conv (k=3, s=2, p=1) -> GELU -> LayerNorm."""

    def __init__(self, d_model: int, n_mels: int = N_MELS):
        super().__init__()
        self.conv = nn.Conv1d(n_mels, d_model, kernel_size=3, stride=2, padding=1)
        self.norm = nn.LayerNorm(d_model)

    @staticmethod
    def output_length(n_frames: int) -> int:
        return (n_frames + 1) // 2

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: [B, T, n_mels] -> [B, ceil(T/2), d_model]
        x = self.conv(mel.transpose(1, 2)).transpose(1, 2)
        return self.norm(F.gelu(x))


class PatchEmbed(nn.Module):
    """Non-overlapping 16x16 patches, flattened (time, freq) row-major, projected."""

    def __init__(self, d_model: int, n_mels: int = N_MELS):
        super().__init__()
        if n_mels % PATCH:
            raise ValueError(f"n_mels={n_mels} is not a multiple of {PATCH}")
        self.freq_patches = n_mels // PATCH
        self.proj = nn.Linear(PATCH * PATCH, d_model)
        self.norm = nn.LayerNorm(d_model)

    def output_length(self, n_frames: int) -> int:
        return (n_frames // PATCH) * self.freq_patches

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        b, t, f = mel.shape
        nt = t // PATCH
        x = mel[:, : nt * PATCH].reshape(b, nt, PATCH, self.freq_patches, PATCH)
        # -> [B, time window, freq patch, time-in-patch, freq-in-patch]
        x = x.permute(0, 1, 3, 2, 4).reshape(b, nt * self.freq_patches, PATCH * PATCH)
        return self.norm(self.proj(x))


class AudioFrontend(nn.Module):
    """Batched embedder over normalized log-Mel input with padding masks.

    ``forward`` takes ``mel`` [B, T_mel, 128] and per-item valid lengths and
    returns ``(features [B, T, d_model], pad_mask [B, T])`` where ``pad_mask``
    is True on padded positions.
    """

    def __init__(self, d_model: int, extraction: Extraction = "frame"):
        super().__init__()
        if extraction not in ("frame", "patch", "fused"):
            raise ValueError(f"unknown extraction {extraction!r}")
        self.extraction = extraction
        self.frame = FrameEmbed(d_model) if extraction in ("frame", "fused") else None
        self.patch = PatchEmbed(d_model) if extraction in ("patch", "fused") else None

    def output_lengths(self, mel_lengths: torch.Tensor) -> torch.Tensor:
        outs = []
        if self.frame is not None:
            outs.append((mel_lengths + 1) // 2)
        if self.patch is not None:
            outs.append((mel_lengths // PATCH) * self.patch.freq_patches)
        return torch.stack(outs).min(dim=0).values

    def forward(self, mel: torch.Tensor, mel_lengths: torch.Tensor | None = None):
        b, t, _ = mel.shape
        if mel_lengths is None:
            mel_lengths = torch.full((b,), t, dtype=torch.long)
        # zero padded mel frames so the conv sees the same implicit padding
        # as an unpadded sequence of the valid length
        valid_mel = torch.arange(t)[None, :] < mel_lengths[:, None]
        mel = mel * valid_mel[..., None].to(mel.dtype)
        feats = []
        if self.frame is not None:
            feats.append(self.frame(mel))
        if self.patch is not None:
            feats.append(self.patch(mel))
        n = min(x.shape[1] for x in feats)
        x = feats[0][:, :n]
        for extra in feats[1:]:
            x = x + extra[:, :n]
        lengths = self.output_lengths(mel_lengths)
        pad_mask = torch.arange(n)[None, :] >= lengths[:, None]
        return x, pad_mask


def _as_batch(mel: MelFrames) -> torch.Tensor:
    if not mel.norm_applied:
        raise ValueError("MelFrames must be normalized before embedding")
    return torch.from_numpy(np.ascontiguousarray(mel.data))[None]


def frame_embed(mel: MelFrames, d_model: int, module: FrameEmbed | None = None) -> FeatureSequence:
    if mel.n_frames < 2:
        raise ValueError(f"frame_embed needs at least 2 Mel frames, got {mel.n_frames}")
    module = module if module is not None else FrameEmbed(d_model)
    with torch.no_grad():
        out = module(_as_batch(mel))[0]
    return FeatureSequence(out, TOKEN_FRAMERATE, "frame")


def patch_embed(mel: MelFrames, d_model: int, module: PatchEmbed | None = None) -> FeatureSequence:
    if mel.n_frames < PATCH:
        raise ValueError(f"patch_embed needs at least {PATCH} Mel frames, got {mel.n_frames}")
    module = module if module is not None else PatchEmbed(d_model)
    with torch.no_grad():
        out = module(_as_batch(mel))[0]
    return FeatureSequence(out, TOKEN_FRAMERATE, "patch")


def fuse_features(a: FeatureSequence, b: FeatureSequence) -> FeatureSequence:
    if a.framerate != b.framerate:
        raise ValueError(f"framerate mismatch: {a.framerate} vs {b.framerate}")
    if a.data.shape[-1] != b.data.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.data.shape[-1]} vs {b.data.shape[-1]}")
    n = min(len(a), len(b))
    return FeatureSequence(a.data[:n] + b.data[:n], a.framerate, "fused")
