"""Seeded synthetic audio for desk-scale distillation and probing.

Both domains are built from the same pool of spectral "units" (harmonic
complexes and band-limited noise) so that their long-term spectra match.
They differ in temporal organisation: the speech-like domain switches
units every 50-150 ms with syllable-rate amplitude modulation, while the
music-like domain holds units for 350-900 ms. A sound-like domain sits in
between (150-400 ms, no modulation) for three-domain mixing tests. Telling them apart therefore
needs temporal context, not just a frame-level spectral template.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

SR = 16000

DOMAIN_UNIT_MS = {"speech": (50.0, 150.0), "sound": (150.0, 400.0), "music": (350.0, 900.0)}


@dataclass
class AudioClip:
    clip_id: str
    waveform: np.ndarray
    sample_rate: int
    domain: str

    @property
    def duration(self) -> float:
        return self.waveform.shape[0] / self.sample_rate


def _harmonic_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.arange(n) / SR
    f0 = rng.uniform(100.0, 400.0)
    tilt = rng.uniform(-9.0, -3.0)  # dB per octave
    formant = rng.uniform(500.0, 3500.0)
    out = np.zeros(n)
    k = 1
    while k * f0 < 7500.0:
        f = k * f0
        gain_db = tilt * np.log2(k) + 12.0 * np.exp(-(((f - formant) / 400.0) ** 2))
        out += 10 ** (gain_db / 20.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        k += 1
    return out


def _noise_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    centre = rng.uniform(300.0, 6000.0)
    width = rng.uniform(0.2, 1.0) * centre
    lo = max(50.0, centre - width / 2)
    hi = min(7900.0, centre + width / 2)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=SR, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n + 512))[512:]


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    x = _harmonic_unit(rng, n) if rng.random() < 0.6 else _noise_unit(rng, n)
    x = x / (np.sqrt(np.mean(x**2)) + 1e-12)
    return x * 10 ** (rng.uniform(-30.0, -12.0) / 20.0)


def _crossfade_concat(parts: list[np.ndarray], fade: int) -> np.ndarray:
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    out = parts[0].copy()
    for p in parts[1:]:
        p = p.copy()
        out[-fade:] = out[-fade:] * ramp[::-1] + p[:fade] * ramp
        out = np.concatenate([out, p[fade:]])
    return out


def domain_clip(rng: np.random.Generator, domain: str, seconds: float) -> np.ndarray:
    """One clip of the given domain, exactly ``seconds`` long."""
    lo, hi = DOMAIN_UNIT_MS[domain]
    n_total = int(round(seconds * SR))
    fade = int(0.005 * SR)
    parts, have = [], 0
    while have < n_total + fade:
        n = int(rng.uniform(lo, hi) * SR / 1000.0) + fade
        parts.append(_unit(rng, n))
        have += n - fade
    x = _crossfade_concat(parts, fade)[:n_total]
    if domain == "speech":
        rate = rng.uniform(3.0, 6.0)
        t = np.arange(n_total) / SR
        x = x * (0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    return x.astype(np.float32)


def make_corpus(minutes: float, seed: int, clip_seconds: float = 4.0,
                domains=("speech", "music")) -> list[AudioClip]:
    """Balanced corpus of ``minutes`` of audio split evenly across domains."""
    rng = np.random.default_rng(seed)
    n_clips = int(np.ceil(minutes * 60.0 / clip_seconds))
    clips = []
    for i in range(n_clips):
        domain = domains[i % len(domains)]
        wav = domain_clip(rng, domain, clip_seconds)
        clips.append(AudioClip(f"{domain}-{seed}-{i:05d}", wav, SR, domain))
    return clips


def domain_id_task(n_per_class: int, seed: int, clip_seconds: float = 3.0):
    """Instance task: which domain generated the clip."""
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    for i in range(n_per_class):
        for label, domain in enumerate(("speech", "music")):
            clips.append(AudioClip(f"dom-{i}-{domain}", domain_clip(rng, domain, clip_seconds), SR, domain))
            labels.append(label)
    return clips, np.array(labels)


def channel_id_task(n_per_class: int, seed: int, n_channels: int = 4, clip_seconds: float = 3.0):
    """Instance task: which fixed colouration filter (a 'recording channel')
    was applied to speech-like content."""
    rng = np.random.default_rng(seed)
    filters = []
    for c in range(n_channels):
        f = 400.0 * 2 ** (c * 1.2)
        filters.append(signal.iirpeak(min(f, 7000.0), 1.5, fs=SR))
    clips, labels = [], []
    for i in range(n_per_class):
        for c, (b, a) in enumerate(filters):
            x = signal.lfilter(b, a, domain_clip(rng, "speech", clip_seconds)).astype(np.float32)
            clips.append(AudioClip(f"chan-{i}-{c}", x, SR, "speech"))
            labels.append(c)
    return clips, np.array(labels)


FRAME_CLASSES = ("silence", "tone", "noise")


def frame_task(n_clips: int, seed: int, clip_seconds: float = 3.0, framerate: float = 50.0):
    """Frame task: per-frame source class of concatenated silence/tone/noise
    segments. Labels are sampled at ``framerate`` on the frame-embedding grid
    (frame i covers Mel frames 2i and 2i+1)."""
    if framerate != 50.0:
        raise ValueError("frame labels are only defined on the 50 Hz token grid")
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    n_total = int(clip_seconds * SR)
    for i in range(n_clips):
        x = np.zeros(n_total)
        sample_label = np.zeros(n_total, dtype=np.int64)
        pos = 0
        while pos < n_total:
            n = min(int(rng.uniform(0.15, 0.5) * SR), n_total - pos)
            cls = int(rng.integers(0, 3))
            if cls == 1:
                seg = _harmonic_unit(rng, n)
            elif cls == 2:
                seg = _noise_unit(rng, n)
            else:
                seg = np.zeros(n)
            if cls:
                seg = seg / (np.sqrt(np.mean(seg**2)) + 1e-12) * 10 ** (rng.uniform(-30, -12) / 20)
            x[pos : pos + n] = seg
            sample_label[pos : pos + n] = cls
            pos += n
        n_mel = (n_total - 400) // 160 + 1
        n_tok = (n_mel + 1) // 2
        # label at the centre of each token's receptive field
        centres = (np.arange(n_tok) * 2 * 160 + 200 + 80).clip(max=n_total - 1)
        clips.append(AudioClip(f"frame-{seed}-{i}", x.astype(np.float32), SR, "mixed"))
        labels.append(sample_label[centres])
    return clips, labels
