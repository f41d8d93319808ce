"""Corpus preparation, domain-balanced mixing and batch assembly.

Manifests are JSON-lines: a header object (format, version, normalization
statistics, optional mixture summary) followed by one object per clip.
Upsampling is expressed as integer per-entry weights; an epoch visits every
entry exactly ``weight`` times.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .frontend import SAMPLE_RATE, NormStats, compute_logmel

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "audistill-manifest"
MANIFEST_VERSION = 1
DOMAINS = ("speech", "sound", "music")
SEGMENT_SECONDS = 10.0
MIN_SECONDS = 2.0
MAX_SECONDS = 30.0
SILENCE_DBFS = -60.0
SILENCE_FRACTION = 0.95
MAX_RESAMPLE_TERM = 1000

# Published per-dataset clip counts of the reference pretraining mixture.
REFERENCE_CLIP_COUNTS = {
    "LibriVox": ("speech", 13_974_853),
    "VoxPopuli": ("speech", 3_051_826),
    "GigaSpeech": ("speech", 4_631_558),
    "Common Voice 17": ("speech", 1_117_555),
    "Fisher": ("speech", 1_168_612),
    "VoxLingua107": ("speech", 15_860),
    "AudioSet": ("sound", 1_932_298),
    "SoundNet": ("sound", 9_765_588),
    "LAION-Audio-630k": ("sound", 1_433_319),
    "Music4All": ("music", 327_807),
}


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    domain: str
    duration: float
    sample_rate: int = SAMPLE_RATE
    weight: int = 1
    offset: float = 0.0
    dataset: str = ""

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.weight < 1:
            raise ValueError(f"weight must be >= 1, got {self.weight}")

    def to_json(self) -> str:
        d = asdict(self)
        d["duration"] = round(self.duration, 6)
        d["offset"] = round(self.offset, 6)
        return json.dumps(d, sort_keys=True)


@dataclass
class MixtureSpec:
    factors: dict[str, int]
    clip_counts: dict[str, int]
    dataset_domains: dict[str, str]

    @property
    def weighted_counts(self) -> dict[str, int]:
        return {d: self.clip_counts[d] * self.factors[self.dataset_domains[d]] for d in self.clip_counts}

    @property
    def weighted_total(self) -> int:
        return sum(self.weighted_counts.values())

    @property
    def proportions(self) -> dict[str, float]:
        total = self.weighted_total
        return {d: c / total for d, c in self.weighted_counts.items()}

    def domain_proportions(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for d, p in self.proportions.items():
            dom = self.dataset_domains[d]
            out[dom] = out.get(dom, 0.0) + p
        return out

    def to_dict(self) -> dict:
        return {
            "factors": self.factors,
            "clip_counts": self.clip_counts,
            "dataset_domains": self.dataset_domains,
            "weighted_total": self.weighted_total,
            "proportions": self.proportions,
            "domain_proportions": self.domain_proportions(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        return cls(dict(d["factors"]), dict(d["clip_counts"]), dict(d["dataset_domains"]))


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    norm_stats: NormStats | None = None
    mixture: MixtureSpec | None = None
    extra: dict = field(default_factory=dict)


def segment_clip(duration: float, segment: float = SEGMENT_SECONDS,
                 min_len: float = MIN_SECONDS, max_len: float = MAX_SECONDS) -> list[float]:
    """Split into consecutive ``segment``-second pieces plus remainder and drop
    pieces outside [min_len, max_len]."""
    if duration <= 0:
        return []
    n_full = int(math.floor(duration / segment + 1e-9))
    pieces = [segment] * n_full
    rest = duration - n_full * segment
    if rest > 1e-9:
        pieces.append(rest)
    return [p for p in pieces if min_len <= p <= max_len]


def keep_duration(duration: float) -> bool:
    return MIN_SECONDS <= duration <= MAX_SECONDS


def detect_silence(waveform: np.ndarray, threshold_db: float = SILENCE_DBFS,
                   fraction: float = SILENCE_FRACTION, frame: int = 400) -> bool:
    """True if at least ``fraction`` of 25 ms frames sit below ``threshold_db``
    RMS relative to full scale 1.0."""
    x = np.asarray(waveform, dtype=np.float64)
    n = x.shape[0] // frame
    if n == 0:
        return True
    rms = np.sqrt(np.mean(x[: n * frame].reshape(n, frame) ** 2, axis=1))
    quiet = rms < 10 ** (threshold_db / 20.0)
    return bool(quiet.mean() >= fraction)


def resample(waveform: np.ndarray, from_rate: int, to_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase band-limited resampling; output length round(N * to / from)."""
    if from_rate <= 0 or to_rate <= 0:
        raise ValueError("sample rates must be positive")
    x = np.asarray(waveform, dtype=np.float64)
    if from_rate == to_rate:
        return x.astype(np.float32)
    ratio = Fraction(int(to_rate), int(from_rate))
    if ratio.numerator > MAX_RESAMPLE_TERM or ratio.denominator > MAX_RESAMPLE_TERM:
        raise ValueError(f"unsupported resampling ratio {from_rate} -> {to_rate} Hz")
    y = signal.resample_poly(x, ratio.numerator, ratio.denominator, padtype="line")
    n_out = int(round(x.shape[0] * to_rate / from_rate))
    if y.shape[0] < n_out:
        y = np.pad(y, (0, n_out - y.shape[0]), mode="edge")
    return y[:n_out].astype(np.float32)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono float32 samples in [-1, 1] and the file's sample rate."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.uint8:
        x = (data.astype(np.float32) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float32) / float(np.iinfo(data.dtype).max + 1)
    else:
        x = data.astype(np.float32)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(sr)


def write_wav(path, waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.asarray(waveform) * 32768.0, -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)


def load_clip(entry: ManifestEntry, root: str | os.PathLike | None = None) -> np.ndarray:
    path = Path(entry.path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    x, sr = read_wav(path)
    x = resample(x, sr, SAMPLE_RATE)
    start = int(round(entry.offset * SAMPLE_RATE))
    n = int(round(entry.duration * SAMPLE_RATE))
    return x[start : start + n]


class _StatsAccumulator:
    def __init__(self):
        self.n = 0
        self.s1 = 0.0
        self.s2 = 0.0

    def add(self, mel: np.ndarray) -> None:
        m = mel.astype(np.float64)
        self.n += m.size
        self.s1 += m.sum()
        self.s2 += np.square(m).sum()

    def stats(self, source: str) -> NormStats:
        if self.n == 0:
            raise ValueError("no frames to compute normalization statistics")
        mean = self.s1 / self.n
        return NormStats(mean, math.sqrt(max(self.s2 / self.n - mean * mean, 0.0)), source, self.n)


def prepare(in_dirs: Sequence[str | os.PathLike], domain: str, dataset: str | None = None) -> Manifest:
    """Scan directories for WAV files and build a cleaned manifest.

    Sound and music files are cut into 10 s segments; speech files are kept
    whole. Segments outside [2 s, 30 s] and silent segments are dropped.
    Paths are stored as given (resolved against the input dir).
    """
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    files = []
    for d in in_dirs:
        root = Path(d)
        if not root.is_dir():
            raise FileNotFoundError(f"input directory {root} does not exist")
        files.extend(sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav"))
    if not files:
        raise FileNotFoundError("no audio found in " + ", ".join(map(str, in_dirs)))
    dataset = dataset or Path(in_dirs[0]).name
    acc = _StatsAccumulator()
    entries = []
    dropped = {"duration": 0, "silence": 0}
    for f in files:
        x, sr = read_wav(f)
        x = resample(x, sr, SAMPLE_RATE)
        total = x.shape[0] / SAMPLE_RATE
        if domain == "speech":
            pieces = [total] if keep_duration(total) else []
        else:
            pieces = segment_clip(total)
        if not pieces:
            dropped["duration"] += 1
        offset = 0.0
        for i, dur in enumerate(pieces):
            start = int(round(offset * SAMPLE_RATE))
            seg = x[start : start + int(round(dur * SAMPLE_RATE))]
            offset += dur
            if detect_silence(seg):
                dropped["silence"] += 1
                continue
            acc.add(compute_logmel(seg).data)
            rel = f.as_posix()
            entries.append(ManifestEntry(f"{dataset}/{f.stem}#{i}", rel, domain, dur,
                                         SAMPLE_RATE, 1, round(start / SAMPLE_RATE, 6), dataset))
    log.info("prepared %d clips from %d files (%s dropped)", len(entries), len(files), dropped)
    if not entries:
        raise ValueError("every clip was dropped by the duration/silence filters")
    return Manifest(entries, acc.stats(dataset), None, {"dropped": dropped})


def write_manifest(path, manifest: Manifest) -> None:
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
              "norm_stats": manifest.norm_stats.to_dict() if manifest.norm_stats else None,
              "mixture": manifest.mixture.to_dict() if manifest.mixture else None}
    header.update(manifest.extra)
    lines = [json.dumps(header, sort_keys=True)] + [e.to_json() for e in manifest.entries]
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> Manifest:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT or header.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: not a version-{MANIFEST_VERSION} {MANIFEST_FORMAT} file")
    entries = [ManifestEntry(**json.loads(l)) for l in lines[1:] if l.strip()]
    stats = NormStats.from_dict(header["norm_stats"]) if header.get("norm_stats") else None
    mixture = MixtureSpec.from_dict(header["mixture"]) if header.get("mixture") else None
    extra = {k: v for k, v in header.items() if k not in ("format", "version", "norm_stats", "mixture")}
    return Manifest(entries, stats, mixture, extra)


def mixture_from_counts(counts: Mapping[str, tuple[str, int]], factors: Mapping[str, int]) -> MixtureSpec:
    """``counts`` maps dataset -> (domain, clip count)."""
    if not counts:
        raise ValueError("empty manifest: no datasets to mix")
    for dom, f in factors.items():
        if int(f) != f or f < 1:
            raise ValueError(f"upsampling factor for {dom} must be an integer >= 1, got {f}")
    domains = {d: dom for d, (dom, _) in counts.items()}
    full = {dom: int(factors.get(dom, 1)) for dom in sorted(set(domains.values()))}
    return MixtureSpec(full, {d: int(c) for d, (_, c) in counts.items()}, domains)


def pool_norm_stats(parts: Iterable[tuple[NormStats, int]], source: str = "mixture") -> NormStats:
    """Combine per-manifest statistics, each counted ``weight`` times."""
    n = s1 = s2 = 0.0
    for st, w in parts:
        c = st.count * w
        n += c
        s1 += c * st.mean
        s2 += c * (st.std**2 + st.mean**2)
    if n == 0:
        raise ValueError("cannot pool statistics with zero counts")
    mean = s1 / n
    return NormStats(mean, math.sqrt(max(s2 / n - mean * mean, 0.0)), source, int(n))


def build_mixture(manifests: Sequence[Manifest], factors: Mapping[str, int]) -> tuple[MixtureSpec, Manifest]:
    """Merge manifests, assigning each entry its domain's upsampling weight."""
    counts: dict[str, list] = {}
    merged = []
    for m in manifests:
        for e in m.entries:
            name = e.dataset or e.domain
            if name in counts and counts[name][0] != e.domain:
                raise ValueError(f"dataset {name!r} appears with two domains")
            counts.setdefault(name, [e.domain, 0])[1] += 1
            merged.append(e)
    if not merged:
        raise ValueError("empty manifest: nothing to mix")
    spec = mixture_from_counts({k: (v[0], v[1]) for k, v in counts.items()}, factors)
    merged = [ManifestEntry(**{**asdict(e), "weight": spec.factors[e.domain]}) for e in merged]
    stats = None
    if all(m.norm_stats is not None for m in manifests):
        parts = []
        for m in manifests:
            w = spec.factors[m.entries[0].domain] if m.entries else 1
            parts.append((m.norm_stats, w))
        stats = pool_norm_stats(parts)
    return spec, Manifest(merged, stats, spec)


def recompute_proportions(entries: Sequence[ManifestEntry]) -> dict[str, float]:
    tally: dict[str, int] = {}
    for e in entries:
        tally[e.dataset or e.domain] = tally.get(e.dataset or e.domain, 0) + e.weight
    total = sum(tally.values())
    return {k: v / total for k, v in tally.items()}


def batch_by_seconds(entries: Sequence[ManifestEntry], budget_seconds: float, seed: int, epoch: int = 0,
                     bucket_size: int = 256) -> list[list[ManifestEntry]]:
    """One epoch of batches whose summed clip durations stay within budget.

    The weighted multiset is shuffled, split into buckets of ``bucket_size``,
    each bucket sorted by duration and packed greedily, then batch order is
    shuffled again. Deterministic in (seed, epoch).
    """
    if not entries:
        return []
    longest = max(e.duration for e in entries)
    if longest > budget_seconds:
        raise ValueError(f"clip of {longest:.2f} s exceeds the batch budget of {budget_seconds} s")
    rng = np.random.default_rng([seed, epoch])
    pool = [i for i, e in enumerate(entries) for _ in range(e.weight)]
    order = rng.permutation(len(pool))
    batches: list[list[ManifestEntry]] = []
    for start in range(0, len(order), bucket_size):
        chunk = sorted((pool[j] for j in order[start : start + bucket_size]),
                       key=lambda i: (entries[i].duration, i))
        cur: list[ManifestEntry] = []
        total = 0.0
        for i in chunk:
            d = entries[i].duration
            if cur and total + d > budget_seconds + 1e-9:
                batches.append(cur)
                cur, total = [], 0.0
            cur.append(entries[i])
            total += d
        if cur:
            batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]
