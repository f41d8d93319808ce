"""Sparse layer-to-layer distillation from two teachers.

K student layers are paired with K layers of each teacher by proportional
floor indexing. At each pair a per-(layer, teacher) MLP head maps the student
representation to the teacher's FFN feature space, and a frame-wise
objective (L1 + log-sigmoid cosine, or InfoNCE) is averaged over layers,
frames and the two teachers.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import AudioEncoder, init_weights
from .frontend import FeatureSequence
from .teachers import TeacherTargets, align_student_to_teacher, normalize_targets, pool_pad_mask

LOG_SIGMOID_ONE = math.log1p(math.exp(-1.0))  # loss floor, reached at pred == target


def select_layers(L: int, K: int) -> list[int]:
    """1-based layer indices floor(k * L / K) for k = 1..K."""
    if not 1 <= K <= L:
        raise ValueError(f"K={K} exceeds depth L={L}" if K > L else f"K must be >= 1, got {K}")
    return [(k * L) // K for k in range(1, K + 1)]


@dataclass(frozen=True)
class DistillPlan:
    K: int
    student_layers: tuple[int, ...]
    teacher_layers: Mapping[str, tuple[int, ...]]

    @classmethod
    def build(cls, student_depth: int, teacher_depths: Mapping[str, int], K: int) -> "DistillPlan":
        try:
            student = tuple(select_layers(student_depth, K))
        except ValueError as exc:
            raise ValueError(f"K exceeds depth: student has {student_depth} layers, K={K}") from exc
        teachers = {}
        for name, depth in teacher_depths.items():
            try:
                teachers[name] = tuple(select_layers(depth, K))
            except ValueError as exc:
                raise ValueError(f"K exceeds depth: teacher {name} has {depth} layers, K={K}") from exc
        return cls(K, student, teachers)

    @property
    def teachers(self) -> list[str]:
        return list(self.teacher_layers)

    @property
    def pairs(self) -> list[tuple[int, ...]]:
        return [(s, *(self.teacher_layers[t][i] for t in self.teachers)) for i, s in enumerate(self.student_layers)]

    @property
    def head_evaluations(self) -> int:
        return self.K * len(self.teacher_layers)

    def to_dict(self) -> dict:
        return {"K": self.K, "student_layers": list(self.student_layers),
                "teacher_layers": {k: list(v) for k, v in self.teacher_layers.items()}}


class PredictionHead(nn.Sequential):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


def _head_seed(seed: int, teacher_key: str, k: int) -> int:
    digest = hashlib.sha256(f"{seed}|{teacher_key}|{k}".encode()).hexdigest()
    return int(digest[:12], 16)


class DistillHeads(nn.Module):
    """One head per (pair index k, teacher slot).

    Each head is initialised from a seed derived from the teacher's identity,
    so swapping teacher slots carries the heads along with the teachers.
    """

    def __init__(self, plan: DistillPlan, d_model: int, teacher_dims: Mapping[str, int],
                 teacher_keys: Mapping[str, str] | None = None, seed: int = 0, init_std: float = 0.02):
        super().__init__()
        self.plan = plan
        self.heads = nn.ModuleDict()
        for slot in plan.teachers:
            key = (teacher_keys or {}).get(slot, slot)
            for k in range(1, plan.K + 1):
                head = PredictionHead(d_model, d_model, teacher_dims[slot])
                init_weights(head, init_std, torch.Generator().manual_seed(_head_seed(seed, key, k)))
                self.heads[f"{slot}_k{k}"] = head

    def head(self, slot: str, k: int) -> PredictionHead:
        return self.heads[f"{slot}_k{k}"]


@dataclass
class LossDiagnostics:
    zero_norm: int = 0


def safe_cosine(pred: torch.Tensor, target: torch.Tensor, diagnostics: LossDiagnostics | None = None) -> torch.Tensor:
    """Cosine along the last axis; zero-norm operands give cos = 0."""
    dot = (pred * target).sum(-1)
    den = pred.norm(dim=-1) * target.norm(dim=-1)
    zero = den == 0
    if diagnostics is not None:
        diagnostics.zero_norm += int(zero.sum())
    return torch.where(zero, torch.zeros_like(dot), dot / den.clamp_min(torch.finfo(den.dtype).tiny))


def l1_cosine_loss(pred: torch.Tensor, target: torch.Tensor, diagnostics: LossDiagnostics | None = None) -> torch.Tensor:
    """Mean absolute error minus log-sigmoid of cosine, over the last axis."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    l1 = (pred - target).abs().mean(-1)
    return l1 - F.logsigmoid(safe_cosine(pred, target, diagnostics))


def aggregate_loss(per_term: torch.Tensor, frame_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over a [2, K, T] term tensor, optionally restricted by a [T] or
    [2, K, T] boolean mask of frames that count."""
    per_term = torch.as_tensor(per_term)
    if per_term.ndim != 3 or per_term.shape[0] != 2:
        raise ValueError(f"expected [2, K, T] terms, got shape {tuple(per_term.shape)}")
    if frame_mask is not None:
        mask = torch.as_tensor(frame_mask, dtype=torch.bool).expand_as(per_term)
        n_frames = int(mask[0, 0].sum())
        per_term = torch.where(mask, per_term, torch.zeros_like(per_term))
    else:
        n_frames = per_term.shape[2]
    if n_frames == 0:
        raise ValueError("no loss frames")
    k = per_term.shape[1]
    return (per_term[0] + per_term[1]).sum() / (2 * k * n_frames)


def infonce_loss(pred: torch.Tensor, target: torch.Tensor, negatives: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Contrastive loss of one prediction against its target and negatives [N, D]."""
    negatives = torch.as_tensor(negatives)
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ValueError("infonce_loss needs at least one negative")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    pred = torch.as_tensor(pred)
    cands = torch.cat([torch.as_tensor(target, dtype=pred.dtype)[None], negatives.to(pred.dtype)])
    logits = safe_cosine(pred[None].expand_as(cands), cands) / temperature
    return -torch.log_softmax(logits, dim=0)[0]


def framewise_infonce(pred: torch.Tensor, target: torch.Tensor, n_negatives: int, temperature: float,
                      generator: torch.Generator) -> torch.Tensor:
    """Per-frame InfoNCE for [N, D] predictions; negatives are targets of other
    frames drawn uniformly (with replacement) from the same pool."""
    n = pred.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs at least two frames to draw negatives")
    r = torch.randint(0, n - 1, (n, n_negatives), generator=generator)
    idx = r + (r >= torch.arange(n)[:, None]).long()
    cands = torch.cat([target[:, None, :], target[idx]], dim=1)  # [N, 1 + n_neg, D]
    logits = safe_cosine(pred[:, None, :].expand_as(cands), cands) / temperature
    return -torch.log_softmax(logits, dim=1)[:, 0]


@dataclass(frozen=True)
class MaskPolicy:
    enabled: bool = False
    mask_prob: float = 0.08
    span_len: int = 10


def sample_mask(lengths: torch.Tensor, t: int, policy: MaskPolicy, generator: torch.Generator) -> torch.Tensor:
    """Boolean [B, t] span mask: ceil(mask_prob * n) span starts per item,
    drawn without replacement from starts that fit inside the valid length."""
    def draw():
        mask = torch.zeros(len(lengths), t, dtype=torch.bool)
        for i, n in enumerate(lengths.tolist()):
            n_spans = math.ceil(policy.mask_prob * n)
            n_cand = max(n - policy.span_len, 0) + 1
            starts = torch.randperm(n_cand, generator=generator)[: min(n_spans, n_cand)]
            for s in starts.tolist():
                mask[i, s : min(s + policy.span_len, n)] = True
        return mask

    mask = draw()
    if not mask.any(dim=1).all():
        mask = draw()
        if not mask.any(dim=1).all():
            raise ValueError("mask policy produced an empty mask twice")
    return mask


def apply_mask(features: FeatureSequence, policy: MaskPolicy, seed: int,
               embedding: torch.Tensor | None = None) -> tuple[FeatureSequence, torch.Tensor]:
    if not policy.enabled:
        raise ValueError("apply_mask called with a disabled policy")
    t, d = features.data.shape
    gen = torch.Generator().manual_seed(seed)
    mask = sample_mask(torch.tensor([t]), t, policy, gen)[0]
    emb = torch.zeros(d) if embedding is None else embedding
    data = torch.where(mask[:, None], emb.to(features.data.dtype), features.data)
    return FeatureSequence(data, features.framerate, features.extraction), mask.nonzero().flatten()


@dataclass(frozen=True)
class LossConfig:
    objective: Literal["l1cos", "infonce"] = "l1cos"
    masking: Literal["none", "mask-prediction"] = "none"
    mask_prob: float = 0.08
    span_len: int = 10
    n_negatives: int = 100
    temperature: float = 0.1
    normalize_targets: bool = False
    head_input: Literal["layer", "ffn"] = "layer"

    def __post_init__(self):
        if self.objective not in ("l1cos", "infonce"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.masking not in ("none", "mask-prediction"):
            raise ValueError(f"unknown masking {self.masking!r}")
        if self.head_input not in ("layer", "ffn"):
            raise ValueError(f"unknown head_input {self.head_input!r}")

    @property
    def mask_policy(self) -> MaskPolicy:
        return MaskPolicy(self.masking == "mask-prediction", self.mask_prob, self.span_len)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistillOutput:
    loss: torch.Tensor
    layer_means: torch.Tensor  # [n_teachers, K]
    n_frames: dict[str, int]
    diagnostics: LossDiagnostics = field(default_factory=LossDiagnostics)
    mask: torch.Tensor | None = None


def distill_loss(student: AudioEncoder, heads: DistillHeads, plan: DistillPlan, mel: torch.Tensor,
                 mel_lengths: torch.Tensor, targets: Mapping[str, TeacherTargets], cfg: LossConfig,
                 generator: torch.Generator | None = None) -> DistillOutput:
    """Forward the student, predict every teacher's selected layers, and
    reduce to the scalar objective."""
    generator = generator if generator is not None else torch.Generator().manual_seed(0)
    diag = LossDiagnostics()
    x, pad_mask = student.embed(mel, mel_lengths)
    mask = None
    policy = cfg.mask_policy
    if policy.enabled:
        lengths = (~pad_mask).sum(1)
        mask = sample_mask(lengths, x.shape[1], policy, generator)
        if student.mask_emb is None:
            raise ValueError("mask-prediction needs a student built with mask_embedding=True")
        x = torch.where(mask[..., None], student.mask_emb.to(x.dtype), x)
    taps = student.encoder(x, pad_mask, plan.student_layers, keep_hidden=cfg.head_input == "layer")
    taps.pad_mask = pad_mask

    means = []
    n_frames = {}
    for slot in plan.teachers:
        tg = targets[slot]
        aligned = align_student_to_teacher(taps, tg.framerate, 50.0, teacher_length=tg.length)
        n = aligned.final.shape[1]
        valid = ~aligned.pad_mask
        if tg.lengths is not None:
            valid = valid & (torch.arange(n)[None, :] < tg.lengths[:, None])
        if mask is not None:
            m = mask if tg.framerate == 50.0 else pool_pad_mask(mask)
            valid = valid & m[:, :n]
        count = int(valid.sum())
        if count == 0:
            raise ValueError(f"no loss frames for teacher {slot}")
        n_frames[slot] = count
        slot_means = []
        for k, (l_s, l_t) in enumerate(zip(plan.student_layers, plan.teacher_layers[slot]), start=1):
            rep = aligned.hidden[l_s] if cfg.head_input == "layer" else aligned.taps[l_s]
            target = tg.layers[l_t][:, :n].to(rep.dtype)
            if target.shape[0] != rep.shape[0]:
                raise ValueError(f"batch mismatch at pair (student {l_s}, {slot} {l_t})")
            pred = heads.head(slot, k)(rep)
            if pred.shape[-1] != target.shape[-1]:
                raise ValueError(f"dim mismatch at pair (student {l_s}, {slot} {l_t}): "
                                 f"head gives {pred.shape[-1]}, teacher gives {target.shape[-1]}")
            if cfg.normalize_targets:
                target = normalize_targets(target)
            p, z = pred[valid], target[valid]
            if cfg.objective == "l1cos":
                terms = l1_cosine_loss(p, z, diag)
            else:
                terms = framewise_infonce(p, z, cfg.n_negatives, cfg.temperature, generator)
            slot_means.append(terms.mean())
        means.append(torch.stack(slot_means))
    layer_means = torch.stack(means)
    # pairwise teacher sum first so swapping teacher slots is bit-exact
    loss = layer_means.sum(0).sum() / layer_means.numel()
    return DistillOutput(loss, layer_means.detach(), n_frames, diag, mask)


def distill_step(student: AudioEncoder, heads: DistillHeads, plan: DistillPlan, mel: torch.Tensor,
                 mel_lengths: torch.Tensor, targets: Mapping[str, TeacherTargets], cfg: LossConfig,
                 generator: torch.Generator | None = None) -> DistillOutput:
    """:func:`distill_loss` followed by backward into student and head grads."""
    out = distill_loss(student, heads, plan, mel, mel_lengths, targets, cfg, generator)
    out.loss.backward()
    return out
