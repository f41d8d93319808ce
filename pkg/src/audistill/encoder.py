"""Student transformer encoder.

Pre-LN transformer blocks with learned relative-key attention, preceded by a
5-layer grouped convolutional positional encoding. Every block records its
FFN output (second projection, before the residual add) so that sparse
layer-to-layer objectives can tap any subset of layers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .frontend import N_MELS, PATCH, AudioFrontend, FeatureSequence


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int
    n_layers: int
    n_heads: int
    ffn_mult: int = 4
    conv_pos_layers: int = 5
    conv_pos_kernel: int = 19
    conv_pos_groups: int = 16
    rel_pos_max_distance: int = 160
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % self.conv_pos_groups:
            raise ValueError(f"d_model={self.d_model} not divisible by conv_pos_groups={self.conv_pos_groups}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


# Reference model sizes; head counts assume 64-dim heads. "micro" is a desk-scale
# preset for tests and CI only.
ENCODER_PRESETS = {
    "small": EncoderConfig(d_model=384, n_layers=12, n_heads=6),
    "base": EncoderConfig(d_model=768, n_layers=12, n_heads=12),
    "large": EncoderConfig(d_model=1024, n_layers=24, n_heads=16),
    "micro": EncoderConfig(d_model=64, n_layers=4, n_heads=4),
}
ENCODER_PRESETS["small_ablation"] = ENCODER_PRESETS["small"]


@dataclass
class LayerTapSet:
    """FFN outputs at tapped layers (1-based), plus block outputs.

    ``hidden[l]`` is the residual stream after block ``l`` (``hidden[0]`` is
    the input after positional encoding); ``final`` equals ``hidden[L]``.
    """

    taps: dict[int, torch.Tensor]
    final: torch.Tensor
    hidden: dict[int, torch.Tensor] = field(default_factory=dict)
    pad_mask: torch.Tensor | None = None

    @property
    def length(self) -> int:
        return self.final.shape[-2]


def init_weights(module: nn.Module, std: float, generator: torch.Generator) -> None:
    """Truncated-normal weights, zero biases, identity LayerNorms."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, RelativeSelfAttention):
            nn.init.trunc_normal_(m.rel_key, std=std, a=-2 * std, b=2 * std, generator=generator)


class ConvPositionalEncoding(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        k = cfg.conv_pos_kernel
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.d_model, cfg.d_model, k, padding=k // 2, groups=cfg.conv_pos_groups)
            for _ in range(cfg.conv_pos_layers)
        )
        self.trim = 1 if k % 2 == 0 else 0

    def forward(self, x: torch.Tensor, keep: torch.Tensor | None) -> torch.Tensor:
        y = x.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            if keep is not None:
                y = y * keep
            y = conv(y)
            if self.trim:
                y = y[..., : -self.trim]
            if i < len(self.convs) - 1:
                y = F.gelu(y)
        return x + y.transpose(1, 2)


class RelativeSelfAttention(nn.Module):
    """Multi-head attention with clipped learned relative-key embeddings."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.max_distance = cfg.rel_pos_max_distance
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)
        self.rel_key = nn.Parameter(torch.zeros(2 * self.max_distance + 1, self.head_dim))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2)
        # only distances that occur in a length-t sequence are materialised
        r = min(self.max_distance, t - 1)
        table = self.rel_key[self.max_distance - r : self.max_distance + r + 1]
        pos = torch.arange(t)
        rel_idx = (pos[None, :] - pos[:, None]).clamp(-r, r) + r
        rel = q @ table.T  # [b, h, t, 2r+1]
        scores = scores + rel.gather(-1, rel_idx.expand(b, self.n_heads, t, t))
        scores = scores / math.sqrt(self.head_dim)
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = self.drop(scores.softmax(dim=-1))
        y = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class TransformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ln_attn = nn.LayerNorm(cfg.d_model)
        self.attn = RelativeSelfAttention(cfg)
        self.ln_ffn = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.ffn_mult * cfg.d_model)
        self.fc2 = nn.Linear(cfg.ffn_mult * cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None):
        h = x + self.drop(self.attn(self.ln_attn(x), pad_mask))
        ffn = self.fc2(self.drop(F.gelu(self.fc1(self.ln_ffn(h)))))
        return h + self.drop(ffn), ffn


def check_tap_layers(tap_layers, n_layers: int) -> list[int]:
    taps = [int(l) for l in tap_layers]
    if taps != sorted(set(taps)):
        raise ValueError(f"tap layers must be sorted and unique, got {taps}")
    for l in taps:
        if not 1 <= l <= n_layers:
            raise ValueError(f"tap layer {l} out of range [1, {n_layers}]")
    return taps


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.pos_conv = ConvPositionalEncoding(cfg)
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.drop = nn.Dropout(cfg.dropout)
        init_weights(self, cfg.init_std, torch.Generator().manual_seed(seed))

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None,
                tap_layers=(), keep_hidden: bool = False) -> LayerTapSet:
        """``x`` [B, T, d]; ``pad_mask`` [B, T] True where padded."""
        taps_wanted = set(check_tap_layers(tap_layers, self.cfg.n_layers))
        keep = None
        if pad_mask is not None:
            keep = (~pad_mask)[:, None, :].to(x.dtype)
            x = x * keep.transpose(1, 2)
        x = self.drop(self.pos_conv(x, keep))
        hidden = {0: x} if keep_hidden else {}
        taps = {}
        for i, block in enumerate(self.blocks, start=1):
            x, ffn = block(x, pad_mask)
            if i in taps_wanted:
                taps[i] = ffn
            if keep_hidden:
                hidden[i] = x
        return LayerTapSet(taps=taps, final=x, hidden=hidden, pad_mask=pad_mask)


class AudioEncoder(nn.Module):
    """Frontend + encoder: normalized log-Mel in, taps out.

    With ``mask_embedding=True`` a learned vector replaces features at the
    positions flagged by ``mask`` (mask-prediction variant).
    """

    def __init__(self, cfg: EncoderConfig, extraction: str = "frame", seed: int = 0,
                 mask_embedding: bool = False):
        super().__init__()
        self.cfg = cfg
        self.extraction = extraction
        self.frontend = AudioFrontend(cfg.d_model, extraction)
        self.encoder = Encoder(cfg, seed=seed)
        self.mask_emb = nn.Parameter(torch.zeros(cfg.d_model)) if mask_embedding else None
        gen = torch.Generator().manual_seed(seed + 7919)
        init_weights(self.frontend, cfg.init_std, gen)
        if self.mask_emb is not None:
            nn.init.uniform_(self.mask_emb, generator=gen)

    def embed(self, mel: torch.Tensor, mel_lengths: torch.Tensor | None = None):
        return self.frontend(mel, mel_lengths)

    def forward(self, mel: torch.Tensor, mel_lengths: torch.Tensor | None = None, tap_layers=(),
                mask: torch.Tensor | None = None, keep_hidden: bool = False) -> LayerTapSet:
        x, pad_mask = self.frontend(mel, mel_lengths)
        if mask is not None:
            if self.mask_emb is None:
                raise ValueError("model was built without a mask embedding")
            x = torch.where(mask[..., None], self.mask_emb.to(x.dtype), x)
        return self.encoder(x, pad_mask, tap_layers, keep_hidden=keep_hidden)


def encode(features: FeatureSequence, config: EncoderConfig, tap_layers, pad_mask=None,
           model: Encoder | None = None) -> LayerTapSet:
    """Single-sequence convenience wrapper around :class:`Encoder`."""
    model = model if model is not None else Encoder(config)
    x = features.data[None]
    mask = None if pad_mask is None else torch.as_tensor(pad_mask, dtype=torch.bool)[None]
    if mask is not None and mask.shape[1] != x.shape[1]:
        raise ValueError(f"pad_mask length {mask.shape[1]} != sequence length {x.shape[1]}")
    out = model(x, mask, tap_layers)
    return LayerTapSet(
        taps={l: v[0] for l, v in out.taps.items()},
        final=out.final[0],
        pad_mask=None if mask is None else mask[0],
    )


@dataclass(frozen=True)
class FlopCount:
    """Forward-pass multiply-accumulate counts for one sequence."""

    embedding: int
    projections: int
    attention: int
    ffn: int

    @property
    def total(self) -> int:
        return self.embedding + self.projections + self.attention + self.ffn


def count_flops(config: EncoderConfig, seq_len: int, extraction: str = "frame") -> FlopCount:
    """Analytic MAC count for a ``seq_len``-token forward pass.

    Attention counts Q.K^T, the relative-key term and attn.V as three
    T^2 * d products per layer; projections are QKV plus output.
    """
    if seq_len <= 0:
        raise ValueError("seq_len must be positive")
    t, d, layers = seq_len, config.d_model, config.n_layers
    embed = 0
    if extraction in ("frame", "fused"):
        embed += t * 3 * N_MELS * d
    if extraction in ("patch", "fused"):
        embed += t * PATCH * PATCH * d
    embed += config.conv_pos_layers * t * config.conv_pos_kernel * (d // config.conv_pos_groups) * d
    return FlopCount(
        embedding=embed,
        projections=layers * 4 * t * d * d,
        attention=layers * 3 * t * t * d,
        ffn=layers * 2 * t * d * config.ffn_mult * d,
    )
