"""Diffusion-transformer noise predictor over mel frames.

Pipeline of :meth:`DiTSinger.predict_noise`:

1. strided Conv1d tokenizer (mel bins as channels) -> latent tokens;
2. ``depth`` DiT blocks: RoPE + QK-Norm self-attention, span-masked
   QK-Norm cross-attention to the encoded score, pointwise FFN, each wrapped
   in AdaLN-zero modulation driven by speaker + timestep embeddings;
3. final AdaLN + transposed-conv detokenizer back to mel frames.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import AlignmentMask, latent_frame_clock, masked_cross_attention, score_mask, unmasked
from .numerics import NEG_INF, ContractError, Rng, softmax_with_bias
from .score_data import (
    DURATION_BUCKETS,
    FULL_BINS,
    FULL_HOP,
    FULL_SAMPLE_RATE,
    TOY_BINS,
    TOY_HOP,
    TOY_SAMPLE_RATE,
    ScoreSequence,
)

PITCH_VOCAB = 128


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    width: int
    heads: int
    ffn_multiplier: float = 4.0
    downsample_factor: int = 1
    phoneme_vocab: int = 64
    pitch_vocab: int = PITCH_VOCAB
    duration_buckets: int = DURATION_BUCKETS
    speaker_count: int = 64
    mel_bins: int = FULL_BINS
    hop: int = FULL_HOP
    sample_rate: int = FULL_SAMPLE_RATE
    encoder_layers: int = 2
    delta: float = 1.0
    masked: bool = True
    name: str = "custom"

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError(f"width {self.width} not divisible by heads {self.heads}")
        if (self.width // self.heads) % 2:
            raise ContractError("head dimension must be even for RoPE")
        if self.downsample_factor not in (1, 2, 4):
            raise ContractError("downsample_factor must be 1, 2 or 4")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def ffn_width(self) -> int:
        return int(round(self.width * self.ffn_multiplier))

    @property
    def frame_clock(self) -> float:
        return latent_frame_clock(self.hop, self.sample_rate, self.downsample_factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


_FULL_SIZES = {"small": (4, 384, 6), "base": (8, 576, 9), "large": (16, 768, 12)}
_TOY_GEOMETRY = dict(mel_bins=TOY_BINS, hop=TOY_HOP, sample_rate=TOY_SAMPLE_RATE, phoneme_vocab=9, delta=0.1)


def preset(name: str, **overrides) -> ModelConfig:
    """Named configurations.

    ``small``/``base``/``large`` use the 80-bin 24 kHz geometry; a ``_2`` or
    ``_4`` suffix sets the tokenizer downsampling factor. ``tiny`` and
    ``small_toy`` are desk-scale presets on the 16-bin toy geometry.
    """
    key = name.lower().replace("-", "_")
    if key == "tiny":
        cfg = ModelConfig(depth=2, width=32, heads=4, downsample_factor=1, name="tiny", **_TOY_GEOMETRY)
    elif key == "small_toy":
        cfg = ModelConfig(depth=4, width=64, heads=4, downsample_factor=2, name="small_toy", **_TOY_GEOMETRY)
    else:
        base, _, factor = key.partition("_")
        if base not in _FULL_SIZES or factor not in ("", "1", "2", "4"):
            raise ContractError(f"unknown preset {name!r}")
        depth, width, heads = _FULL_SIZES[base]
        cfg = ModelConfig(depth=depth, width=width, heads=heads, downsample_factor=int(factor or 1), name=key)
    return replace(cfg, **overrides) if overrides else cfg


PRESET_NAMES = ("tiny", "small_toy", "small", "small_2", "small_4", "base", "base_2", "base_4", "large", "large_2", "large_4")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def rope_angles(positions: torch.Tensor, dim: int, base: float = 10000.0):
    half = dim // 2
    inv_freq = base ** (-torch.arange(half, dtype=positions.dtype) / half)
    ang = positions[..., None] * inv_freq
    return ang.cos(), ang.sin()


def apply_rope(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate feature pairs ``(x[k], x[k + d/2])`` by ``position * base^(-k/(d/2))``."""
    cos, sin = rope_angles(positions.to(x.dtype), x.shape[-1])
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def qk_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Attention(nn.Module):
    """Multi-head attention with optional QK-Norm and RoPE.

    With ``qk_norm`` each head's queries and keys are L2-normalized and the
    queries are scaled by a learned per-head temperature (stored as a log).
    """

    def __init__(self, dim: int, heads: int, qk_norm: bool = True, rope: bool = False):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        self.qk_norm = qk_norm
        self.rope = rope
        if qk_norm:
            self.log_temperature = nn.Parameter(torch.full((heads,), math.log(self.head_dim)))

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, bias=None, positions=None, context_positions=None, return_weights=False):
        context = x if context is None else context
        q = self._split(self.q(x))
        k, v = self.kv(context).chunk(2, dim=-1)
        k, v = self._split(k), self._split(v)
        if self.qk_norm:
            q, k = qk_normalize(q), qk_normalize(k)
            q = q * self.log_temperature.exp().view(1, -1, 1, 1)
        if self.rope:
            q = apply_rope(q, positions)
            k = apply_rope(k, positions if context_positions is None else context_positions)
        if bias is None:
            bias = torch.zeros(q.shape[-2], k.shape[-2], dtype=q.dtype)
        res = masked_cross_attention(q, k, v, bias, return_weights=return_weights)
        out, weights = res if return_weights else (res, None)
        out = out.transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        out = self.out(out)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


@dataclass
class AdaLnParams:
    gamma: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    beta: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    alpha: tuple[torch.Tensor, torch.Tensor, torch.Tensor]


@dataclass
class ConditionBundle:
    """Batched conditioning for one call of the denoiser.

    ``cross_bias`` is ``(B, L_lat, P)`` with silence / null columns already
    placed; ``self_bias`` is ``(B, L_lat)`` key padding (0 or ``NEG_INF``).
    """

    h_local: torch.Tensor
    speaker_embedding: torch.Tensor
    timestep_embedding: torch.Tensor
    cross_bias: torch.Tensor
    self_bias: torch.Tensor
    is_unconditional: torch.Tensor

    @property
    def coarse(self) -> torch.Tensor:
        return self.speaker_embedding + self.timestep_embedding


class DiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.width
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.self_attn = Attention(d, cfg.heads, qk_norm=True, rope=True)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.cross_attn = Attention(d, cfg.heads, qk_norm=True, rope=False)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ffn = FeedForward(d, cfg.ffn_width)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 9 * d))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def modulation(self, coarse: torch.Tensor) -> AdaLnParams:
        c = self.ada(coarse).chunk(9, dim=-1)
        return AdaLnParams(gamma=(c[0], c[3], c[6]), beta=(c[1], c[4], c[7]), alpha=(c[2], c[5], c[8]))

    def forward(self, x, cond: ConditionBundle, params: AdaLnParams | None = None, positions=None):
        p = self.modulation(cond.coarse) if params is None else params
        if positions is None:
            positions = torch.arange(x.shape[1], dtype=x.dtype)
        self_bias = cond.self_bias[:, None, None, :]
        cross_bias = cond.cross_bias[:, None, :, :]
        h = self.self_attn(modulate(self.norm1(x), p.beta[0], p.gamma[0]), bias=self_bias, positions=positions)
        x = x + p.alpha[0].unsqueeze(1) * h
        h = self.cross_attn(modulate(self.norm2(x), p.beta[1], p.gamma[1]), context=cond.h_local, bias=cross_bias)
        x = x + p.alpha[1].unsqueeze(1) * h
        h = self.ffn(modulate(self.norm3(x), p.beta[2], p.gamma[2]))
        return x + p.alpha[2].unsqueeze(1) * h


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads, qk_norm=False, rope=True)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn)

    def forward(self, x, bias, positions):
        x = x + self.attn(self.norm1(x), bias=bias, positions=positions)
        return x + self.ffn(self.norm2(x))


class ConditionEncoder(nn.Module):
    """Sum of pitch, phoneme, duration and slur embeddings, then a small RoPE transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.width
        self.pitch = nn.Embedding(cfg.pitch_vocab, d)
        self.phoneme = nn.Embedding(cfg.phoneme_vocab, d)
        self.duration = nn.Embedding(cfg.duration_buckets, d)
        self.slur = nn.Embedding(2, d)
        self.silence = nn.Parameter(torch.randn(d) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.ffn_width) for _ in range(cfg.encoder_layers))
        self.norm = nn.LayerNorm(d)

    def embed(self, batch: "ScoreBatch") -> torch.Tensor:
        """Position-wise embedding sum with the silence row placed after each sequence."""
        e = self.pitch(batch.pitch) + self.phoneme(batch.phoneme) + self.duration(batch.duration) + self.slur(batch.slur)
        is_sil = (torch.arange(e.shape[1])[None, :] == batch.lengths[:, None]).unsqueeze(-1)
        return torch.where(is_sil, self.silence.to(e.dtype).expand_as(e), e)

    def forward(self, batch: "ScoreBatch") -> torch.Tensor:
        x = self.embed(batch)
        valid = torch.arange(x.shape[1])[None, :] <= batch.lengths[:, None]
        bias = torch.where(valid, 0.0, NEG_INF).to(x.dtype)[:, None, None, :]
        pos = torch.arange(x.shape[1], dtype=x.dtype)
        for layer in self.layers:
            x = layer(x, bias, pos)
        return self.norm(x)


@dataclass
class ScoreBatch:
    """Padded integer score fields plus per-utterance alignment biases.

    Token axis has ``max(lengths) + 1`` slots; slot ``lengths[b]`` is the
    silence token. ``cross_bias`` columns follow the same layout.
    """

    phoneme: torch.Tensor
    pitch: torch.Tensor
    duration: torch.Tensor
    slur: torch.Tensor
    lengths: torch.Tensor
    cross_bias: torch.Tensor
    latent_valid: torch.Tensor
    speaker: torch.Tensor
    frames: list[int]
    masks: list[AlignmentMask]


def latent_length(frames: int, factor: int) -> int:
    return -(-frames // factor)


def collate_scores(scores: list[ScoreSequence], cfg: ModelConfig, frames: list[int], masked: bool | None = None) -> ScoreBatch:
    masked = cfg.masked if masked is None else masked
    n_max = max((len(s.tokens) for s in scores), default=0)
    lat = [latent_length(f, cfg.downsample_factor) for f in frames]
    l_max = max(lat)
    B, P = len(scores), n_max + 1
    ph = np.zeros((B, P), dtype=np.int64)
    pi = np.zeros((B, P), dtype=np.int64)
    du = np.zeros((B, P), dtype=np.int64)
    sl = np.zeros((B, P), dtype=np.int64)
    bias = np.full((B, l_max, P), NEG_INF)
    valid = np.zeros((B, l_max), dtype=bool)
    masks = []
    for b, s in enumerate(scores):
        s.validate(cfg.phoneme_vocab)
        n = len(s.tokens)
        for j, tok in enumerate(s.tokens):
            ph[b, j], pi[b, j], du[b, j], sl[b, j] = tok.phoneme_id, tok.pitch, tok.word_duration_bucket, int(tok.slur)
        m = score_mask(s, cfg.delta, lat[b], cfg.frame_clock) if masked else unmasked(lat[b], n)
        masks.append(m)
        bias[b, : lat[b], : n + 1] = np.where(m.allowed, 0.0, NEG_INF)
        bias[b, lat[b]:, n] = 0.0  # padded frames attend silence
        valid[b, : lat[b]] = True
    if (ph >= cfg.phoneme_vocab).any() or (pi >= cfg.pitch_vocab).any():
        raise ContractError("token field outside vocabulary")
    speakers = [s.speaker_id for s in scores]
    if any(not 0 <= k < cfg.speaker_count for k in speakers):
        raise ContractError("speaker id outside speaker table")
    return ScoreBatch(
        torch.from_numpy(ph), torch.from_numpy(pi), torch.from_numpy(du), torch.from_numpy(sl),
        torch.tensor([len(s.tokens) for s in scores], dtype=torch.int64),
        torch.from_numpy(bias), torch.from_numpy(valid), torch.tensor(speakers, dtype=torch.int64),
        list(frames), masks,
    )


class DiTSinger(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, f = cfg.width, cfg.downsample_factor
        self.encoder = ConditionEncoder(cfg)
        self.null = nn.Parameter(torch.randn(d) * 0.02)
        self.speaker = nn.Embedding(cfg.speaker_count, d)
        self.t_freq = 64
        self.t_mlp = nn.Sequential(nn.Linear(self.t_freq, d), nn.SiLU(), nn.Linear(d, d))
        self.tokenizer = nn.Conv1d(cfg.mel_bins, d, kernel_size=f, stride=f)
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.detokenizer = nn.ConvTranspose1d(d, cfg.mel_bins, kernel_size=f, stride=f)
        for lin in (self.final_ada[1], self.detokenizer):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    @classmethod
    def build(cls, cfg: ModelConfig, rng: Rng, dtype=torch.float32) -> "DiTSinger":
        state = torch.random.get_rng_state()
        torch.manual_seed(rng.child("init").integer_seed())
        try:
            model = cls(cfg)
        finally:
            torch.random.set_rng_state(state)
        return model.to(dtype)

    @property
    def dtype(self):
        return self.null.dtype

    # -- tokenizer ---------------------------------------------------------
    def tokenize(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, F, bins)`` mel frames -> ``(B, ceil(F/f), width)`` latent tokens."""
        f = self.cfg.downsample_factor
        pad = (-x.shape[1]) % f
        if pad:
            x = F.pad(x, (0, 0, 0, pad))
        return self.tokenizer(x.transpose(1, 2)).transpose(1, 2)

    def detokenize(self, z: torch.Tensor, frames: int | None = None) -> torch.Tensor:
        """``(B, L, width)`` -> ``(B, L*f, bins)`` cropped to ``frames``."""
        y = self.detokenizer(z.transpose(1, 2)).transpose(1, 2)
        return y if frames is None else y[:, :frames]

    # -- conditioning ------------------------------------------------------
    def timestep_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.t_mlp(timestep_features(t.to(self.dtype), self.t_freq))

    def encode(self, batch: ScoreBatch) -> torch.Tensor:
        return self.encoder(batch)

    def bundle(self, batch: ScoreBatch, t: torch.Tensor, unconditional=None, h_local: torch.Tensor | None = None) -> ConditionBundle:
        """Assemble conditioning; rows flagged ``unconditional`` get the null token and no mask."""
        B = batch.phoneme.shape[0]
        dt = self.dtype
        if unconditional is None:
            unconditional = torch.zeros(B, dtype=torch.bool)
        unconditional = torch.as_tensor(unconditional, dtype=torch.bool).reshape(B)
        h = self.encode(batch) if h_local is None else h_local
        cross = batch.cross_bias.to(dt)
        if bool(unconditional.any()):
            # Null token lives in column 0; every other column is blocked.
            null_h = torch.zeros_like(h)
            null_h[:, 0] = self.null.to(dt)
            null_bias = torch.full_like(cross, NEG_INF)
            null_bias[:, :, 0] = 0.0
            u = unconditional.view(B, 1, 1)
            h = torch.where(u, null_h, h)
            cross = torch.where(u, null_bias, cross)
        self_bias = torch.where(batch.latent_valid, 0.0, NEG_INF).to(dt)
        return ConditionBundle(
            h_local=h,
            speaker_embedding=self.speaker(batch.speaker),
            timestep_embedding=self.timestep_embedding(t),
            cross_bias=cross,
            self_bias=self_bias,
            is_unconditional=unconditional,
        )

    # -- denoiser ----------------------------------------------------------
    def blocks_forward(self, z: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
        pos = torch.arange(z.shape[1], dtype=z.dtype)
        for block in self.blocks:
            z = block(z, cond, positions=pos)
        return z

    def predict_noise(self, x_t: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
        """Noise estimate with the same shape as ``x_t`` ``(B, F, bins)``."""
        z = self.tokenize(x_t)
        z = self.blocks_forward(z, cond)
        shift, scale = self.final_ada(cond.coarse).chunk(2, dim=-1)
        z = modulate(self.final_norm(z), shift, scale)
        return self.detokenize(z, x_t.shape[1])

    def forward(self, x_t, cond):
        return self.predict_noise(x_t, cond)


def encode_conditions(model: DiTSinger, score: ScoreSequence) -> torch.Tensor:
    """``(len(tokens) + 1, width)`` encoded score, silence token last."""
    from .score_data import frame_count

    frames = frame_count(score.total_duration, model.cfg.hop, model.cfg.sample_rate) or 1
    batch = collate_scores([score], model.cfg, [frames])
    return model.encode(batch)[0]


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`DiTSinger` for ``cfg``."""
    d, f, h, m = cfg.width, cfg.downsample_factor, cfg.heads, cfg.ffn_width
    lin = lambda i, o: i * o + o  # noqa: E731
    attn = lin(d, d) + lin(d, 2 * d) + lin(d, d)
    ffn = lin(d, m) + lin(m, d)
    enc_layer = attn + ffn + 4 * d
    encoder = (cfg.pitch_vocab + cfg.phoneme_vocab + cfg.duration_buckets + 2) * d + d + cfg.encoder_layers * enc_layer + 2 * d
    block = 2 * (attn + h) + ffn + lin(d, 9 * d)
    head = lin(d, 2 * d) + (d * cfg.mel_bins * f + cfg.mel_bins)
    return (
        encoder
        + d  # null token
        + cfg.speaker_count * d
        + lin(64, d) + lin(d, d)
        + (cfg.mel_bins * f * d + d)
        + cfg.depth * block
        + head
    )


def count_flops(cfg: ModelConfig, duration: float, phoneme_rate: float = 8.0) -> dict:
    """Analytic forward-pass GFLOPs (2 per multiply-add) for a clip of ``duration`` seconds.

    ``phoneme_rate`` (phonemes per second) sets the condition length.
    """
    if duration <= 0:
        raise ContractError("duration must be positive")
    frames = math.ceil(duration * cfg.sample_rate / cfg.hop)
    L = latent_length(frames, cfg.downsample_factor)
    P = math.ceil(duration * phoneme_rate) + 1
    d, m = cfg.width, cfg.ffn_width
    self_proj = 2 * L * d * (3 * d) + 2 * L * d * d
    self_attn = 2 * 2 * L * L * d
    cross_proj = 2 * L * d * d + 2 * P * d * (2 * d) + 2 * L * d * d
    cross_attn = 2 * 2 * L * P * d
    ffn = 2 * 2 * L * d * m
    block = self_proj + self_attn + cross_proj + cross_attn + ffn
    enc_layer = 2 * P * d * (4 * d) + 2 * 2 * P * P * d + 2 * 2 * P * d * m
    conv = 2 * 2 * L * (cfg.mel_bins * cfg.downsample_factor) * d
    total = cfg.depth * block + cfg.encoder_layers * enc_layer + conv
    g = 1e-9
    return {
        "latent_length": L,
        "self_attention": cfg.depth * self_attn * g,
        "blocks": cfg.depth * block * g,
        "encoder": cfg.encoder_layers * enc_layer * g,
        "conv": conv * g,
        "total": total * g,
    }
