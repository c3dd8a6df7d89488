"""Implicit phoneme-to-frame alignment through span-masked cross-attention.

Each phoneme inherits the time span of its character, extended backward by an
offset ``delta`` (capped by the current and previous character durations).
Latent frames may only attend to phonemes whose extended span contains the
frame's midpoint time. Frames covered by no span attend a reserved silence
column appended after the last phoneme.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import NEG_INF, ContractError, softmax_with_bias
from .score_data import ScoreSequence


@dataclass(frozen=True)
class ExtendedSpan:
    t_start_ext: float
    t_end: float
    phoneme_index: int


@dataclass(frozen=True)
class AlignmentMask:
    """Additive bias of shape ``(latent_frames, phonemes + 1)``.

    Entries are 0 (attend) or ``-inf`` (blocked). The last column is the
    silence token. ``unvoiced[i]`` marks frames that fall in no span.
    """

    bias: np.ndarray
    frame_clock: float
    unvoiced: np.ndarray

    @property
    def latent_frames(self) -> int:
        return self.bias.shape[0]

    @property
    def phonemes(self) -> int:
        return self.bias.shape[1] - 1

    @property
    def allowed(self) -> np.ndarray:
        return self.bias == 0

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.from_numpy(np.where(self.allowed, 0.0, NEG_INF)).to(dtype)

    def to_csv(self) -> str:
        buf = io.StringIO()
        header = [f"ph{j}" for j in range(self.phonemes)] + ["sil"]
        buf.write("frame," + ",".join(header) + "\n")
        for i, row in enumerate(self.bias):
            buf.write(f"{i}," + ",".join("0" if v == 0 else "-inf" for v in row) + "\n")
        return buf.getvalue()


def extend_spans(score: ScoreSequence, delta: float) -> list[ExtendedSpan]:
    """Per-phoneme attention intervals ``[t_start - min(delta, d_char, d_prev), t_start + d_char]``.

    ``d_prev`` of the first character is 0, so it is never extended.
    """
    if delta < 0:
        raise ContractError("delta must be >= 0")
    out = []
    d_prev = 0.0
    for span in score.spans:
        ext = min(delta, span.duration, d_prev)
        t0 = span.start_time - ext
        t1 = span.start_time + span.duration
        for j in span.phoneme_range:
            out.append(ExtendedSpan(t0, t1, j))
        d_prev = span.duration
    return out


def build_mask(spans: list[ExtendedSpan], latent_frames: int, frame_clock: float) -> AlignmentMask:
    if latent_frames < 1 or not frame_clock > 0:
        raise ContractError("need latent_frames >= 1 and frame_clock > 0")
    for k, s in enumerate(spans):
        if s.phoneme_index != k:
            raise ContractError(f"phoneme indices must be 0..n-1 without overlap; got {s.phoneme_index} at {k}")
    n = len(spans)
    t = (np.arange(latent_frames) + 0.5) * frame_clock
    starts = np.array([s.t_start_ext for s in spans], dtype=np.float64)
    ends = np.array([s.t_end for s in spans], dtype=np.float64)
    inside = (t[:, None] >= starts[None, :]) & (t[:, None] <= ends[None, :])
    unvoiced = ~inside.any(axis=1)
    allowed = np.concatenate([inside, unvoiced[:, None]], axis=1)
    bias = np.where(allowed, 0.0, -np.inf)
    return AlignmentMask(bias, frame_clock, unvoiced)


def latent_frame_clock(hop: int, sample_rate: int, downsample_factor: int) -> float:
    return hop * downsample_factor / sample_rate


def score_mask(score: ScoreSequence, delta: float, latent_frames: int, frame_clock: float) -> AlignmentMask:
    return build_mask(extend_spans(score, delta), latent_frames, frame_clock)


def unmasked(latent_frames: int, phonemes: int) -> AlignmentMask:
    """All-zero bias (no alignment constraint), used for ablations."""
    return AlignmentMask(np.zeros((latent_frames, phonemes + 1)), math.nan, np.zeros(latent_frames, dtype=bool))


def masked_cross_attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, mask, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d) + M) V`` with exact zeros at blocked positions.

    ``Q`` is ``(..., L_mel, d)``, ``K`` and ``V`` are ``(..., L_ph, d)``.
    ``mask`` is an :class:`AlignmentMask` or an additive bias tensor that
    broadcasts to ``(..., L_mel, L_ph)``.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ContractError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ContractError("K and V must have the same number of rows")
    bias = mask.tensor(Q.dtype) if isinstance(mask, AlignmentMask) else mask
    if bias.shape[-1] != K.shape[-2] or bias.shape[-2] not in (1, Q.shape[-2]):
        raise ContractError(f"mask {tuple(bias.shape[-2:])} does not match attention {(Q.shape[-2], K.shape[-2])}")
    bias = bias.to(Q.dtype)
    blocked = bias <= NEG_INF
    if not return_weights and bool((~blocked).any(dim=-1).all()):
        # Fused path: exp(NEG_INF - max) underflows to exactly 0, so blocked keys still contribute nothing.
        finite = torch.where(blocked, torch.full_like(bias, NEG_INF), bias)
        return F.scaled_dot_product_attention(Q, K, V, attn_mask=finite)
    logits = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    weights = softmax_with_bias(logits, bias)
    out = weights @ V
    return (out, weights) if return_weights else out


def attention_concentration(weights, mask: AlignmentMask) -> float:
    """Mean attention mass that falls on allowed positions, in [0, 1]."""
    w = weights.detach().cpu().numpy() if isinstance(weights, torch.Tensor) else np.asarray(weights)
    allowed = mask.allowed
    return float((w * allowed).sum(axis=-1).mean())
