"""Noise schedule, forward corruption, training loss, guidance and samplers.

The diffusion state is the mel matrix rescaled to [-1, 1] (floor -> -1,
peak -> +1). The tokenizer and detokenizer are the first and last stages of
the denoiser, so they train end-to-end through the noise-prediction loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .model import DiTSinger, ScoreBatch, collate_scores, latent_length
from .numerics import ContractError, Rng, seeded_gaussian
from .score_data import MEL_FLOOR, MEL_PEAK, MelTensor, ScoreSequence, frame_count

_CENTER = 0.5 * (MEL_FLOOR + MEL_PEAK)
_HALF = 0.5 * (MEL_PEAK - MEL_FLOOR)


def mel_to_state(values) -> torch.Tensor:
    return (torch.as_tensor(np.asarray(values, dtype=np.float64)) - _CENTER) / _HALF


def state_to_mel(x: torch.Tensor) -> np.ndarray:
    return (x.detach().to(torch.float64).numpy() * _HALF + _CENTER).astype(np.float32)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # beta[t - 1] for t = 1..T
    kind: str = "linear"

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(T, np.linspace(beta_start, beta_end, T, dtype=np.float64), "linear")

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008) -> "NoiseSchedule":
        f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        ab = np.array([f(t) / f(0) for t in range(T + 1)])
        beta = np.clip(1 - ab[1:] / ab[:-1], 1e-8, 0.999)
        return cls(T, beta, "cosine")

    @classmethod
    def from_kind(cls, kind: str, T: int = 1000) -> "NoiseSchedule":
        if kind == "linear":
            return cls.linear(T)
        if kind == "cosine":
            return cls.cosine(T)
        raise ContractError(f"unknown schedule {kind!r}")

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] = 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.beta)])

    # Continuous extension: log alpha_bar linear between integer steps.
    def log_alpha_bar_at(self, t) -> np.ndarray:
        return np.interp(t, np.arange(self.T + 1), np.log(self.alpha_bar))

    def lam_at(self, t) -> np.ndarray:
        la = self.log_alpha_bar_at(t)
        return 0.5 * la - 0.5 * np.log(-np.expm1(la))

    def t_of_lam(self, lam) -> np.ndarray:
        ts = np.linspace(1.0, float(self.T), 64 * self.T + 1)
        lams = self.lam_at(ts)
        return np.interp(lam, lams[::-1], ts[::-1])


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 4.0
    cond_dropout_p: float = 0.1


def _check_t(t, schedule: NoiseSchedule, allow_zero: bool = False):
    tt = np.asarray(t)
    lo = 0 if allow_zero else 1
    if (tt < lo).any() or (tt > schedule.T).any():
        raise ContractError(f"timestep outside [{lo}, {schedule.T}]: {t}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` is an int or a per-row tensor/array broadcasting over the leading
    axis of ``x0``. ``t = 0`` returns ``x0``.
    """
    _check_t(t, schedule, allow_zero=True)
    ab = torch.as_tensor(schedule.alpha_bar[np.asarray(t, dtype=np.int64)], dtype=x0.dtype)
    ab = ab.reshape(ab.shape + (1,) * (x0.dim() - ab.dim()))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def q_step(x_prev: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One forward transition ``x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I)``."""
    _check_t(t, schedule)
    b = float(schedule.beta[t - 1])
    return math.sqrt(1 - b) * x_prev + math.sqrt(b) * eps


def frame_validity(batch: ScoreBatch, factor: int, frames: int) -> torch.Tensor:
    """(B, frames) mask of frames belonging to each utterance's own latents."""
    return batch.latent_valid.repeat_interleave(factor, dim=1)[:, :frames]


def pad_states(mels: list[np.ndarray], factor: int, dtype=torch.float64) -> torch.Tensor:
    """Stack normalized mel states, padding each to ``ceil(F/f)*f`` frames with floor (-1)."""
    n = max(latent_length(m.shape[0], factor) for m in mels) * factor
    out = torch.full((len(mels), n, mels[0].shape[1]), -1.0, dtype=dtype)
    for b, m in enumerate(mels):
        out[b, : m.shape[0]] = mel_to_state(m).to(dtype)
    return out


def draw_training_noise(rng: Rng, frames: int, bins: int, schedule: NoiseSchedule, factor: int, dropout_p: float, dtype):
    """Per-utterance draws: timestep, noise over its own padded frames, dropout flag."""
    g = rng.child("t").generator()
    t = int(g.integers(1, schedule.T + 1))
    drop = bool(rng.child("drop").generator().random() < dropout_p)
    eps = seeded_gaussian(rng.child("eps"), latent_length(frames, factor) * factor, bins, dtype)
    return t, eps, drop


def training_loss(model: DiTSinger, x0: torch.Tensor, batch: ScoreBatch, rngs: list[Rng], schedule: NoiseSchedule, guidance: GuidanceConfig, *, return_parts: bool = False):
    """Mean squared noise-prediction error.

    Each utterance ``b`` draws its timestep, noise and condition-dropout flag
    from ``rngs[b]``, so the loss of an utterance does not depend on which
    batch it sits in. Per-utterance errors are averaged over its own frames,
    then over the batch.
    """
    B, n, bins = x0.shape
    f = model.cfg.downsample_factor
    ts, drops = [], []
    eps = torch.zeros_like(x0)
    for b in range(B):
        t, e, drop = draw_training_noise(rngs[b], batch.frames[b], bins, schedule, f, guidance.cond_dropout_p, x0.dtype)
        ts.append(t)
        drops.append(drop)
        eps[b, : e.shape[0]] = e
    t_arr = np.array(ts)
    x_t = q_sample(x0, t_arr, eps, schedule)
    cond = model.bundle(batch, torch.tensor(t_arr, dtype=x0.dtype), unconditional=torch.tensor(drops))
    pred = model.predict_noise(x_t, cond)
    valid = frame_validity(batch, f, n).to(x0.dtype).unsqueeze(-1)
    per = ((pred - eps) ** 2 * valid).sum(dim=(1, 2)) / (valid.sum(dim=(1, 2)) * bins)
    loss = per.mean()
    if return_parts:
        return loss, {"t": t_arr, "dropped": drops, "eps": eps, "pred": pred}
    return loss


def cfg_epsilon(eps_fn: Callable, x_t, t, cond, uncond, w: float) -> torch.Tensor:
    """Guided noise ``eps_u + w (eps_c - eps_u)``, evaluated as ``(1 - w) eps_u + w eps_c``.

    The two forms are algebraically equal; the second returns ``eps_u`` and
    ``eps_c`` bit for bit at ``w = 0`` and ``w = 1``.
    """
    if w < 0:
        raise ContractError("guidance weight must be >= 0")
    eps_c = eps_fn(x_t, t, cond)
    eps_u = eps_fn(x_t, t, uncond)
    return (1.0 - w) * eps_u + w * eps_c


class _Denoiser:
    """Binds a model to one utterance: builds conditional/unconditional bundles per timestep."""

    def __init__(self, model: DiTSinger, score: ScoreSequence, masked: bool | None = None):
        cfg = model.cfg
        self.model = model
        self.frames = frame_count(score.total_duration, cfg.hop, cfg.sample_rate)
        if self.frames < 1:
            raise ContractError("score has zero duration")
        self.batch = collate_scores([score], cfg, [self.frames], masked=masked)
        with torch.no_grad():
            self.h_local = model.encode(self.batch)
        self.padded = latent_length(self.frames, cfg.downsample_factor) * cfg.downsample_factor

    def __call__(self, x, t: float, unconditional: bool):
        dt = self.model.dtype
        tt = torch.full((1,), float(t), dtype=dt)
        cond = self.model.bundle(self.batch, tt, unconditional=[unconditional], h_local=self.h_local)
        return self.model.predict_noise(x, cond)

    def guided(self, x, t: float, w: float):
        return cfg_epsilon(lambda xx, tt, u: self(xx, tt, u), x, t, False, True, w)


def ancestral_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    if not 1 <= steps <= schedule.T:
        raise ContractError(f"steps must lie in [1, {schedule.T}]")
    ts = np.unique(np.round(np.linspace(1, schedule.T, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def ancestral_loop(eps_fn: Callable, x: torch.Tensor, schedule: NoiseSchedule, steps: int, rng: Rng, clip: bool = True) -> torch.Tensor:
    """DDPM reverse chain on a respaced timestep grid; no noise on the final step."""
    ab = schedule.alpha_bar
    ts = ancestral_timesteps(schedule, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        a_t, a_prev = ab[t], ab[t_prev]
        beta = 1.0 - a_t / a_prev
        eps = eps_fn(x, t)
        x0 = (x - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
        if clip:
            x0 = x0.clamp(-1.0, 1.0)
        mean = (math.sqrt(a_prev) * beta / (1 - a_t)) * x0 + (math.sqrt(1 - beta) * (1 - a_prev) / (1 - a_t)) * x
        if t_prev > 0:
            var = beta * (1 - a_prev) / (1 - a_t)
            z = seeded_gaussian(rng.child("step", i), x.shape[-2], x.shape[-1], x.dtype).reshape(x.shape)
            x = mean + math.sqrt(var) * z
        else:
            x = mean
    return x


def ode_grid(schedule: NoiseSchedule, steps: int, t_end: float = 1.0) -> np.ndarray:
    """Timesteps from T down to ``t_end`` spaced uniformly in log-SNR."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    lam = np.linspace(schedule.lam_at(float(schedule.T)), schedule.lam_at(t_end), steps + 1)
    ts = schedule.t_of_lam(lam)
    ts[0], ts[-1] = float(schedule.T), t_end
    return ts


def ode_loop(eps_fn: Callable, x: torch.Tensor, schedule: NoiseSchedule, steps: int, t_end: float = 1.0, trajectory: list | None = None) -> torch.Tensor:
    """First-order exponential-integrator solve of the probability-flow ODE.

    ``x_s = (alpha_s / alpha_t) x_t - sigma_s (exp(h) - 1) eps(x_t, t)`` with
    ``h = lambda_s - lambda_t``.
    """
    ts = ode_grid(schedule, steps, t_end)
    la = schedule.log_alpha_bar_at(ts)
    alpha = np.exp(0.5 * la)
    sigma = np.sqrt(-np.expm1(la))
    lam = np.log(alpha) - np.log(sigma)
    if trajectory is not None:
        trajectory.append((float(ts[0]), x.clone()))
    for i in range(steps):
        h = lam[i + 1] - lam[i]
        eps = eps_fn(x, float(ts[i]))
        x = (alpha[i + 1] / alpha[i]) * x - sigma[i + 1] * math.expm1(h) * eps
        if trajectory is not None:
            trajectory.append((float(ts[i + 1]), x.clone()))
    return x


def linear_ode_solution(x_T: torch.Tensor, schedule: NoiseSchedule, t_from: float, t_to: float) -> torch.Tensor:
    """Exact probability-flow solution when ``eps(x, t) = x``.

    With ``y = x / alpha``: ``dy/dlambda = -sigma y`` and
    ``integral sigma dlambda = -asinh(exp(-lambda))``, so
    ``y_to = y_from * exp(asinh(e^{-lambda_to}) - asinh(e^{-lambda_from}))``.
    """
    la = schedule.log_alpha_bar_at(np.array([t_from, t_to]))
    alpha = np.exp(0.5 * la)
    lam = schedule.lam_at(np.array([t_from, t_to]))
    growth = math.exp(math.asinh(math.exp(-lam[1])) - math.asinh(math.exp(-lam[0])))
    return x_T * (alpha[1] / alpha[0]) * growth


def _initial_state(den: _Denoiser, rng: Rng) -> torch.Tensor:
    bins = den.model.cfg.mel_bins
    return seeded_gaussian(rng.child("init"), den.padded, bins, den.model.dtype).unsqueeze(0)


def _finish(den: _Denoiser, x: torch.Tensor) -> MelTensor:
    cfg = den.model.cfg
    return MelTensor(state_to_mel(x[0, : den.frames]), cfg.hop, cfg.sample_rate)


@torch.no_grad()
def sample_ancestral(model: DiTSinger, score: ScoreSequence, schedule: NoiseSchedule, guidance: GuidanceConfig, rng: Rng, steps: int, masked: bool | None = None) -> MelTensor:
    den = _Denoiser(model, score, masked)
    x = _initial_state(den, rng)
    x = ancestral_loop(lambda xx, t: den.guided(xx, t, guidance.w), x, schedule, steps, rng)
    return _finish(den, x)


@torch.no_grad()
def sample_ode(model: DiTSinger, score: ScoreSequence, schedule: NoiseSchedule, guidance: GuidanceConfig, steps: int, rng: Rng, masked: bool | None = None) -> MelTensor:
    den = _Denoiser(model, score, masked)
    x = _initial_state(den, rng)
    x = ode_loop(lambda xx, t: den.guided(xx, t, guidance.w), x, schedule, steps)
    return _finish(den, x)


def sample(model, score, schedule, guidance, rng, sampler: str = "ode", steps: int = 50, masked: bool | None = None) -> MelTensor:
    if sampler == "ode":
        return sample_ode(model, score, schedule, guidance, steps, rng, masked)
    if sampler == "ancestral":
        return sample_ancestral(model, score, schedule, guidance, rng, steps, masked)
    raise ContractError(f"unknown sampler {sampler!r}")
