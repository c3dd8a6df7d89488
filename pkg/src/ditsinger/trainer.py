"""Deterministic training loop with decoupled weight decay and resumable checkpoints.

All randomness is keyed statelessly: the sample at global position ``pos``
(counting every sample ever drawn) comes from an epoch permutation keyed by
``pos // N``, and its diffusion noise comes from ``rng.child("noise", pos)``.
Resuming therefore needs only the step counter, weights and optimizer moments.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .diffusion import GuidanceConfig, NoiseSchedule, pad_states, training_loss
from .model import DiTSinger, ModelConfig, collate_scores
from .numerics import ContractError, Rng
from .score_data import SyntheticCorpus

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    grad_accum_steps: int = 1
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    cond_dropout_p: float = 0.1
    checkpoint_every: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: str = "linear"
    diffusion_steps: int = 1000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1 or self.grad_accum_steps < 1 or self.iterations < 0:
            raise ContractError("batch_size, grad_accum_steps must be >= 1 and iterations >= 0")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Per-device batch 8 with 6-step accumulation, lr 1e-3, dropout 0.1."""
        return cls(batch_size=8, grad_accum_steps=6, learning_rate=1e-3, cond_dropout_p=0.1, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Per step: ``p <- p (1 - lr wd)``, then the bias-corrected Adam update.
    The decay never enters the moment estimates.
    """

    def __init__(self, params: list[torch.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            p.mul_(1 - self.lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v.sqrt() / math.sqrt(bc2)).add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / bc1)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, lr: float, grad_norms: dict):
        self.step, self.lr, self.grad_norms = step, lr, grad_norms
        worst = sorted(grad_norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
        super().__init__(f"non-finite loss at step {step} (lr={lr}); largest grad norms: {worst}")


@dataclass
class TrainState:
    model: DiTSinger
    optimizer: AdamW
    model_config: ModelConfig
    train_config: TrainConfig
    step: int = 0
    loss_history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def rng(self) -> Rng:
        return Rng(self.train_config.seed)


def init_state(model_config: ModelConfig, train_config: TrainConfig, dtype=torch.float32) -> TrainState:
    rng = Rng(train_config.seed)
    model = DiTSinger.build(model_config, rng, dtype)
    opt = AdamW(list(model.parameters()), train_config.learning_rate, train_config.betas, train_config.adam_eps, train_config.weight_decay)
    return TrainState(model, opt, model_config, train_config)


class _Data:
    def __init__(self, corpus: SyntheticCorpus, cfg: ModelConfig, dtype):
        if len(corpus) == 0:
            raise ContractError("corpus is empty")
        for s in corpus.samples[:1]:
            if s.mel.bins != cfg.mel_bins or s.mel.hop != cfg.hop or s.mel.sample_rate != cfg.sample_rate:
                raise ContractError("corpus geometry does not match model config")
        self.samples = corpus.samples
        self.cfg = cfg
        self.dtype = dtype

    def index_at(self, rng: Rng, pos: int) -> int:
        n = len(self.samples)
        epoch, k = divmod(pos, n)
        perm = rng.child("order", epoch).generator().permutation(n)
        return int(perm[k])

    def batch(self, rng: Rng, positions: list[int]):
        idx = [self.index_at(rng, p) for p in positions]
        samples = [self.samples[i] for i in idx]
        frames = [s.mel.frames for s in samples]
        x0 = pad_states([s.mel.values for s in samples], self.cfg.downsample_factor, self.dtype)
        batch = collate_scores([s.score for s in samples], self.cfg, frames)
        rngs = [rng.child("noise", p) for p in positions]
        return x0, batch, rngs


def _grad_norms(model: DiTSinger) -> dict:
    return {n: float(p.grad.norm()) if p.grad is not None else 0.0 for n, p in model.named_parameters()}


def train_step(state: TrainState, data: _Data, schedule: NoiseSchedule, guidance: GuidanceConfig) -> float:
    tc = state.train_config
    state.optimizer.zero_grad()
    k = tc.grad_accum_steps
    per_step = tc.batch_size * k
    total = 0.0
    for a in range(k):
        start = state.step * per_step + a * tc.batch_size
        x0, batch, rngs = data.batch(state.rng, list(range(start, start + tc.batch_size)))
        loss = training_loss(state.model, x0, batch, rngs, schedule, guidance)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(state.step + 1, tc.learning_rate, _grad_norms(state.model))
        (loss / k).backward()
        total += loss.item() / k
    norms = _grad_norms(state.model)
    if not all(math.isfinite(v) for v in norms.values()):
        raise NonFiniteLossError(state.step + 1, tc.learning_rate, norms)
    state.optimizer.step()
    state.step += 1
    state.loss_history.append((state.step, total))
    return total


def train(
    model_config: ModelConfig,
    corpus: SyntheticCorpus,
    train_config: TrainConfig,
    *,
    state: TrainState | None = None,
    out_dir=None,
    dtype=torch.float32,
    until: int | None = None,
    log_every: int = 100,
) -> tuple[TrainState, dict]:
    """Run ``train_config.iterations`` optimizer steps (or up to ``until``).

    Passing ``state`` resumes it. Checkpoints land in ``out_dir`` every
    ``checkpoint_every`` steps and at the end, with a ``loss.csv`` beside them.
    """
    torch.set_num_threads(1)
    state = init_state(model_config, train_config, dtype) if state is None else state
    schedule = NoiseSchedule.from_kind(train_config.schedule, train_config.diffusion_steps)
    guidance = GuidanceConfig(cond_dropout_p=train_config.cond_dropout_p)
    data = _Data(corpus, model_config, state.model.dtype)
    stop = train_config.iterations if until is None else min(until, train_config.iterations)
    out = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()
    state.model.train()
    while state.step < stop:
        loss = train_step(state, data, schedule, guidance)
        if log_every and state.step % log_every == 0:
            logger.info("step %d loss %.5f", state.step, loss)
        if out is not None and train_config.checkpoint_every and state.step % train_config.checkpoint_every == 0:
            save_checkpoint(state, out / f"step_{state.step:07d}.ckpt")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, out / "final.ckpt")
        write_loss_csv(state.loss_history, out / "loss.csv")
    return state, loss_report(state, time.perf_counter() - t0)


def loss_report(state: TrainState, seconds: float = 0.0) -> dict:
    losses = [l for _, l in state.loss_history]
    window = min(100, len(losses))
    return {
        "steps": state.step,
        "first_window_mean": float(np.mean(losses[:window])) if losses else None,
        "last_window_mean": float(np.mean(losses[-window:])) if losses else None,
        "final_loss": losses[-1] if losses else None,
        "seconds": seconds,
    }


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([step, repr(float(loss))])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DSCKPT\x00\x01"
CKPT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


class CheckpointError(IOError):
    pass


def _tensor_bytes(t: torch.Tensor, code: str) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=code).tobytes()


def save_checkpoint(state: TrainState, path) -> str:
    """Write weights, Adam moments, step and loss history. Returns the sha256 digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = list(state.model.named_parameters())
    dtype = named[0][1].dtype
    code = _DTYPES[dtype]
    header = {
        "version": CKPT_VERSION,
        "dtype": code,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "step": state.step,
        "optimizer_step": state.optimizer.step_count,
        "loss_history": [[s, float(l)] for s, l in state.loss_history],
        "params": [[n, list(p.shape)] for n, p in named],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(struct.pack("<8sIQ", CKPT_MAGIC, CKPT_VERSION, len(hb)) + hb)
    for group in ([p for _, p in named], state.optimizer.m, state.optimizer.v):
        for t in group:
            body += _tensor_bytes(t, code)
    digest = hashlib.sha256(body).digest()
    path.write_bytes(bytes(body) + digest)
    return digest.hex()


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    hsize = struct.calcsize("<8sIQ")
    magic, version, n = struct.unpack_from("<8sIQ", raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    return json.loads(raw[hsize: hsize + n].decode("utf-8"))


def load_checkpoint(path) -> TrainState:
    raw = Path(path).read_bytes()
    if len(raw) < 32 or hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CheckpointError(f"checksum mismatch in {path}")
    hsize = struct.calcsize("<8sIQ")
    magic, version, n = struct.unpack_from("<8sIQ", raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(raw[hsize: hsize + n].decode("utf-8"))
    code = header["dtype"]
    dtype = {v: k for k, v in _DTYPES.items()}[code]
    mc = ModelConfig.from_dict(header["model_config"])
    tc = TrainConfig.from_dict(header["train_config"])
    state = init_state(mc, tc, dtype)
    named = dict(state.model.named_parameters())
    offset = hsize + n
    item = np.dtype(code).itemsize

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=code, count=count, offset=offset).reshape(shape)
        offset += count * item
        return torch.from_numpy(arr.copy()).to(dtype)

    with torch.no_grad():
        for name, shape in header["params"]:
            named[name].copy_(take(shape))
        for buf in (state.optimizer.m, state.optimizer.v):
            for t, (_, shape) in zip(buf, header["params"]):
                t.copy_(take(shape))
    state.step = header["step"]
    state.optimizer.step_count = header["optimizer_step"]
    state.loss_history = [(int(s), float(l)) for s, l in header["loss_history"]]
    return state


def checkpoint_sha256(path) -> str:
    return Path(path).read_bytes()[-32:].hex()


def resume_with(state: TrainState, **train_overrides) -> TrainState:
    state.train_config = replace(state.train_config, **train_overrides)
    return state


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------


def evaluate_samples(model: DiTSinger, samples, rng: Rng, *, steps: int = 25, w: float = 4.0, sampler: str = "ode", masked: bool | None = None) -> dict:
    """Sample each score, compare against its oracle mel, and aggregate.

    Returns per-pair metric rows, their aggregate and the pooled
    phoneme-band decoding accuracy over voiced frames.
    """
    from .diffusion import sample as draw
    from .metrics import aggregate, evaluate_pair, phoneme_band_accuracy

    schedule = NoiseSchedule.linear()
    guidance = GuidanceConfig(w=w)
    model.eval()
    reports, correct, voiced = [], 0, 0
    for k, s in enumerate(samples):
        hyp = draw(model, s.score, schedule, guidance, rng.child("sample", k), sampler, steps, masked)
        reports.append(evaluate_pair(s.mel, hyp))
        c, v = phoneme_band_accuracy(hyp, s.score)
        correct, voiced = correct + c, voiced + v
    return {
        "rows": [r.to_dict() for r in reports],
        "summary": aggregate(reports),
        "band_accuracy": correct / voiced if voiced else None,
    }


def grouped_pseudosinger_experiment(
    n_groups_list,
    melody_budget: int,
    rng: Rng,
    *,
    variants_per_melody: int = 8,
    holdout_fraction: float = 0.25,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    eval_samples: int = 8,
    sample_steps: int = 10,
) -> list[dict]:
    """Sweep the number of melody groups under a fixed total melody budget.

    Each group plays the part of one melody-specific synthesizer and gets its
    own speaker id. Every setting trains a fresh model (no shared base model)
    and is scored on held-out lyrics over its training melodies.
    """
    from .model import preset
    from .score_data import build_corpus

    model_config = preset("tiny") if model_config is None else model_config
    train_config = TrainConfig(iterations=200) if train_config is None else train_config
    rows = []
    for n in n_groups_list:
        if n < 1 or n > model_config.speaker_count:
            raise ContractError(f"group count {n} outside [1, {model_config.speaker_count}]")
        per_group = max(1, melody_budget // n)
        train_c, test_c = build_corpus(rng.child("corpus"), n, per_group, variants_per_melody, holdout_fraction)
        state, report = train(model_config, train_c, replace(train_config, seed=rng.child("train", n).integer_seed()), log_every=0)
        picks = [s for s in test_c.samples if s.split == "unseen_lyrics"][:eval_samples]
        ev = evaluate_samples(state.model, picks, rng.child("eval", n), steps=sample_steps)
        rows.append({
            "n_groups": n,
            "melodies_per_group": per_group,
            "melodies": per_group * n,
            "train_samples": len(train_c),
            "eval_pairs": len(picks),
            "final_loss": report["last_window_mean"],
            **{k: ev["summary"][k] for k in ("mcd", "ffe", "f0rmse")},
            "band_accuracy": ev["band_accuracy"],
        })
    return rows


def scaling_experiment(
    presets: list[str],
    corpus_sizes: list[int],
    rng: Rng,
    *,
    iterations: int = 200,
    batch_size: int = 8,
    eval_samples: int = 4,
    sample_steps: int = 10,
    clip_seconds: float = 5.0,
) -> list[dict]:
    """Train every (preset, corpus size) pair with a fixed step budget.

    Corpus size counts training melodies; each has 8 lyric variants, two of
    which are held out for the proxy MCD against the oracle.
    """
    from .model import count_flops, preset as get_preset
    from .score_data import build_corpus

    rows = []
    for name in presets:
        cfg = get_preset(name)
        gflops = count_flops(cfg, clip_seconds)["total"]
        for size in corpus_sizes:
            train_c, test_c = build_corpus(rng.child("corpus"), 1, size, 8, 0.25, bins=cfg.mel_bins, hop=cfg.hop, sample_rate=cfg.sample_rate)
            tc = TrainConfig(iterations=iterations, batch_size=batch_size, seed=rng.child("train").integer_seed())
            state, report = train(cfg, train_c, tc, log_every=0)
            ev = evaluate_samples(state.model, test_c.samples[:eval_samples], rng.child("eval"), steps=sample_steps)
            hours = sum(s.mel.frames * s.mel.hop / s.mel.sample_rate for s in train_c.samples) / 3600.0
            rows.append({
                "preset": name,
                "gflops_5s": gflops,
                "train_samples": len(train_c),
                "data_hours": hours,
                "final_loss": report["last_window_mean"],
                "proxy_mcd": ev["summary"]["mcd"],
                "band_accuracy": ev["band_accuracy"],
            })
    return rows
