import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from torch.func import functional_call

from ditsinger.diffusion import GuidanceConfig, NoiseSchedule, pad_states, training_loss
from ditsinger.model import (
    PRESET_NAMES,
    Attention,
    ConditionEncoder,
    DiTSinger,
    ModelConfig,
    apply_rope,
    collate_scores,
    count_flops,
    count_parameters,
    encode_conditions,
    preset,
    qk_normalize,
)
from ditsinger.numerics import NEG_INF, ContractError, Rng, gradient_check
from ditsinger.score_data import TOY_BINS, TOY_HOP, TOY_SAMPLE_RATE, frame_count, oracle_synthesize

from conftest import make_score, randomize

SEEDS = range(20)
TOL = 1e-4


def micro_config(**kw) -> ModelConfig:
    base = dict(
        depth=1, width=8, heads=2, ffn_multiplier=2, downsample_factor=2, phoneme_vocab=9,
        speaker_count=2, mel_bins=TOY_BINS, hop=TOY_HOP, sample_rate=TOY_SAMPLE_RATE,
        encoder_layers=1, delta=0.05, name="micro",
    )
    base.update(kw)
    return ModelConfig(**base)


def short_score(seed: int):
    rng = np.random.default_rng(seed)
    durs = [float(rng.integers(30, 80)) / 1000 for _ in range(2)]
    ids = [int(i) for i in rng.integers(1, 9, size=3)]
    return make_score(durs, [2, 1], start=0.02, tail=0.02, ids=ids, pitch=int(rng.integers(48, 85)))


def param_subset_check(module: nn.Module, loss_of, seed: int, k: int = 24, picks=None) -> float:
    """Finite-difference check on ``k`` random parameter coordinates.

    ``loss_of(call)`` computes a scalar, where ``call`` runs ``module`` with
    the perturbed parameters substituted.
    """
    g = np.random.default_rng(seed)
    named = {n: p.detach() for n, p in module.named_parameters()}
    if picks is None:
        names = list(named)
        picks = []
        for _ in range(k):
            n = names[int(g.integers(len(names)))]
            picks.append((n, int(g.integers(named[n].numel()))))
    x0 = torch.tensor([named[n].reshape(-1)[i].item() for n, i in picks], dtype=torch.float64)

    def f(x):
        params = dict(named)
        for j, (n, i) in enumerate(picks):
            flat = params[n].reshape(-1).index_put((torch.tensor([i]),), x[j: j + 1])
            params[n] = flat.reshape(named[n].shape)
        return loss_of(lambda *a, **kw: functional_call(module, params, a, kw))

    return gradient_check(f, x0)


class EmbedOnly(nn.Module):
    def __init__(self, enc):
        super().__init__()
        self.enc = enc

    def forward(self, batch):
        return self.enc.embed(batch)


class LossOnly(nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, *args):
        return training_loss(self.model, *args)


class TestGradients:
    def test_embeddings(self):
        cfg = micro_config()
        for seed in SEEDS:
            torch.manual_seed(seed)
            module = EmbedOnly(ConditionEncoder(cfg).double())
            batch = collate_scores([short_score(seed)], cfg, [20])
            w = torch.randn(1, batch.phoneme.shape[1], cfg.width, dtype=torch.float64)
            picks = []
            for table, ids in (("pitch", batch.pitch), ("phoneme", batch.phoneme), ("duration", batch.duration), ("slur", batch.slur)):
                for row in ids.unique().tolist():
                    picks += [(f"enc.{table}.weight", row * cfg.width + c) for c in (0, 3, 7)]
            picks += [("enc.silence", c) for c in range(cfg.width)]
            assert param_subset_check(module, lambda call: (call(batch) * w).sum(), seed, picks=picks) < TOL

    def test_condition_encoder(self):
        cfg = micro_config()
        for seed in SEEDS:
            torch.manual_seed(seed)
            enc = ConditionEncoder(cfg).double()
            batch = collate_scores([short_score(seed), make_score([0.05], [1], start=0.01)], cfg, [20, 8])
            w = torch.randn(2, batch.phoneme.shape[1], cfg.width, dtype=torch.float64)
            assert param_subset_check(enc, lambda call: (call(batch) * w).sum(), seed) < TOL

    def test_tokenizer(self):
        cfg = micro_config(mel_bins=4)
        for seed in SEEDS:
            torch.manual_seed(seed)
            model = DiTSinger(cfg).double()
            w = torch.randn(1, 3, cfg.width, dtype=torch.float64)
            x = torch.randn(1, 5, 4, dtype=torch.float64)
            assert gradient_check(lambda t: (model.tokenize(t) * w).sum(), x) < TOL
            xt = x.transpose(1, 2)
            wt = w.transpose(1, 2)
            padded = torch.cat([xt, torch.zeros(1, 4, 1, dtype=torch.float64)], dim=2)
            assert param_subset_check(model.tokenizer, lambda call: (call(padded) * wt).sum(), seed) < TOL

    def test_rope_attention(self):
        for seed in SEEDS:
            torch.manual_seed(seed)
            attn = Attention(8, 2, qk_norm=False, rope=True).double()
            x = torch.randn(1, 5, 8, dtype=torch.float64)
            w = torch.randn(1, 5, 8, dtype=torch.float64)
            bias = torch.zeros(1, 1, 1, 5, dtype=torch.float64)
            bias[..., 4] = NEG_INF
            pos = torch.arange(5, dtype=torch.float64) + seed
            assert gradient_check(lambda t: (attn(t, bias=bias, positions=pos) * w).sum(), x) < TOL
            assert param_subset_check(attn, lambda call: (call(x, bias=bias, positions=pos) * w).sum(), seed) < TOL

    def test_qk_norm(self):
        for seed in SEEDS:
            g = torch.Generator().manual_seed(seed)
            x = torch.randn(3, 6, generator=g, dtype=torch.float64)
            w = torch.randn(3, 6, generator=g, dtype=torch.float64)
            assert gradient_check(lambda t: (qk_normalize(t) * w).sum(), x) < TOL
            torch.manual_seed(seed)
            attn = Attention(8, 2, qk_norm=True).double()
            ctx = torch.randn(1, 3, 8, dtype=torch.float64)
            q = torch.randn(1, 4, 8, dtype=torch.float64)
            w2 = torch.randn(1, 4, 8, dtype=torch.float64)
            picks = [("log_temperature", 0), ("log_temperature", 1), ("q.weight", 5), ("kv.weight", 17)]
            assert param_subset_check(attn, lambda call: (call(q, context=ctx) * w2).sum(), seed, picks=picks) < TOL

    def test_adaln_block(self):
        cfg = micro_config()
        for seed in SEEDS:
            model = randomize(DiTSinger(cfg).double(), seed, 0.4)
            block = model.blocks[0]
            s = short_score(seed)
            frames = frame_count(s.total_duration, cfg.hop, cfg.sample_rate)
            batch = collate_scores([s], cfg, [frames])
            with torch.no_grad():
                cond = model.bundle(batch, torch.tensor([float(seed * 37 + 1)], dtype=torch.float64))
            L = batch.cross_bias.shape[1]
            z = torch.randn(1, L, cfg.width, dtype=torch.float64)
            w = torch.randn(1, L, cfg.width, dtype=torch.float64)
            assert gradient_check(lambda t: (block(t, cond) * w).sum(), z) < TOL
            assert param_subset_check(block, lambda call: (call(z, cond) * w).sum(), seed) < TOL

    def test_full_loss(self):
        cfg = micro_config()
        schedule = NoiseSchedule.linear(100)
        guidance = GuidanceConfig(cond_dropout_p=0.5)
        for seed in SEEDS:
            module = LossOnly(randomize(DiTSinger(cfg).double(), seed, 0.4))
            scores = [short_score(seed), short_score(seed + 50)]
            mels = [oracle_synthesize(s).values for s in scores]
            batch = collate_scores(scores, cfg, [m.shape[0] for m in mels])
            x0 = pad_states(mels, cfg.downsample_factor)
            rngs = [Rng(seed).child("u", b) for b in range(2)]
            args = (x0, batch, rngs, schedule, guidance)
            assert param_subset_check(module, lambda call: call(*args), seed, k=32) < TOL


class TestRope:
    def test_relative_position_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            d = 2 * int(rng.integers(1, 33))
            shift = int(rng.integers(0, 33))
            m, n = (float(v) for v in rng.integers(0, 200, size=2))
            q = torch.from_numpy(rng.normal(size=d))
            k = torch.from_numpy(rng.normal(size=d))
            pos = lambda p: torch.tensor(p, dtype=torch.float64)  # noqa: E731
            base = apply_rope(q, pos(m)) @ apply_rope(k, pos(n))
            moved = apply_rope(q, pos(m + shift)) @ apply_rope(k, pos(n + shift))
            assert abs(float(base - moved)) < 1e-6

    def test_rotation_preserves_norm(self):
        x = torch.randn(4, 16, dtype=torch.float64)
        r = apply_rope(x, torch.arange(4, dtype=torch.float64) * 7)
        assert torch.allclose(r.norm(dim=-1), x.norm(dim=-1))

    def test_position_zero_is_identity(self):
        x = torch.randn(3, 8, dtype=torch.float64)
        assert torch.equal(apply_rope(x, torch.zeros(3, dtype=torch.float64)), x)


class TestQkNorm:
    def test_unit_norm(self):
        x = torch.randn(5, 7, 16, dtype=torch.float64) * 100
        assert torch.allclose(qk_normalize(x).norm(dim=-1), torch.ones(5, 7, dtype=torch.float64))

    def test_temperature_init(self):
        attn = Attention(32, 4, qk_norm=True)
        assert torch.allclose(attn.log_temperature, torch.full((4,), math.log(8.0)))


def _zero_alpha(model):
    d = model.cfg.width
    with torch.no_grad():
        for block in model.blocks:
            lin = block.ada[1]
            for c in (2, 5, 8):
                lin.weight[c * d: (c + 1) * d] = 0
                lin.bias[c * d: (c + 1) * d] = 0


class TestAdaLnZero:
    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
    def test_identity_with_zero_gates(self, dtype):
        cfg = preset("tiny", depth=3)
        model = randomize(DiTSinger.build(cfg, Rng(0), dtype), 1, 0.5)
        _zero_alpha(model)
        s = make_score([0.3, 0.4], [2, 2], start=0.1, tail=0.1)
        frames = frame_count(s.total_duration, cfg.hop, cfg.sample_rate)
        batch = collate_scores([s], cfg, [frames])
        cond = model.bundle(batch, torch.tensor([500.0], dtype=dtype))
        z = torch.randn(1, batch.cross_bias.shape[1], cfg.width, dtype=dtype)
        out = model.blocks_forward(z, cond)
        assert (out - z).abs().max() < 1e-6

    def test_fresh_model_predicts_zero(self, tiny64):
        cfg = tiny64.cfg
        s = make_score([0.3], [2], start=0.1, tail=0.1)
        frames = frame_count(s.total_duration, cfg.hop, cfg.sample_rate)
        batch = collate_scores([s], cfg, [frames])
        x = torch.randn(1, frames + frames % cfg.downsample_factor, cfg.mel_bins, dtype=torch.float64)
        pred = tiny64.predict_noise(x, tiny64.bundle(batch, torch.tensor([10.0], dtype=torch.float64)))
        assert pred.shape == x.shape and torch.count_nonzero(pred) == 0


class TestLeakage:
    def _setup(self, seed=0):
        cfg = preset("tiny")
        model = randomize(DiTSinger.build(cfg, Rng(0), torch.float64), seed, 0.5)
        s = make_score([0.3, 0.4, 0.2], [2, 3, 1], start=0.1, tail=0.1)
        frames = frame_count(s.total_duration, cfg.hop, cfg.sample_rate)
        batch = collate_scores([s], cfg, [frames])
        x = torch.randn(1, frames + frames % cfg.downsample_factor, cfg.mel_bins, dtype=torch.float64)
        return model, batch, x

    def test_fully_blocked_column(self):
        model, batch, x = self._setup()
        cond = model.bundle(batch, torch.tensor([300.0], dtype=torch.float64))
        # Block phoneme 3 (its siblings 2 and 4 still cover the same frames).
        cond.cross_bias = cond.cross_bias.clone()
        cond.cross_bias[:, :, 3] = NEG_INF
        base = model.predict_noise(x, cond)
        for scale in (1e-3, 1.0, 1e3):
            cond.h_local = cond.h_local.clone()
            cond.h_local[:, 3] = torch.randn(model.cfg.width, dtype=torch.float64) * scale
            assert torch.equal(model.predict_noise(x, cond), base)

    def test_unconditional_ignores_score(self):
        model, batch, x = self._setup()
        t = torch.tensor([300.0], dtype=torch.float64)
        h = model.encode(batch)
        base = model.predict_noise(x, model.bundle(batch, t, unconditional=[True], h_local=h))
        other = model.predict_noise(x, model.bundle(batch, t, unconditional=[True], h_local=h * 7 + 3))
        assert torch.equal(base, other)

    def test_padding_columns(self):
        cfg = preset("tiny")
        model = randomize(DiTSinger.build(cfg, Rng(0), torch.float64), 3, 0.5)
        long = make_score([0.3, 0.4], [3, 3], start=0.1, tail=0.1)
        short = make_score([0.3], [1], start=0.1, tail=0.1)
        frames = [frame_count(s.total_duration, cfg.hop, cfg.sample_rate) for s in (long, short)]
        solo = collate_scores([short], cfg, frames[1:])
        pair = collate_scores([short, long], cfg, [frames[1], frames[0]])
        t = torch.tensor([200.0], dtype=torch.float64)
        x = torch.randn(2, max(frames) + max(frames) % cfg.downsample_factor, cfg.mel_bins, dtype=torch.float64)
        with torch.no_grad():
            out_pair = model.predict_noise(x, model.bundle(pair, t.repeat(2)))
            n = frames[1] + frames[1] % cfg.downsample_factor
            out_solo = model.predict_noise(x[:1, :n], model.bundle(solo, t))
        assert torch.allclose(out_pair[0, : frames[1]], out_solo[0, : frames[1]], atol=1e-10)


def test_encode_conditions_shape(tiny64):
    s = make_score([0.3, 0.4], [2, 1])
    assert encode_conditions(tiny64, s).shape == (4, tiny64.cfg.width)


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_parameter_count_matches_closed_form(name):
    cfg = preset(name)
    with torch.device("meta"):
        model = DiTSinger(cfg)
    assert sum(p.numel() for p in model.parameters()) == count_parameters(cfg)


def test_full_size_presets_geometry():
    for base, (depth, width, heads) in {"small": (4, 384, 6), "base": (8, 576, 9), "large": (16, 768, 12)}.items():
        for suffix, f in (("", 1), ("_2", 2), ("_4", 4)):
            cfg = preset(base + suffix)
            assert (cfg.depth, cfg.width, cfg.heads, cfg.downsample_factor) == (depth, width, heads, f)
            assert cfg.head_dim == 64


def test_preset_errors():
    with pytest.raises(ContractError):
        preset("huge")
    with pytest.raises(ContractError):
        preset("small_3")
    with pytest.raises(ContractError):
        ModelConfig(depth=1, width=30, heads=4)


@pytest.mark.parametrize("name", ["tiny", "small_toy", "small_4"])
def test_forward_shapes(name):
    cfg = preset(name)
    model = DiTSinger.build(cfg, Rng(0))
    s = make_score([0.2, 0.25], [1, 2], start=0.05, tail=0.05)
    frames = frame_count(s.total_duration, cfg.hop, cfg.sample_rate)
    batch = collate_scores([s], cfg, [frames])
    f = cfg.downsample_factor
    x = torch.randn(1, -(-frames // f) * f, cfg.mel_bins)
    with torch.no_grad():
        out = model.predict_noise(x, model.bundle(batch, torch.tensor([5.0])))
    assert out.shape == x.shape


class TestFlops:
    def test_linear_in_depth(self):
        for name in ("small", "base_2", "large_4"):
            cfg = preset(name)
            one = count_flops(preset(name, depth=1), 10.0)
            for depth in (2, 5, 16):
                f = count_flops(preset(name, depth=depth), 10.0)
                assert f["blocks"] == pytest.approx(depth * one["blocks"], rel=1e-12)
                assert f["total"] - f["encoder"] - f["conv"] == pytest.approx(f["blocks"], rel=1e-12)

    def test_attention_quarters_when_resolution_halves(self):
        for base in ("small", "base", "large"):
            a = count_flops(preset(base), 60.0)
            b = count_flops(preset(base + "_2"), 60.0)
            c = count_flops(preset(base + "_4"), 60.0)
            assert b["self_attention"] / a["self_attention"] == pytest.approx(0.25, rel=2e-3)
            assert c["self_attention"] / b["self_attention"] == pytest.approx(0.25, rel=2e-3)

    def test_small_2_cheaper_than_base_4(self):
        for duration in (2.0, 10.0, 30.0):
            assert count_flops(preset("small_2"), duration)["total"] < count_flops(preset("base_4"), duration)["total"]

    def test_bad_duration(self):
        with pytest.raises(ContractError):
            count_flops(preset("small"), 0.0)
