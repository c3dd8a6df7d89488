import numpy as np
import pytest
import torch

from ditsinger.model import DiTSinger, preset
from ditsinger.numerics import Rng
from ditsinger.score_data import CharSpan, PhonemeToken, ScoreSequence, build_corpus, duration_bucket


def make_score(char_durations, phonemes_per_char, start=0.0, tail=0.0, pitch=60, ids=None, speaker=0):
    """Hand-built score: contiguous characters starting at ``start``."""
    tokens, spans, t = [], [], start
    k = 0
    for dur, n in zip(char_durations, phonemes_per_char):
        first = len(tokens)
        for _ in range(n):
            pid = ids[k] if ids is not None else 1 + k % 8
            tokens.append(PhonemeToken(pid, pitch, duration_bucket(dur), False))
            k += 1
        spans.append(CharSpan(t, dur, first, len(tokens)))
        t += dur
    return ScoreSequence(tuple(tokens), tuple(spans), speaker, t + tail)


def randomize(model: DiTSinger, seed: int = 0, scale: float = 0.3) -> DiTSinger:
    """Overwrite every parameter (including the zero-initialized gates) with noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
        for name, p in model.named_parameters():
            if name.endswith("log_temperature"):
                p.fill_(1.0)
    return model


@pytest.fixture
def tiny64():
    cfg = preset("tiny")
    return DiTSinger.build(cfg, Rng(0), torch.float64)


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(Rng(3), 1, 3, 4, 0.25)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def random_score(rng: np.random.Generator, max_chars: int = 6, max_phonemes: int = 12, clip: float = 4.0) -> ScoreSequence:
    """Random valid score with possible gaps between characters (times on a 1 ms grid)."""
    n_chars = int(rng.integers(1, max_chars + 1))
    per = [1] * n_chars
    for _ in range(int(rng.integers(0, max_phonemes - n_chars + 1))):
        per[int(rng.integers(0, n_chars))] += 1
    tokens, spans, t = [], [], int(rng.integers(0, 300))
    for n in per:
        dur = int(rng.integers(50, 900))
        first = len(tokens)
        for _ in range(n):
            tokens.append(PhonemeToken(int(rng.integers(1, 9)), int(rng.integers(48, 85)), duration_bucket(dur / 1000), False))
        spans.append(CharSpan(t / 1000, dur / 1000, first, len(tokens)))
        t += dur + (int(rng.integers(0, 200)) if rng.random() < 0.3 else 0)
    total = max(t / 1000 + rng.random() * 0.3, 0.05)
    return ScoreSequence(tuple(tokens), tuple(spans), 0, total)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance suite's one-line verdicts at the end of the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
