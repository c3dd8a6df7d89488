"""Score/lyric types and the synthetic two-stage corpus.

The corpus mirrors a melody-fixed, lyric-varied data construction: a bank of
melody templates is drawn once, each melody is paired with many sampled lyric
variants, and a deterministic oracle renders every (melody, lyric) pair into a
mel-like feature matrix whose phoneme timing is known exactly.

Oracle feature layout for ``bins`` mel bins:

* bins ``[0, bins/2)`` hold the phoneme band, bin ``phoneme_id mod bins/2``;
* bins ``[bins/2, bins)`` hold the pitch band, a linear map of MIDI 48..84.

Everything else sits at :data:`MEL_FLOOR`.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractError, Rng

MEL_FLOOR = -4.0
MEL_PEAK = 0.0
CROSSFADE_S = 0.010
PITCH_LOW, PITCH_HIGH = 48, 84
REST_PHONEME = 0

DURATION_BUCKETS = 32
DURATION_MIN_S, DURATION_MAX_S = 0.05, 4.0

TOY_BINS, TOY_SAMPLE_RATE, TOY_HOP = 16, 8000, 64
FULL_BINS, FULL_SAMPLE_RATE, FULL_HOP = 80, 24000, 128

LEAD_SILENCE_S = 0.1
TAIL_SILENCE_S = 0.1


def duration_bucket(seconds: float) -> int:
    """Quantize a duration into one of 32 log-spaced buckets over [0.05 s, 4 s]."""
    span = math.log(DURATION_MAX_S / DURATION_MIN_S)
    pos = math.log(max(seconds, 1e-9) / DURATION_MIN_S) / span * DURATION_BUCKETS
    return int(min(max(math.floor(pos), 0), DURATION_BUCKETS - 1))


def phoneme_band(phoneme_id: int, bins: int) -> int:
    return phoneme_id % (bins // 2)


def pitch_band(pitch: int, bins: int) -> int:
    half = bins // 2
    k = (pitch - PITCH_LOW) * half // (PITCH_HIGH - PITCH_LOW + 1)
    return half + int(min(max(k, 0), half - 1))


def band_center_pitch(band: int, bins: int) -> float:
    """MIDI pitch at the center of a pitch band (inverse of :func:`pitch_band`)."""
    half = bins // 2
    k = band - half
    width = (PITCH_HIGH - PITCH_LOW + 1) / half
    return PITCH_LOW + (k + 0.5) * width


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69.0) / 12.0)


@dataclass(frozen=True)
class PhonemeToken:
    phoneme_id: int
    pitch: int
    word_duration_bucket: int
    slur: bool


@dataclass(frozen=True)
class CharSpan:
    start_time: float
    duration: float
    phoneme_start: int
    phoneme_stop: int

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    @property
    def phoneme_range(self) -> range:
        return range(self.phoneme_start, self.phoneme_stop)


@dataclass(frozen=True)
class ScoreSequence:
    tokens: tuple[PhonemeToken, ...]
    spans: tuple[CharSpan, ...]
    speaker_id: int = 0
    total_duration: float = 0.0
    # Per-character note events (MIDI), used only by the oracle for the pitch band.
    notes: tuple[tuple[int, ...], ...] = ()

    def validate(self, vocab: int | None = None) -> None:
        cursor = 0
        prev_end = 0.0
        for k, span in enumerate(self.spans):
            if span.start_time < 0 or span.duration <= 0:
                raise ContractError(f"span {k} has invalid timing {span}")
            if span.start_time < prev_end - 1e-9:
                raise ContractError(f"span {k} overlaps its predecessor")
            if span.phoneme_start != cursor or span.phoneme_stop <= span.phoneme_start:
                raise ContractError(f"span {k} does not continue the phoneme partition at {cursor}")
            cursor = span.phoneme_stop
            prev_end = span.end_time
        if cursor != len(self.tokens):
            raise ContractError(f"spans cover {cursor} phonemes but there are {len(self.tokens)} tokens")
        if self.spans and prev_end > self.total_duration + 1e-9:
            raise ContractError("last span ends after total_duration")
        for tok in self.tokens:
            if not 0 <= tok.pitch <= 127:
                raise ContractError(f"pitch {tok.pitch} outside MIDI range")
            if tok.phoneme_id < 0 or (vocab is not None and tok.phoneme_id >= vocab):
                raise ContractError(f"phoneme id {tok.phoneme_id} outside vocabulary")
            if not 0 <= tok.word_duration_bucket < DURATION_BUCKETS:
                raise ContractError(f"duration bucket {tok.word_duration_bucket} out of range")
        if self.notes and len(self.notes) != len(self.spans):
            raise ContractError("notes must list one entry per character")

    def phoneme_subspans(self) -> list[tuple[float, float]]:
        """Ground-truth phoneme intervals: each character split equally among its phonemes."""
        out = []
        for span in self.spans:
            n = span.phoneme_stop - span.phoneme_start
            step = span.duration / n
            for k in range(n):
                out.append((span.start_time + k * step, span.start_time + (k + 1) * step))
        return out

    def to_dict(self) -> dict:
        return {
            "tokens": [asdict(t) for t in self.tokens],
            "spans": [asdict(s) for s in self.spans],
            "speaker_id": self.speaker_id,
            "total_duration": self.total_duration,
            "notes": [list(n) for n in self.notes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreSequence":
        return cls(
            tokens=tuple(PhonemeToken(**t) for t in d["tokens"]),
            spans=tuple(CharSpan(**s) for s in d["spans"]),
            speaker_id=int(d.get("speaker_id", 0)),
            total_duration=float(d["total_duration"]),
            notes=tuple(tuple(n) for n in d.get("notes", [])),
        )


@dataclass(frozen=True)
class MelTensor:
    values: np.ndarray  # (frames, bins) float32 log-mel
    hop: int
    sample_rate: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    def frame_time(self, i: int) -> float:
        return i * self.hop / self.sample_rate

    def __eq__(self, other) -> bool:
        if not isinstance(other, MelTensor):
            return NotImplemented
        return (
            self.hop == other.hop
            and self.sample_rate == other.sample_rate
            and self.values.dtype == other.values.dtype
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


def frame_count(total_duration: float, hop: int, sample_rate: int) -> int:
    # Round before ceil so e.g. 2.3 s * 8000 / 64 = 287.49999... counts as exact.
    return int(math.ceil(round(total_duration * sample_rate / hop, 9)))


@dataclass(frozen=True)
class MelodyTemplate:
    char_durations: tuple[float, ...]
    char_notes: tuple[tuple[int, ...], ...]
    lead: float = LEAD_SILENCE_S
    tail: float = TAIL_SILENCE_S

    @property
    def total_duration(self) -> float:
        return round(self.lead + sum(self.char_durations) + self.tail, 6)

    def char_starts(self) -> list[float]:
        starts, t = [], self.lead
        for d in self.char_durations:
            starts.append(round(t, 6))
            t += d
        return starts


def generate_melody_bank(rng: Rng, n_melodies: int, max_chars: int, melisma_p: float = 0.2) -> list[MelodyTemplate]:
    """Draw ``n_melodies`` fixed melody templates.

    Each template has 2..max_chars characters with durations in [0.1, 1.0] s
    (millisecond grid) and one or two MIDI notes per character in [48, 84].
    """
    if n_melodies < 1 or max_chars < 2:
        raise ContractError("need n_melodies >= 1 and max_chars >= 2")
    bank = []
    for m in range(n_melodies):
        g = rng.child("melody", m).generator()
        n_chars = int(g.integers(2, max_chars + 1))
        durs = tuple(float(x) / 1000.0 for x in g.integers(100, 1001, size=n_chars))
        pitch = int(g.integers(PITCH_LOW + 6, PITCH_HIGH - 5))
        notes = []
        for _ in range(n_chars):
            n_notes = 2 if g.random() < melisma_p else 1
            char = []
            for _ in range(n_notes):
                pitch = int(np.clip(pitch + g.integers(-5, 6), PITCH_LOW, PITCH_HIGH))
                char.append(pitch)
            notes.append(tuple(char))
        bank.append(MelodyTemplate(durs, tuple(notes)))
    return bank


def _note_at(notes: tuple[int, ...], frac: float) -> int:
    k = min(int(frac * len(notes)), len(notes) - 1)
    return notes[k]


def syllable_classes(vocab: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split the non-rest ids ``1..vocab-1`` into onset, nucleus and coda inventories."""
    onset, nucleus, coda = np.array_split(np.arange(1, vocab), 3)
    return onset, nucleus, coda


_SYLLABLE_ROLES = {1: (1,), 2: (0, 1), 3: (0, 1, 2)}


def generate_lyric_variant(rng: Rng, template: MelodyTemplate, vocab: int, speaker_id: int = 0) -> ScoreSequence:
    """Sample a lyric for ``template``: one syllable of 1-3 phonemes per character.

    Syllables are nucleus, onset + nucleus, or onset + nucleus + coda, each
    drawn from its own id inventory, so a phoneme's place inside its
    character follows from its identity (as with initials and finals).
    """
    if vocab < 4:
        raise ContractError("vocab must be >= 4")
    classes = syllable_classes(vocab)
    g = rng.generator()
    tokens: list[PhonemeToken] = []
    spans: list[CharSpan] = []
    for start, dur, notes in zip(template.char_starts(), template.char_durations, template.char_notes):
        n = int(g.integers(1, 4))
        ids = [g.choice(classes[role]) for role in _SYLLABLE_ROLES[n]]
        bucket = duration_bucket(dur)
        slur = len(notes) > 1
        first = len(tokens)
        for k, pid in enumerate(ids):
            pitch = _note_at(notes, (k + 0.5) / n)
            tokens.append(PhonemeToken(int(pid), pitch, bucket, slur))
        spans.append(CharSpan(start, dur, first, len(tokens)))
    return ScoreSequence(tuple(tokens), tuple(spans), speaker_id, template.total_duration, template.char_notes)


def _frame_times(frames: int, hop: int, sample_rate: int) -> np.ndarray:
    return (np.arange(frames) + 0.5) * hop / sample_rate


def phoneme_weights(score: ScoreSequence, times: np.ndarray) -> np.ndarray:
    """(len(times), n_phonemes) oracle activation of every phoneme at each time.

    Inside its sub-span a phoneme has weight 1. Where two sub-spans touch, the
    weights ramp linearly across a 10 ms window centered on the boundary.
    Edges next to silence are hard.
    """
    sub = score.phoneme_subspans()
    w = np.zeros((len(times), len(sub)))
    half = CROSSFADE_S / 2
    for j, (a, b) in enumerate(sub):
        left_joined = j > 0 and abs(sub[j - 1][1] - a) < 1e-9
        right_joined = j + 1 < len(sub) and abs(sub[j + 1][0] - b) < 1e-9
        if left_joined:
            rise = np.clip(0.5 + (times - a) / CROSSFADE_S, 0.0, 1.0)
            lo = a - half
        else:
            rise = ((times >= a)).astype(float)
            lo = a
        if right_joined:
            fall = np.clip(0.5 - (times - b) / CROSSFADE_S, 0.0, 1.0)
            hi = b + half
        else:
            fall = (times < b).astype(float)
            hi = b
        inside = (times >= lo) & (times <= hi)
        w[:, j] = np.where(inside, np.minimum(rise, fall), 0.0)
    return w


def true_phoneme_index(score: ScoreSequence, frames: int, hop: int, sample_rate: int) -> np.ndarray:
    """Index of the phoneme whose sub-span holds each frame midpoint, -1 if none."""
    times = _frame_times(frames, hop, sample_rate)
    out = np.full(frames, -1, dtype=np.int64)
    for j, (a, b) in enumerate(score.phoneme_subspans()):
        out[(times >= a) & (times < b)] = j
    return out


def true_pitch(score: ScoreSequence, frames: int, hop: int, sample_rate: int) -> np.ndarray:
    """MIDI pitch sounding at each frame midpoint (0 where unvoiced)."""
    times = _frame_times(frames, hop, sample_rate)
    out = np.zeros(frames, dtype=np.int64)
    for c, span in enumerate(score.spans):
        toks = score.tokens[span.phoneme_start:span.phoneme_stop]
        if all(t.phoneme_id == REST_PHONEME for t in toks):
            continue
        notes = score.notes[c] if score.notes else tuple(t.pitch for t in toks)
        inside = (times >= span.start_time) & (times < span.end_time)
        for i in np.nonzero(inside)[0]:
            out[i] = _note_at(notes, (times[i] - span.start_time) / span.duration)
    return out


def oracle_synthesize(score: ScoreSequence, bins: int = TOY_BINS, hop: int = TOY_HOP, sample_rate: int = TOY_SAMPLE_RATE) -> MelTensor:
    """Deterministic mel-like rendering of ``score`` with known phoneme timing."""
    score.validate()
    if bins < 4 or bins % 2:
        raise ContractError("bins must be an even number >= 4")
    frames = frame_count(score.total_duration, hop, sample_rate)
    times = _frame_times(frames, hop, sample_rate)
    level = np.zeros((frames, bins))
    w = phoneme_weights(score, times)
    for j, tok in enumerate(score.tokens):
        if tok.phoneme_id == REST_PHONEME:
            continue
        b = phoneme_band(tok.phoneme_id, bins)
        level[:, b] = np.maximum(level[:, b], w[:, j])
    pitch = true_pitch(score, frames, hop, sample_rate)
    for i in np.nonzero(pitch)[0]:
        level[i, pitch_band(int(pitch[i]), bins)] = 1.0
    values = MEL_FLOOR + (MEL_PEAK - MEL_FLOOR) * level
    return MelTensor(values.astype(np.float32), hop, sample_rate)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

CORPUS_MAGIC = b"DSCORPUS"
TENSOR_MAGIC = b"DSMEL\x00\x00\x01"
CORPUS_VERSION = 1


class CorpusFormatError(IOError):
    pass


class ChecksumError(CorpusFormatError):
    pass


class VersionMismatchError(CorpusFormatError):
    pass


@dataclass(frozen=True)
class CorpusSample:
    score: ScoreSequence
    mel: MelTensor
    group: int
    melody: int
    variant: int
    split: str = "train"


@dataclass
class SyntheticCorpus:
    melody_bank: list[MelodyTemplate]
    group_count: int
    samples: list[CorpusSample]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices) -> "SyntheticCorpus":
        return SyntheticCorpus(self.melody_bank, self.group_count, [self.samples[i] for i in indices], dict(self.manifest))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticCorpus):
            return NotImplemented
        return (
            self.melody_bank == other.melody_bank
            and self.group_count == other.group_count
            and self.samples == other.samples
            and self.manifest == other.manifest
        )


def _render(rng: Rng, template: MelodyTemplate, melody: int, variant: int, group: int, vocab: int, geometry: dict, split: str) -> CorpusSample:
    score = generate_lyric_variant(rng.child("lyric", melody, variant), template, vocab, speaker_id=group)
    mel = oracle_synthesize(score, geometry["bins"], geometry["hop"], geometry["sample_rate"])
    return CorpusSample(score, mel, group, melody, variant, split)


def build_corpus(
    rng: Rng,
    n_groups: int,
    melodies_per_group: int,
    variants_per_melody: int,
    holdout_fraction: float,
    *,
    unseen_melodies: int = 0,
    max_chars: int = 4,
    vocab: int = 9,
    bins: int = TOY_BINS,
    hop: int = TOY_HOP,
    sample_rate: int = TOY_SAMPLE_RATE,
) -> tuple[SyntheticCorpus, SyntheticCorpus]:
    """Build disjoint train/test corpora.

    For every seen melody, the last ``round(holdout_fraction * variants)``
    lyric variants go to the test split (``split="unseen_lyrics"``). Another
    ``unseen_melodies`` melodies never appear in training and contribute all
    their variants to the test split (``split="unseen_melody"``).
    """
    if not 0 < holdout_fraction <= 0.5:
        raise ContractError("holdout_fraction must lie in (0, 0.5]")
    if n_groups < 1 or melodies_per_group < 1 or variants_per_melody < 1:
        raise ContractError("counts must be positive")
    n_seen = n_groups * melodies_per_group
    bank = generate_melody_bank(rng, n_seen + unseen_melodies, max_chars)
    n_hold = int(round(holdout_fraction * variants_per_melody))
    n_hold = min(max(n_hold, 1), variants_per_melody - 1) if variants_per_melody > 1 else 0
    geometry = {"bins": bins, "hop": hop, "sample_rate": sample_rate}

    train, test = [], []
    for m in range(n_seen):
        group = m // melodies_per_group
        for v in range(variants_per_melody):
            held = v >= variants_per_melody - n_hold
            s = _render(rng, bank[m], m, v, group, vocab, geometry, "unseen_lyrics" if held else "train")
            (test if held else train).append(s)
    for m in range(n_seen, n_seen + unseen_melodies):
        for v in range(variants_per_melody):
            test.append(_render(rng, bank[m], m, v, 0, vocab, geometry, "unseen_melody"))

    manifest = {
        "seed": rng.seed,
        "rng_path": list(rng.path),
        "rng_algorithm": Rng.algorithm,
        "n_groups": n_groups,
        "melodies_per_group": melodies_per_group,
        "variants_per_melody": variants_per_melody,
        "holdout_fraction": holdout_fraction,
        "unseen_melodies": unseen_melodies,
        "max_chars": max_chars,
        "vocab": vocab,
        **geometry,
    }
    return (
        SyntheticCorpus(bank, n_groups, train, {**manifest, "split": "train"}),
        SyntheticCorpus(bank, n_groups, test, {**manifest, "split": "test"}),
    )


def write_mel(path: Path, mel: MelTensor) -> str:
    """Write a mel tensor file; returns its sha256 hex digest."""
    body = struct.pack("<8sIIII", TENSOR_MAGIC, mel.frames, mel.bins, mel.hop, mel.sample_rate)
    body += np.ascontiguousarray(mel.values, dtype="<f4").tobytes()
    Path(path).write_bytes(body)
    return hashlib.sha256(body).hexdigest()


def read_mel(path: Path, expected_sha256: str | None = None) -> MelTensor:
    body = Path(path).read_bytes()
    if expected_sha256 is not None and hashlib.sha256(body).hexdigest() != expected_sha256:
        raise ChecksumError(f"checksum mismatch for {path}")
    header = struct.calcsize("<8sIIII")
    if len(body) < header:
        raise CorpusFormatError(f"{path} is truncated")
    magic, frames, bins, hop, sr = struct.unpack_from("<8sIIII", body)
    if magic != TENSOR_MAGIC:
        raise CorpusFormatError(f"{path} is not a mel tensor file")
    if len(body) != header + 4 * frames * bins:
        raise CorpusFormatError(f"{path} has {len(body)} bytes, expected {header + 4 * frames * bins}")
    values = np.frombuffer(body, dtype="<f4", offset=header).reshape(frames, bins).astype(np.float32)
    return MelTensor(values, hop, sr)


def save_corpus(corpus: SyntheticCorpus, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(corpus.samples):
        name = f"sample_{k:06d}.mel"
        digest = write_mel(path / name, s.mel)
        entries.append({
            "file": name,
            "sha256": digest,
            "score": s.score.to_dict(),
            "group": s.group,
            "melody": s.melody,
            "variant": s.variant,
            "split": s.split,
        })
    payload = {
        "version": CORPUS_VERSION,
        "group_count": corpus.group_count,
        "manifest": corpus.manifest,
        "melody_bank": [asdict(t) for t in corpus.melody_bank],
        "samples": entries,
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    header = struct.pack("<8sIQ", CORPUS_MAGIC, CORPUS_VERSION, len(blob))
    digest = hashlib.sha256(header + blob).digest()
    (path / "manifest.bin").write_bytes(header + blob + digest)


def load_corpus(path) -> SyntheticCorpus:
    path = Path(path)
    raw = (path / "manifest.bin").read_bytes()
    hsize = struct.calcsize("<8sIQ")
    if len(raw) < hsize + 32:
        raise ChecksumError("manifest is truncated")
    magic, version, n = struct.unpack_from("<8sIQ", raw)
    if magic != CORPUS_MAGIC:
        raise CorpusFormatError("not a corpus manifest")
    body, digest = raw[: hsize + n], raw[hsize + n:]
    if len(digest) != 32 or hashlib.sha256(body).digest() != digest:
        raise ChecksumError("manifest checksum mismatch")
    if version != CORPUS_VERSION:
        raise VersionMismatchError(f"corpus version {version}, this build reads {CORPUS_VERSION}")
    payload = json.loads(body[hsize:].decode("utf-8"))
    if payload.get("version") != CORPUS_VERSION:
        raise VersionMismatchError(f"corpus payload version {payload.get('version')}")
    bank = [MelodyTemplate(tuple(t["char_durations"]), tuple(tuple(n) for n in t["char_notes"]), t["lead"], t["tail"]) for t in payload["melody_bank"]]
    samples = []
    for e in payload["samples"]:
        mel = read_mel(path / e["file"], e["sha256"])
        samples.append(CorpusSample(ScoreSequence.from_dict(e["score"]), mel, e["group"], e["melody"], e["variant"], e["split"]))
    return SyntheticCorpus(bank, payload["group_count"], samples, payload["manifest"])
