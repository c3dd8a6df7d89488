"""Objective metrics on mel / F0 feature tracks: MCD with DTW, FFE and F0 RMSE.

F0 is read off the oracle feature layout (the pitch band in the upper half of
the bins); no pitch extraction from audio takes place.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dct

from .numerics import ContractError
from .score_data import (
    MEL_FLOOR,
    MEL_PEAK,
    MelTensor,
    ScoreSequence,
    band_center_pitch,
    midi_to_hz,
    phoneme_band,
    true_phoneme_index,
)

REFERENCE_LEVEL = -2.0
MCD_ORDER = 13
FFE_CENTS = 50.0
_MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)


@dataclass(frozen=True)
class F0Track:
    f0: np.ndarray  # Hz per frame, 0 = unvoiced

    def __post_init__(self):
        if (np.asarray(self.f0) < 0).any():
            raise ContractError("F0 must be non-negative")

    @property
    def frames(self) -> int:
        return len(self.f0)

    @property
    def voicing(self) -> np.ndarray:
        return np.asarray(self.f0) > 0


@dataclass(frozen=True)
class MetricReport:
    mcd: float
    ffe: float
    f0rmse: float | None
    frames_compared: int

    def to_dict(self) -> dict:
        return asdict(self)


def frame_energy(values: np.ndarray) -> np.ndarray:
    """Log of the mean linear power across bins, per frame."""
    v = np.asarray(values, dtype=np.float64)
    m = v.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(v - m).mean(axis=1, keepdims=True)))[:, 0]


def loudness_normalize(mel: MelTensor, reference: float = REFERENCE_LEVEL) -> tuple[MelTensor, bool]:
    """Shift log-mel values so the mean frame energy equals ``reference``.

    Returns ``(normalized, silent)``. An all-floor input is returned as is
    with ``silent=True``.
    """
    v = np.asarray(mel.values, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ContractError("mel contains non-finite values")
    if v.size == 0 or (v <= MEL_FLOOR + 1e-6).all():
        return mel, True
    shift = reference - frame_energy(v).mean()
    return MelTensor(v + shift, mel.hop, mel.sample_rate), False


def mel_cepstrum(mel, order: int = MCD_ORDER) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, coefficients 1..order."""
    v = np.asarray(mel.values if isinstance(mel, MelTensor) else mel, dtype=np.float64)
    if not 1 <= order <= v.shape[1] - 1:
        raise ContractError(f"order must lie in [1, bins - 1], got {order} for {v.shape[1]} bins")
    return dct(v, type=2, norm="ortho", axis=1)[:, 1: order + 1]


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def dtw(a: np.ndarray, b: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost monotone warping path and its summed Euclidean cost.

    Steps are (1,0), (0,1), (1,1); ties prefer the diagonal, then (1,0).
    """
    if len(a) == 0 or len(b) == 0:
        raise ContractError("sequences must be non-empty")
    d = _pairwise(a, b)
    n, m = d.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = d[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(options, key=lambda o: o[0])  # min keeps the first of equal costs
        path.append((i - 1, j - 1))
    path.reverse()
    return path, float(acc[n, m])


def dtw_align(a: np.ndarray, b: np.ndarray) -> list[tuple[int, int]]:
    return dtw(a, b)[0]


def mcd_from_cepstra(ca: np.ndarray, cb: np.ndarray, path=None) -> tuple[float, list]:
    path = dtw_align(ca, cb) if path is None else path
    ia = np.array([p[0] for p in path])
    ib = np.array([p[1] for p in path])
    dist = np.sqrt(((ca[ia] - cb[ib]) ** 2).sum(axis=1))
    return float(_MCD_CONST * dist.mean()), path


def mcd(a_mel: MelTensor, b_mel: MelTensor, order: int = MCD_ORDER) -> float:
    """Mel-cepstral distortion in dB over the DTW path: ``(10/ln10) sqrt(2) mean ||ca - cb||``."""
    if a_mel.bins != b_mel.bins:
        raise ContractError("mel tensors must share the bin count")
    value, _ = mcd_from_cepstra(mel_cepstrum(a_mel, order), mel_cepstrum(b_mel, order))
    return value


def _cents(f_hyp: np.ndarray, f_ref: np.ndarray) -> np.ndarray:
    # Rounded so a deviation of exactly 50 cents is not pushed over the strict threshold by log2 error.
    return np.round(1200.0 * np.abs(np.log2(f_hyp / f_ref)), 9)


def ffe(ref: F0Track, hyp: F0Track, threshold_cents: float = FFE_CENTS) -> float:
    """Fraction of frames with a voicing mismatch or a pitch error above ``threshold_cents``."""
    if ref.frames != hyp.frames:
        raise ContractError("F0 tracks must have equal frame counts")
    if ref.frames == 0:
        return 0.0
    rv, hv = ref.voicing, hyp.voicing
    both = rv & hv
    gross = np.zeros(ref.frames, dtype=bool)
    gross[both] = _cents(np.asarray(hyp.f0)[both], np.asarray(ref.f0)[both]) > threshold_cents
    return float(((rv != hv) | gross).mean())


def f0_rmse(ref: F0Track, hyp: F0Track) -> float | None:
    """RMS Hz error over frames voiced in both tracks; ``None`` if there are none."""
    if ref.frames != hyp.frames:
        raise ContractError("F0 tracks must have equal frame counts")
    both = ref.voicing & hyp.voicing
    if not both.any():
        return None
    diff = np.asarray(hyp.f0, dtype=np.float64)[both] - np.asarray(ref.f0, dtype=np.float64)[both]
    return float(np.sqrt((diff ** 2).mean()))


def f0_from_mel(mel: MelTensor) -> F0Track:
    """Read F0 off the pitch band: voiced where the band rises above the floor/peak midpoint."""
    v = np.asarray(mel.values, dtype=np.float64)
    half = v.shape[1] // 2
    upper = v[:, half:]
    band = upper.argmax(axis=1) + half
    voiced = upper.max(axis=1) > 0.5 * (MEL_FLOOR + MEL_PEAK)
    f0 = np.array([midi_to_hz(band_center_pitch(int(b), v.shape[1])) if on else 0.0 for b, on in zip(band, voiced)])
    return F0Track(f0)


def align_tracks(ref: F0Track, hyp: F0Track, path) -> tuple[F0Track, F0Track]:
    ia = [p[0] for p in path]
    ib = [p[1] for p in path]
    return F0Track(np.asarray(ref.f0)[ia]), F0Track(np.asarray(hyp.f0)[ib])


def evaluate_pair(ref_mel: MelTensor, hyp_mel: MelTensor, order: int = MCD_ORDER) -> MetricReport:
    """Loudness-normalize, DTW-align cepstra, then score MCD, FFE and F0 RMSE on the same path."""
    ref_n, _ = loudness_normalize(ref_mel)
    hyp_n, _ = loudness_normalize(hyp_mel)
    value, path = mcd_from_cepstra(mel_cepstrum(ref_n, order), mel_cepstrum(hyp_n, order))
    r, h = align_tracks(f0_from_mel(ref_mel), f0_from_mel(hyp_mel), path)
    return MetricReport(value, ffe(r, h), f0_rmse(r, h), len(path))


def aggregate(reports: list[MetricReport]) -> dict:
    rmse = [r.f0rmse for r in reports if r.f0rmse is not None]
    return {
        "pairs": len(reports),
        "mcd": float(np.mean([r.mcd for r in reports])) if reports else None,
        "ffe": float(np.mean([r.ffe for r in reports])) if reports else None,
        "f0rmse": float(np.mean(rmse)) if rmse else None,
        "frames_compared": int(sum(r.frames_compared for r in reports)),
    }


def phoneme_band_accuracy(mel: MelTensor, score: ScoreSequence) -> tuple[int, int]:
    """(correct, voiced) frame counts for argmax phoneme-band decoding against oracle truth."""
    idx = true_phoneme_index(score, mel.frames, mel.hop, mel.sample_rate)
    voiced = idx >= 0
    if not voiced.any():
        return 0, 0
    truth = np.array([phoneme_band(score.tokens[j].phoneme_id, mel.bins) for j in idx[voiced]])
    pred = np.asarray(mel.values)[voiced, : mel.bins // 2].argmax(axis=1)
    return int((pred == truth).sum()), int(voiced.sum())
