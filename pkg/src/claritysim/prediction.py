"""Baseline intelligibility predictor.

An intrusive short-time envelope-correlation metric (the STOI
construction: 10 kHz analysis, 15 third-octave bands from 150 Hz, 384 ms
segments, clipping at -15 dB SDR) applied to hearing-loss-simulated output,
then a logistic map to fraction of words correct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal

from claritysim.errors import AlignmentFailureError, FitFailureError, SilentReferenceError, ValidationError
from claritysim.listener_model import Audiogram, simulate_hearing_loss

ANALYSIS_RATE = 10000
FRAME = 256
NFFT = 512
SEGMENT_FRAMES = 30  # 384 ms at a 128-sample hop
BAND_COUNT = 15
LOWEST_CENTRE_HZ = 150.0
CLIP_SDR_DB = -15.0
SILENCE_RANGE_DB = 40.0
ALIGN_SEARCH_S = 0.05
MAX_LENGTH_MISMATCH = 0.10


@dataclass(frozen=True)
class IntelligibilityScore:
    scene_id: str
    listener_id: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class LogisticMap:
    a: float = 10.0
    b: float = 0.55
    training_mse: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.a > 0:
            raise ValidationError("logistic slope must be positive")

    def __call__(self, d):
        return 1.0 / (1.0 + np.exp(-self.a * (np.asarray(d, float) - self.b)))

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "training_mse": self.training_mse}

    @classmethod
    def from_dict(cls, d: dict) -> LogisticMap:
        return cls(float(d["a"]), float(d["b"]), d.get("training_mse"))


def _to_analysis_rate(x: np.ndarray, sample_rate: int) -> np.ndarray:
    if sample_rate == ANALYSIS_RATE:
        return np.asarray(x, float)
    g = math.gcd(int(sample_rate), ANALYSIS_RATE)
    return signal.resample_poly(np.asarray(x, float), ANALYSIS_RATE // g, int(sample_rate) // g)


def align(reference: np.ndarray, degraded: np.ndarray, sample_rate: int, search_s: float = ALIGN_SEARCH_S) -> np.ndarray:
    """Shift ``degraded`` onto ``reference`` and cut/pad it to the same length."""
    if abs(len(degraded) - len(reference)) > MAX_LENGTH_MISMATCH * len(reference):
        raise AlignmentFailureError(f"lengths {len(degraded)} and {len(reference)} differ by more than 10%")
    max_lag = int(round(search_s * sample_rate))
    corr = signal.correlate(degraded, reference, mode="full", method="fft")
    zero = len(reference) - 1
    lo, hi = max(0, zero - max_lag), min(len(corr), zero + max_lag + 1)
    lag = int(np.argmax(corr[lo:hi])) + lo - zero
    shifted = degraded[lag:] if lag >= 0 else np.concatenate([np.zeros(-lag), degraded])
    out = np.zeros(len(reference))
    n = min(len(out), len(shifted))
    out[:n] = shifted[:n]
    return out


def _frames(x: np.ndarray) -> np.ndarray:
    hop = FRAME // 2
    count = max(0, (len(x) - FRAME) // hop + 1)
    idx = np.arange(FRAME)[None, :] + hop * np.arange(count)[:, None]
    return x[idx] * np.hanning(FRAME + 2)[1:-1]


def _drop_silent_frames(x: np.ndarray, y: np.ndarray):
    fx, fy = _frames(x), _frames(y)
    energy = 20 * np.log10(np.linalg.norm(fx, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - SILENCE_RANGE_DB
    return fx[keep], fy[keep]


def third_octave_matrix() -> np.ndarray:
    freqs = np.linspace(0, ANALYSIS_RATE, NFFT + 1)[: NFFT // 2 + 1]
    centres = LOWEST_CENTRE_HZ * 2 ** (np.arange(BAND_COUNT) / 3)
    lows, highs = centres * 2 ** (-1 / 6), centres * 2 ** (1 / 6)
    m = np.zeros((BAND_COUNT, len(freqs)))
    for i, (lo, hi) in enumerate(zip(lows, highs)):
        lo_bin = np.argmin(np.abs(freqs - lo))
        hi_bin = np.argmin(np.abs(freqs - hi))
        m[i, lo_bin:hi_bin] = 1.0
    return m


def _band_envelopes(frames: np.ndarray) -> np.ndarray:
    spec = np.abs(np.fft.rfft(frames, NFFT, axis=1)) ** 2
    return np.sqrt(spec @ third_octave_matrix().T).T  # (bands, frames)


def envelope_metric(reference, degraded, sample_rate: int) -> float:
    """Mean clipped envelope correlation in [-1, 1].

    Both signals go to 10 kHz, the degraded one is time-aligned to the
    reference within +/-50 ms, frames where the reference is 40 dB below its
    peak are dropped, and correlations are averaged over bands and 384 ms
    segments. A silent degraded signal scores 0.
    """
    ref = _to_analysis_rate(reference, sample_rate)
    deg = _to_analysis_rate(degraded, sample_rate)
    if not np.any(ref):
        raise SilentReferenceError("reference signal is silent")
    if not np.any(deg):
        return 0.0
    deg = align(ref, deg, ANALYSIS_RATE)
    fx, fy = _drop_silent_frames(ref, deg)
    if len(fx) < SEGMENT_FRAMES:
        raise ValidationError("reference shorter than one 384 ms analysis segment")
    ex, ey = _band_envelopes(fx), _band_envelopes(fy)

    clip = 1 + 10 ** (-CLIP_SDR_DB / 20)
    eps = np.finfo(float).eps
    total, count = 0.0, 0
    for m in range(SEGMENT_FRAMES, ex.shape[1] + 1):
        xs, ys = ex[:, m - SEGMENT_FRAMES : m], ey[:, m - SEGMENT_FRAMES : m]
        scale = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        yc = np.minimum(ys * scale, xs * clip)
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yc - yc.mean(axis=1, keepdims=True)
        num = np.sum(xc * yc, axis=1)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + eps
        total += float(np.sum(num / den))
        count += BAND_COUNT
    return total / count


def map_to_intelligibility(d: float, mapping: LogisticMap) -> float:
    return float(mapping(d))


def _mse(params, d, y):
    a, b = math.exp(params[0]), params[1]
    return float(np.mean((1.0 / (1.0 + np.exp(-a * (d - b))) - y) ** 2))


def fit_logistic(pairs, min_pairs: int = 10, min_span: float = 0.2) -> LogisticMap:
    """Least-squares logistic fit of measured scores against metric values.

    A coarse grid over slope and midpoint seeds a Nelder-Mead refinement in
    (log slope, midpoint). A near-constant start at the mean score is always
    included, so the fit is never worse than predicting the mean.

    Raises:
        FitFailureError: too few pairs, too narrow a metric range, or no
            slope information in the scores.
    """
    arr = np.asarray(list(pairs), float)
    if arr.ndim != 2 or len(arr) < min_pairs:
        raise FitFailureError(f"need at least {min_pairs} (metric, score) pairs")
    d, y = arr[:, 0], arr[:, 1]
    if np.ptp(d) < min_span:
        raise FitFailureError(f"metric values span {np.ptp(d):.3f} < {min_span}")
    if np.ptp(y) == 0:
        raise FitFailureError("measured scores are constant; no slope to fit")

    starts = []
    for a in np.geomspace(0.5, 200.0, 25):
        for b in np.linspace(d.min() - 0.3, d.max() + 0.3, 41):
            starts.append((_mse((math.log(a), b), d, y), math.log(a), b))
    starts.sort()
    mean_y = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    flat_a = 1e-2
    candidates = [s[1:] for s in starts[:3]]
    candidates.append((math.log(flat_a), float(d.mean() - math.log(mean_y / (1 - mean_y)) / flat_a)))

    best = None
    for x0 in candidates:
        res = optimize.minimize(_mse, np.array(x0), args=(d, y), method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
        if best is None or res.fun < best.fun:
            best = res
    a, b = math.exp(best.x[0]), float(best.x[1])
    if a < 1e-3:
        raise FitFailureError("fitted slope collapsed to zero")
    return LogisticMap(a, b, _mse(best.x, d, y))


def ear_metrics(scene, enhanced, audiogram: Audiogram, degraded: dict | None = None, recruitment: bool = True) -> dict:
    """Envelope metric per ear on the hearing-loss-simulated channel.

    Silent ears are left out. ``degraded`` may supply precomputed
    hearing-loss output keyed by ear.
    """
    out = {}
    for ear in ("L", "R"):
        channel = enhanced.channel(ear)
        if not np.any(channel):
            continue
        hl = degraded[ear] if degraded is not None else simulate_hearing_loss(channel, audiogram, ear, scene.sample_rate, recruitment)
        out[ear] = envelope_metric(scene.anechoic_target, hl, scene.sample_rate)
    return out


def predict(scene, enhanced, audiogram: Audiogram, mapping: LogisticMap = LogisticMap(), degraded: dict | None = None) -> IntelligibilityScore:
    """Better-ear prediction for one (scene, listener) pair.

    Uses only the anechoic reference and the enhanced channels; the
    transcript is never read.
    """
    metrics = ear_metrics(scene, enhanced, audiogram, degraded)
    d = max(metrics.values()) if metrics else 0.0
    return IntelligibilityScore(scene.scene_id, audiogram.listener_id, map_to_intelligibility(d, mapping))
