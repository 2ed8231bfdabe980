"""Simulated listening panel.

Ground truth comes from an articulation-index style audibility measure:
per octave band, coherence with the clean reference splits the heard
signal into a speech part and a noise-plus-distortion part, a fixed
internal noise stands for the normal-hearing threshold, and the band SNRs
are mapped to audibility and weighted by band importance. This is kept
deliberately separate from the envelope-correlation predictor.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft, signal

from claritysim.errors import IncompletePanelError, InvalidTranscriptError, SchemaError, ValidationError
from claritysim.listener_model import HEARING_FLOOR_DBFS, simulate_hearing_loss

OCTAVE_CENTRES = (250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0)
# octave-band importance for average speech
BAND_IMPORTANCE = (0.0617, 0.1671, 0.2373, 0.2648, 0.2142, 0.0549)
SNR_RANGE_DB = 30.0
SNR_OFFSET_DB = 15.0
SEGMENT_S = 0.046
ALIGN_SEARCH_S = 0.05
TRANSFER_MIDPOINT = 0.35
TRANSFER_SLOPE = 15.0


@dataclass(frozen=True)
class PanelConfig:
    listener_count: int = 50
    response_seed: int = 0
    word_noise_kappa: float = 20.0

    def __post_init__(self):
        if self.listener_count < 1:
            raise ValidationError("listener_count must be >= 1")
        if not self.word_noise_kappa > 0:
            raise ValidationError("word_noise_kappa must be positive")


@dataclass(frozen=True)
class PanelResponse:
    scene_id: str
    listener_id: str
    words_total: int
    words_correct: int

    def __post_init__(self):
        if not 0 <= self.words_correct <= self.words_total:
            raise ValidationError("words_correct must lie in [0, words_total]")

    @property
    def si(self) -> float:
        return self.words_correct / self.words_total


def _shift_to(reference: np.ndarray, heard: np.ndarray, sample_rate: int) -> np.ndarray:
    max_lag = int(ALIGN_SEARCH_S * sample_rate)
    n = len(reference)
    size = fft.next_fast_len(2 * n, real=True)
    xc = fft.irfft(fft.rfft(heard, size) * np.conj(fft.rfft(reference, size)), size)
    lags = np.concatenate([np.arange(0, max_lag + 1), np.arange(-max_lag, 0)])
    lag = int(lags[np.argmax(np.concatenate([xc[: max_lag + 1], xc[-max_lag:]]))])
    out = np.zeros(n)
    if lag >= 0:
        seg = heard[lag : lag + n]
        out[: len(seg)] = seg
    else:
        seg = heard[: n + lag]
        out[-lag : -lag + len(seg)] = seg
    return out


def audibility_index(reference, heard, sample_rate: int) -> float:
    """Importance-weighted band audibility in [0, 1].

    ``heard`` is what reaches a normal-hearing ear (i.e. after the
    hearing-loss simulation).
    """
    reference = np.asarray(reference, float)
    heard = np.asarray(heard, float)
    active = np.flatnonzero(reference)
    if active.size == 0:
        raise ValidationError("reference is silent")
    if not np.any(heard):
        return 0.0
    heard = _shift_to(reference, heard, sample_rate)
    lo, hi = active[0], active[-1] + 1
    x, y = reference[lo:hi], heard[lo:hi]

    nper = int(SEGMENT_S * sample_rate)
    f, pxy = signal.csd(x, y, fs=sample_rate, nperseg=nper)
    _, pxx = signal.welch(x, fs=sample_rate, nperseg=nper)
    _, pyy = signal.welch(y, fs=sample_rate, nperseg=nper)
    coherence = np.abs(pxy) ** 2 / (pxx * pyy + 1e-300)
    df = f[1] - f[0]
    floor = 10 ** (HEARING_FLOOR_DBFS / 10)

    ai = 0.0
    for fc, weight in zip(OCTAVE_CENTRES, BAND_IMPORTANCE):
        band = (f >= fc / math.sqrt(2)) & (f < fc * math.sqrt(2))
        if not band.any():
            continue
        speech = float(np.sum(coherence[band] * pyy[band]) * df)
        noise = float(np.sum((1 - coherence[band]) * pyy[band]) * df)
        snr = 10 * math.log10((speech + 1e-300) / (noise + floor))
        ai += weight * min(1.0, max(0.0, (snr + SNR_OFFSET_DB) / SNR_RANGE_DB))
    return ai


def word_probability(ai: float) -> float:
    return 1.0 / (1.0 + math.exp(-TRANSFER_SLOPE * (ai - TRANSFER_MIDPOINT)))


def response_rng(seed: int, scene_id: str, listener_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(scene_id.encode()), zlib.crc32(listener_id.encode())])


def draw_words_correct(p: float, words_total: int, kappa: float, rng: np.random.Generator) -> int:
    """Beta-binomial word scoring: one Beta(kp, k(1-p)) draw per response."""
    if p <= 0.0:
        q = 0.0
    elif p >= 1.0:
        q = 1.0
    elif math.isinf(kappa):
        q = p
    else:
        a, b = kappa * p, kappa * (1 - p)
        # underflowing shape parameters degenerate to the mean
        q = rng.beta(a, b) if a > 0 and b > 0 else p
    return int(rng.binomial(words_total, q))


def hearing_probability(scene, enhanced, audiogram, degraded: dict | None = None) -> float:
    """Better-ear word-correct probability for one (scene, listener) pair."""
    best = 0.0
    for ear in ("L", "R"):
        channel = enhanced.channel(ear)
        if degraded is not None:
            heard = degraded[ear]
        else:
            heard = simulate_hearing_loss(channel, audiogram, ear, scene.sample_rate)
        best = max(best, audibility_index(scene.anechoic_target, heard, scene.sample_rate))
    return word_probability(best)


def simulate_response(scene, enhanced, audiogram, transcript: str, rng: np.random.Generator,
                      kappa: float = 20.0, degraded: dict | None = None) -> PanelResponse:
    words = transcript.split()
    if not words:
        raise InvalidTranscriptError(f"scene {scene.scene_id} has an empty transcript")
    p = hearing_probability(scene, enhanced, audiogram, degraded)
    correct = draw_words_correct(p, len(words), kappa, rng)
    return PanelResponse(scene.scene_id, audiogram.listener_id, len(words), correct)


def panel_measure(scenes, listeners, config: PanelConfig, enhanced_for) -> dict[tuple[str, str], float]:
    """Measured SI for every (scene, listener) pair.

    ``enhanced_for(scene, audiogram)`` returns the signal the listener hears
    (an EnhancedOutput) or ``None`` if it is missing.
    """
    table = {}
    for scene in scenes:
        for audiogram in listeners:
            enhanced = enhanced_for(scene, audiogram)
            if enhanced is None:
                raise IncompletePanelError(f"no enhanced signal for {scene.scene_id}/{audiogram.listener_id}")
            rng = response_rng(config.response_seed, scene.scene_id, audiogram.listener_id)
            resp = simulate_response(scene, enhanced, audiogram, scene.transcript, rng, config.word_noise_kappa)
            table[(scene.scene_id, audiogram.listener_id)] = resp.si
    return table


def write_panel_csv(path, table: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "listener_id", "si_measured"])
        for (scene_id, listener_id), si in sorted(table.items()):
            w.writerow([scene_id, listener_id, repr(float(si))])
    return path


def read_panel_csv(path) -> dict[tuple[str, str], float]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["scene_id", "listener_id", "si_measured"]:
            raise SchemaError(f"{path}: expected header scene_id,listener_id,si_measured")
        return {(r["scene_id"], r["listener_id"]): float(r["si_measured"]) for r in reader}
