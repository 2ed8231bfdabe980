"""Baseline hearing aid and the black-box causality verifier."""

from __future__ import annotations

import functools
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numba import njit
from scipy import signal

from claritysim.audio_io import read_wav, write_wav
from claritysim.errors import CannotVerifyError, MalformedInputError, ValidationError
from claritysim.listener_model import AUDIOGRAM_FREQS, Audiogram, normalise_ear

MAX_LOOKAHEAD_MS = 5.0
MAX_GAIN_DB = 40.0

# NAL-R style frequency constants; the 1 kHz term is 0 (not +1) so a
# normal audiogram gets exactly 0 dB everywhere after flooring.
NALR_K_DB = {250: -17.0, 500: -8.0, 1000: 0.0, 2000: -1.0, 4000: -2.0, 8000: -2.0}

DEFAULT_BAND_EDGES = (125.0, 353.6, 707.1, 1414.2, 2828.4, 5656.9, 8000.0)


def _default_bands():
    e = DEFAULT_BAND_EDGES
    return tuple((e[i], e[i + 1]) for i in range(len(e) - 1))


@dataclass(frozen=True)
class ProcessorConfig:
    bands: tuple = field(default_factory=_default_bands)
    compression_ratio: tuple = (2.0,) * 6
    threshold_db: tuple = (-45.0,) * 6
    attack_ms: float = 5.0
    release_ms: float = 50.0
    lookahead_ms: float = 2.0
    level_window_ms: float = 10.0
    output_channels: int = 2

    def __post_init__(self):
        bands = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        object.__setattr__(self, "bands", bands)
        n = len(bands)
        if n < 1:
            raise ValidationError("need at least one band")
        for name in ("compression_ratio", "threshold_db"):
            value = getattr(self, name)
            value = (float(value),) * n if np.isscalar(value) else tuple(float(v) for v in value)
            if len(value) != n:
                raise ValidationError(f"{name} needs one value per band")
            object.__setattr__(self, name, value)
        if any(r < 1.0 for r in self.compression_ratio):
            raise ValidationError("compression ratios must be >= 1")
        if not 0.0 <= self.lookahead_ms <= MAX_LOOKAHEAD_MS:
            raise ValidationError(f"lookahead {self.lookahead_ms} ms outside [0, {MAX_LOOKAHEAD_MS}]")
        if bands[0][0] > 125.0 or bands[-1][1] < 8000.0:
            raise ValidationError("bands must cover 125 Hz to 8 kHz")
        for (lo, hi), (nlo, _) in zip(bands, bands[1:] + ((bands[-1][1], 0),)):
            if not lo < hi or not math.isclose(hi, nlo):
                raise ValidationError("bands must be contiguous and increasing")
        if self.attack_ms <= 0 or self.release_ms <= 0 or self.level_window_ms <= 0:
            raise ValidationError("time constants must be positive")
        if self.output_channels != 2:
            raise ValidationError("output_channels must be 2")

    @property
    def crossovers(self) -> list[float]:
        return [hi for _, hi in self.bands[:-1]]

    @property
    def centres(self) -> list[float]:
        return [math.sqrt(lo * hi) for lo, hi in self.bands]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["bands"] = [list(b) for b in self.bands]
        d["compression_ratio"] = list(self.compression_ratio)
        d["threshold_db"] = list(self.threshold_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ProcessorConfig:
        d = dict(d)
        if "bands" in d:
            d["bands"] = tuple(tuple(b) for b in d["bands"])
        for key in ("compression_ratio", "threshold_db"):
            if key in d and not np.isscalar(d[key]):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class EnhancedOutput:
    scene_id: str
    listener_id: str
    left: np.ndarray
    right: np.ndarray
    processing_latency_samples: int = 0

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise MalformedInputError("enhanced channels differ in length")

    def channel(self, ear: str) -> np.ndarray:
        return self.left if normalise_ear(ear) == "L" else self.right

    def stereo(self) -> np.ndarray:
        return np.stack([self.left, self.right], axis=1)


def prescribe_gains(audiogram: Audiogram, ear: str) -> dict[int, float]:
    """Linear NAL-R style insertion gain per audiometric frequency, in dB."""
    hl = audiogram.ear(ear)
    common = 0.05 * (hl[500] + hl[1000] + hl[2000])
    return {f: float(np.clip(common + 0.31 * hl[f] + NALR_K_DB[f], 0.0, MAX_GAIN_DB)) for f in AUDIOGRAM_FREQS}


def band_gains_db(audiogram: Audiogram, ear: str, config: ProcessorConfig) -> np.ndarray:
    g = prescribe_gains(audiogram, ear)
    logf = np.log2(np.array(AUDIOGRAM_FREQS, float))
    values = np.array([g[f] for f in AUDIOGRAM_FREQS])
    return np.interp(np.log2(config.centres), logf, values)


# -- causal crossover filterbank ---------------------------------------------


@functools.lru_cache(maxsize=32)
def _crossover(fc: float, sample_rate: int):
    """Linkwitz-Riley 4th-order low/high sections and their allpass sum."""
    b_lp, a = signal.butter(2, fc, "lowpass", fs=sample_rate)
    b_hp, _ = signal.butter(2, fc, "highpass", fs=sample_rate)
    lp = signal.tf2sos(np.convolve(b_lp, b_lp), np.convolve(a, a))
    hp = signal.tf2sos(np.convolve(b_hp, b_hp), np.convolve(a, a))
    ap = signal.tf2sos(np.convolve(b_lp, b_lp) + np.convolve(b_hp, b_hp), np.convolve(a, a))
    return lp, hp, ap


def causal_band_split(x: np.ndarray, crossovers, sample_rate: int) -> list[np.ndarray]:
    """Split so the bands sum to an allpass-filtered copy of ``x``.

    Band k = H_1..H_{k-1} L_k AP_{k+1}..AP_{N-1}; the allpass terms on the
    lower bands line their phase up with the higher ones.
    """
    sections = [_crossover(float(fc), sample_rate) for fc in crossovers]
    rest = np.asarray(x, float)
    bands = []
    for i, (lp, hp, _) in enumerate(sections):
        low = signal.sosfilt(lp, rest)
        for _, _, ap in sections[i + 1 :]:
            low = signal.sosfilt(ap, low)
        bands.append(low)
        rest = signal.sosfilt(hp, rest)
    bands.append(rest)
    return bands


@njit(cache=True)
def _compress(x, window, threshold_db, ratio, gain_db, attack_coef, release_coef, lookahead):
    n = x.shape[0]
    slope = 1.0 - 1.0 / ratio
    smoothed = np.empty(n)
    acc = 0.0
    state = 0.0
    for i in range(n):
        acc += x[i] * x[i]
        if i >= window:
            acc -= x[i - window] * x[i - window]
        power = max(acc, 0.0) / window
        level = 10.0 * math.log10(power + 1e-20)
        over = level - threshold_db
        target = gain_db - (over * slope if over > 0.0 else 0.0)
        if i == 0:
            state = target
        elif target < state:
            state = attack_coef * state + (1.0 - attack_coef) * target
        else:
            state = release_coef * state + (1.0 - release_coef) * target
        smoothed[i] = state
    y = np.empty(n)
    for i in range(n):
        j = i + lookahead
        if j > n - 1:
            j = n - 1
        y[i] = x[i] * 10.0 ** (smoothed[j] / 20.0)
    return y


def compress_band(x: np.ndarray, sample_rate: int, threshold_db: float, ratio: float, gain_db: float, config: ProcessorConfig) -> np.ndarray:
    """Feed-forward compressor with make-up gain.

    Level is the 10 ms running power in dBFS; the dB gain is smoothed with
    one-pole attack/release and applied ``lookahead_ms`` early.
    """
    window = max(1, int(round(config.level_window_ms * sample_rate / 1000)))
    attack = math.exp(-1.0 / (config.attack_ms * sample_rate / 1000))
    release = math.exp(-1.0 / (config.release_ms * sample_rate / 1000))
    lookahead = int(math.floor(config.lookahead_ms * sample_rate / 1000))
    return _compress(np.ascontiguousarray(x, dtype=np.float64), window, float(threshold_db), float(ratio), float(gain_db), attack, release, lookahead)


def static_curve_db(level_db: float, threshold_db: float, ratio: float, gain_db: float) -> float:
    """Designed output level for a steady input level."""
    over = max(0.0, level_db - threshold_db)
    return level_db + gain_db - over * (1 - 1 / ratio)


@functools.lru_cache(maxsize=32)
def _filterbank_latency(crossovers: tuple, sample_rate: int) -> int:
    imp = np.zeros(4096)
    imp[0] = 1.0
    return int(np.argmax(np.abs(np.sum(causal_band_split(imp, crossovers, sample_rate), axis=0))))


def process_ear(mics, gains_db, config: ProcessorConfig, sample_rate: int) -> np.ndarray:
    # broadside delay-and-sum: all microphone delays are zero
    mix = np.mean(np.stack(mics), axis=0)
    bands = causal_band_split(mix, config.crossovers, sample_rate)
    out = np.zeros_like(mix)
    for band, thr, ratio, g in zip(bands, config.threshold_db, config.compression_ratio, gains_db):
        out += compress_band(band, sample_rate, thr, ratio, g, config)
    return out


def enhance(spin, config: ProcessorConfig, audiogram: Audiogram) -> EnhancedOutput:
    """Baseline hearing aid: mic average, band split, prescribed compression."""
    ears = {}
    for ear in ("L", "R"):
        mics = spin.ear_channels(ear)
        if not mics:
            raise MalformedInputError(f"scene {spin.scene_id} has no {ear} channels")
        if len({len(m) for m in mics}) != 1:
            raise MalformedInputError(f"scene {spin.scene_id} {ear} channels differ in length")
        ears[ear] = process_ear(mics, band_gains_db(audiogram, ear, config), config, spin.sample_rate)
    latency = _filterbank_latency(tuple(config.crossovers), spin.sample_rate)
    return EnhancedOutput(spin.scene_id, audiogram.listener_id, ears["L"], ears["R"], latency)


def passthrough(spin, audiogram: Audiogram | None = None) -> EnhancedOutput:
    """Reference 'no hearing aid' entry: front microphone of each ear."""
    left, right = spin.mic_signals["L1"], spin.mic_signals["R1"]
    return EnhancedOutput(spin.scene_id, audiogram.listener_id if audiogram else "", left.copy(), right.copy(), 0)


def as_processor(config: ProcessorConfig, audiogram: Audiogram, sample_rate: int, mics_per_ear: int) -> Callable:
    """Wrap :func:`enhance` as ``(n, 2*mics) -> (n, 2)`` for probing."""
    from claritysim.renderer import SpinSignalSet

    def run(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float).T).T
        names = [f"{ear}{i + 1}" for ear in ("L", "R") for i in range(mics_per_ear)]
        if x.shape[1] != len(names):
            raise MalformedInputError(f"expected {len(names)} channels, got {x.shape[1]}")
        spin = SpinSignalSet("probe", {n: x[:, k] for k, n in enumerate(names)}, x[:, 0], "", sample_rate)
        return enhance(spin, config, audiogram).stereo()

    return run


# -- causality verification --------------------------------------------------


@dataclass
class CausalityResult:
    passed: bool
    measured_lookahead_ms: float
    measured_lookahead_samples: int
    max_lookahead_ms: float
    probes: int

    def __bool__(self) -> bool:
        return self.passed


def _first_difference(y0: np.ndarray, y1: np.ndarray, tol: float) -> int | None:
    n = min(len(y0), len(y1))
    d = np.abs(y0[:n] - y1[:n])
    if d.ndim > 1:
        d = d.max(axis=tuple(range(1, d.ndim)))
    hits = np.flatnonzero(d > tol)
    return int(hits[0]) if hits.size else None


def verify_causality(
    processor: Callable[[np.ndarray], np.ndarray],
    sample_rate: int = 44100,
    max_lookahead_ms: float = MAX_LOOKAHEAD_MS,
    n_probes: int = 50,
    probe_duration_s: float = 2.0,
    channels: int = 1,
    seed: int = 0,
    rel_tol: float = 1e-9,
) -> CausalityResult:
    """Paired-probe lookahead measurement for a black-box processor.

    For each cut point ``t`` the processor sees two noise inputs that agree
    before ``t`` and differ from ``t`` on. The earliest output sample at
    which the responses differ bounds how far ahead the processor reads;
    the largest such lead over all probes is the measured lookahead.

    Raises:
        CannotVerifyError: if the processor gives different output for the
            same input.
    """
    n = int(round(probe_duration_s * sample_rate))
    rng = np.random.default_rng(seed)
    shape = (n,) if channels == 1 else (n, channels)
    x = rng.standard_normal(shape) * 0.1

    y = np.asarray(processor(x.copy()))
    if not np.array_equal(y, np.asarray(processor(x.copy()))):
        raise CannotVerifyError("processor output is not deterministic")
    tol = rel_tol * max(1.0, float(np.max(np.abs(y))) if y.size else 1.0)

    lead = -math.inf
    for k in range(n_probes):
        t = int(round((k + 1) * n / (n_probes + 1)))
        xp = x.copy()
        xp[t:] = rng.standard_normal(xp[t:].shape) * 0.1
        first = _first_difference(y, np.asarray(processor(xp)), tol)
        if first is not None:
            lead = max(lead, t - first)
    limit = max_lookahead_ms * sample_rate / 1000.0
    passed = lead <= limit + 1e-9
    samples = int(lead) if math.isfinite(lead) else -(2**31)
    ms = lead / sample_rate * 1000.0 if math.isfinite(lead) else -math.inf
    return CausalityResult(bool(passed), ms, samples, max_lookahead_ms, n_probes)


class CommandProcessor:
    """Run an external ``input.wav -> output.wav`` command as a processor.

    ``command`` is a shell-style template containing ``{input}`` and
    ``{output}``.
    """

    def __init__(self, command: str, sample_rate: int = 44100, timeout_s: float = 120.0):
        if "{input}" not in command or "{output}" not in command:
            raise ValidationError("processor command needs {input} and {output} placeholders")
        self.command = command
        self.sample_rate = sample_rate
        self.timeout_s = timeout_s
        self._tmp = tempfile.TemporaryDirectory(prefix="claritysim-probe-")
        self.calls = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        tmp = Path(self._tmp.name)
        self.calls += 1
        inp, out = tmp / f"in{self.calls}.wav", tmp / f"out{self.calls}.wav"
        write_wav(inp, x, self.sample_rate)
        argv = [a.format(input=str(inp), output=str(out)) for a in shlex.split(self.command)]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=self.timeout_s)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise CannotVerifyError(f"processor command failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise CannotVerifyError(
                f"processor exited with {proc.returncode}: {proc.stderr.decode(errors='replace').strip()[-400:]}"
            )
        y, _ = read_wav(out)
        inp.unlink(missing_ok=True)
        out.unlink(missing_ok=True)
        return y
