"""Synthetic stand-ins for the speech corpus and the interferer recordings.

Utterances are formant-synthesised word sequences with word-level
transcripts. Each vocabulary word always gets the same formant recipe, so
transcripts and audio stay consistent across the corpus. Interferers are
non-speech: pink noise, chord sequences, appliance hum and a
television-like modulated noise bed.
"""

from __future__ import annotations

import json
import zlib
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from claritysim.audio_io import read_wav, write_wav
from claritysim.errors import NotFoundError, ValidationError

SPEECH_LEVEL_DBFS = -26.0
INTERFERER_LEVEL_DBFS = -30.0
INTERFERER_TYPES = ("television", "appliance", "music", "noise")

VOCABULARY = (
    "the a bird cat dog green blue red small large house river window table "
    "chair garden morning evening quickly slowly bright dark open closed "
    "found left took gave made saw heard bread water paper letter story "
    "yellow orange seven twelve market station kitchen pencil basket "
    "winter summer stone wooden silver golden happy early later under over "
    "near behind yesterday today friend doctor teacher sister brother"
).split()


@dataclass
class Utterance:
    utterance_id: str
    samples: np.ndarray
    sample_rate: int
    transcript: str

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValidationError(f"utterance {self.utterance_id} is empty")
        if len(self.transcript.split()) < 1:
            raise ValidationError(f"utterance {self.utterance_id} has no words")


def active_rms(x: np.ndarray, sample_rate: int, floor_db: float = -40.0, frame_s: float = 0.01) -> float:
    """RMS over 10 ms frames within ``floor_db`` of the loudest frame."""
    x = np.asarray(x, float)
    n = max(1, int(round(frame_s * sample_rate)))
    usable = len(x) // n * n
    if usable == 0:
        return float(np.sqrt(np.mean(x**2)))
    energy = np.mean(x[:usable].reshape(-1, n) ** 2, axis=1)
    top = energy.max()
    if top == 0:
        return 0.0
    active = energy > top * 10 ** (floor_db / 10)
    return float(np.sqrt(energy[active].mean()))


def _set_level(x: np.ndarray, sample_rate: int, level_dbfs: float) -> np.ndarray:
    rms = active_rms(x, sample_rate)
    return x * (10 ** (level_dbfs / 20) / rms)


def _word_recipe(word: str) -> dict:
    rng = np.random.default_rng(zlib.crc32(word.encode()))
    syllables = 1 + int(len(word) > 5)
    return {
        "duration": 0.16 + 0.035 * len(word) + rng.uniform(0, 0.05),
        "formants": [
            (rng.uniform(300, 800), rng.uniform(900, 2400), rng.uniform(2500, 3400))
            for _ in range(syllables)
        ],
        "onset_fricative": bool(rng.random() < 0.5),
        "offset_fricative": bool(rng.random() < 0.3),
        "fricative_band": (rng.uniform(2500, 4000), rng.uniform(6000, 9000)),
    }


def _resonator(x: np.ndarray, freq: float, bandwidth: float, sample_rate: int) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2 * np.pi * freq / sample_rate
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return signal.lfilter([1 - r], a, x)


def _fricative(n: int, band, rng, sample_rate: int) -> np.ndarray:
    sos = signal.butter(4, band, "bandpass", fs=sample_rate, output="sos")
    burst = signal.sosfilt(sos, rng.standard_normal(n))
    return burst * np.hanning(n) * 0.6


def _synth_word(word: str, f0: float, rng, sample_rate: int) -> np.ndarray:
    recipe = _word_recipe(word)
    n = int(recipe["duration"] * sample_rate)
    t = np.arange(n) / sample_rate
    contour = f0 * (1 + 0.04 * np.sin(2 * np.pi * rng.uniform(2, 5) * t))
    phase = np.cumsum(contour) / sample_rate
    source = np.diff(np.floor(phase), prepend=0.0)
    source += 0.02 * rng.standard_normal(n)

    voiced = np.zeros(n)
    parts = np.array_split(np.arange(n), len(recipe["formants"]))
    for idx, formants in zip(parts, recipe["formants"]):
        seg = source[idx]
        for freq, bw in zip(formants, (90.0, 110.0, 160.0)):
            seg = _resonator(seg, freq, bw, sample_rate)
        voiced[idx] = seg * np.hanning(len(idx)) ** 0.5
    voiced /= np.max(np.abs(voiced)) + 1e-12

    pieces = []
    if recipe["onset_fricative"]:
        pieces.append(_fricative(int(0.06 * sample_rate), recipe["fricative_band"], rng, sample_rate))
    pieces.append(voiced)
    if recipe["offset_fricative"]:
        pieces.append(_fricative(int(0.05 * sample_rate), recipe["fricative_band"], rng, sample_rate))
    return np.concatenate(pieces)


def synth_utterance(utterance_id: str, words, seed: int, sample_rate: int = 44100) -> Utterance:
    rng = np.random.default_rng(seed)
    f0 = rng.uniform(95.0, 210.0)
    pieces = [np.zeros(int(0.1 * sample_rate))]
    for k, word in enumerate(words):
        # gentle declination across the sentence
        pieces.append(_synth_word(word, f0 * (1 - 0.03 * k), rng, sample_rate))
        pieces.append(np.zeros(int(rng.uniform(0.04, 0.12) * sample_rate)))
    pieces.append(np.zeros(int(0.1 * sample_rate)))
    x = _set_level(np.concatenate(pieces), sample_rate, SPEECH_LEVEL_DBFS)
    return Utterance(utterance_id, x, sample_rate, " ".join(words))


def generate_corpus(count: int, seed: int, sample_rate: int = 44100) -> list[Utterance]:
    ss = np.random.SeedSequence(seed)
    out = []
    for i, child in enumerate(ss.spawn(count)):
        rng = np.random.default_rng(child)
        words = list(rng.choice(VOCABULARY, size=int(rng.integers(4, 8))))
        out.append(synth_utterance(f"U{i:04d}", words, int(child.generate_state(1)[0]), sample_rate))
    return out


# -- interferers ------------------------------------------------------------


def _pink(n: int, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=float)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def _music(n: int, rng, sample_rate: int) -> np.ndarray:
    out = np.zeros(n)
    pos = 0
    while pos < n:
        dur = int(rng.uniform(0.25, 0.6) * sample_rate)
        t = np.arange(min(dur, n - pos)) / sample_rate
        root = 110.0 * 2 ** (rng.integers(0, 24) / 12)
        chord = np.zeros_like(t)
        for step in (0, 4, 7, 12):
            f = root * 2 ** (step / 12)
            for h in range(1, 6):
                if f * h < sample_rate / 2:
                    chord += np.sin(2 * np.pi * f * h * t) / h**1.5
        out[pos : pos + len(t)] = chord * np.exp(-3.0 * t)
        pos += dur
    return out


def _appliance(n: int, rng, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    mains = rng.choice([50.0, 60.0])
    hum = sum(np.sin(2 * np.pi * mains * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 8))
    sos = signal.butter(2, [300, 3000], "bandpass", fs=sample_rate, output="sos")
    motor = signal.sosfilt(sos, rng.standard_normal(n))
    motor *= 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * t)
    return 0.5 * hum / 3 + motor


def _television(n: int, rng, sample_rate: int) -> np.ndarray:
    # speech-shaped noise with syllable-rate modulation over a music bed
    t = np.arange(n) / sample_rate
    sos = signal.butter(1, [200, 2500], "bandpass", fs=sample_rate, output="sos")
    bed = signal.sosfilt(sos, rng.standard_normal(n))
    mod = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(3, 5) * t) * np.sin(2 * np.pi * 0.4 * t)
    return bed * mod + 0.3 * _music(n, rng, sample_rate) / 4


_GENERATORS = {
    "noise": lambda n, rng, sr: _pink(n, rng),
    "music": _music,
    "appliance": _appliance,
    "television": _television,
}


def synth_interferer(source_type: str, duration_s: float, seed: int, sample_rate: int = 44100) -> np.ndarray:
    if source_type not in _GENERATORS:
        raise ValidationError(f"unknown interferer type {source_type!r}")
    rng = np.random.default_rng(seed)
    x = _GENERATORS[source_type](int(duration_s * sample_rate), rng, sample_rate)
    return _set_level(x, sample_rate, INTERFERER_LEVEL_DBFS)


def generate_interferers(per_type: int, seed: int, duration_s: float = 6.0, sample_rate: int = 44100):
    """Return ``{interferer_id: (source_type, samples)}``."""
    out = {}
    children = np.random.SeedSequence(seed).spawn(per_type * len(INTERFERER_TYPES))
    k = 0
    for source_type in INTERFERER_TYPES:
        for i in range(per_type):
            s = int(children[k].generate_state(1)[0])
            out[f"{source_type}_{i:02d}"] = (source_type, synth_interferer(source_type, duration_s, s, sample_rate))
            k += 1
    return out


# -- stores -----------------------------------------------------------------


class UtteranceStore(Mapping):
    """Read-only utterance lookup, optionally backed by a directory."""

    def __init__(self, utterances=()):
        self._items = {u.utterance_id: u for u in utterances}

    def __getitem__(self, key: str) -> Utterance:
        try:
            return self._items[key]
        except KeyError:
            raise NotFoundError(f"utterance {key!r} not in corpus") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def save(self, directory) -> Path:
        directory = Path(directory)
        index = []
        for u in self._items.values():
            write_wav(directory / f"{u.utterance_id}.wav", u.samples, u.sample_rate)
            index.append({"utterance_id": u.utterance_id, "transcript": u.transcript, "file": f"{u.utterance_id}.wav"})
        path = directory / "corpus.json"
        path.write_text(json.dumps(index, indent=1))
        return path

    @classmethod
    def load(cls, directory) -> UtteranceStore:
        directory = Path(directory)
        index_path = directory / "corpus.json"
        if not index_path.exists():
            raise NotFoundError(f"no corpus index in {directory}")
        utts = []
        for rec in json.loads(index_path.read_text()):
            x, sr = read_wav(directory / rec["file"])
            utts.append(Utterance(rec["utterance_id"], x, sr, rec["transcript"]))
        return cls(utts)


class SignalStore(Mapping):
    """``interferer_id -> (samples, sample_rate)`` with a type tag per id."""

    def __init__(self, signals: dict | None = None, sample_rate: int = 44100, types: dict | None = None):
        self._signals = dict(signals or {})
        self._types = dict(types or {})
        self.sample_rate = sample_rate

    @classmethod
    def from_generated(cls, generated: dict, sample_rate: int = 44100) -> SignalStore:
        return cls(
            {k: v[1] for k, v in generated.items()},
            sample_rate,
            {k: v[0] for k, v in generated.items()},
        )

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self._signals[key]
        except KeyError:
            raise NotFoundError(f"interferer {key!r} not in store") from None

    def __iter__(self):
        return iter(self._signals)

    def __len__(self):
        return len(self._signals)

    def source_type(self, key: str) -> str:
        return self._types.get(key, "noise")

    def ids_of_type(self, source_type: str) -> list[str]:
        return sorted(k for k, t in self._types.items() if t == source_type)

    def save(self, directory) -> Path:
        directory = Path(directory)
        index = []
        for key, x in self._signals.items():
            write_wav(directory / f"{key}.wav", x, self.sample_rate)
            index.append({"interferer_id": key, "source_type": self.source_type(key), "file": f"{key}.wav"})
        path = directory / "interferers.json"
        path.write_text(json.dumps(index, indent=1))
        return path

    @classmethod
    def load(cls, directory) -> SignalStore:
        directory = Path(directory)
        index_path = directory / "interferers.json"
        if not index_path.exists():
            raise NotFoundError(f"no interferer index in {directory}")
        signals, types, rate = {}, {}, 44100
        for rec in json.loads(index_path.read_text()):
            x, rate = read_wav(directory / rec["file"])
            signals[rec["interferer_id"]] = x
            types[rec["interferer_id"]] = rec["source_type"]
        return cls(signals, rate, types)
