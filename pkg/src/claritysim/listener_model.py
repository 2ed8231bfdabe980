"""Artificial listeners (audiograms) and the hearing-loss simulator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.ndimage import uniform_filter1d

from claritysim.errors import InvalidArgumentError, NotFoundError, SchemaError, ValidationError

AUDIOGRAM_FREQS = (250, 500, 1000, 2000, 4000, 8000)
SHAPES = ("normal", "flat", "sloping", "steep_sloping")
SEVERITIES = ("mild", "moderate", "severe")

SEVERITY_BASE_DB = {"mild": 25.0, "moderate": 45.0, "severe": 65.0}
NORMAL_BASE_DB = 5.0
NORMAL_MAX_DB = 20.0
SLOPE_DB_PER_OCTAVE = {"normal": 0.0, "flat": 0.0, "sloping": 10.0, "steep_sloping": 20.0}
JITTER_DB = 5.0

NO_EFFECT_FLOOR_DB = 10.0
# band level (dBFS, 10 ms RMS) heard at 0 dB HL; full scale stands in for the
# level where loudness growth catches up with normal
HEARING_FLOOR_DBFS = -85.0
GATE_RANGE_DB = 10.0
RECRUITMENT_FULL_SCALE = 1.0
ENVELOPE_WINDOW_S = 0.01
FILTER_ORDER = 3  # doubled by forward-backward filtering


def normalise_ear(ear: str) -> str:
    key = {"l": "L", "left": "L", "r": "R", "right": "R"}.get(str(ear).lower())
    if key is None:
        raise InvalidArgumentError(f"unknown ear label {ear!r}")
    return key


@dataclass(frozen=True)
class Audiogram:
    listener_id: str
    left: dict
    right: dict

    def __post_init__(self):
        for name, ear in (("left", self.left), ("right", self.right)):
            if set(ear) != set(AUDIOGRAM_FREQS):
                raise ValidationError(f"{self.listener_id}: {name} ear must give all of {AUDIOGRAM_FREQS} Hz")
            for f, v in ear.items():
                if not 0.0 <= v <= 120.0:
                    raise ValidationError(f"{self.listener_id}: {name} {f} Hz threshold {v} outside [0, 120]")

    def ear(self, ear: str) -> dict:
        return self.left if normalise_ear(ear) == "L" else self.right

    def thresholds(self, ear: str) -> np.ndarray:
        e = self.ear(ear)
        return np.array([e[f] for f in AUDIOGRAM_FREQS], float)

    @property
    def better_ear_average(self) -> float:
        pta = [np.mean([e[f] for f in (500, 1000, 2000, 4000)]) for e in (self.left, self.right)]
        return float(min(pta))

    def swapped(self) -> Audiogram:
        return Audiogram(self.listener_id, dict(self.right), dict(self.left))

    @classmethod
    def uniform(cls, listener_id: str, level_db: float) -> Audiogram:
        ear = {f: float(level_db) for f in AUDIOGRAM_FREQS}
        return cls(listener_id, ear, dict(ear))

    def to_dict(self) -> dict:
        return {
            "listener_id": self.listener_id,
            "left": {str(f): v for f, v in self.left.items()},
            "right": {str(f): v for f, v in self.right.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> Audiogram:
        try:
            return cls(
                d["listener_id"],
                {int(f): float(v) for f, v in d["left"].items()},
                {int(f): float(v) for f, v in d["right"].items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed audiogram record: {exc}") from exc


@dataclass(frozen=True)
class ListenerProfile:
    shape: str = "normal"
    severity: str = "mild"
    asymmetry_db: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown audiogram shape {self.shape!r}")
        if self.severity not in SEVERITIES:
            raise ValidationError(f"unknown severity {self.severity!r}")
        if not 0.0 <= self.asymmetry_db <= 30.0:
            raise ValidationError("asymmetry_db must lie in [0, 30]")

    @property
    def label(self) -> str:
        return "normal" if self.shape == "normal" else f"{self.shape}-{self.severity}"


def template_thresholds(profile: ListenerProfile) -> np.ndarray:
    base = NORMAL_BASE_DB if profile.shape == "normal" else SEVERITY_BASE_DB[profile.severity]
    octaves_above_1k = np.maximum(0.0, np.log2(np.array(AUDIOGRAM_FREQS) / 1000.0))
    return base + SLOPE_DB_PER_OCTAVE[profile.shape] * octaves_above_1k


def generate_listener(profile: ListenerProfile, rng_seed: int, listener_id: str | None = None) -> Audiogram:
    """Audiogram drawn around the profile's template.

    Each threshold gets independent uniform jitter of +/-5 dB; one ear (chosen
    at random) is made worse by ``asymmetry_db``. Normal-hearing listeners
    are capped at 20 dB HL.
    """
    rng = np.random.default_rng(rng_seed)
    template = template_thresholds(profile)
    worse = rng.integers(2)
    ears = []
    for side in range(2):
        t = template + rng.uniform(-JITTER_DB, JITTER_DB, size=len(AUDIOGRAM_FREQS))
        if side == worse:
            t = t + profile.asymmetry_db
        upper = NORMAL_MAX_DB if profile.shape == "normal" else 120.0
        t = np.clip(np.round(t, 1), 0.0, upper)
        ears.append({f: float(v) for f, v in zip(AUDIOGRAM_FREQS, t)})
    return Audiogram(listener_id or f"L{rng_seed}", ears[0], ears[1])


DEFAULT_POPULATION_MIX = (
    ListenerProfile("normal", "mild", 0.0),
    ListenerProfile("sloping", "mild", 5.0),
    ListenerProfile("sloping", "moderate", 5.0),
    ListenerProfile("flat", "moderate", 10.0),
    ListenerProfile("steep_sloping", "moderate", 0.0),
    ListenerProfile("sloping", "severe", 5.0),
)


def generate_population(count: int, seed: int, mix=DEFAULT_POPULATION_MIX) -> list[tuple[ListenerProfile, Audiogram]]:
    """Listeners cycling through ``mix`` so every profile is represented."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    out = []
    for i in range(count):
        profile = mix[i % len(mix)]
        out.append((profile, generate_listener(profile, int(seeds[i]), f"L{i:03d}")))
    return out


def save_population(path, population) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    for profile, audiogram in population:
        rec = audiogram.to_dict()
        rec["profile"] = {"shape": profile.shape, "severity": profile.severity, "asymmetry_db": profile.asymmetry_db}
        records.append(rec)
    path.write_text(json.dumps(records, indent=1))
    return path


def load_population(path) -> list[tuple[ListenerProfile | None, Audiogram]]:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no listener file at {path}")
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    out = []
    for rec in records:
        prof = rec.get("profile")
        out.append((ListenerProfile(**prof) if prof else None, Audiogram.from_dict(rec)))
    return out


# -- hearing loss simulation -------------------------------------------------


def crossover_frequencies(sample_rate: int) -> list[float]:
    edges = [float(np.sqrt(a * b)) for a, b in zip(AUDIOGRAM_FREQS[:-1], AUDIOGRAM_FREQS[1:])]
    return [f for f in edges if f < 0.45 * sample_rate]


def band_split(x: np.ndarray, sample_rate: int) -> list[np.ndarray]:
    """Zero-phase power-complementary split into one band per audiogram frequency.

    Each stage peels the low part off the remainder with a forward-backward
    Butterworth low-pass and keeps the forward-backward high-pass; since
    ``|L|^2 + |H|^2 = 1`` the bands sum back to the input.
    """
    rest = np.asarray(x, float)
    bands = []
    for fc in crossover_frequencies(sample_rate):
        lp = signal.butter(FILTER_ORDER, fc, "lowpass", fs=sample_rate, output="sos")
        hp = signal.butter(FILTER_ORDER, fc, "highpass", fs=sample_rate, output="sos")
        bands.append(signal.sosfiltfilt(lp, rest))
        rest = signal.sosfiltfilt(hp, rest)
    bands.append(rest)
    # bands above Nyquist merge into the top band
    while len(bands) < len(AUDIOGRAM_FREQS):
        bands.append(np.zeros_like(rest))
    return bands


def band_gains(band: np.ndarray, threshold_db: float, sample_rate: int, recruitment: bool = True) -> np.ndarray:
    """Time-varying linear gain for one band.

    Three non-increasing factors in ``threshold_db``: fixed attenuation,
    power-law envelope expansion (if ``recruitment``) and an audibility gate
    that fades content out over the 10 dB below the elevated threshold.
    """
    atten = 10 ** (-max(0.0, threshold_db - NO_EFFECT_FLOOR_DB) / 20)
    win = max(1, int(round(ENVELOPE_WINDOW_S * sample_rate)))
    env = np.sqrt(np.maximum(uniform_filter1d(band**2, win, mode="nearest"), 0.0))
    with np.errstate(divide="ignore"):
        level_db = 20 * np.log10(env)
    gate_top = HEARING_FLOOR_DBFS + threshold_db
    gate = np.clip((level_db - (gate_top - GATE_RANGE_DB)) / GATE_RANGE_DB, 0.0, 1.0)
    if not recruitment or threshold_db <= 0:
        return atten * gate
    with np.errstate(divide="ignore"):
        expansion = np.minimum(1.0, (env / RECRUITMENT_FULL_SCALE) ** (threshold_db / 120.0))
    return atten * gate * expansion


def hearing_loss_bands(signal_in, audiogram: Audiogram, ear: str, sample_rate: int, recruitment: bool = True) -> list[np.ndarray]:
    thresholds = audiogram.thresholds(normalise_ear(ear))
    x = np.asarray(signal_in, float)
    if x.ndim != 1 or len(x) == 0:
        raise InvalidArgumentError("signal must be a non-empty 1-D array")
    return [b * band_gains(b, hl, sample_rate, recruitment) for b, hl in zip(band_split(x, sample_rate), thresholds)]


def simulate_hearing_loss(signal_in, audiogram: Audiogram, ear: str, sample_rate: int, recruitment: bool = True) -> np.ndarray:
    """Audiogram-driven attenuation plus loudness-recruitment expansion.

    Each band is attenuated by ``max(0, HL - 10)`` dB; with ``recruitment``
    its envelope is additionally raised to the power ``1 + HL/120``
    relative to digital full scale, so quiet passages lose more than loud
    ones. Band content more than 10 dB under the listener's threshold
    (``HEARING_FLOOR_DBFS + HL``) is removed. Output has the input's length.
    """
    return np.sum(hearing_loss_bands(signal_in, audiogram, ear, sample_rate, recruitment), axis=0)
