"""Scene rendering: room + head responses, SNR setting, mixing, datasets."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from claritysim.audio_io import write_wav
from claritysim.corpus import INTERFERER_TYPES, SignalStore, UtteranceStore
from claritysim.errors import (
    InsufficientCorpusError,
    InvalidArgumentError,
    RenderOverflowError,
    SilentTargetError,
    ValidationError,
)
from claritysim.scene_gen import (
    DEFAULT_MAX_ORDER,
    HeadGeometry,
    RoomSpec,
    ScenePose,
    absorption_from_rt60,
    azimuth_in_head_frame,
    binaural_head_filter,
    channel_name,
    compute_rir,
    lateral_angle,
    mic_world_positions,
    sample_interferer_position,
    sample_scene_geometry,
)

log = logging.getLogger(__name__)

SAMPLE_RATE = 44100
ACTIVITY_FLOOR_DB = -40.0
ACTIVITY_FRAME_S = 0.01


@dataclass(frozen=True)
class InterfererSpec:
    source_type: str
    interferer_id: str
    position: tuple[float, float, float]
    snr_db: float

    def __post_init__(self):
        if self.source_type not in INTERFERER_TYPES:
            raise ValidationError(f"interferer type {self.source_type!r} is not a non-speech type")


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    room: RoomSpec
    pose: ScenePose
    head: HeadGeometry
    target_utterance_id: str
    interferers: tuple[InterfererSpec, ...]
    seed: int

    def __post_init__(self):
        if len(self.interferers) < 1:
            raise ValidationError(f"scene {self.scene_id} needs at least one interferer")

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "room": self.room.to_dict(),
            "pose": self.pose.to_dict(),
            "head": self.head.to_dict(),
            "target_utterance_id": self.target_utterance_id,
            "interferers": [
                {
                    "source_type": i.source_type,
                    "interferer_id": i.interferer_id,
                    "position": list(i.position),
                    "snr_db": i.snr_db,
                }
                for i in self.interferers
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        return cls(
            scene_id=d["scene_id"],
            room=RoomSpec.from_dict(d["room"]),
            pose=ScenePose.from_dict(d["pose"]),
            head=HeadGeometry.from_dict(d["head"]),
            target_utterance_id=d["target_utterance_id"],
            interferers=tuple(
                InterfererSpec(i["source_type"], i["interferer_id"], tuple(i["position"]), float(i["snr_db"]))
                for i in d["interferers"]
            ),
            seed=int(d["seed"]),
        )


@dataclass
class SpinSignalSet:
    """Rendered speech-in-noise microphone signals for one scene.

    ``mic_signals`` is keyed by channel name (``"L1"``, ``"R2"``, ...).
    ``anechoic_target`` is the dry utterance placed at the same offset as in
    the mixture.
    """

    scene_id: str
    mic_signals: dict[str, np.ndarray]
    anechoic_target: np.ndarray
    transcript: str
    sample_rate: int
    interferer_gains: list[float] = field(default_factory=list)
    normalisation_scale: float = 1.0

    @property
    def mics_per_ear(self) -> int:
        return sum(1 for k in self.mic_signals if k.startswith("L"))

    def ear_channels(self, ear: str) -> list[np.ndarray]:
        keys = sorted((k for k in self.mic_signals if k.startswith(ear)), key=lambda k: int(k[1:]))
        return [self.mic_signals[k] for k in keys]


@dataclass(frozen=True)
class RenderSettings:
    sample_rate: int = SAMPLE_RATE
    max_order: int = DEFAULT_MAX_ORDER
    highpass_hz: float | None = 100.0
    pre_roll_s: float = 1.0
    post_roll_s: float = 1.0
    headroom_dbfs: float = -3.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _frame_energy(x: np.ndarray, frame: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, float))
    usable = x.shape[1] // frame * frame
    return np.mean(x[:, :usable].reshape(x.shape[0], -1, frame) ** 2, axis=(0, 2))


def target_active_frames(target: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    frame = max(1, int(round(ACTIVITY_FRAME_S * sample_rate)))
    energy = _frame_energy(target, frame)
    if energy.size == 0 or energy.max() <= 0:
        return np.zeros(energy.shape, bool)
    return energy > energy.max() * 10 ** (ACTIVITY_FLOOR_DB / 10)


def set_snr(target_at_ref_mic, interferer_at_ref_mic, snr_db: float, sample_rate: int = SAMPLE_RATE) -> float:
    """Gain for the interferer so the target-active-frame SNR equals ``snr_db``.

    Signals may be 1-D or (channels, samples); power is averaged across
    channels over the frames where the target is within 40 dB of its
    loudest 10 ms frame.
    """
    frame = max(1, int(round(ACTIVITY_FRAME_S * sample_rate)))
    active = target_active_frames(target_at_ref_mic, sample_rate)
    if not active.any():
        raise SilentTargetError("target has no active frames")
    p_target = _frame_energy(target_at_ref_mic, frame)[active].mean()
    p_interf = _frame_energy(interferer_at_ref_mic, frame)[active].mean()
    if p_interf <= 0:
        raise InvalidArgumentError("interferer is silent over the target-active frames")
    return math.sqrt(p_target / (p_interf * 10 ** (snr_db / 10)))


def measured_snr_db(target, scaled_interferer, sample_rate: int = SAMPLE_RATE) -> float:
    frame = max(1, int(round(ACTIVITY_FRAME_S * sample_rate)))
    active = target_active_frames(target, sample_rate)
    pt = _frame_energy(target, frame)[active].mean()
    pi = _frame_energy(scaled_interferer, frame)[active].mean()
    return 10 * math.log10(pt / pi)


def _head_adjusted(rir: np.ndarray, azimuth: float, ear: str, head: HeadGeometry, room: RoomSpec, sample_rate: int):
    """Apply extra diffraction delay and shadowing on top of the free-field RIR.

    The RIR to the microphone already contains the straight-line interaural
    path; only the excess Woodworth path to the far ear is added here.
    """
    delay, shadow = binaural_head_filter(azimuth, ear, sample_rate, head.head_radius, room.speed_of_sound)
    theta = abs(lateral_angle(azimuth))
    if shadow.is_identity:
        return rir
    free_field = head.head_radius / room.speed_of_sound * math.sin(theta)
    extra = int(round((delay - free_field) * sample_rate))
    h = shadow.apply(rir)
    return np.concatenate([np.zeros(extra), h]) if extra > 0 else h


def source_responses(spec: SceneSpec, position, settings: RenderSettings) -> dict[str, np.ndarray]:
    """Effective impulse response from one source position to every mic."""
    azimuth = azimuth_in_head_frame(spec.pose, position)
    out = {}
    for label, mic in mic_world_positions(spec.pose, spec.head):
        rir = compute_rir(
            spec.room, position, mic, settings.max_order, settings.sample_rate,
            highpass_hz=settings.highpass_hz, channel_label=label,
        )
        out[channel_name(label)] = _head_adjusted(rir.taps, azimuth, label[0], spec.head, spec.room, settings.sample_rate)
    return out


def _loop(x: np.ndarray, n: int, offset: int) -> np.ndarray:
    return np.take(x, (offset + np.arange(n)) % len(x))


def _resampled(x: np.ndarray, rate: int, target_rate: int) -> np.ndarray:
    if rate == target_rate:
        return np.asarray(x, float)
    g = math.gcd(int(rate), int(target_rate))
    return signal.resample_poly(x, target_rate // g, rate // g)


def render_components(spec: SceneSpec, corpus, interferer_store, settings: RenderSettings | None = None):
    """Reverberant target and unscaled interferer images at every mic.

    Returns ``(dry_target, transcript, target_images, interferer_images)``;
    images are dicts of channel name to samples, all the same length.
    """
    settings = settings or RenderSettings()
    sr = settings.sample_rate
    utt = corpus[spec.target_utterance_id]
    speech = _resampled(utt.samples, utt.sample_rate, sr)
    pre, post = int(settings.pre_roll_s * sr), int(settings.post_roll_s * sr)
    n = pre + len(speech) + post
    dry = np.zeros(n)
    dry[pre : pre + len(speech)] = speech

    def images(src_signal, position):
        hs = source_responses(spec, position, settings)
        return {ch: signal.fftconvolve(src_signal, h)[:n] for ch, h in hs.items()}

    target_images = images(dry, spec.pose.source_position)
    store_rate = getattr(interferer_store, "sample_rate", sr)
    interferer_images = []
    for k, itf in enumerate(spec.interferers):
        raw = _resampled(interferer_store[itf.interferer_id], store_rate, sr)
        rng = np.random.default_rng([spec.seed, k])
        looped = _loop(raw, n, int(rng.integers(len(raw))))
        interferer_images.append(images(looped, itf.position))
    return dry, utt.transcript, target_images, interferer_images


def render_scene(
    spec: SceneSpec,
    corpus,
    interferer_store,
    settings: RenderSettings | None = None,
    interferer_gains=None,
) -> SpinSignalSet:
    """Render the SPIN signal set for one scene.

    Interferer gains come from :func:`set_snr` measured on the front
    microphone of each ear unless ``interferer_gains`` fixes them.
    """
    settings = settings or RenderSettings()
    dry, transcript, target_img, interf_imgs = render_components(spec, corpus, interferer_store, settings)
    ref = ["L1", "R1"]
    target_ref = np.stack([target_img[c] for c in ref])
    if interferer_gains is None:
        gains = [
            set_snr(target_ref, np.stack([img[c] for c in ref]), itf.snr_db, settings.sample_rate)
            for itf, img in zip(spec.interferers, interf_imgs)
        ]
    else:
        gains = [float(g) for g in interferer_gains]
        if len(gains) != len(spec.interferers):
            raise InvalidArgumentError("need one gain per interferer")

    mix = {}
    for ch, t in target_img.items():
        y = t.copy()
        for g, img in zip(gains, interf_imgs):
            y = y + g * img[ch]
        mix[ch] = y

    peak = max(float(np.max(np.abs(y))) for y in mix.values())
    scale = 1.0
    if peak >= 1.0:
        scale = 10 ** (settings.headroom_dbfs / 20) / peak
        mix = {ch: y * scale for ch, y in mix.items()}
    for ch, y in mix.items():
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > 1.0:
            raise RenderOverflowError(f"scene {spec.scene_id} channel {ch} clips after normalisation")
    return SpinSignalSet(spec.scene_id, mix, dry, transcript, settings.sample_rate, gains, scale)


# -- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class SceneSampling:
    """Ranges the dataset builder draws scene parameters from."""

    room_x: tuple[float, float] = (4.0, 7.0)
    room_y: tuple[float, float] = (3.5, 6.0)
    room_z: tuple[float, float] = (2.4, 3.0)
    rt60: tuple[float, float] = (0.2, 0.5)
    snr_db: tuple[float, float] = (0.0, 12.0)
    interferer_count: tuple[int, int] = (1, 3)
    mics_per_ear: int = 2
    ear_height: float = 1.2

    @classmethod
    def from_dict(cls, d: dict) -> SceneSampling:
        d = dict(d)
        for key in ("room_x", "room_y", "room_z", "rt60", "snr_db", "interferer_count"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def scene_seed(master_seed: int, scene_id: str) -> int:
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(scene_id.encode())])
    return int(ss.generate_state(1)[0])


def split_counts(scene_count: int, ratios) -> list[int]:
    """Largest-remainder apportionment of scenes to splits."""
    ratios = [float(r) for r in ratios]
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValidationError(f"split ratios {ratios} must be non-negative and sum to 1")
    raw = [scene_count * r for r in ratios]
    counts = [int(math.floor(v + 1e-9)) for v in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: scene_count - sum(counts)]:
        counts[i] += 1
    return counts


def sample_scene_spec(
    scene_id: str,
    seed: int,
    utterance_id: str,
    interferer_store: SignalStore,
    sampling: SceneSampling = SceneSampling(),
) -> SceneSpec:
    rng = np.random.default_rng(seed)
    room = RoomSpec(
        round(float(rng.uniform(*sampling.room_x)), 3),
        round(float(rng.uniform(*sampling.room_y)), 3),
        round(float(rng.uniform(*sampling.room_z)), 3),
        round(float(rng.uniform(*sampling.rt60)), 3),
    )
    absorption_from_rt60(room)
    pose = sample_scene_geometry(room, int(rng.integers(2**31)), ear_height=sampling.ear_height)
    head = HeadGeometry(mics_per_ear=sampling.mics_per_ear, ear_height=sampling.ear_height)
    lo, hi = sampling.interferer_count
    interferers = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        available = [t for t in INTERFERER_TYPES if interferer_store.ids_of_type(t)]
        if not available:
            raise InsufficientCorpusError("interferer store is empty")
        source_type = str(rng.choice(available))
        interferer_id = str(rng.choice(interferer_store.ids_of_type(source_type)))
        position = sample_interferer_position(room, pose.receiver_position, rng, height=sampling.ear_height)
        snr = round(float(rng.uniform(*sampling.snr_db)), 2)
        interferers.append(InterfererSpec(source_type, interferer_id, position, snr))
    return SceneSpec(scene_id, room, pose, head, utterance_id, tuple(interferers), seed)


SPLITS = ("train", "dev", "test")


def plan_dataset(
    scene_count: int,
    split_ratios,
    master_seed: int,
    corpus: UtteranceStore,
    interferer_store: SignalStore,
    sampling: SceneSampling = SceneSampling(),
    allow_reuse: bool = False,
) -> list[tuple[str, SceneSpec]]:
    """Scene specs with their split; utterances never cross splits."""
    if len(corpus) == 0:
        raise InsufficientCorpusError("corpus is empty")
    counts = split_counts(scene_count, split_ratios)
    ids = sorted(corpus)
    np.random.default_rng(master_seed).shuffle(ids)
    if allow_reuse:
        pool_sizes = split_counts(len(ids), split_ratios)
        if any(c > 0 and p == 0 for c, p in zip(counts, pool_sizes)):
            raise InsufficientCorpusError("corpus too small to give every split its own utterances")
    else:
        if len(ids) < scene_count:
            raise InsufficientCorpusError(f"{len(ids)} utterances for {scene_count} scenes without reuse")
        pool_sizes = counts
    pools, start = [], 0
    for size in pool_sizes:
        pools.append(ids[start : start + size])
        start += size

    plan, index = [], 0
    for split, count, pool in zip(SPLITS, counts, pools):
        for k in range(count):
            scene_id = f"S{index:05d}"
            seed = scene_seed(master_seed, scene_id)
            plan.append((split, sample_scene_spec(scene_id, seed, pool[k % len(pool)], interferer_store, sampling)))
            index += 1
    return plan


def scene_files(scene_id: str, head: HeadGeometry, audio_dir: str = "audio") -> dict[str, str]:
    files = {channel_name(lbl): f"{audio_dir}/{scene_id}_{channel_name(lbl)}.wav" for lbl in head.labels()}
    files["ref"] = f"{audio_dir}/{scene_id}_ref.wav"
    return files


def write_spin(spin: SpinSignalSet, files: dict[str, str], root) -> None:
    root = Path(root)
    for ch, x in spin.mic_signals.items():
        write_wav(root / files[ch], x, spin.sample_rate)
    write_wav(root / files["ref"], spin.anechoic_target, spin.sample_rate)


def manifest_record(split: str, spec: SceneSpec, spin: SpinSignalSet, files: dict[str, str]) -> dict:
    rec = spec.to_dict()
    for itf, gain in zip(rec["interferers"], spin.interferer_gains):
        itf["gain"] = gain
    rec.update(
        split=split,
        rt60=spec.room.rt60_target,
        alpha=absorption_from_rt60(spec.room),
        transcript=spin.transcript,
        normalisation_scale=spin.normalisation_scale,
        sample_rate=spin.sample_rate,
        files=files,
    )
    return rec


def _render_job(args):
    split, spec, corpus, store, settings, out_dir = args
    spin = render_scene(spec, corpus, store, settings)
    files = scene_files(spec.scene_id, spec.head)
    if out_dir is not None:
        write_spin(spin, files, out_dir)
    return manifest_record(split, spec, spin, files)


def parallel_map(fn, items, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def render_plan(plan, corpus, interferer_store, settings: RenderSettings | None = None, out_dir=None, jobs: int = 1) -> list[dict]:
    settings = settings or RenderSettings()
    jobs_args = [(split, spec, corpus, interferer_store, settings, out_dir) for split, spec in plan]
    return parallel_map(_render_job, jobs_args, jobs)


def build_dataset(
    scene_count: int,
    split_ratios,
    master_seed: int,
    corpus: UtteranceStore,
    interferer_store: SignalStore,
    out_dir=None,
    sampling: SceneSampling = SceneSampling(),
    settings: RenderSettings | None = None,
    allow_reuse: bool = False,
    jobs: int = 1,
) -> dict:
    """Plan, render and (if ``out_dir`` is given) write a full dataset.

    Returns the manifest; with ``out_dir`` it is also written to
    ``scenes_manifest.json``.
    """
    settings = settings or RenderSettings()
    plan = plan_dataset(scene_count, split_ratios, master_seed, corpus, interferer_store, sampling, allow_reuse)
    records = render_plan(plan, corpus, interferer_store, settings, out_dir, jobs)
    manifest = {"master_seed": master_seed, "settings": settings.to_dict(), "scenes": records}
    if out_dir is not None:
        path = Path(out_dir) / "scenes_manifest.json"
        path.write_text(json.dumps(manifest, indent=1))
        log.info("wrote %d scenes to %s", len(records), path)
    return manifest
