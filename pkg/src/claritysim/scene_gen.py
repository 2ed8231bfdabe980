"""Scene geometry sampling, image-source room impulse responses and the
spherical-head binaural model.

Coordinate conventions: world frame is the room with one corner at the
origin and the floor at z = 0. The head frame has x pointing out of the
nose, y out of the left ear and z up; azimuths are measured
counter-clockwise from the nose, so positive azimuth is to the left.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from claritysim.errors import (
    InfeasibleGeometryError,
    InfeasibleReverberationError,
    InvalidArgumentError,
    InvalidGeometryError,
    SamplingFailureError,
    ValidationError,
)

SABINE_CONSTANT = 0.161
WALL_CLEARANCE = 1.0
SOURCE_CLEARANCE = 1.0
SOURCE_WALL_MARGIN = 0.5
MAX_SAMPLING_DRAWS = 10_000
DEFAULT_MAX_ORDER = 30
DEFAULT_EAR_HEIGHT = 1.2
DEFAULT_HEAD_RADIUS = 0.0875
SHADOW_MIN_HF_GAIN = 0.1

EARS = ("L", "R")
ChannelLabel = tuple[str, int]


def channel_name(label: ChannelLabel) -> str:
    return f"{label[0]}{label[1]}"


@dataclass(frozen=True)
class RoomSpec:
    length_x: float
    length_y: float
    length_z: float
    rt60_target: float
    speed_of_sound: float = 343.0

    def __post_init__(self):
        if min(self.length_x, self.length_y, self.length_z) <= 0:
            raise ValidationError("room dimensions must be positive")
        if self.rt60_target <= 0:
            raise ValidationError("rt60_target must be positive")
        if self.speed_of_sound <= 0:
            raise ValidationError("speed_of_sound must be positive")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length_x, self.length_y, self.length_z])

    @property
    def volume(self) -> float:
        return self.length_x * self.length_y * self.length_z

    @property
    def surface_area(self) -> float:
        x, y, z = self.length_x, self.length_y, self.length_z
        return 2.0 * (x * y + x * z + y * z)

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p > 0) and np.all(p < self.dims))

    def to_dict(self) -> dict:
        return {
            "length_x": self.length_x,
            "length_y": self.length_y,
            "length_z": self.length_z,
            "rt60_target": self.rt60_target,
            "speed_of_sound": self.speed_of_sound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RoomSpec:
        return cls(**d)


def absorption_from_rt60(room: RoomSpec) -> float:
    """Uniform wall absorption coefficient from the Sabine equation.

    Raises:
        InfeasibleReverberationError: if the room is too small to decay as
            fast as requested (coefficient above one).
    """
    alpha = SABINE_CONSTANT * room.volume / (room.surface_area * room.rt60_target)
    if alpha > 1.0:
        raise InfeasibleReverberationError(
            f"RT60 {room.rt60_target} s needs absorption {alpha:.3f} > 1 "
            f"in a {room.length_x}x{room.length_y}x{room.length_z} m room"
        )
    return alpha


def rt60_from_absorption(room: RoomSpec, alpha: float) -> float:
    return SABINE_CONSTANT * room.volume / (room.surface_area * alpha)


@dataclass(frozen=True)
class ScenePose:
    source_position: tuple[float, float, float]
    receiver_position: tuple[float, float, float]
    receiver_yaw: float

    def to_dict(self) -> dict:
        return {
            "source_position": list(self.source_position),
            "receiver_position": list(self.receiver_position),
            "receiver_yaw": self.receiver_yaw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScenePose:
        return cls(
            tuple(float(v) for v in d["source_position"]),
            tuple(float(v) for v in d["receiver_position"]),
            float(d["receiver_yaw"]),
        )


def _default_mic_offsets(mics_per_ear: int, head_radius: float):
    # behind-the-ear shell, 7.6 mm spacing front to rear, 1 cm above the ear canal
    xs = (0.0076, -0.0076) if mics_per_ear == 2 else (0.0076, 0.0, -0.0076)
    return tuple((x, head_radius, 0.01) for x in xs)


@dataclass(frozen=True)
class HeadGeometry:
    """Hearing-aid microphone layout on a spherical head.

    ``mic_offsets`` are the left-ear microphones in the head frame, front
    microphone first; right-ear microphones are their mirror images in the
    median plane.
    """

    head_radius: float = DEFAULT_HEAD_RADIUS
    mics_per_ear: int = 2
    mic_offsets: tuple | None = None
    ear_height: float = DEFAULT_EAR_HEIGHT

    def __post_init__(self):
        if self.mics_per_ear not in (2, 3):
            raise ValidationError("mics_per_ear must be 2 or 3")
        if self.head_radius <= 0:
            raise ValidationError("head_radius must be positive")
        if self.mic_offsets is None:
            offsets = _default_mic_offsets(self.mics_per_ear, self.head_radius)
        else:
            offsets = tuple(tuple(float(v) for v in o) for o in self.mic_offsets)
        if len(offsets) != self.mics_per_ear or any(len(o) != 3 for o in offsets):
            raise ValidationError("need one 3-vector offset per microphone")
        if any(o[1] <= 0 for o in offsets):
            raise ValidationError("left-ear offsets must lie on the +y side")
        object.__setattr__(self, "mic_offsets", offsets)

    def labels(self) -> list[ChannelLabel]:
        return [(ear, i + 1) for ear in EARS for i in range(self.mics_per_ear)]

    def to_dict(self) -> dict:
        return {
            "head_radius": self.head_radius,
            "mics_per_ear": self.mics_per_ear,
            "mic_offsets": [list(o) for o in self.mic_offsets],
            "ear_height": self.ear_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> HeadGeometry:
        offsets = d.get("mic_offsets")
        return cls(
            head_radius=d.get("head_radius", DEFAULT_HEAD_RADIUS),
            mics_per_ear=d.get("mics_per_ear", 2),
            mic_offsets=None if offsets is None else tuple(tuple(o) for o in offsets),
            ear_height=d.get("ear_height", DEFAULT_EAR_HEIGHT),
        )


@dataclass
class RoomImpulseResponse:
    sample_rate: int
    taps: np.ndarray
    channel_label: ChannelLabel | None = None
    direct_index: int = field(default=0)


def _check_feasible(room: RoomSpec, height: float) -> None:
    if room.length_x <= 2 * WALL_CLEARANCE or room.length_y <= 2 * WALL_CLEARANCE:
        raise InfeasibleGeometryError(
            f"{room.length_x}x{room.length_y} m floor leaves no area "
            f"{WALL_CLEARANCE} m from every wall"
        )
    if not 0 < height < room.length_z:
        raise InfeasibleGeometryError(f"height {height} m is outside the room")


def facing_yaw(receiver, target) -> float:
    d = np.asarray(target, float) - np.asarray(receiver, float)
    return math.atan2(d[1], d[0])


def sample_scene_geometry(
    room: RoomSpec,
    rng_seed: int,
    ear_height: float = DEFAULT_EAR_HEIGHT,
    source_height: float | None = None,
    max_draws: int = MAX_SAMPLING_DRAWS,
) -> ScenePose:
    """Draw a legal source/receiver pair.

    Source and receiver are drawn jointly and uniformly (source at least
    ``SOURCE_WALL_MARGIN`` from the walls, receiver at least 1 m from the
    walls) and rejected until they are 1 m apart, so for any given source
    the receiver is uniform over its feasible area. The receiver is turned
    to face the source.
    """
    source_height = ear_height if source_height is None else source_height
    _check_feasible(room, ear_height)
    if not 0 < source_height < room.length_z:
        raise InfeasibleGeometryError(f"source height {source_height} m is outside the room")

    rng = np.random.default_rng(rng_seed)
    lx, ly = room.length_x, room.length_y
    m = SOURCE_WALL_MARGIN
    for _ in range(max_draws):
        src = rng.uniform((m, m), (lx - m, ly - m))
        rcv = rng.uniform(
            (WALL_CLEARANCE, WALL_CLEARANCE), (lx - WALL_CLEARANCE, ly - WALL_CLEARANCE)
        )
        s3 = np.array([src[0], src[1], source_height])
        r3 = np.array([rcv[0], rcv[1], ear_height])
        if np.linalg.norm(s3 - r3) >= SOURCE_CLEARANCE:
            return ScenePose(
                tuple(float(v) for v in s3),
                tuple(float(v) for v in r3),
                facing_yaw(r3, s3),
            )
    raise SamplingFailureError(f"no legal pose after {max_draws} draws")


def sample_interferer_position(
    room: RoomSpec,
    receiver,
    rng: np.random.Generator,
    height: float = DEFAULT_EAR_HEIGHT,
    max_draws: int = MAX_SAMPLING_DRAWS,
) -> tuple[float, float, float]:
    """Interferers obey the same placement rule as the target source."""
    receiver = np.asarray(receiver, float)
    m = SOURCE_WALL_MARGIN
    for _ in range(max_draws):
        xy = rng.uniform((m, m), (room.length_x - m, room.length_y - m))
        p = np.array([xy[0], xy[1], height])
        if np.linalg.norm(p - receiver) >= SOURCE_CLEARANCE:
            return tuple(float(v) for v in p)
    raise SamplingFailureError(f"no legal interferer position after {max_draws} draws")


def _rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def mic_world_positions(pose: ScenePose, head: HeadGeometry) -> list[tuple[ChannelLabel, np.ndarray]]:
    rot = _rotation_z(pose.receiver_yaw)
    centre = np.asarray(pose.receiver_position, float)
    out = []
    for ear, sign in (("L", 1.0), ("R", -1.0)):
        for i, (x, y, z) in enumerate(head.mic_offsets):
            local = np.array([x, sign * y, z])
            out.append(((ear, i + 1), centre + rot @ local))
    return out


def azimuth_in_head_frame(pose: ScenePose, point) -> float:
    d = np.asarray(point, float) - np.asarray(pose.receiver_position, float)
    az = math.atan2(d[1], d[0]) - pose.receiver_yaw
    return math.atan2(math.sin(az), math.cos(az))


@functools.lru_cache(maxsize=8)
def _image_lattice(max_order: int):
    """Mirror parities, lattice indices and per-image reflection orders."""
    n_max = (max_order + 1) // 2 + 1
    n = np.arange(-n_max, n_max + 1)
    grid = np.stack(np.meshgrid(n, n, n, indexing="ij"), axis=-1).reshape(-1, 3)
    parities, lattice, orders = [], [], []
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                p = np.array([px, py, pz])
                order = (np.abs(grid - p) + np.abs(grid)).sum(axis=1)
                keep = order <= max_order
                lattice.append(grid[keep])
                parities.append(np.broadcast_to(p, (int(keep.sum()), 3)))
                orders.append(order[keep])
    return np.concatenate(parities), np.concatenate(lattice), np.concatenate(orders)


def image_sources(room: RoomSpec, source, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions and reflection orders of all images up to ``max_order``."""
    parity, lattice, order = _image_lattice(int(max_order))
    src = np.asarray(source, float)
    pos = (1 - 2 * parity) * src + 2 * lattice * room.dims
    return pos, order


def compute_rir(
    room: RoomSpec,
    source,
    mic,
    max_order: int = DEFAULT_MAX_ORDER,
    sample_rate: int = 44100,
    absorption: float | None = None,
    highpass_hz: float | None = None,
    channel_label: ChannelLabel | None = None,
) -> RoomImpulseResponse:
    """Image-source room impulse response between two points.

    Each image of reflection order n contributes ``(1 - alpha)**(n/2) / d``
    at the nearest sample to ``d / c``. The response ends at the last
    non-zero tap.

    Args:
        absorption: overrides the Sabine coefficient derived from the room.
        highpass_hz: if set, a second-order Butterworth high-pass removes the
            low-frequency build-up caused by summing many same-sign image
            pulses into single taps.
    """
    if max_order < 0:
        raise InvalidArgumentError("max_order must be >= 0")
    alpha = absorption_from_rt60(room) if absorption is None else float(absorption)
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError(f"absorption {alpha} outside [0, 1]")
    mic = np.asarray(mic, float)
    pos, order = image_sources(room, source, max_order)
    dist = np.linalg.norm(pos - mic, axis=1)
    if np.any(dist == 0.0):
        raise InvalidGeometryError("source and microphone coincide")

    amp = (1.0 - alpha) ** (order / 2.0) / dist
    nz = amp != 0.0
    idx = np.rint(dist[nz] / room.speed_of_sound * sample_rate).astype(np.int64)
    taps = np.zeros(int(idx.max()) + 1)
    np.add.at(taps, idx, amp[nz])
    if highpass_hz is not None:
        sos = signal.butter(2, highpass_hz, "highpass", fs=sample_rate, output="sos")
        taps = signal.sosfilt(sos, taps)
    direct = int(np.rint(dist[order == 0][0] / room.speed_of_sound * sample_rate))
    return RoomImpulseResponse(sample_rate, taps, channel_label, direct)


def schroeder_decay_db(taps: np.ndarray) -> np.ndarray:
    energy = np.cumsum(np.asarray(taps, float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


# -- spherical head ---------------------------------------------------------


def lateral_angle(azimuth: float) -> float:
    """Fold an azimuth onto [-pi/2, pi/2] (front/back ambiguity)."""
    if azimuth > math.pi / 2:
        return math.pi - azimuth
    if azimuth < -math.pi / 2:
        return -math.pi - azimuth
    return azimuth


def woodworth_itd(azimuth: float, head_radius: float = DEFAULT_HEAD_RADIUS, c: float = 343.0) -> float:
    """Right-ear minus left-ear arrival time; positive for sources on the left."""
    theta = lateral_angle(azimuth)
    return head_radius / c * (theta + math.sin(theta))


@dataclass(frozen=True)
class HeadShadow:
    """First-order high-shelf cut, unity at DC and ``hf_gain`` at Nyquist."""

    b: tuple[float, ...]
    a: tuple[float, ...]
    hf_gain: float

    @property
    def is_identity(self) -> bool:
        return self.hf_gain == 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.is_identity:
            return np.asarray(x, float).copy()
        return signal.lfilter(self.b, self.a, x)

    def gain_db(self, freqs, sample_rate: int) -> np.ndarray:
        _, h = signal.freqz(self.b, self.a, worN=np.asarray(freqs, float), fs=sample_rate)
        return 20.0 * np.log10(np.abs(h))


def binaural_head_filter(
    azimuth: float,
    ear: str,
    sample_rate: int,
    head_radius: float = DEFAULT_HEAD_RADIUS,
    c: float = 343.0,
) -> tuple[float, HeadShadow]:
    """Per-ear arrival delay (relative to the head centre) and shadow filter.

    The ear facing the source hears it ``a*sin(theta)/c`` early; the far
    ear hears it ``a*theta/c`` late after travelling round the sphere, which
    gives the Woodworth interaural difference. Only the far ear is shadowed.
    """
    if not -math.pi <= azimuth <= math.pi:
        raise InvalidArgumentError("azimuth must lie in [-pi, pi]")
    if ear not in EARS:
        raise InvalidArgumentError(f"unknown ear {ear!r}")
    theta = lateral_angle(azimuth)
    ipsilateral = (theta >= 0) == (ear == "L")
    if theta == 0.0 or ipsilateral:
        delay = -head_radius / c * math.sin(abs(theta))
        return delay, HeadShadow((1.0,), (1.0,), 1.0)

    delay = head_radius / c * abs(theta)
    hf_gain = 1.0 - (1.0 - SHADOW_MIN_HF_GAIN) * math.sin(abs(theta))
    beta = 2.0 * c / head_radius
    b, a = signal.bilinear([hf_gain, beta], [1.0, beta], fs=sample_rate)
    return delay, HeadShadow(tuple(float(v) for v in b), tuple(float(v) for v in a), hf_gain)
