"""Challenge runner: config, entries, rules, scoring, ranking and the pipeline.

Workspace layout (everything under one output directory)::

    sources/corpus/            utterances + corpus.json
    sources/interferers/       interferer signals + interferers.json
    scenes_plan.json           planned SceneSpecs with their split
    scenes_manifest.json       rendered scenes (see renderer)
    audio/                     SPIN channels and anechoic references
    listeners.json             audiograms
    entries/<entry_id>/        entry.json + payload (signals/ or predictions.csv)
    panel/<entry_id>_<split>.csv
    scores/<entry_id>.json     primary score + per-signal CSV next to it
    leaderboard_<challenge>.csv
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from claritysim.audio_io import read_wav, write_wav
from claritysim.corpus import SignalStore, UtteranceStore, generate_corpus, generate_interferers
from claritysim.enhancement import (
    MAX_LOOKAHEAD_MS,
    CausalityResult,
    CommandProcessor,
    EnhancedOutput,
    ProcessorConfig,
    as_processor,
    enhance,
    passthrough,
    verify_causality,
)
from claritysim.errors import (
    ClaritySimError,
    ConfigError,
    DisqualifiedEntryError,
    FitFailureError,
    IncompleteEntryError,
    NotFoundError,
    RangeError,
    SchemaError,
    ValidationError,
)
from claritysim.listener_model import Audiogram, generate_population, load_population, save_population, simulate_hearing_loss
from claritysim.panel import PanelConfig, response_rng, simulate_response, write_panel_csv
from claritysim.prediction import LogisticMap, ear_metrics, fit_logistic, map_to_intelligibility
from claritysim.renderer import (
    SPLITS,
    RenderSettings,
    SceneSampling,
    SceneSpec,
    SpinSignalSet,
    parallel_map,
    plan_dataset,
    render_plan,
)

log = logging.getLogger(__name__)

RT60_LIMITS = (0.05, 2.0)
KINDS = ("enhancement", "prediction")
PREDICTION_HEADER = ["scene_id", "listener_id", "score"]
ELIGIBLE_PER_TEAM = 2


# -- config -----------------------------------------------------------------


@dataclass(frozen=True)
class ChallengeConfig:
    """Everything a run needs; read from a single JSON document."""

    master_seed: int = 0
    scene_count: int = 20
    split_ratios: tuple = (0.5, 0.0, 0.5)
    corpus_size: int = 40
    interferers_per_type: int = 2
    interferer_duration_s: float = 6.0
    listener_count: int = 10
    sampling: SceneSampling = field(default_factory=SceneSampling)
    render: RenderSettings = field(default_factory=RenderSettings)
    processor: ProcessorConfig = field(default_factory=ProcessorConfig)
    response_seed: int = 0
    word_noise_kappa: float = 20.0
    max_lookahead_ms: float = MAX_LOOKAHEAD_MS
    causality_probes: int = 50
    team_id: str = "baseline-team"

    def __post_init__(self):
        lo, hi = self.sampling.rt60
        if not RT60_LIMITS[0] <= lo <= hi <= RT60_LIMITS[1]:
            raise ConfigError(f"rt60 range {self.sampling.rt60} must lie within {RT60_LIMITS} s")
        if self.scene_count < 1 or self.listener_count < 1:
            raise ConfigError("scene_count and listener_count must be >= 1")
        if len(self.split_ratios) != len(SPLITS):
            raise ConfigError(f"split_ratios needs {len(SPLITS)} values")
        if self.corpus_size < 1 or self.interferers_per_type < 1:
            raise ConfigError("corpus_size and interferers_per_type must be >= 1")
        if self.causality_probes < 1:
            raise ConfigError("causality_probes must be >= 1")

    @property
    def panel(self) -> PanelConfig:
        return PanelConfig(self.listener_count, self.response_seed, self.word_noise_kappa)

    def with_seed(self, seed: int | None) -> ChallengeConfig:
        if seed is None:
            return self
        d = self.__dict__.copy()
        d["master_seed"] = int(seed)
        return ChallengeConfig(**d)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("sampling", "render", "processor")}
        d["split_ratios"] = list(self.split_ratios)
        d["sampling"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.sampling).items()}
        d["render"] = self.render.to_dict()
        d["processor"] = self.processor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ChallengeConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "sampling" in d:
                d["sampling"] = SceneSampling.from_dict(d["sampling"])
            if "render" in d:
                d["render"] = RenderSettings(**d["render"])
            if "processor" in d:
                d["processor"] = ProcessorConfig.from_dict(d["processor"])
            if "split_ratios" in d:
                d["split_ratios"] = tuple(float(r) for r in d["split_ratios"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, ValidationError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path=None, seed: int | None = None) -> ChallengeConfig:
    if path is None:
        return ChallengeConfig().with_seed(seed)
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no config file at {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return ChallengeConfig.from_dict(raw).with_seed(seed)


def _dump(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    return path


def _load_json(path: Path):
    if not path.exists():
        raise NotFoundError(f"missing artefact {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


# -- dataset stages ----------------------------------------------------------


def generate_sources(config: ChallengeConfig, out_dir) -> tuple[UtteranceStore, SignalStore]:
    """Write the synthetic corpus and interferers, then read them back.

    Reading back means in-process runs see exactly the float32 signals a
    stage-by-stage CLI run would.
    """
    root = Path(out_dir) / "sources"
    seeds = np.random.SeedSequence(config.master_seed).generate_state(2)
    sr = config.render.sample_rate
    UtteranceStore(generate_corpus(config.corpus_size, int(seeds[0]), sr)).save(root / "corpus")
    generated = generate_interferers(config.interferers_per_type, int(seeds[1]), config.interferer_duration_s, sr)
    SignalStore.from_generated(generated, sr).save(root / "interferers")
    return load_sources(out_dir)


def load_sources(out_dir) -> tuple[UtteranceStore, SignalStore]:
    root = Path(out_dir) / "sources"
    return UtteranceStore.load(root / "corpus"), SignalStore.load(root / "interferers")


def gen_scenes(config: ChallengeConfig, out_dir) -> list[tuple[str, SceneSpec]]:
    corpus, store = generate_sources(config, out_dir)
    plan = plan_dataset(config.scene_count, config.split_ratios, config.master_seed, corpus, store, config.sampling)
    _dump(Path(out_dir) / "scenes_plan.json", {
        "config": config.to_dict(),
        "scenes": [dict(spec.to_dict(), split=split) for split, spec in plan],
    })
    return plan


def load_plan(out_dir) -> tuple[ChallengeConfig, list[tuple[str, SceneSpec]]]:
    raw = _load_json(Path(out_dir) / "scenes_plan.json")
    config = ChallengeConfig.from_dict(raw["config"])
    return config, [(rec["split"], SceneSpec.from_dict(rec)) for rec in raw["scenes"]]


def render(out_dir, jobs: int = 1) -> dict:
    out_dir = Path(out_dir)
    config, plan = load_plan(out_dir)
    corpus, store = load_sources(out_dir)
    records = render_plan(plan, corpus, store, config.render, out_dir, jobs)
    manifest = {"master_seed": config.master_seed, "settings": config.render.to_dict(), "scenes": records}
    _dump(out_dir / "scenes_manifest.json", manifest)
    return manifest


def gen_listeners(config: ChallengeConfig, out_dir) -> list[Audiogram]:
    seed = int(np.random.SeedSequence([config.master_seed, 1]).generate_state(1)[0])
    population = generate_population(config.listener_count, seed)
    save_population(Path(out_dir) / "listeners.json", population)
    return [a for _, a in population]


def load_listeners(out_dir) -> list[Audiogram]:
    return [a for _, a in load_population(Path(out_dir) / "listeners.json")]


def listener_groups(out_dir) -> dict[str, str]:
    """listener_id -> severity label ("normal", "mild", "moderate", "severe")."""
    out = {}
    for profile, a in load_population(Path(out_dir) / "listeners.json"):
        out[a.listener_id] = "unknown" if profile is None else ("normal" if profile.shape == "normal" else profile.severity)
    return out


def load_scene(record: dict, root) -> SpinSignalSet:
    root = Path(root)
    sr = int(record["sample_rate"])
    mics = {}
    for name, rel in record["files"].items():
        if name != "ref":
            mics[name], _ = read_wav(root / rel, expect_rate=sr, expect_channels=1)
    ref, _ = read_wav(root / record["files"]["ref"], expect_rate=sr, expect_channels=1)
    gains = [float(i.get("gain", 1.0)) for i in record["interferers"]]
    return SpinSignalSet(record["scene_id"], mics, ref, record["transcript"], sr, gains, float(record["normalisation_scale"]))


def load_scenes(out_dir, split: str | None = None) -> list[SpinSignalSet]:
    manifest = _load_json(Path(out_dir) / "scenes_manifest.json")
    return [load_scene(r, out_dir) for r in manifest["scenes"] if split is None or r["split"] == split]


# -- entries ----------------------------------------------------------------


@dataclass(frozen=True)
class Entry:
    """A registered submission.

    ``processor`` describes how to re-run the entry's system for the
    causality check: ``{"command": "..."}`` for an external program or
    ``{"builtin": "baseline"|"passthrough", ...}`` for the reference systems.
    """

    entry_id: str
    team_id: str
    kind: str
    payload_path: Path
    system_description: str | None = None
    external_data: bool = False
    processor: dict | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"entry kind must be one of {KINDS}, got {self.kind!r}")
        if not self.entry_id or not self.team_id:
            raise SchemaError("entry_id and team_id must be non-empty")

    def to_dict(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "team_id": self.team_id,
            "kind": self.kind,
            "payload": Path(self.payload_path).name,
            "system_description": self.system_description,
            "external_data": self.external_data,
            "processor": self.processor,
        }


def signal_filename(scene_id: str, listener_id: str) -> str:
    return f"{scene_id}_{listener_id}_enh.wav"


def write_entry(entry_dir, entry_id: str, team_id: str, kind: str, processor: dict | None = None,
                system_description: str | None = None, external_data: bool = False) -> Entry:
    entry_dir = Path(entry_dir)
    payload = entry_dir / ("signals" if kind == "enhancement" else "predictions.csv")
    entry = Entry(entry_id, team_id, kind, payload, system_description, external_data, processor)
    _dump(entry_dir / "entry.json", entry.to_dict())
    return entry


def write_predictions_csv(path, table: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_HEADER)
        for (scene_id, listener_id), v in sorted(table.items()):
            w.writerow([scene_id, listener_id, repr(float(v))])
    return path


def read_predictions_csv(path) -> dict[tuple[str, str], float]:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no predictions at {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREDICTION_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(PREDICTION_HEADER)}")
        table = {}
        for line, row in enumerate(reader, start=2):
            try:
                v = float(row["score"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{line}: {exc}") from exc
            if not 0.0 <= v <= 1.0:
                raise RangeError(f"{path}:{line}: score {v} outside [0, 1]")
            key = (row["scene_id"], row["listener_id"])
            if key in table:
                raise SchemaError(f"{path}:{line}: duplicate row for {key}")
            table[key] = v
    return table


def ingest_entry(path, kind: str | None = None, pairs=None) -> Entry:
    """Validate an entry directory and return the registered Entry.

    ``pairs`` is the required (scene_id, listener_id) coverage; when given,
    gaps raise IncompleteEntryError listing the missing scene ids.

    Raises:
        SchemaError: missing/invalid entry.json, malformed WAV or CSV.
        RangeError: a predicted score outside [0, 1].
        IncompleteEntryError: coverage gaps.
    """
    entry_dir = Path(path)
    meta = _load_json(entry_dir / "entry.json")
    try:
        entry = Entry(
            meta["entry_id"], meta["team_id"], meta["kind"], entry_dir / meta["payload"],
            meta.get("system_description"), bool(meta.get("external_data", False)), meta.get("processor"),
        )
    except KeyError as exc:
        raise SchemaError(f"{entry_dir}/entry.json lacks {exc}") from None
    if kind is not None and entry.kind != kind:
        raise SchemaError(f"entry {entry.entry_id} is a {entry.kind} entry, expected {kind}")

    if entry.kind == "prediction":
        present = set(read_predictions_csv(entry.payload_path))
    else:
        if not entry.payload_path.is_dir():
            raise SchemaError(f"{entry.payload_path} is not a signal directory")
        present = set()
        for f in sorted(entry.payload_path.glob("*_enh.wav")):
            scene_id, listener_id, _ = f.name.rsplit("_", 2)
            read_wav(f, expect_channels=2)
            present.add((scene_id, listener_id))
    if pairs is not None:
        missing = sorted(set(pairs) - present)
        if missing:
            scenes = sorted({s for s, _ in missing})
            raise IncompleteEntryError(
                f"entry {entry.entry_id} misses {len(missing)} signals; scenes: {', '.join(scenes)}", scenes
            )
    return entry


def load_enhanced(entry: Entry, scene_id: str, listener_id: str, sample_rate: int) -> EnhancedOutput:
    path = entry.payload_path / signal_filename(scene_id, listener_id)
    if not path.exists():
        raise IncompleteEntryError(f"entry {entry.entry_id} has no signal for {scene_id}/{listener_id}", [scene_id])
    x, _ = read_wav(path, expect_rate=sample_rate, expect_channels=2)
    return EnhancedOutput(scene_id, listener_id, x[:, 0], x[:, 1])


# -- causality gate ----------------------------------------------------------


def entry_processor(entry: Entry, listeners, sample_rate: int, mics_per_ear: int):
    """Callable ``(n, 2*mics) -> (n, 2)`` that re-runs the entry's system."""
    spec = entry.processor or {}
    if "command" in spec:
        return CommandProcessor(spec["command"], sample_rate)
    builtin = spec.get("builtin")
    if builtin == "baseline":
        config = ProcessorConfig.from_dict(spec.get("config", {}))
        return as_processor(config, listeners[0], sample_rate, mics_per_ear)
    if builtin == "passthrough":
        return lambda x: np.asarray(x)[:, [0, mics_per_ear]]
    raise DisqualifiedEntryError(f"entry {entry.entry_id} declares no processor; causality cannot be checked")


def check_causality(entry: Entry, listeners, sample_rate: int, mics_per_ear: int,
                    max_lookahead_ms: float = MAX_LOOKAHEAD_MS, probes: int = 50) -> CausalityResult:
    """Run the probe protocol on the entry's processor.

    Raises:
        DisqualifiedEntryError: measured lookahead above the limit.
    """
    processor = entry_processor(entry, listeners, sample_rate, mics_per_ear)
    result = verify_causality(processor, sample_rate, max_lookahead_ms, n_probes=probes, channels=2 * mics_per_ear)
    if not result.passed:
        raise DisqualifiedEntryError(
            f"entry {entry.entry_id} looks {result.measured_lookahead_ms:.3f} ms ahead (limit {max_lookahead_ms} ms)",
            result.measured_lookahead_ms,
        )
    return result


# -- scoring ----------------------------------------------------------------


def degrade(enhanced: EnhancedOutput, audiogram: Audiogram, sample_rate: int) -> dict[str, np.ndarray]:
    return {ear: simulate_hearing_loss(enhanced.channel(ear), audiogram, ear, sample_rate) for ear in ("L", "R")}


@dataclass(frozen=True)
class PairResult:
    scene_id: str
    listener_id: str
    si_measured: float
    metric: float | None = None


def _assess_job(args) -> list[PairResult]:
    scene, listeners, signals_for, panel, with_metric = args
    rows = []
    for audiogram in listeners:
        enhanced = signals_for(scene, audiogram)
        hl = degrade(enhanced, audiogram, scene.sample_rate)
        rng = response_rng(panel.response_seed, scene.scene_id, audiogram.listener_id)
        resp = simulate_response(scene, enhanced, audiogram, scene.transcript, rng, panel.word_noise_kappa, degraded=hl)
        d = None
        if with_metric:
            m = ear_metrics(scene, enhanced, audiogram, degraded=hl)
            d = max(m.values()) if m else 0.0
        rows.append(PairResult(scene.scene_id, audiogram.listener_id, resp.si, d))
    return rows


def assess(scenes, listeners, signals_for, panel: PanelConfig, with_metric: bool = False, jobs: int = 1) -> list[PairResult]:
    """HL model + panel (and optionally the envelope metric) for every pair.

    The hearing-loss output is computed once per pair and shared.
    ``signals_for(scene, audiogram)`` must be picklable when ``jobs > 1``.
    """
    items = [(scene, list(listeners), signals_for, panel, with_metric) for scene in scenes]
    return [row for rows in parallel_map(_assess_job, items, jobs) for row in rows]


@dataclass(frozen=True)
class EntryScore:
    entry_id: str
    team_id: str
    challenge: str
    primary_score: float
    per_signal: dict = field(compare=False, repr=False)
    measured_lookahead_ms: float | None = None


class EntrySignals:
    """Picklable ``signals_for`` reading an ingested entry's WAVs."""

    def __init__(self, entry: Entry):
        self.entry = entry

    def __call__(self, scene, audiogram):
        return load_enhanced(self.entry, scene.scene_id, audiogram.listener_id, scene.sample_rate)


def score_enhancement(entry: Entry, scenes, listeners, panel: PanelConfig, causality: CausalityResult | None = None,
                      max_lookahead_ms: float = MAX_LOOKAHEAD_MS, probes: int = 50, jobs: int = 1,
                      with_metric: bool = False):
    """Mean measured SI over all test signals and listeners.

    Runs the causality gate first unless a passing ``causality`` result is
    supplied. Returns ``(EntryScore, rows)``.
    """
    if causality is None:
        causality = check_causality(entry, listeners, scenes[0].sample_rate, scenes[0].mics_per_ear, max_lookahead_ms, probes)
    elif not causality.passed:
        raise DisqualifiedEntryError(f"entry {entry.entry_id} failed the causality check", causality.measured_lookahead_ms)
    rows = assess(scenes, listeners, EntrySignals(entry), panel, with_metric, jobs)
    per_signal = {(r.scene_id, r.listener_id): r.si_measured for r in rows}
    mean = float(np.mean(list(per_signal.values())))
    return EntryScore(entry.entry_id, entry.team_id, "enhancement", mean, per_signal, causality.measured_lookahead_ms), rows


def score_prediction(entry: Entry, panel_table: dict) -> EntryScore:
    """Mean squared error between predicted and measured SI.

    Raises:
        IncompleteEntryError: the entry misses some panel pairs.
    """
    predicted = read_predictions_csv(entry.payload_path)
    missing = sorted(set(panel_table) - set(predicted))
    if missing:
        raise IncompleteEntryError(
            f"entry {entry.entry_id} misses {len(missing)} pairs", sorted({s for s, _ in missing})
        )
    errors = {k: (predicted[k] - panel_table[k]) ** 2 for k in sorted(panel_table)}
    return EntryScore(entry.entry_id, entry.team_id, "prediction", float(np.mean(list(errors.values()))), errors)


def write_score(path, score: EntryScore) -> Path:
    path = Path(path)
    column = "si_measured" if score.challenge == "enhancement" else "squared_error"
    detail = path.with_suffix(".csv")
    detail.parent.mkdir(parents=True, exist_ok=True)
    with detail.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "listener_id", column])
        for (s, l), v in sorted(score.per_signal.items()):
            w.writerow([s, l, repr(float(v))])
    return _dump(path, {
        "entry_id": score.entry_id,
        "team_id": score.team_id,
        "challenge": score.challenge,
        "primary_score": score.primary_score,
        "measured_lookahead_ms": score.measured_lookahead_ms,
        "breakdown": detail.name,
    })


def read_score(path) -> EntryScore:
    raw = _load_json(Path(path))
    try:
        return EntryScore(raw["entry_id"], raw["team_id"], raw["challenge"], float(raw["primary_score"]), {},
                          raw.get("measured_lookahead_ms"))
    except KeyError as exc:
        raise SchemaError(f"{path} lacks {exc}") from None


# -- ranking ----------------------------------------------------------------


@dataclass(frozen=True)
class LeaderboardRow:
    rank: int
    entry_id: str
    team_id: str
    primary_score: float
    panel_eligible: bool
    breakdown: str | None = None


@dataclass(frozen=True)
class Leaderboard:
    challenge: str
    rows: tuple

    def eligible(self) -> list[str]:
        return [r.entry_id for r in self.rows if r.panel_eligible]


def rank_and_cap(scores, challenge: str = "enhancement", breakdown_dir: str | None = None) -> Leaderboard:
    """Sort entries and flag at most two per team as panel-eligible.

    Enhancement ranks by descending mean SI, prediction by ascending MSE;
    ties go to the lexicographically smaller entry_id.
    """
    if challenge not in KINDS:
        raise ValidationError(f"unknown challenge {challenge!r}")
    scores = list(scores)
    ids = [s.entry_id for s in scores]
    if len(set(ids)) != len(ids):
        raise ValidationError("entry ids must be unique")
    sign = -1.0 if challenge == "enhancement" else 1.0
    ordered = sorted(scores, key=lambda s: (sign * s.primary_score, s.entry_id))
    per_team: dict[str, int] = {}
    rows = []
    for rank, s in enumerate(ordered, start=1):
        per_team[s.team_id] = per_team.get(s.team_id, 0) + 1
        detail = f"{breakdown_dir}/{s.entry_id}.csv" if breakdown_dir else None
        rows.append(LeaderboardRow(rank, s.entry_id, s.team_id, s.primary_score, per_team[s.team_id] <= ELIGIBLE_PER_TEAM, detail))
    return Leaderboard(challenge, tuple(rows))


def write_leaderboard(path, board: Leaderboard) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = "mean_si" if board.challenge == "enhancement" else "mse"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "entry_id", "team_id", name, "panel_eligible", "breakdown"])
        for r in board.rows:
            w.writerow([r.rank, r.entry_id, r.team_id, repr(r.primary_score), int(r.panel_eligible), r.breakdown or ""])
    return path


# -- reference systems -------------------------------------------------------


class BaselineSignals:
    def __init__(self, config: ProcessorConfig):
        self.config = config

    def __call__(self, scene, audiogram):
        return enhance(scene, self.config, audiogram)


class PassthroughSignals:
    def __call__(self, scene, audiogram):
        return passthrough(scene, audiogram)


def _write_signals_job(args):
    scene, listeners, signals_for, directory = args
    for audiogram in listeners:
        out = signals_for(scene, audiogram)
        write_wav(Path(directory) / signal_filename(scene.scene_id, audiogram.listener_id), out.stereo(), scene.sample_rate)
    return scene.scene_id


def write_enhancement_entry(entry_dir, entry_id: str, team_id: str, processor: dict, signals_for,
                            scenes, listeners, jobs: int = 1) -> Entry:
    entry = write_entry(entry_dir, entry_id, team_id, "enhancement", processor)
    entry.payload_path.mkdir(parents=True, exist_ok=True)
    parallel_map(_write_signals_job, [(s, list(listeners), signals_for, entry.payload_path) for s in scenes], jobs)
    return entry


def baseline_entry_spec(config: ChallengeConfig) -> dict:
    return {"builtin": "baseline", "config": config.processor.to_dict()}


def fit_or_default(rows: list[PairResult]) -> tuple[LogisticMap, str]:
    try:
        return fit_logistic([(r.metric, r.si_measured) for r in rows]), "fitted"
    except FitFailureError as exc:
        log.warning("logistic fit failed (%s); using the default map", exc)
        return LogisticMap(), f"default ({exc})"


def _group_means(rows: list[PairResult], groups: dict[str, str]) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in rows:
        acc.setdefault(groups.get(r.listener_id, "unknown"), []).append(r.si_measured)
    return {g: float(np.mean(v)) for g, v in sorted(acc.items())}


def run_pipeline(config: ChallengeConfig, out_dir, jobs: int = 1) -> dict:
    """Run the whole simulated round end to end.

    Every stage failure is re-raised with the stage name prefixed. Returns
    the run summary that is also written to ``run_summary.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "setup"
    try:
        stage = "gen-scenes"
        gen_scenes(config, out)
        stage = "render"
        render(out, jobs)
        stage = "gen-listeners"
        listeners = gen_listeners(config, out)
        groups = listener_groups(out)
        train, test = load_scenes(out, "train"), load_scenes(out, "test")
        if not test:
            raise ConfigError("the test split is empty")
        test_pairs = [(s.scene_id, a.listener_id) for s in test for a in listeners]
        panel = config.panel

        stage = "enhance"
        entries = {
            "baseline": write_enhancement_entry(out / "entries" / "baseline", "baseline", config.team_id,
                                                baseline_entry_spec(config), BaselineSignals(config.processor),
                                                test, listeners, jobs),
            "passthrough": write_enhancement_entry(out / "entries" / "passthrough", "passthrough", config.team_id,
                                                   {"builtin": "passthrough"}, PassthroughSignals(), test, listeners, jobs),
        }

        stage = "score-enh"
        enh_scores, enh_rows = [], {}
        for name, entry in entries.items():
            entry = ingest_entry(entry.payload_path.parent, "enhancement", test_pairs)
            score, rows = score_enhancement(entry, test, listeners, panel, max_lookahead_ms=config.max_lookahead_ms,
                                            probes=config.causality_probes, jobs=jobs, with_metric=name == "baseline")
            write_score(out / "scores" / f"{entry.entry_id}.json", score)
            write_panel_csv(out / "panel" / f"{entry.entry_id}_test.csv", score.per_signal)
            enh_scores.append(score)
            enh_rows[name] = rows

        stage = "predict"
        measured = {(r.scene_id, r.listener_id): r.si_measured for r in enh_rows["baseline"]}
        if train:
            train_rows = assess(train, listeners, BaselineSignals(config.processor), panel, True, jobs)
            write_panel_csv(out / "panel" / "baseline_train.csv", {(r.scene_id, r.listener_id): r.si_measured for r in train_rows})
            mapping, how = fit_or_default(train_rows)
        else:
            mapping, how = LogisticMap(), "default (no training scenes)"
        _dump(out / "logistic_map.json", dict(mapping.to_dict(), source=how))
        predicted = {(r.scene_id, r.listener_id): map_to_intelligibility(r.metric, mapping) for r in enh_rows["baseline"]}
        pred_entry = write_entry(out / "entries" / "pred_baseline", "pred_baseline", config.team_id, "prediction")
        write_predictions_csv(pred_entry.payload_path, predicted)
        mean_measured = float(np.mean(list(measured.values())))
        const_entry = write_entry(out / "entries" / "pred_constant", "pred_constant", config.team_id, "prediction",
                                  system_description="constant prediction at the measured test mean")
        write_predictions_csv(const_entry.payload_path, {k: mean_measured for k in measured})

        stage = "score-pred"
        pred_scores = []
        for entry_dir in ("pred_baseline", "pred_constant"):
            entry = ingest_entry(out / "entries" / entry_dir, "prediction", test_pairs)
            score = score_prediction(entry, measured)
            write_score(out / "scores" / f"{entry.entry_id}.json", score)
            pred_scores.append(score)

        stage = "rank"
        boards = {
            "enhancement": rank_and_cap(enh_scores, "enhancement", "scores"),
            "prediction": rank_and_cap(pred_scores, "prediction", "scores"),
        }
        for challenge, board in boards.items():
            write_leaderboard(out / f"leaderboard_{challenge}.csv", board)

        summary = {
            "master_seed": config.master_seed,
            "scenes": {"train": len(train), "test": len(test)},
            "listeners": len(listeners),
            "enhancement": {s.entry_id: s.primary_score for s in enh_scores},
            "enhancement_by_group": {name: _group_means(rows, groups) for name, rows in enh_rows.items()},
            "prediction_mse": {s.entry_id: s.primary_score for s in pred_scores},
            "logistic_map": dict(mapping.to_dict(), source=how),
        }
        _dump(out / "run_summary.json", summary)
        return summary
    except ClaritySimError as exc:
        exc.args = (f"[{stage}] {exc}",) + exc.args[1:]
        raise
