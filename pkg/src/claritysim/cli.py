"""Command-line interface.

Every subcommand works on one workspace directory (``--out``). Exit codes:
0 success, 2 validation error, 3 rules violation, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from claritysim import harness
from claritysim.audio_io import write_wav
from claritysim.enhancement import CommandProcessor, verify_causality
from claritysim.errors import ClaritySimError, NotFoundError, RulesViolation, StoreIOError
from claritysim.listener_model import simulate_hearing_loss
from claritysim.panel import read_panel_csv, write_panel_csv
from claritysim.prediction import LogisticMap, map_to_intelligibility

log = logging.getLogger("claritysim")


def _entry_dir(out: Path, entry_id: str) -> Path:
    return out / "entries" / entry_id


def _pairs(scenes, listeners):
    return [(s.scene_id, a.listener_id) for s in scenes for a in listeners]


def cmd_gen_scenes(args) -> int:
    config = harness.load_config(args.config, args.seed)
    plan = harness.gen_scenes(config, args.out)
    print(f"planned {len(plan)} scenes in {args.out}/scenes_plan.json")
    return 0


def cmd_render(args) -> int:
    manifest = harness.render(args.out, args.jobs)
    print(f"rendered {len(manifest['scenes'])} scenes")
    return 0


def cmd_gen_listeners(args) -> int:
    config = harness.load_config(args.config, args.seed)
    listeners = harness.gen_listeners(config, args.out)
    print(f"wrote {len(listeners)} listeners to {args.out}/listeners.json")
    return 0


def cmd_enhance(args) -> int:
    out = Path(args.out)
    config, _ = harness.load_plan(out)
    scenes, listeners = harness.load_scenes(out, args.split), harness.load_listeners(out)
    if args.passthrough:
        spec, signals = {"builtin": "passthrough"}, harness.PassthroughSignals()
    else:
        spec, signals = harness.baseline_entry_spec(config), harness.BaselineSignals(config.processor)
    entry = harness.write_enhancement_entry(_entry_dir(out, args.entry), args.entry, args.team or config.team_id,
                                            spec, signals, scenes, listeners, args.jobs)
    print(f"wrote {len(scenes) * len(listeners)} signals to {entry.payload_path}")
    return 0


def cmd_degrade(args) -> int:
    out = Path(args.out)
    scenes, listeners = harness.load_scenes(out, args.split), harness.load_listeners(out)
    entry = harness.ingest_entry(_entry_dir(out, args.entry), "enhancement", _pairs(scenes, listeners))
    target = out / "degraded" / args.entry
    for scene in scenes:
        for a in listeners:
            enh = harness.load_enhanced(entry, scene.scene_id, a.listener_id, scene.sample_rate)
            hl = np.stack([simulate_hearing_loss(enh.channel(e), a, e, scene.sample_rate) for e in ("L", "R")], axis=1)
            write_wav(target / f"{scene.scene_id}_{a.listener_id}_hl.wav", hl, scene.sample_rate)
    print(f"wrote hearing-loss simulated signals to {target}")
    return 0


def cmd_panel(args) -> int:
    out = Path(args.out)
    config, _ = harness.load_plan(out)
    scenes, listeners = harness.load_scenes(out, args.split), harness.load_listeners(out)
    entry = harness.ingest_entry(_entry_dir(out, args.entry), "enhancement", _pairs(scenes, listeners))
    rows = harness.assess(scenes, listeners, harness.EntrySignals(entry), config.panel, jobs=args.jobs)
    path = write_panel_csv(out / "panel" / f"{args.entry}_{args.split}.csv",
                           {(r.scene_id, r.listener_id): r.si_measured for r in rows})
    print(f"wrote {len(rows)} panel scores to {path}")
    return 0


def cmd_predict(args) -> int:
    out = Path(args.out)
    config, _ = harness.load_plan(out)
    listeners = harness.load_listeners(out)
    mapping = LogisticMap()
    if args.fit_split:
        train = harness.load_scenes(out, args.fit_split)
        rows = harness.assess(train, listeners, harness.BaselineSignals(config.processor), config.panel, True, args.jobs)
        mapping, how = harness.fit_or_default(rows)
        print(f"logistic map ({how}): a={mapping.a:.4g} b={mapping.b:.4g}")
    scenes = harness.load_scenes(out, args.split)
    entry = harness.ingest_entry(_entry_dir(out, args.entry), "enhancement", _pairs(scenes, listeners))
    rows = harness.assess(scenes, listeners, harness.EntrySignals(entry), config.panel, True, args.jobs)
    table = {(r.scene_id, r.listener_id): map_to_intelligibility(r.metric, mapping) for r in rows}
    pred_id = args.pred_entry or f"pred_{args.entry}"
    pred = harness.write_entry(_entry_dir(out, pred_id), pred_id, args.team or config.team_id, "prediction")
    harness.write_predictions_csv(pred.payload_path, table)
    print(f"wrote {len(table)} predictions to {pred.payload_path}")
    return 0


def cmd_score_enh(args) -> int:
    out = Path(args.out)
    config, _ = harness.load_plan(out)
    scenes, listeners = harness.load_scenes(out, args.split), harness.load_listeners(out)
    entry = harness.ingest_entry(_entry_dir(out, args.entry), "enhancement", _pairs(scenes, listeners))
    probes = args.probes or config.causality_probes
    score, _ = harness.score_enhancement(entry, scenes, listeners, config.panel, max_lookahead_ms=config.max_lookahead_ms,
                                         probes=probes, jobs=args.jobs)
    harness.write_score(out / "scores" / f"{entry.entry_id}.json", score)
    print(f"{entry.entry_id}: mean SI {score.primary_score:.6f} (lookahead {score.measured_lookahead_ms:.3f} ms)")
    return 0


def cmd_score_pred(args) -> int:
    out = Path(args.out)
    panel_path = Path(args.panel) if args.panel else out / "panel" / f"baseline_{args.split}.csv"
    if not panel_path.exists():
        raise NotFoundError(f"no panel table at {panel_path}")
    measured = read_panel_csv(panel_path)
    entry = harness.ingest_entry(_entry_dir(out, args.entry), "prediction", list(measured))
    score = harness.score_prediction(entry, measured)
    harness.write_score(out / "scores" / f"{entry.entry_id}.json", score)
    print(f"{entry.entry_id}: MSE {score.primary_score:.6f}")
    return 0


def cmd_rank(args) -> int:
    out = Path(args.out)
    scores = [harness.read_score(p) for p in sorted((out / "scores").glob("*.json"))]
    scores = [s for s in scores if s.challenge == args.challenge]
    board = harness.rank_and_cap(scores, args.challenge, "scores")
    path = harness.write_leaderboard(out / f"leaderboard_{args.challenge}.csv", board)
    for r in board.rows:
        print(f"{r.rank:3d} {r.entry_id:20s} {r.team_id:16s} {r.primary_score:.6f} {'eligible' if r.panel_eligible else '-'}")
    print(f"wrote {path}")
    return 0


def cmd_verify_causality(args) -> int:
    processor = CommandProcessor(args.command, args.sample_rate)
    result = verify_causality(processor, args.sample_rate, args.max_ms, n_probes=args.probes or 50,
                              probe_duration_s=args.duration, channels=args.channels)
    verdict = "PASS" if result.passed else "FAIL"
    print(f"{verdict}: measured lookahead {result.measured_lookahead_ms:.3f} ms "
          f"({result.measured_lookahead_samples} samples), limit {args.max_ms} ms")
    return 0 if result.passed else RulesViolation.exit_code


def cmd_run_all(args) -> int:
    config = harness.load_config(args.config, args.seed)
    summary = harness.run_pipeline(config, args.out, args.jobs)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", default="clarity_out", help="workspace directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="claritysim", description="Simulated hearing-aid challenge runner")
    sub = parser.add_subparsers(dest="command_name", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn)
        return p

    add("gen-scenes", cmd_gen_scenes, "generate sources and plan scenes")
    add("render", cmd_render, "render planned scenes to WAV")
    add("gen-listeners", cmd_gen_listeners, "generate listener audiograms")
    p = add("enhance", cmd_enhance, "write an enhancement entry from a reference system")
    p.add_argument("--split", default="test")
    p.add_argument("--entry", default="baseline")
    p.add_argument("--team")
    p.add_argument("--passthrough", action="store_true", help="front-microphone pass-through instead of the baseline")
    p = add("degrade", cmd_degrade, "apply the hearing-loss model to an entry's signals")
    p.add_argument("--split", default="test")
    p.add_argument("--entry", default="baseline")
    p = add("panel", cmd_panel, "simulate the listener panel on an entry")
    p.add_argument("--split", default="test")
    p.add_argument("--entry", default="baseline")
    p = add("predict", cmd_predict, "baseline intelligibility prediction for an entry's signals")
    p.add_argument("--split", default="test")
    p.add_argument("--entry", default="baseline")
    p.add_argument("--pred-entry")
    p.add_argument("--team")
    p.add_argument("--fit-split", help="fit the logistic map on this split (baseline signals)")
    p = add("score-enh", cmd_score_enh, "causality gate + panel scoring of an enhancement entry")
    p.add_argument("--split", default="test")
    p.add_argument("--entry", default="baseline")
    p.add_argument("--probes", type=int)
    p = add("score-pred", cmd_score_pred, "MSE of a prediction entry against a panel table")
    p.add_argument("--split", default="test")
    p.add_argument("--entry", default="pred_baseline")
    p.add_argument("--panel", help="panel CSV (default panel/baseline_<split>.csv)")
    p = add("rank", cmd_rank, "leaderboard with the two-entries-per-team cap")
    p.add_argument("--challenge", choices=harness.KINDS, default="enhancement")
    p = add("verify-causality", cmd_verify_causality, "probe an external processor command")
    p.add_argument("--command", required=True, help="command template with {input} and {output}")
    p.add_argument("--probes", type=int)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--sample-rate", type=int, default=44100)
    p.add_argument("--max-ms", type=float, default=5.0)
    p.add_argument("--duration", type=float, default=2.0)
    add("run-all", cmd_run_all, "run the full simulated round")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ClaritySimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return StoreIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
