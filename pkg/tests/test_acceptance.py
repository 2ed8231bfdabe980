"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in the
terminal summary (see conftest.py) and also echoed with ``-s``.
"""

from __future__ import annotations

import hashlib
import json
import math
import shutil
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import integrate, signal, stats

import reference_scoring as ref
from claritysim import harness
from claritysim.cli import main
from claritysim.corpus import generate_corpus
from claritysim.enhancement import verify_causality
from claritysim.harness import ChallengeConfig, EntryScore
from claritysim.listener_model import Audiogram, simulate_hearing_loss
from claritysim.prediction import LogisticMap, envelope_metric, fit_logistic, map_to_intelligibility
from claritysim.renderer import RenderSettings, source_responses
from claritysim.scene_gen import (
    DEFAULT_MAX_ORDER,
    SOURCE_WALL_MARGIN,
    HeadGeometry,
    RoomSpec,
    ScenePose,
    binaural_head_filter,
    compute_rir,
    sample_scene_geometry,
    woodworth_itd,
)

from conftest import ACCEPTANCE, TINY

SR = 44100


@contextmanager
def criterion(number: int, title: str):
    detail: dict = {}
    try:
        yield detail
    except BaseException:
        line = f"FAIL criterion {number}: {title} {detail}"
        ACCEPTANCE.append(line)
        print(line)
        raise
    line = f"PASS criterion {number}: {title} {detail}"
    ACCEPTANCE.append(line)
    print(line)


# -- 1 ------------------------------------------------------------------------


def _labelled_transform(ms: float, index: int):
    k = int(round(ms * SR / 1000))
    b, a = signal.butter(2, 2000.0 + 300.0 * index, fs=SR)

    def f(x):
        y = np.zeros_like(x)
        y[: len(x) - k] = x[k:]
        return signal.lfilter(b, a, y)

    return f, k


def test_criterion_1_causality_classification():
    with criterion(1, "causality verifier on 21 labelled transforms") as d:
        start = time.perf_counter()
        correct = 0
        for i in range(21):
            ms = 0.5 * i
            f, k = _labelled_transform(ms, i)
            res = verify_causality(f, SR)
            correct += res.passed == (ms <= 5.0) and abs(res.measured_lookahead_samples - k) <= 1
        d.update(correct=correct, seconds=round(time.perf_counter() - start, 2))
        assert correct == 21
        assert d["seconds"] < 60


# -- 2 ------------------------------------------------------------------------


GEOM_ROOM = RoomSpec(6.0, 5.0, 2.5, 0.3)


def _overlap(px, py, rect):
    """Area of the unit disc at (px, py) inside ``rect`` by quadrature."""
    (x0, x1), (y0, y1) = rect

    def chord(x):
        h = math.sqrt(max(0.0, 1.0 - (x - px) ** 2))
        return max(0.0, min(y1, py + h) - max(y0, py - h))

    lo, hi = max(x0, px - 1.0), min(x1, px + 1.0)
    if lo >= hi:
        return 0.0
    kinks = [px + s * math.sqrt(1.0 - (b - py) ** 2) for b in (y0, y1) if abs(b - py) < 1.0 for s in (-1.0, 1.0)]
    kinks = [k for k in kinks if lo < k < hi]
    return integrate.quad(chord, lo, hi, points=kinks or None, epsabs=1e-11)[0]


def _bin_probabilities(xe, ye, own, other):
    """Marginal of one point when the pair is uniform on own x other, >= 1 m apart."""
    area = (other[0][1] - other[0][0]) * (other[1][1] - other[1][0])
    g, w = np.polynomial.legendre.leggauss(6)
    mass = np.zeros((len(xe) - 1, len(ye) - 1))
    for i in range(len(xe) - 1):
        for j in range(len(ye) - 1):
            xs = (xe[i] + xe[i + 1]) / 2 + g * (xe[i + 1] - xe[i]) / 2
            ys = (ye[j] + ye[j + 1]) / 2 + g * (ye[j + 1] - ye[j]) / 2
            mass[i, j] = sum(wx * wy * (area - _overlap(x, y, other)) for x, wx in zip(xs, w) for y, wy in zip(ys, w))
    return (mass / mass.sum()).ravel()


def test_criterion_2_geometry_rule():
    with criterion(2, "10,000 poses obey the 1 m rules and are uniform") as d:
        room = GEOM_ROOM
        poses = [sample_scene_geometry(room, seed) for seed in range(10_000)]
        rcv = np.array([p.receiver_position for p in poses])
        src = np.array([p.source_position for p in poses])
        dims = room.dims
        wall = np.min(np.concatenate([rcv, dims - rcv], axis=1), axis=1)
        apart = np.linalg.norm(rcv - src, axis=1)
        d.update(min_wall_m=round(float(wall.min()), 4), min_source_m=round(float(apart.min()), 4))
        assert wall.min() >= 1.0 and apart.min() >= 1.0

        m = SOURCE_WALL_MARGIN
        rcv_rect = ((1.0, dims[0] - 1.0), (1.0, dims[1] - 1.0))
        src_rect = ((m, dims[0] - m), (m, dims[1] - m))
        pvals = {}
        for name, pts, own, other in (("receiver", rcv, rcv_rect, src_rect), ("source", src, src_rect, rcv_rect)):
            xe = np.linspace(*own[0], 9)
            ye = np.linspace(*own[1], 7)
            expected = _bin_probabilities(xe, ye, own, other) * len(pts)
            observed, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=[xe, ye])
            pvals[name] = float(stats.chisquare(observed.ravel(), expected).pvalue)
        d.update(p_values={k: round(v, 4) for k, v in pvals.items()})
        assert min(pvals.values()) > 0.01


# -- 3 ------------------------------------------------------------------------


def _schroeder_t30(h, sr=SR):
    # oracle: remaining energy as total minus a forward running sum, then a
    # least-squares line between -5 and -35 dB
    sq = np.asarray(h, float) ** 2
    energy = sq.sum() - np.concatenate([[0.0], np.cumsum(sq)[:-1]])
    energy = np.maximum(energy, 0.0)
    with np.errstate(divide="ignore"):
        edc = 10 * np.log10(energy / energy[0])
    t = np.arange(len(h)) / sr
    sel = (edc <= -5.0) & (edc >= -35.0)
    slope, _ = np.polyfit(t[sel], edc[sel], 1)
    return -60.0 / slope


def test_criterion_3_acoustics():
    with criterion(3, "Schroeder RT60 within 20% and anechoic single tap") as d:
        ratios = {}
        for rt60 in (0.2, 0.3, 0.5):
            room = RoomSpec(6.0, 5.0, 2.5, rt60)
            for seed in range(3):
                pose = sample_scene_geometry(room, seed)
                h = compute_rir(room, pose.source_position, pose.receiver_position, DEFAULT_MAX_ORDER, SR,
                                highpass_hz=RenderSettings().highpass_hz).taps
                ratios[(rt60, seed)] = _schroeder_t30(h) / rt60
        worst = max(abs(r - 1.0) for r in ratios.values())
        d.update(worst_relative_error=round(float(worst), 4))
        assert worst <= 0.20

        room = RoomSpec(20.0, 20.0, 20.0, 2.0)
        src, mic = np.array([5.0, 6.0, 7.0]), np.array([7.5, 4.0, 8.0])
        dist = float(np.linalg.norm(src - mic))
        rir = compute_rir(room, src, mic, max_order=0, sample_rate=SR)
        taps = np.flatnonzero(rir.taps)
        d.update(anechoic_taps=taps.tolist(), analytic=round(dist / 343.0 * SR))
        assert taps.tolist() == [round(dist / 343.0 * SR)]
        assert rir.taps[taps[0]] == pytest.approx(1.0 / dist, rel=1e-12)


# -- 4 ------------------------------------------------------------------------


def _rendered_itd(azimuth):
    room = RoomSpec(20.0, 20.0, 20.0, 2.0)
    centre = np.array([10.0, 10.0, 1.2])
    source = centre + 3.0 * np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
    spec = SimpleNamespace(room=room, head=HeadGeometry(), pose=ScenePose(tuple(source), tuple(centre), 0.0))
    h = source_responses(spec, tuple(source), RenderSettings(max_order=0, highpass_hz=None))
    x = np.random.default_rng(0).standard_normal(SR // 4)
    left, right = signal.fftconvolve(x, h["L1"]), signal.fftconvolve(x, h["R1"])
    xc = signal.correlate(right, left, mode="full", method="fft")
    lags = signal.correlation_lags(len(right), len(left))
    k = int(np.argmax(xc))
    y0, y1, y2 = xc[k - 1 : k + 2]
    return (lags[k] + 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2)) / SR


def test_criterion_4_binaural():
    with criterion(4, "ITD at +-90 deg within 10% of Woodworth; antisymmetric") as d:
        ww = woodworth_itd(math.pi / 2, 0.0875)
        errs = {}
        for az in (math.pi / 2, -math.pi / 2):
            errs[round(math.degrees(az))] = abs(_rendered_itd(az) - math.copysign(ww, az)) / ww
        d.update(relative_error={k: round(float(v), 4) for k, v in errs.items()})
        assert max(errs.values()) <= 0.10

        grid = np.linspace(-math.pi, math.pi, 37)
        model = [binaural_head_filter(t, "R", SR)[0] - binaural_head_filter(t, "L", SR)[0] for t in grid]
        model_asym = max(abs(model[i] + model[-1 - i]) for i in range(37))
        rendered = [_rendered_itd(t) for t in grid]
        rendered_asym = max(abs(rendered[i] + rendered[-1 - i]) for i in range(37))
        d.update(model_asymmetry_s=float(model_asym), rendered_asymmetry_s=float(rendered_asym))
        assert model_asym <= 1e-15
        assert rendered_asym <= 1e-9


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_hearing_loss_identity():
    with criterion(5, "zero loss within 0.5 dB; 120 dB loss attenuates >= 40 dB") as d:
        speech = generate_corpus(1, seed=3)[0].samples
        noise = np.random.default_rng(0).standard_normal(SR) * 0.1
        rms = lambda x: 10 * np.log10(np.mean(np.asarray(x) ** 2) + 1e-300)  # noqa: E731
        dev, att = [], []
        for x in (speech, noise, 10 * noise):
            for ear in ("L", "R"):
                dev.append(abs(rms(simulate_hearing_loss(x, Audiogram.uniform("n", 0.0), ear, SR)) - rms(x)))
                att.append(rms(x) - rms(simulate_hearing_loss(x, Audiogram.uniform("d", 120.0), ear, SR)))
        d.update(max_deviation_db=round(float(max(dev)), 4), min_attenuation_db=round(float(min(att)), 1))
        assert max(dev) <= 0.5
        assert min(att) >= 40.0


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_prediction_sanity():
    with criterion(6, "metric self-similarity, scale invariance, logistic recovery") as d:
        x = generate_corpus(1, seed=4)[0].samples
        self_sim = envelope_metric(x, x, SR)
        noisy = x + 0.02 * np.random.default_rng(1).standard_normal(len(x))
        base = envelope_metric(x, noisy, SR)
        scale_err = max(abs(envelope_metric(x, s * noisy, SR) - base) for s in (1e-3, 0.5, 7.0, 1e3))
        dd = np.linspace(0.1, 1.0, 40)
        m = fit_logistic(zip(dd, LogisticMap(8.0, 0.6)(dd)))
        d.update(self=float(self_sim), scale_err=float(scale_err), a=round(m.a, 5), b=round(m.b, 5))
        assert abs(self_sim - 1.0) <= 1e-6
        assert scale_err <= 1e-9
        assert abs(m.a - 8.0) <= 0.02 * 8.0 and abs(m.b - 0.6) <= 0.02 * 0.6


# -- 7 ------------------------------------------------------------------------


def _scored_dataset(root: Path, seed: int):
    config = ChallengeConfig.from_dict(dict(TINY, master_seed=seed))
    harness.gen_scenes(config, root)
    harness.render(root)
    listeners = harness.gen_listeners(config, root)
    test = harness.load_scenes(root, "test")
    pairs = [(s.scene_id, a.listener_id) for s in test for a in listeners]
    harness.write_enhancement_entry(root / "entries" / "pt", "pt", "t", {"builtin": "passthrough"},
                                    harness.PassthroughSignals(), test, listeners)
    entry = harness.ingest_entry(root / "entries" / "pt", "enhancement", pairs)
    score, rows = harness.score_enhancement(entry, test, listeners, config.panel, probes=3, with_metric=True)
    measured = {(r.scene_id, r.listener_id): r.si_measured for r in rows}
    pred = harness.write_entry(root / "entries" / "pred", "pred", "t", "prediction")
    harness.write_predictions_csv(pred.payload_path, {(r.scene_id, r.listener_id): map_to_intelligibility(r.metric, LogisticMap()) for r in rows})
    mse = harness.score_prediction(harness.ingest_entry(root / "entries" / "pred", "prediction", pairs), measured)
    mean_value = float(np.mean(list(measured.values())))
    const = harness.write_entry(root / "entries" / "const", "const", "t", "prediction")
    harness.write_predictions_csv(const.payload_path, {k: mean_value for k in measured})
    const_mse = harness.score_prediction(harness.ingest_entry(root / "entries" / "const", "prediction", pairs), measured)
    return score.primary_score, mse.primary_score, const_mse.primary_score


def test_criterion_7_scoring_oracles(tmp_path):
    with criterion(7, "harness mean SI and MSE equal the reference script") as d:
        diffs = []
        for seed in (21, 22, 23):
            root = tmp_path / f"d{seed}"
            mean_si, mse, const_mse = _scored_dataset(root, seed)
            si = ref.measured_si(root, "pt")
            diffs.append(abs(mean_si - ref.mean(si.values())))
            diffs.append(abs(mse - ref.mse(ref.read_predictions(root, "pred"), si)))
            diffs.append(abs(const_mse - ref.variance(si.values())))
        d.update(max_abs_diff=float(max(diffs)))
        assert max(diffs) <= 1e-12

        # the same oracle run as a separate process
        proc = subprocess.run([sys.executable, str(Path(ref.__file__)), str(tmp_path / "d21"), "pt", "pred"],
                              capture_output=True, text=True, check=True)
        out = json.loads(proc.stdout)
        again = _scored_dataset(tmp_path / "again", 21)
        assert abs(out["mean_si"] - again[0]) <= 1e-12
        assert abs(out["mse"] - again[1]) <= 1e-12


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_rules(workspace, tmp_path, ahead_command):
    with criterion(8, "two-per-team cap and 6 ms disqualification (exit 3)") as d:
        board = harness.rank_and_cap([EntryScore(f"e{i}", "team", "enhancement", v, {}) for i, v in enumerate((0.3, 0.9, 0.6))])
        d.update(eligible=board.eligible())
        assert len(board.eligible()) == 2

        ws = tmp_path / "ws"
        shutil.copytree(workspace, ws)
        assert main(["enhance", "--out", str(ws), "--passthrough", "--entry", "cheat"]) == 0
        meta_path = ws / "entries" / "cheat" / "entry.json"
        meta = json.loads(meta_path.read_text())
        meta["processor"] = {"command": ahead_command(6.0)}
        meta_path.write_text(json.dumps(meta))
        score_code = main(["score-enh", "--out", str(ws), "--entry", "cheat", "--probes", "5"])
        verify_code = main(["verify-causality", "--command", ahead_command(6.0), "--probes", "5", "--duration", "0.5"])
        d.update(score_enh_exit=score_code, verify_exit=verify_code)
        assert score_code == 3 and verify_code == 3
        assert not (ws / "scores" / "cheat.json").exists()


# -- 9 ------------------------------------------------------------------------


def _tree_hashes(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.mark.slow
def test_criterion_9_end_to_end(tmp_path):
    with criterion(9, "run-all: < 10 min, bit-reproducible, baseline beats pass-through") as d:
        seconds, trees = [], []
        for name in ("run1", "run2"):
            start = time.perf_counter()
            proc = subprocess.run([sys.executable, "-m", "claritysim.cli", "run-all", "--out", str(tmp_path / name)],
                                  capture_output=True, text=True)
            seconds.append(round(time.perf_counter() - start, 1))
            assert proc.returncode == 0, proc.stderr
            trees.append(_tree_hashes(tmp_path / name))
        summary = json.loads((tmp_path / "run1" / "run_summary.json").read_text())
        groups = summary["enhancement_by_group"]
        mse = summary["prediction_mse"]
        d.update(seconds=seconds, files=len(trees[0]), identical=trees[0] == trees[1],
                 scenes=summary["scenes"], listeners=summary["listeners"],
                 moderate=(round(groups["baseline"]["moderate"], 4), round(groups["passthrough"]["moderate"], 4)),
                 severe=(round(groups["baseline"]["severe"], 4), round(groups["passthrough"]["severe"], 4)),
                 mse=(round(mse["pred_baseline"], 5), round(mse["pred_constant"], 5)))
        assert max(seconds) < 600
        assert sum(summary["scenes"].values()) == 20 and summary["listeners"] == 10
        assert trees[0] == trees[1]
        for group in ("moderate", "severe"):
            assert groups["baseline"][group] >= groups["passthrough"][group]
        assert mse["pred_baseline"] < mse["pred_constant"]
