from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from claritysim.enhancement import EnhancedOutput, passthrough
from claritysim.errors import IncompletePanelError, InvalidTranscriptError, SchemaError, ValidationError
from claritysim.listener_model import generate_population
from claritysim.panel import (
    PanelConfig,
    PanelResponse,
    audibility_index,
    draw_words_correct,
    panel_measure,
    read_panel_csv,
    response_rng,
    simulate_response,
    word_probability,
    write_panel_csv,
)

SR = 44100


@pytest.fixture(scope="module")
def population():
    return generate_population(50, seed=0)


@pytest.fixture(scope="module")
def table(spin, population):
    return panel_measure([spin], [a for _, a in population], PanelConfig(50), lambda s, a: passthrough(s, a))


def test_certain_probabilities_are_exact():
    rng = np.random.default_rng(0)
    assert draw_words_correct(1.0, 7, math.inf, rng) == 7
    assert draw_words_correct(0.0, 7, math.inf, rng) == 0
    assert draw_words_correct(1.0, 7, 20.0, rng) == 7
    assert draw_words_correct(0.0, 7, 20.0, rng) == 0


def test_word_proportion_matches_probability():
    rng = np.random.default_rng(1)
    correct = sum(draw_words_correct(0.7, 1, 20.0, rng) for _ in range(10_000))
    assert abs(correct / 10_000 - 0.7) <= 0.02


@given(st.floats(0.0, 1.0), st.integers(1, 30), st.floats(0.5, 200.0), st.integers(0, 2**32 - 1))
def test_draw_stays_in_range(p, n, kappa, seed):
    assert 0 <= draw_words_correct(p, n, kappa, np.random.default_rng(seed)) <= n


def test_transfer_function():
    assert word_probability(0.35) == pytest.approx(0.5)
    assert word_probability(1.0) > 0.99 and word_probability(0.0) < 0.01


def test_audibility_bounds(spin):
    ref = spin.anechoic_target
    assert audibility_index(ref, ref, SR) == pytest.approx(1.0, abs=1e-3)
    assert audibility_index(ref, np.zeros_like(ref), SR) == 0.0
    noise = np.random.default_rng(0).standard_normal(len(ref)) * 0.1
    assert audibility_index(ref, noise, SR) < 0.3
    with pytest.raises(ValidationError):
        audibility_index(np.zeros_like(ref), ref, SR)


def test_response_validation():
    with pytest.raises(ValidationError):
        PanelResponse("s", "l", 3, 4)
    with pytest.raises(ValidationError):
        PanelConfig(word_noise_kappa=0.0)
    assert PanelResponse("s", "l", 4, 3).si == 0.75


def test_full_table_shape(table, population, spin):
    assert len(table) == 50
    assert {k[1] for k in table} == {a.listener_id for _, a in population}
    assert all(0.0 <= v <= 1.0 for v in table.values())


def test_rerun_is_identical(table, spin, population):
    subset = [a for _, a in population[:5]]
    again = panel_measure([spin], subset, PanelConfig(5), lambda s, a: passthrough(s, a))
    for key, value in again.items():
        assert table[key] == value


def test_normal_hearing_does_at_least_as_well_as_severe(table, population, spin):
    normal = [table[(spin.scene_id, a.listener_id)] for p, a in population if p.shape == "normal"]
    severe = [table[(spin.scene_id, a.listener_id)] for p, a in population if p.severity == "severe" and p.shape != "normal"]
    assert normal and severe
    assert np.mean(normal) >= np.mean(severe)


def test_empty_transcript(spin, population):
    a = population[0][1]
    enh = passthrough(spin, a)
    with pytest.raises(InvalidTranscriptError):
        simulate_response(spin, enh, a, "   ", response_rng(0, spin.scene_id, a.listener_id))


def test_missing_signal_is_incomplete(spin, population):
    with pytest.raises(IncompletePanelError):
        panel_measure([spin], [population[0][1]], PanelConfig(1), lambda s, a: None)


def test_silent_output_scores_zero(spin, population):
    a = population[0][1]
    n = len(spin.anechoic_target)
    enh = EnhancedOutput(spin.scene_id, a.listener_id, np.zeros(n), np.zeros(n))
    resp = simulate_response(spin, enh, a, spin.transcript, response_rng(0, spin.scene_id, a.listener_id))
    assert resp.words_correct == 0


def test_csv_round_trip(tmp_path, table):
    path = write_panel_csv(tmp_path / "p.csv", table)
    assert path.read_text().splitlines()[0] == "scene_id,listener_id,si_measured"
    assert read_panel_csv(path) == table
    bad = tmp_path / "bad.csv"
    bad.write_text("scene,listener,si\nS,L,0.5\n")
    with pytest.raises(SchemaError):
        read_panel_csv(bad)


def test_transcript_length_sets_word_count(spin, population):
    a = population[0][1]
    enh = passthrough(spin, a)
    resp = simulate_response(spin, enh, a, "one two three", response_rng(0, spin.scene_id, a.listener_id))
    assert resp.words_total == 3
