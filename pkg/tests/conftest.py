from __future__ import annotations

import json
import sys

import pytest

from claritysim import harness
from claritysim.corpus import SignalStore, UtteranceStore, generate_corpus, generate_interferers
from claritysim.harness import ChallengeConfig
from claritysim.renderer import RenderSettings, render_scene, sample_scene_spec

ACCEPTANCE: list[str] = []

FAST = RenderSettings(max_order=8, pre_roll_s=0.5, post_roll_s=0.5)


@pytest.fixture(scope="session")
def corpus():
    return UtteranceStore(generate_corpus(12, seed=1))


@pytest.fixture(scope="session")
def interferers():
    return SignalStore.from_generated(generate_interferers(1, seed=2, duration_s=3.0))


@pytest.fixture(scope="session")
def scene_spec(interferers):
    return sample_scene_spec("S00000", 11, "U0000", interferers)


@pytest.fixture(scope="session")
def spin(scene_spec, corpus, interferers):
    return render_scene(scene_spec, corpus, interferers, FAST)


TINY = {
    "master_seed": 5,
    "scene_count": 4,
    "split_ratios": [0.5, 0.0, 0.5],
    "corpus_size": 6,
    "interferers_per_type": 1,
    "interferer_duration_s": 3.0,
    "listener_count": 3,
    "render": {"max_order": 8, "pre_roll_s": 0.5, "post_roll_s": 0.5},
    "causality_probes": 5,
}

AHEAD = """import sys
import numpy as np
from scipy.io import wavfile
ms = float(sys.argv[3])
sr, x = wavfile.read(sys.argv[1])
k = int(round(ms * sr / 1000))
y = np.zeros_like(x)
y[: len(x) - k] = x[k:]
y = y[:, [0, x.shape[1] // 2]] if x.ndim > 1 else y
wavfile.write(sys.argv[2], sr, y)
"""


@pytest.fixture(scope="session")
def tiny_config():
    return ChallengeConfig.from_dict(TINY)


@pytest.fixture(scope="session")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="session")
def workspace(tmp_path_factory, tiny_config):
    """A rendered tiny dataset with listeners; treat as read-only."""
    out = tmp_path_factory.mktemp("ws")
    harness.gen_scenes(tiny_config, out)
    harness.render(out)
    harness.gen_listeners(tiny_config, out)
    return out


@pytest.fixture(scope="session")
def ahead_command(tmp_path_factory):
    """Command template for a processor that reads ``ms`` milliseconds ahead."""
    script = tmp_path_factory.mktemp("procs") / "ahead.py"
    script.write_text(AHEAD)
    return lambda ms: f"{sys.executable} {script} {{input}} {{output}} {ms}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
