import json
import time
from pathlib import Path

import numpy as np
import pytest

from promptdoor.harness import pipeline
from promptdoor.harness.config import ExperimentConfig
from promptdoor.promptengine import ClassTokenSet
from promptdoor.twotower import ModelConfig, build_model

# wall-clock seconds of the shared desk fixtures, read by the acceptance runtime check
TIMINGS: dict[str, float] = {}
# "criterion N: PASS|FAIL ..." lines, echoed in the terminal summary
CRITERIA: list[str] = []

ORACLES = json.loads((Path(__file__).parent / "oracles" / "derived.json").read_text())

MICRO_NAMES = ["solid-red-circle", "striped-blue-square"]


def micro_model(dtype=np.float64, seed=0, frozen=True):
    """K=2, d=8, N=2 model on 8x8 images; small enough for finite differences."""
    cfg = ModelConfig(d=8, e=8, n_ctx=2, image_size=8, channels=(4,), text_hidden=8, max_len=8)
    model = build_model(MICRO_NAMES, cfg, seed=seed, dtype=dtype)
    return model.freeze() if frozen else model


def micro_images(n=2, seed=0, dtype=np.float64):
    # kept away from 0 and 1 so the trigger clamp stays smooth
    return np.random.default_rng(seed).uniform(0.2, 0.8, (n, 3, 8, 8)).astype(dtype)


@pytest.fixture(scope="session")
def oracles():
    return ORACLES


@pytest.fixture
def micro():
    model = micro_model()
    return model, ClassTokenSet.from_names(model, MICRO_NAMES)


@pytest.fixture(scope="session")
def desk_config():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def desk_victim(desk_config):
    """The default pre-trained victim, shared by every slow test."""
    t = time.perf_counter()
    model, _ = pipeline.pretrain_victim(desk_config)
    TIMINGS["pretrain"] = time.perf_counter() - t
    return model


@pytest.fixture(scope="session")
def desk_bundles(desk_config, desk_victim):
    out = {}
    for s in desk_config.seeds:
        t = time.perf_counter()
        out[s] = pipeline.attack_bundle(desk_config, desk_victim, s)
        TIMINGS[f"bundle{s}"] = time.perf_counter() - t
    return out


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda l: int(l.split()[1].rstrip("ab:"))):
            terminalreporter.write_line(line)
