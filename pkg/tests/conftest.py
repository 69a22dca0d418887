from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparc.decoder import Decoder  # noqa: E402
from sparc.harness import synthetic_image_embeddings  # noqa: E402
from sparc.model import ModelConfig, random_weights  # noqa: E402
from sparc.stdf import read_weights_file  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
DESK_STDF = FIXTURES / "desk.stdf"
INST = [1, 2, 3, 4]

_acceptance: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, text): exit criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _acceptance.append((marker.args[0], status, marker.args[1]))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    # Parametrized criteria collapse to one line; any failing case fails it.
    merged: dict[str, tuple[str, str]] = {}
    rank = {"PASS": 0, "SKIP": 1, "FAIL": 2}
    for cid, status, text in _acceptance:
        old = merged.get(cid)
        if old is None or rank[status] > rank[old[0]]:
            merged[cid] = (status, text)
    terminalreporter.section("acceptance criteria")
    for cid in sorted(merged, key=lambda c: int(c.lstrip("AC"))):
        status, text = merged[cid]
        terminalreporter.write_line(f"{status:4}  {cid:<5} {text}")


@pytest.fixture(scope="session")
def desk_weights():
    _, w = read_weights_file(DESK_STDF)
    return w


@pytest.fixture(scope="session")
def desk_decoder(desk_weights):
    return Decoder(desk_weights)


@pytest.fixture(scope="session")
def desk_images():
    return synthetic_image_embeddings(7, 16, 32)


def seeded_fixture(seed: int, n_image: int = 16, scale: float = 1.0):
    """A random desk-shaped model plus image embeddings keyed by ``seed``."""
    w = random_weights(seed, ModelConfig.desk(), scale)
    return Decoder(w), synthetic_image_embeddings(seed, n_image, w.config.model_dim)


def max_rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
