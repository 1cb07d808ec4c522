from __future__ import annotations

import numpy as np
import pytest

from rtpos.scene import Building, Material, RruConfig, SceneModel, load_fixture


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance-criteria checks (slow)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def concrete():
    return Material(0, refractive_index=2.4, scattering_amplitude=0.4)


def _scene(buildings, extent=(-200.0, -200.0, 200.0, 200.0), absorbing=False):
    n = 1.0 if absorbing else 2.4
    mats = {0: Material(0, n, 0.0), 1: Material(1, 1.0 if absorbing else 2.2, 0.0)}
    return SceneModel(mats, list(buildings), extent, 1)


@pytest.fixture
def make_scene():
    return _scene


@pytest.fixture
def flat_scene():
    """Ground only."""
    return _scene([])


@pytest.fixture
def mirror_scene():
    """One long wall whose south face lies on y = 20."""
    return _scene([Building.box(-100, 20, 100, 24, 30, 0)])


@pytest.fixture
def rru_at():
    def make(x, y, z, boresight_deg=0.0, rru_id=0):
        return RruConfig.facing(rru_id, (x, y, z), np.deg2rad(boresight_deg))

    return make


@pytest.fixture(scope="session")
def canyon():
    return load_fixture("canyon")


@pytest.fixture(scope="session")
def block():
    return load_fixture("block")


# --------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, printed after the run

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    def add(criterion: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[criterion] = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d}: {detail}"
        print(ACCEPTANCE_LINES[criterion])
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
