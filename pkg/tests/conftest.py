import sys

import pytest

from pvl.harness import config
from pvl.model import build_random_model
from pvl.planted import planted_model


@pytest.fixture(scope="session")
def planted():
    return planted_model("default", 0)


@pytest.fixture(scope="session")
def planted_alt():
    return planted_model("plan-divergent", 0)


@pytest.fixture(scope="session")
def drift(planted):
    return config.script("drift", planted.vocab)


@pytest.fixture(scope="session")
def aura(planted):
    return config.script("aura", planted.vocab)


@pytest.fixture(scope="session")
def plan_script(planted):
    return config.script("plan", planted.vocab)


@pytest.fixture
def tiny():
    return build_random_model(seed=3)


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion that ran in this session
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
