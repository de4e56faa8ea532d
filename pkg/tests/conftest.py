from __future__ import annotations

import sys

import pytest

from fleetgov.evidence import EvidenceLog
from fleetgov.kernel import Kernel
from fleetgov.storage import MemoryStorage
from helpers import KEY, StepClock


@pytest.fixture
def clock():
    return StepClock()


@pytest.fixture
def storage(clock):
    return MemoryStorage(clock)


@pytest.fixture
def evidence(storage):
    return EvidenceLog(storage, KEY)


@pytest.fixture
def kernel(clock):
    k = Kernel.open(None, key=KEY, clock=clock)
    yield k
    k.close()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance")
    for _, _, line in module.RESULTS:
        terminalreporter.write_line(line)
