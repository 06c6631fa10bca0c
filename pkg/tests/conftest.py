from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from limbfit.geometry import SkeletonTopology
from limbfit.synth import default_body, default_topology, generate_sequence, sequence_rng


@pytest.fixture(scope="session")
def body():
    return default_body()


@pytest.fixture(scope="session")
def topo() -> SkeletonTopology:
    return default_topology()


@pytest.fixture(scope="session")
def sequence(body):
    """A short clean sequence shared by tests that only read it."""
    return generate_sequence(body, sequence_rng(7, 0), frames=4)


def one_hot_labels(labels, num_classes):
    W = np.zeros((len(labels), num_classes))
    W[np.arange(len(labels)), labels] = 1.0
    return W


def random_rigid(rng):
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.uniform(-5.0, 5.0, size=3)
    return R, t


# One line per acceptance criterion, echoed in the terminal summary so the
# verdicts are visible even when output capture is on.
ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
