"""Shared fixtures: a small geometry and a surrogate trained once per session."""

import numpy as np
import pytest

from hmimo.geometry import SurfaceGeometry
from hmimo.green import WaveConfig, QuadratureRule, full_channel
from hmimo.surrogate import CoordinateBox, TrainConfig, generate_training_set, train


# Per-criterion result lines collected by the acceptance tests; printed as a
# terminal-summary section so they survive pytest's output capture.
criterion_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in criterion_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_geometry():
    """6x6 receive / 3x3 transmit surface used by the slower integration tests."""
    return SurfaceGeometry(6, 6, 3, 3, 0.05, 0.05, 0.01, 0.01)


@pytest.fixture(scope="session")
def wave():
    return WaveConfig(3e9)


@pytest.fixture(scope="session")
def trained_net(small_geometry, wave):
    """Surrogate fitted on the small geometry; reaches roughly -50 dB NMSE."""
    box = CoordinateBox.from_prior(small_geometry, (-1.0, 1.0), (-1.0, 1.0),
                                   (20.0, 40.0))
    inputs, targets = generate_training_set(box, small_geometry, wave,
                                            QuadratureRule(4), 20000, seed=11)
    cfg = TrainConfig(hidden_count=50, epochs=150, seed=3)
    net, report = train(inputs, targets, cfg, wave.frequency)
    assert report["val_nmse_db"] < -40.0
    return net


@pytest.fixture(scope="session")
def true_position():
    return np.array([0.37, -0.51, 27.3])


@pytest.fixture(scope="session")
def true_channel(small_geometry, true_position, wave):
    """Exact quadrature channel (6N, M) at the session's true location."""
    return full_channel(small_geometry, true_position, wave,
                        QuadratureRule(8)).stacked
