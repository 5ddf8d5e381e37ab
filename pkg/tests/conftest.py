import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mladv.netcore import Predictor  # noqa: E402

# lines collected by the acceptance tests, echoed at the end of the run
ACCEPTANCE_LINES = []


def random_net(d, hidden, l, seed, activation="tanh", scale=1.0):
    rng = np.random.default_rng(seed)
    sizes = [d, *hidden, l]
    layers = []
    for k in range(len(sizes) - 1):
        W = rng.normal(scale=scale / np.sqrt(sizes[k]), size=(sizes[k + 1], sizes[k]))
        b = rng.normal(scale=0.3, size=sizes[k + 1])
        layers.append((W, b, "sigmoid" if k == len(sizes) - 2 else activation))
    return Predictor(tuple(layers))


def linear_net(W, b):
    return Predictor(((np.asarray(W, dtype=float), np.asarray(b, dtype=float), "sigmoid"),))


@pytest.fixture
def small_net():
    return random_net(6, (5,), 4, seed=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
