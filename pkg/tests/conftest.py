import numpy as np
import pytest

from scorebreak.oracle import GaussianMixtureSpec, PixelwiseOracle, condition_to_labels
from scorebreak.schedule import build_schedule


class LinearLogitVictim:
    """Per-pixel logistic model: p(fg) = sigmoid(w . x + b)."""

    def __init__(self, w, b=0.0, curvature=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = b
        self.curvature = curvature

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.w + self.b + self.curvature * np.sum(x ** 2, axis=-1)

    def predict(self, x):
        return 1.0 / (1.0 + np.exp(-self.logits(x)))[..., None]

    def loss(self, x, y):
        labels = condition_to_labels(y)
        p = np.clip(self.predict(x)[..., 0], 1e-12, 1 - 1e-12)
        return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))

    def gradient(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        labels = condition_to_labels(y)
        p = self.predict(x)[..., 0]
        dlogit = (p - labels) / labels.size
        return dlogit[..., None] * (self.w + 2 * self.curvature * x)


@pytest.fixture
def sched():
    return build_schedule()


@pytest.fixture
def texture_spec():
    means = np.array([[-0.075, 0.075, -0.075], [0.075, -0.075, 0.075]])
    return GaussianMixtureSpec(means, 0.01, [0.6, 0.4])


@pytest.fixture
def pixel_oracle(texture_spec, sched):
    return PixelwiseOracle(texture_spec, sched)


@pytest.fixture
def linear_victim():
    return LinearLogitVictim([6.0, -6.0, 6.0])


def pytest_terminal_summary(terminalreporter):
    from toyruns import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
