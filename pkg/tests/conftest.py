import numpy as np
import pytest

from localagg.embedding import normalize_rows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_bank(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))


def blobs_on_sphere(rng, n_per=100, d=8, sigma=0.05, n_blobs=3):
    """Well separated Gaussian blobs projected to the unit sphere, with labels."""
    centers = np.eye(d)[:n_blobs]
    labels = np.repeat(np.arange(n_blobs), n_per)
    pts = centers[labels] + sigma * rng.standard_normal((labels.size, d))
    return normalize_rows(pts), labels


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
