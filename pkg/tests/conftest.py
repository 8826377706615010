import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import ts2tc  # noqa: E402,F401  (float64 default)
from ts2tc.pipeline import synthetic_records  # noqa: E402
from ts2tc.pretext import build_spectrogram_set, build_temporal_windows  # noqa: E402
from ts2tc.signal import zscore  # noqa: E402
from ts2tc.spectrogram import StftConfig  # noqa: E402
from ts2tc.vmd import VmdConfig  # noqa: E402


def two_tone(n=700, rate=125.0, f1=2.0, f2=10.0):
    t = np.arange(n) / rate
    return np.sin(2 * np.pi * f1 * t) + np.sin(2 * np.pi * f2 * t)


@pytest.fixture(scope="session")
def toy_windows():
    """64 z-scored 5.6 s synthetic windows labelled with heart rate."""
    return [zscore(r) for r in synthetic_records(64, seed=11)]


@pytest.fixture(scope="session")
def temporal_set(toy_windows):
    return build_temporal_windows(toy_windows, VmdConfig(), 0.4, np.arange(len(toy_windows)))


@pytest.fixture(scope="session")
def spectral_set(toy_windows):
    return build_spectrogram_set(toy_windows, StftConfig(), (8, 8), 0.75, 3, np.arange(len(toy_windows)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
