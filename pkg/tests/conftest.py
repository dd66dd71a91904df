import json
from pathlib import Path

import numpy as np
import pytest


def fft_peak_amplitude(x, fs, freq):
    """Amplitude of a sinusoid at ``freq`` read off a Blackman-Harris windowed FFT peak."""
    from scipy.signal import get_window

    x = np.asarray(x, dtype=np.float64)
    w = get_window("blackmanharris", x.size, fftbins=False)
    spec = np.abs(np.fft.rfft(x * w))
    k = int(round(freq * x.size / fs))
    lo, hi = max(k - 4, 0), min(k + 5, spec.size)
    return 2.0 * spec[lo:hi].max() / w.sum()


def db(a, b):
    return 20.0 * np.log10(a / b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_manifest(path: Path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
