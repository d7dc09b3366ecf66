import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prosodyne.dsp import AudioBuffer

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

SR = 16000


def tone(freq, dur_s=1.0, amp=0.5, sr=SR, phase=0.0):
    t = np.arange(int(round(dur_s * sr))) / sr
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t + phase), sr)


def harmonic_tone(freq, dur_s=1.0, amp=0.1, n_harm=10, sr=SR):
    """Off-bin harmonic complex with 1/k amplitudes; every low mel band is excited."""
    t = np.arange(int(round(dur_s * sr))) / sr
    x = sum(np.sin(2 * np.pi * k * freq * t) / k for k in range(1, n_harm + 1))
    return AudioBuffer(amp * x, sr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
