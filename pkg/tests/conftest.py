import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fluematch.params import ParamVector, sample_uniform
from fluematch.tone import Tone

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.register_profile("quick", deadline=None, max_examples=10)
settings.load_profile("default")

FS = 32000


def sine(f, dur, fs=FS, amp=1.0, note=36, phase=0.0):
    t = np.arange(int(round(dur * fs))) / fs
    return Tone(amp * np.sin(2 * np.pi * f * t + phase), fs, note)


def harmonic_tone(levels_db, note=36, dur=4.0, fs=FS):
    """Sum of partials at the given dB levels relative to amplitude 0.5."""
    f0 = Tone(np.zeros(1), fs, note).f0_hz
    t = np.arange(int(round(dur * fs))) / fs
    x = sum(0.5 * 10 ** (db / 20) * np.sin(2 * np.pi * (l + 1) * f0 * t) for l, db in enumerate(levels_db))
    return Tone(x, fs, note)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_theta(rng):
    return ParamVector.from_array(sample_uniform(rng))


VERDICTS = []


def verdict(number, title, ok, detail):
    """Record and print one acceptance line; the run summary repeats them in order."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    VERDICTS.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
