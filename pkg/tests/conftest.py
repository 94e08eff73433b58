import numpy as np
import pytest

ACCEPTANCE_LINES = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Print and remember one pass/fail line; the session summary repeats them in order."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append((number, line))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

from saber_eeg.core import (N_BINS, BIN_CENTERS_DEG, Condition, EpochSet, Event, RawRecording,
                            event_code, standard_layout)


@pytest.fixture(scope="session")
def layout():
    return standard_layout()


def make_events(conditions, bins, start=1000, step=625, angles=None):
    out = []
    for i, (c, b) in enumerate(zip(conditions, bins)):
        a = BIN_CENTERS_DEG[b] if angles is None else angles[i]
        out.append(Event(start + i * step, event_code(c, b), c, int(b), float(a)))
    return out


def make_epochset(data, layout, conditions=None, bins=None, rate=250.0, t0=-0.5):
    n = data.shape[0]
    if bins is None:
        bins = np.arange(n) % N_BINS
    if conditions is None:
        conditions = [Condition.STATIC_SINGLE] * n
    return EpochSet(data, rate, t0, make_events(conditions, bins), layout)


def make_recording(layout, n_samples=5000, rate=250.0, seed=0, events=()):
    rng = np.random.default_rng(seed)
    # a few smooth shared sources so neighbouring channels correlate
    src = np.cumsum(rng.standard_normal((6, n_samples)), axis=1) * 0.2
    data = rng.standard_normal((layout.n_channels, 6)) @ src
    data += 0.05 * rng.standard_normal((layout.n_channels, n_samples))
    return RawRecording(data, rate, layout, tuple(events))


def warp(f, fs):
    return np.tan(np.pi * np.asarray(f, dtype=float) / fs)


def butter_mag2(f, fs, order, low=None, high=None):
    """Analytic squared magnitude of a bilinear-transformed Butterworth filter."""
    w = warp(f, fs)
    if low is not None and high is not None:
        wl, wh = warp(low, fs), warp(high, fs)
        x = (w ** 2 - wl * wh) / (w * (wh - wl))
    elif high is not None:
        x = w / warp(high, fs)
    else:
        x = warp(low, fs) / w
    return 1.0 / (1.0 + x ** (2 * order))


def sine_gain(filtered, f, fs, trim):
    """Amplitude of the ``f`` Hz component of ``filtered`` over its interior, by projection."""
    t = np.arange(filtered.size) / fs
    sl = slice(trim, filtered.size - trim)
    X = np.column_stack([np.sin(2 * np.pi * f * t[sl]), np.cos(2 * np.pi * f * t[sl])])
    coef = np.linalg.lstsq(X, filtered[sl], rcond=None)[0]
    return float(np.hypot(*coef))
