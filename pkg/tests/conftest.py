"""Shared fixtures: the canned noisy-blinker event trace and its hand-derived
expected stack/periods, frozen from a manual walk of the differencing and
period-summing rules."""

import numpy as np
import pytest

from evmocap.events import Event

# A single pixel watching an LED blinking at a 300 us period with 10 % duty
# cycle over ten periods. Noise: a false double pair at t=150/165 us and a
# spurious event at t=630 us that collides with the real off edge (the
# spurious one is first in stream order, so the duplicate-timestamp collapse
# keeps the real polarity).
NOISY_BLINKER_PIXEL = (5, 9)


def _noisy_blinker_events():
    x, y = NOISY_BLINKER_PIXEL
    ev = []
    for k in range(10):
        ev.append((k * 300, 1))
        ev.append((k * 300 + 30, -1))
    ev.append((150, -1))
    ev.append((165, -1))
    ev.append((630, 1))  # spurious; same timestamp as the real off edge
    ev.sort(key=lambda e: e[0])
    # keep the spurious +1 ahead of the real -1 at t=630
    i = [k for k, e in enumerate(ev) if e[0] == 630]
    assert len(i) == 2
    if ev[i[0]][1] == -1:
        ev[i[0]], ev[i[1]] = ev[i[1]], ev[i[0]]
    return [Event(x, y, p, t) for t, p in ev]


# Deltas after ingesting the trace above, oldest to newest. First event only
# initializes; the +30 written by the spurious event at 630 is re-signed to
# -30 by the real off event at the same timestamp.
NOISY_BLINKER_STACK = [-30, -120, -15, +135, -30] + [+270, -30] * 8

# Entries before the first positive-to-negative transition are discarded
# (everything through the +135), then each sum lands on exactly one period.
NOISY_BLINKER_PERIODS = [300] * 8


@pytest.fixture
def noisy_blinker_events():
    return _noisy_blinker_events()


@pytest.fixture
def noisy_blinker_expected():
    return np.array(NOISY_BLINKER_STACK), np.array(NOISY_BLINKER_PERIODS)
