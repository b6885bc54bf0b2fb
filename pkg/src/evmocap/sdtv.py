"""Signed delta-time volume: per-pixel cyclic stacks of inter-event deltas.

Each pixel keeps the last `depth` time differences between consecutive
events, in int16 microseconds, with the closing event's polarity folded
into the sign (raw deltas are strictly positive, so the sign bit is free).
The volume persists across batches as a cyclic window; ingesting a batch
also produces an event-count frame used by the rate filter downstream.

Ingestion cost is linear in the batch and touches only pixels present in
it: count frames use a generation stamp instead of full-frame clearing.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .events import EventBatch, SensorGeometry

DELTA_MAX_US = 32767

# Count frames are uint16 and saturate.
CountFrame = np.ndarray


def min_depth(window_t_us: float, f_max_hz: float) -> int:
    """Minimal stack depth for a window T and fastest blink rate.

    Every blink period triggers two events (on and off), so the stack must
    hold ceil(2 * T * f_max) entries; clamped to at least 4.
    """
    if window_t_us <= 0 or f_max_hz <= 0:
        raise ValueError("window and frequency must be positive")
    return max(4, math.ceil(2.0 * (window_t_us * 1e-6) * f_max_hz))


def sdtv_footprint_bytes(width: int, height: int, depth: int) -> int:
    """Memory of the volume itself: W*H*D int16 entries."""
    return width * height * depth * 2


def event_volume_footprint_bytes(
    width: int, height: int, window_us: float, bin_us: float, bytes_per_bin: int = 1
) -> int:
    """Memory of the dense time-binned event volume this structure replaces."""
    return int(width * height * round(window_us / bin_us) * bytes_per_bin)


def footprint_reduction_factor(window_us: float, bin_us: float, depth: int) -> float:
    """Per-pixel element-count ratio of a dense volume vs the delta stacks.

    This is the conventional accounting (time bins vs stack entries); the
    byte ratio is half of it because stack entries are two bytes.
    """
    return (window_us / bin_us) / depth


@njit(cache=True, nogil=True)
def _ingest(deltas, last_t, wpos, fill, stale_left, stamp, counts, gen,
            xs, ys, ps, ts, width, depth, touched):
    n_touched = 0
    for i in range(len(ts)):
        pix = np.int64(ys[i]) * width + np.int64(xs[i])
        t = ts[i]
        p = ps[i]

        if stamp[pix] != gen:
            stamp[pix] = gen
            counts[pix] = 0
            touched[n_touched] = pix
            n_touched += 1
        if counts[pix] < 65535:
            counts[pix] += 1

        lt = last_t[pix]
        if lt < 0:
            # first-ever event of this pixel opens the interval chain
            last_t[pix] = t
            continue
        delta = t - lt
        if delta == 0:
            # duplicate timestamp: collapse into the previous entry,
            # keeping the later polarity (a zero value cannot carry a sign)
            if fill[pix] > 0:
                j = (wpos[pix] - 1) % depth
                mag = deltas[pix, j]
                if mag < 0:
                    mag = -mag
                deltas[pix, j] = mag if p > 0 else -mag
            continue
        mag = delta if delta < DELTA_MAX_US else DELTA_MAX_US
        deltas[pix, wpos[pix]] = mag if p > 0 else -mag
        wpos[pix] = (wpos[pix] + 1) % depth
        if fill[pix] < depth:
            fill[pix] += 1
        if delta > DELTA_MAX_US:
            # cannot belong to a fast blinker; poison until overwritten
            stale_left[pix] = depth
        elif stale_left[pix] > 0:
            stale_left[pix] -= 1
        last_t[pix] = t
    return n_touched


@njit(cache=True, nogil=True)
def _gather_stacks(deltas, wpos, fill, stale_left, pixels, depth,
                   out_stacks, out_lens, out_stale):
    for r in range(len(pixels)):
        pix = pixels[r]
        k = fill[pix]
        start = wpos[pix] if k == depth else 0
        for j in range(k):
            out_stacks[r, j] = deltas[pix, (start + j) % depth]
        out_lens[r] = k
        out_stale[r] = stale_left[pix] > 0


@njit(cache=True, nogil=True)
def _extract_periods(stacks, lens, stale, out_periods):
    """Period sums per row; returns per-row period counts.

    Scanning oldest to newest: entries up to the first positive-to-negative
    sign transition are dropped (their phase is unknown), then each period
    is the sum of |delta| from one negative-to-positive transition to the
    next, first positive value included. Same-sign runs are absorbed, which
    makes the sums telescope over double events. A trailing period is kept
    when the stack ends inside a negative run.
    """
    n_rows = len(lens)
    counts = np.zeros(n_rows, np.int64)
    for r in range(n_rows):
        k = lens[r]
        if stale[r] or k < 3:
            continue
        start = -1
        for i in range(1, k):
            if stacks[r, i - 1] > 0 and stacks[r, i] < 0:
                start = i
                break
        if start < 0:
            continue
        acc = np.int64(0)
        in_period = False
        prev_neg = True
        n = 0
        for j in range(start + 1, k):
            d = np.int64(stacks[r, j])
            if prev_neg and d > 0:
                if in_period:
                    out_periods[r, n] = acc
                    n += 1
                acc = 0
                in_period = True
            if in_period:
                acc += d if d > 0 else -d
            prev_neg = d < 0
        if in_period and prev_neg:
            out_periods[r, n] = acc
            n += 1
        counts[r] = n
    return counts


@njit(cache=True, nogil=True)
def _period_stats(periods, counts):
    """Per-row mean, median and population std of the period sums."""
    n_rows = len(counts)
    mean = np.zeros(n_rows, np.float64)
    median = np.zeros(n_rows, np.float64)
    std = np.zeros(n_rows, np.float64)
    buf = np.empty(periods.shape[1], np.int64)
    for r in range(n_rows):
        c = counts[r]
        if c == 0:
            continue
        s = 0.0
        for j in range(c):
            buf[j] = periods[r, j]
            s += periods[r, j]
        m = s / c
        v = 0.0
        for j in range(c):
            dv = periods[r, j] - m
            v += dv * dv
        # insertion sort; c is tiny (at most depth/2)
        for a in range(1, c):
            key = buf[a]
            b = a - 1
            while b >= 0 and buf[b] > key:
                buf[b + 1] = buf[b]
                b -= 1
            buf[b + 1] = key
        mean[r] = m
        std[r] = math.sqrt(v / c)
        if c % 2:
            median[r] = buf[c // 2]
        else:
            median[r] = 0.5 * (buf[c // 2 - 1] + buf[c // 2])
    return mean, median, std


class Sdtv:
    """W x H cyclic stacks of polarity-signed deltas, depth entries each."""

    def __init__(self, geometry: SensorGeometry, depth: int):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.geometry = geometry
        self.depth = int(depth)
        n = geometry.pixel_count
        # flat (N, D) layout keeps the depth dimension consecutive
        self.deltas = np.zeros((n, self.depth), np.int16)
        self.last_t = np.full(n, -1, np.int64)
        self.write_pos = np.zeros(n, np.int32)
        self.fill = np.zeros(n, np.int32)
        self.stale_left = np.zeros(n, np.int32)
        self._stamp = np.zeros(n, np.int64)
        self._counts = np.zeros(n, np.uint16)
        self._touched = np.empty(0, np.int64)
        self._gen = 0

    @property
    def footprint_bytes(self) -> int:
        return sdtv_footprint_bytes(self.geometry.width, self.geometry.height, self.depth)

    def ingest_batch_compact(self, batch: EventBatch) -> tuple[np.ndarray, np.ndarray]:
        """Ingest a batch; returns (touched pixel indices, their counts).

        Linear in the batch size; only stacks of pixels present in the
        batch are touched. Rejects out-of-bounds pixels without mutating.
        """
        ev = batch.events
        if len(ev):
            if int(ev.x.max()) >= self.geometry.width or int(ev.y.max()) >= self.geometry.height:
                raise ValueError("batch rejected: event pixel outside sensor bounds")
        if len(self._touched) < len(ev):
            self._touched = np.empty(max(256, 2 * len(ev)), np.int64)
        self._gen += 1
        n = _ingest(
            self.deltas, self.last_t, self.write_pos, self.fill, self.stale_left,
            self._stamp, self._counts, self._gen,
            ev.x, ev.y, ev.p, ev.t, self.geometry.width, self.depth, self._touched,
        )
        touched = self._touched[:n]
        return touched.copy(), self._counts[touched].copy()

    def ingest_batch(self, batch: EventBatch) -> CountFrame:
        """Ingest a batch and return its full event-count frame."""
        touched, counts = self.ingest_batch_compact(batch)
        frame = np.zeros(self.geometry.pixel_count, np.uint16)
        frame[touched] = counts
        return frame.reshape(self.geometry.height, self.geometry.width)

    def stack(self, x: int, y: int) -> np.ndarray:
        """Stored deltas of one pixel, oldest to newest."""
        pix = y * self.geometry.width + x
        k = int(self.fill[pix])
        start = int(self.write_pos[pix]) if k == self.depth else 0
        idx = (start + np.arange(k)) % self.depth
        return self.deltas[pix, idx].astype(np.int64)

    def is_stale(self, x: int, y: int) -> bool:
        return bool(self.stale_left[y * self.geometry.width + x] > 0)

    def gather(self, pixels: np.ndarray):
        """Snapshot the stacks of the given flat pixel indices.

        Returns (stacks oldest-to-newest (n, D), lengths, stale flags); this
        is the read copy that crosses pipeline stages.
        """
        n = len(pixels)
        stacks = np.zeros((n, self.depth), np.int16)
        lens = np.zeros(n, np.int64)
        stale = np.zeros(n, np.bool_)
        if n:
            _gather_stacks(self.deltas, self.write_pos, self.fill, self.stale_left,
                           pixels.astype(np.int64), self.depth, stacks, lens, stale)
        return stacks, lens, stale

    def dump_csv(self, path) -> None:
        """Debug dump of all non-empty stacks as x,y,slot,delta rows."""
        w = self.geometry.width
        with open(path, "w") as f:
            f.write("x,y,slot,delta\n")
            for pix in np.flatnonzero(self.fill > 0):
                y, x = divmod(int(pix), w)
                for slot, d in enumerate(self.stack(x, y)):
                    f.write(f"{x},{y},{slot},{int(d)}\n")


def extract_periods(stacks: np.ndarray, lens: np.ndarray, stale: np.ndarray):
    """Run period extraction over gathered stacks.

    Returns (periods (n, D//2) int64, per-row counts).
    """
    n, depth = stacks.shape
    out = np.zeros((n, max(1, depth // 2 + 1)), np.int64)
    counts = _extract_periods(stacks, lens.astype(np.int64), stale.astype(np.bool_), out)
    return out, counts


def pixel_periods(sdtv: Sdtv, pixel: tuple[int, int]) -> np.ndarray:
    """Complete period measurements (microseconds) for one pixel.

    Empty when the pixel is stale, has fewer than three deltas, or no
    complete period is present.
    """
    x, y = pixel
    pix = np.array([y * sdtv.geometry.width + x], np.int64)
    stacks, lens, stale = sdtv.gather(pix)
    periods, counts = extract_periods(stacks, lens, stale)
    return periods[0, : counts[0]].copy()
