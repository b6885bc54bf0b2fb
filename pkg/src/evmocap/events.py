"""Event primitives, stream batching and the EVT1 binary event file format.

Events are kept as structure-of-arrays (`EventArray`) so that file I/O and
volume construction stay vectorized. The on-disk record layout mirrors the
in-memory one: 16 bytes per event, little endian, 3 bytes of padding so the
timestamp is 8-byte aligned.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"EVT1"
HEADER_SIZE = 16
RECORD_SIZE = 16

# One event on disk: x(u16) y(u16) polarity(i8) pad(3) t(u64), little endian.
RECORD_DTYPE = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1", (3,)), ("t", "<u8")]
)

# Real-time batch durations per the pipeline contract; other values are
# allowed for offline analysis but draw a warning.
BATCH_DURATION_RT_RANGE_US = (1000, 2500)


class EventFileError(ValueError):
    """Malformed EVT1 file; `offset` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(EventFileError):
    pass


class TruncatedRecordError(EventFileError):
    pass


class InvalidPolarityError(EventFileError):
    pass


class NonMonotonicTimestampError(EventFileError):
    pass


class EventOrderError(ValueError):
    """Events handed to a writer/consumer were not time sorted."""


@dataclass(frozen=True)
class SensorGeometry:
    """Sensor resolution; `pixel_count` is W*H."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"sensor geometry must be >= 1x1, got {self.width}x{self.height}")

    @property
    def pixel_count(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class Event:
    """A single camera event. Polarity is -1 or +1, timestamp in microseconds."""

    x: int
    y: int
    polarity: int
    t: int

    def __post_init__(self):
        if self.polarity not in (-1, 1):
            raise ValueError(f"polarity must be -1 or +1, got {self.polarity}")
        if self.t < 0:
            raise ValueError("timestamp must be non-negative")


class EventArray:
    """Time-ordered events as parallel numpy arrays (x, y, p, t)."""

    __slots__ = ("x", "y", "p", "t")

    def __init__(self, x: np.ndarray, y: np.ndarray, p: np.ndarray, t: np.ndarray):
        n = len(t)
        if not (len(x) == len(y) == len(p) == n):
            raise ValueError("field arrays must have equal length")
        self.x = np.ascontiguousarray(x, dtype=np.uint16)
        self.y = np.ascontiguousarray(y, dtype=np.uint16)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        self.t = np.ascontiguousarray(t, dtype=np.int64)

    @classmethod
    def empty(cls) -> "EventArray":
        return cls(np.empty(0, np.uint16), np.empty(0, np.uint16),
                   np.empty(0, np.int8), np.empty(0, np.int64))

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "EventArray":
        evs = list(events)
        return cls(
            np.array([e.x for e in evs], np.uint16),
            np.array([e.y for e in evs], np.uint16),
            np.array([e.polarity for e in evs], np.int8),
            np.array([e.t for e in evs], np.int64),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, sl) -> "EventArray":
        return EventArray(self.x[sl], self.y[sl], self.p[sl], self.t[sl])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventArray):
            return NotImplemented
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
            and np.array_equal(self.t, other.t)
        )

    def to_events(self) -> list[Event]:
        return [
            Event(int(x), int(y), int(p), int(t))
            for x, y, p, t in zip(self.x, self.y, self.p, self.t)
        ]

    def is_sorted(self) -> bool:
        return len(self.t) < 2 or bool(np.all(np.diff(self.t) >= 0))

    @staticmethod
    def concatenate(parts: Sequence["EventArray"]) -> "EventArray":
        if not parts:
            return EventArray.empty()
        return EventArray(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.p for p in parts]),
            np.concatenate([p.t for p in parts]),
        )


@dataclass(frozen=True)
class EventBatch:
    """Events of one half-open time window [t_start, t_end)."""

    events: EventArray
    t_start: int
    t_end: int

    def __len__(self) -> int:
        return len(self.events)


def _as_event_array(events) -> EventArray:
    if isinstance(events, EventArray):
        return events
    return EventArray.from_events(events)


def write_event_file(path, geometry: SensorGeometry, events) -> None:
    """Write events to `path` in the EVT1 format.

    Rejects unsorted input, invalid polarities and out-of-bounds pixels.
    """
    arr = _as_event_array(events)
    if not arr.is_sorted():
        bad = int(np.argmax(np.diff(arr.t) < 0))
        raise EventOrderError(
            f"events not sorted by timestamp (first regression after index {bad})"
        )
    if len(arr):
        bad_p = (arr.p != 1) & (arr.p != -1)
        if bad_p.any():
            raise ValueError(f"invalid polarity at index {int(np.argmax(bad_p))}")
        if int(arr.x.max()) >= geometry.width or int(arr.y.max()) >= geometry.height:
            raise ValueError("event pixel outside sensor geometry")

    rec = np.zeros(len(arr), dtype=RECORD_DTYPE)
    rec["x"] = arr.x
    rec["y"] = arr.y
    rec["p"] = arr.p
    rec["t"] = arr.t.astype(np.uint64)

    header = MAGIC + struct.pack("<HH", geometry.width, geometry.height) + b"\x00" * 8
    with open(path, "wb") as f:
        f.write(header)
        rec.tofile(f)


def read_event_file(path) -> tuple[SensorGeometry, EventArray]:
    """Read an EVT1 file; returns (geometry, events) in file order.

    Raises a distinct `EventFileError` subclass naming the byte offset for
    bad magic, truncated records, invalid polarity bytes and timestamp
    regressions.
    """
    with open(path, "rb") as f:
        header = f.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE or header[:4] != MAGIC:
            raise BadMagicError("not an EVT1 file (bad magic)", 0)
        width, height = struct.unpack("<HH", header[4:8])
        body = np.fromfile(f, dtype=np.uint8)

    tail = len(body) % RECORD_SIZE
    if tail:
        raise TruncatedRecordError(
            "truncated record", HEADER_SIZE + len(body) - tail
        )
    rec = body.view(RECORD_DTYPE)

    p = rec["p"]
    bad = (p != 1) & (p != -1)
    if bad.any():
        i = int(np.argmax(bad))
        raise InvalidPolarityError(
            f"invalid polarity {int(p[i])}", HEADER_SIZE + i * RECORD_SIZE
        )
    t = rec["t"].astype(np.int64)
    if len(t) > 1:
        reg = np.diff(t) < 0
        if reg.any():
            i = int(np.argmax(reg)) + 1
            raise NonMonotonicTimestampError(
                "non-monotonic timestamp", HEADER_SIZE + i * RECORD_SIZE
            )

    geometry = SensorGeometry(width, height)
    arr = EventArray(rec["x"].copy(), rec["y"].copy(), p.copy(), t)
    return geometry, arr


def batch_stream(
    events,
    batch_duration_us: int,
    t_origin: int = 0,
    t_end: int | None = None,
) -> Iterator[EventBatch]:
    """Split a sorted event stream into fixed-duration half-open batches.

    Batch i covers [t_origin + i*d, t_origin + (i+1)*d). Empty batches are
    emitted; the final batch is truncated at `t_end` when that falls inside
    a window. `t_end` defaults to just past the last event.
    """
    if batch_duration_us <= 0:
        raise ValueError("batch duration must be positive")
    lo, hi = BATCH_DURATION_RT_RANGE_US
    if not lo <= batch_duration_us <= hi:
        warnings.warn(
            f"batch duration {batch_duration_us} us outside the real-time "
            f"range [{lo}, {hi}] us; fine for offline analysis",
            stacklevel=2,
        )
    arr = _as_event_array(events)
    if not arr.is_sorted():
        raise EventOrderError("events not sorted by timestamp")

    d = int(batch_duration_us)
    if t_end is None:
        # derived end: round up to a full final window
        data_end = int(arr.t[-1]) + 1 if len(arr) else t_origin
        t_end = t_origin + d * (-(-(data_end - t_origin) // d))
    if t_end <= t_origin:
        return

    n_batches = -(-(t_end - t_origin) // d)  # ceil
    edges = t_origin + d * np.arange(n_batches + 1, dtype=np.int64)
    edges[-1] = min(int(edges[-1]), t_end)
    idx = np.searchsorted(arr.t, edges)
    for i in range(n_batches):
        yield EventBatch(arr[idx[i]:idx[i + 1]], int(edges[i]), int(edges[i + 1]))
