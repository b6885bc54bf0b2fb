"""Three-stage processing pipeline with double-buffered handoffs.

Stage 1 copies source events into a batch buffer, stage 2 converts the
batch into the persistent delta-time volume and snapshots the candidate
stacks, stage 3 detects LEDs, solves the pose and writes the sink record.
Each stage boundary owns exactly two buffers: the producer writes one
while the consumer holds the other, and ownership changes only at
generation boundaries through a one-deep mailbox.

Backpressure is drop-oldest: a producer publishing into an occupied
mailbox swaps buffers and the stale batch is counted as dropped, so the
producing side never waits on a stalled consumer. Lossless mode (the
offline default) blocks instead, which preserves every batch and makes
the threaded run byte-identical to the single-threaded reference.
"""

from __future__ import annotations

import json
import sys
import threading
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .camera import DsIntrinsics, ProjectionDomainError, undistort_to_normalized
from .detector import (
    CandidateSnapshot,
    DetectorConfig,
    LedRig,
    TrackerParams,
    detect_snapshot,
    rate_threshold,
)
from .events import EventArray, EventBatch, SensorGeometry, batch_stream, read_event_file
from .pnp import SOLVERS, to_world
from .sdtv import Sdtv, min_depth
from .transforms import RigidTransform, quat_canonical


class RobustnessWarning(UserWarning):
    """Configuration is legal but may degrade detection robustness."""


# ---------------------------------------------------------------------------
# Sources


class ArrayEventSource:
    """Batches an in-memory event stream; optionally paced to real time."""

    def __init__(self, events: EventArray, geometry: SensorGeometry,
                 batch_duration_us: int, t_end: int | None = None,
                 realtime: bool = False):
        self.events = events
        self.geometry = geometry
        self.batch_duration_us = batch_duration_us
        self.t_end = t_end
        self.realtime = realtime

    def __iter__(self):
        start = time.perf_counter()
        for batch in batch_stream(self.events, self.batch_duration_us,
                                  t_end=self.t_end):
            if self.realtime:
                due = start + batch.t_end * 1e-6
                lag = due - time.perf_counter()
                if lag > 0:
                    time.sleep(lag)
            yield batch


class FileEventSource(ArrayEventSource):
    def __init__(self, path, batch_duration_us: int, t_end: int | None = None,
                 realtime: bool = False):
        geometry, events = read_event_file(path)
        super().__init__(events, geometry, batch_duration_us, t_end, realtime)


# ---------------------------------------------------------------------------
# Sinks


@dataclass(frozen=True)
class PoseRecord:
    t_us: int
    position_m: np.ndarray      # world frame
    q_wxyz: np.ndarray
    leds_used: int
    reproj_rmse_px: float
    latency_us: int | None = None

    def to_json(self) -> str:
        return json.dumps({
            "t_us": self.t_us,
            "frame": "world",
            "position_m": [float(v) for v in self.position_m],
            "quaternion_wxyz": [float(v) for v in self.q_wxyz],
            "leds_used": self.leds_used,
            "reproj_rmse_px": float(self.reproj_rmse_px),
            "latency_us": self.latency_us,
        })

    def to_csv_row(self) -> str:
        lat = "" if self.latency_us is None else str(self.latency_us)
        vals = [str(self.t_us), "world",
                *(repr(float(v)) for v in self.position_m),
                *(repr(float(v)) for v in self.q_wxyz),
                str(self.leds_used), repr(float(self.reproj_rmse_px)), lat]
        return ",".join(vals)


CSV_HEADER = ("t_us,frame,px,py,pz,qw,qx,qy,qz,leds_used,reproj_rmse_px,latency_us")


class JsonlPoseSink:
    def __init__(self, target):
        self._own = isinstance(target, (str, bytes)) or hasattr(target, "__fspath__")
        self._f = open(target, "w") if self._own else target

    def write(self, record: PoseRecord):
        self._f.write(record.to_json() + "\n")

    def close(self):
        if self._own:
            self._f.close()


class CsvPoseSink:
    def __init__(self, target):
        self._own = isinstance(target, (str, bytes)) or hasattr(target, "__fspath__")
        self._f = open(target, "w") if self._own else target
        self._f.write(CSV_HEADER + "\n")

    def write(self, record: PoseRecord):
        self._f.write(record.to_csv_row() + "\n")

    def close(self):
        if self._own:
            self._f.close()


class ListPoseSink:
    def __init__(self):
        self.records: list[PoseRecord] = []

    def write(self, record: PoseRecord):
        self.records.append(record)

    def close(self):
        pass


def open_sink(spec: str):
    if spec == "-":
        return JsonlPoseSink(sys.stdout)
    if str(spec).endswith(".csv"):
        return CsvPoseSink(spec)
    return JsonlPoseSink(spec)


# ---------------------------------------------------------------------------
# Configuration and stats


@dataclass
class PipelineConfig:
    rig: LedRig
    intrinsics: DsIntrinsics
    t_cw: RigidTransform
    batch_duration_us: int = 2500
    sdtv_window_us: int = 2500
    solver: str = "sqpnp"
    detector: DetectorConfig | None = None
    seed: int = 0
    lossless: bool = True            # offline default; False enables drop-oldest
    emit_latency: bool = False       # measured latency in sink records

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.detector is None:
            self.detector = DetectorConfig(
                batch_duration_us=self.batch_duration_us,
                tracker=TrackerParams(batch_us=self.batch_duration_us))
        batch_rate = 1e6 / self.batch_duration_us
        if batch_rate > self.rig.f_min / 2:
            warnings.warn(RobustnessWarning(
                f"batch rate {batch_rate:.0f} Hz exceeds half the slowest "
                f"blink frequency ({self.rig.f_min:.0f} Hz); at least one "
                "full period per batch is no longer guaranteed"),
                stacklevel=2)

    @property
    def depth(self) -> int:
        window = max(self.sdtv_window_us, self.batch_duration_us)
        return min_depth(window, self.rig.f_max)

    @property
    def threshold(self) -> int:
        return rate_threshold(self.batch_duration_us, self.rig.f_min,
                              self.detector.beta)


@dataclass
class PipelineStats:
    produced: int = 0
    processed: int = 0
    dropped: int = 0
    poses: int = 0
    stage1_us: list = field(default_factory=list)
    stage2_us: list = field(default_factory=list)
    stage3_us: list = field(default_factory=list)
    latency_us: list = field(default_factory=list)
    led_detections: dict = field(default_factory=dict)
    data_duration_us: int = 0
    wall_s: float = 0.0
    error: str | None = None

    def note_detection(self, led_ids):
        for i in led_ids:
            self.led_detections[i] = self.led_detections.get(i, 0) + 1

    @staticmethod
    def _pct(xs, q):
        return float(np.percentile(xs, q)) if xs else float("nan")

    def pose_rate_hz(self) -> float:
        if self.data_duration_us <= 0:
            return 0.0
        return self.poses / (self.data_duration_us * 1e-6)

    def wall_pose_rate_hz(self) -> float:
        return self.poses / self.wall_s if self.wall_s > 0 else 0.0

    def summary(self) -> str:
        lines = [
            f"batches produced/processed/dropped: "
            f"{self.produced}/{self.processed}/{self.dropped}",
            f"poses: {self.poses} "
            f"({self.pose_rate_hz():.1f} Hz of data time, "
            f"{self.wall_pose_rate_hz():.1f} Hz wall)",
        ]
        for name, xs in (("stage1", self.stage1_us), ("stage2", self.stage2_us),
                         ("stage3", self.stage3_us), ("latency", self.latency_us)):
            if xs:
                lines.append(
                    f"{name}: median {self._pct(xs, 50):.0f} us, "
                    f"p90 {self._pct(xs, 90):.0f} us, p99 {self._pct(xs, 99):.0f} us")
        if self.processed:
            rates = {k: v / self.processed for k, v in sorted(self.led_detections.items())}
            lines.append("per-LED detection rate: "
                         + ", ".join(f"{k}: {v:.3f}" for k, v in rates.items()))
        if self.error:
            lines.append(f"stopped on error: {self.error}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Buffers and mailboxes


class _BatchBuffer:
    def __init__(self, capacity=1 << 14):
        self._alloc(capacity)
        self.n = 0
        self.t_start = 0
        self.t_end = 0
        self.generation = -1
        self.arrival = 0.0

    def _alloc(self, capacity):
        self.capacity = capacity
        self.x = np.empty(capacity, np.uint16)
        self.y = np.empty(capacity, np.uint16)
        self.p = np.empty(capacity, np.int8)
        self.t = np.empty(capacity, np.int64)

    def load(self, batch: EventBatch, generation: int):
        n = len(batch)
        if n > self.capacity:
            cap = self.capacity
            while cap < n:
                cap *= 2
            self._alloc(cap)
        ev = batch.events
        self.x[:n] = ev.x
        self.y[:n] = ev.y
        self.p[:n] = ev.p
        self.t[:n] = ev.t
        self.n = n
        self.t_start = batch.t_start
        self.t_end = batch.t_end
        self.generation = generation

    def as_batch(self) -> EventBatch:
        return EventBatch(
            EventArray(self.x[:self.n], self.y[:self.n],
                       self.p[:self.n], self.t[:self.n]),
            self.t_start, self.t_end)


class _SnapBuffer:
    def __init__(self, depth: int, capacity=1024):
        self.depth = depth
        self._alloc(capacity)
        self.n = 0
        self.t_start = 0
        self.t_end = 0
        self.generation = -1
        self.arrival = 0.0

    def _alloc(self, capacity):
        self.capacity = capacity
        self.pixels = np.empty(capacity, np.int64)
        self.counts = np.empty(capacity, np.int64)
        self.stacks = np.zeros((capacity, self.depth), np.int16)
        self.lens = np.zeros(capacity, np.int64)
        self.stale = np.zeros(capacity, np.bool_)

    def ensure(self, n):
        if n > self.capacity:
            cap = self.capacity
            while cap < n:
                cap *= 2
            self._alloc(cap)

    def snapshot(self, geometry) -> CandidateSnapshot:
        return CandidateSnapshot(
            self.t_start, self.t_end, geometry,
            self.pixels[:self.n], self.counts[:self.n],
            self.stacks[:self.n], self.lens[:self.n], self.stale[:self.n])


class _Mailbox:
    """One-deep handoff slot; producers can replace (drop-oldest)."""

    def __init__(self):
        self._item = None
        self._closed = False
        self._cond = threading.Condition()

    def put(self, item, drop_oldest: bool):
        with self._cond:
            if drop_oldest:
                old = self._item
                self._item = item
                self._cond.notify_all()
                return old
            while self._item is not None and not self._closed:
                self._cond.wait()
            self._item = item
            self._cond.notify_all()
            return None

    def take(self):
        with self._cond:
            while self._item is None and not self._closed:
                self._cond.wait()
            item, self._item = self._item, None
            self._cond.notify_all()
            return item

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class _FreePool:
    def __init__(self, buffers):
        self._items = list(buffers)
        self._cond = threading.Condition()

    def get(self):
        with self._cond:
            while not self._items:
                self._cond.wait()
            return self._items.pop()

    def put(self, buf):
        with self._cond:
            self._items.append(buf)
            self._cond.notify_all()


# ---------------------------------------------------------------------------
# Stage bodies (shared between the threaded run and the reference run)


class _Stage2:
    """Owns the persistent volume; converts batches into candidate snapshots."""

    def __init__(self, config: PipelineConfig, geometry: SensorGeometry):
        self.sdtv = Sdtv(geometry, config.depth)
        self.threshold = config.threshold

    def convert(self, buf: _BatchBuffer, out: _SnapBuffer):
        touched, counts = self.sdtv.ingest_batch_compact(buf.as_batch())
        keep = counts >= self.threshold
        pixels = touched[keep]
        out.ensure(len(pixels))
        n = len(pixels)
        out.n = n
        out.pixels[:n] = pixels
        out.counts[:n] = counts[keep]
        if n:
            from .sdtv import _gather_stacks

            _gather_stacks(self.sdtv.deltas, self.sdtv.write_pos, self.sdtv.fill,
                           self.sdtv.stale_left, pixels, self.sdtv.depth,
                           out.stacks[:n], out.lens[:n], out.stale[:n])
        out.t_start = buf.t_start
        out.t_end = buf.t_end
        out.generation = buf.generation
        out.arrival = buf.arrival


class _Stage3:
    """Detection, association, tracking, pose solve and sink output."""

    def __init__(self, config: PipelineConfig, geometry: SensorGeometry, sink):
        self.config = config
        self.geometry = geometry
        self.sink = sink
        self.tracks = {}
        self.rng = np.random.default_rng(config.seed)
        self.solver = SOLVERS[config.solver]
        self.body = {m.id: m.position for m in config.rig.markers}

    def process(self, snap: CandidateSnapshot, arrival: float,
                stats: PipelineStats) -> None:
        result = detect_snapshot(snap, self.config.rig, self.config.detector,
                                 self.tracks, self.rng)
        stats.note_detection(result.centroids.keys())
        if not result.pose_sufficient:
            return
        led_ids = sorted(result.centroids)
        pixels = np.stack([result.centroids[i] for i in led_ids])
        try:
            xy = undistort_to_normalized(pixels, self.config.intrinsics)
        except ProjectionDomainError:
            return
        pts = np.stack([self.body[i] for i in led_ids])
        pose = self.solver((pts, xy), t_us=snap.t_start)
        world = to_world(pose.transform, self.config.t_cw)
        latency = None
        if self.config.emit_latency:
            latency = int((time.perf_counter() - arrival) * 1e6)
        record = PoseRecord(
            t_us=snap.t_start,
            position_m=world.t,
            q_wxyz=quat_canonical(world.q),
            leds_used=len(led_ids),
            reproj_rmse_px=pose.reproj_rmse * self.config.intrinsics.focal_mean,
            latency_us=latency,
        )
        self.sink.write(record)
        stats.poses += 1
        stats.latency_us.append((time.perf_counter() - arrival) * 1e6)


# ---------------------------------------------------------------------------
# Runners


def run(source, config: PipelineConfig, sink) -> PipelineStats:
    """Threaded three-stage run; returns the collected statistics."""
    stats = PipelineStats()
    geometry = source.geometry
    stage2 = _Stage2(config, geometry)
    stage3 = _Stage3(config, geometry, sink)
    depth = config.depth

    mbox12 = _Mailbox()
    mbox23 = _Mailbox()
    pool12 = _FreePool([_BatchBuffer(), _BatchBuffer()])
    pool23 = _FreePool([_SnapBuffer(depth), _SnapBuffer(depth)])
    drop = not config.lossless
    stop = threading.Event()
    t_begin = time.perf_counter()

    drops = [0, 0]  # per boundary, merged after join

    def abort():
        stop.set()
        mbox12.close()
        mbox23.close()

    def stage1_body():
        gen = 0
        stash = None
        try:
            for batch in source:
                if stop.is_set():
                    break
                t0 = time.perf_counter()
                buf = stash if stash is not None else pool12.get()
                stash = None
                buf.load(batch, gen)
                buf.arrival = time.perf_counter()
                stats.produced += 1
                stats.data_duration_us += batch.t_end - batch.t_start
                dropped = mbox12.put(buf, drop)
                if dropped is not None:
                    stash = dropped
                    drops[0] += 1
                gen += 1
                stats.stage1_us.append((time.perf_counter() - t0) * 1e6)
        except Exception as e:
            stats.error = stats.error or f"{type(e).__name__}: {e}"
            abort()
        finally:
            mbox12.close()

    def stage2_body():
        try:
            while True:
                buf = mbox12.take()
                if buf is None:
                    break
                t0 = time.perf_counter()
                out = pool23.get()
                try:
                    stage2.convert(buf, out)
                finally:
                    pool12.put(buf)
                dropped = mbox23.put(out, drop)
                if dropped is not None:
                    pool23.put(dropped)
                    drops[1] += 1
                stats.stage2_us.append((time.perf_counter() - t0) * 1e6)
        except Exception as e:
            stats.error = stats.error or f"{type(e).__name__}: {e}"
            abort()
        finally:
            mbox23.close()

    def stage3_body():
        while True:
            out = mbox23.take()
            if out is None:
                break
            t0 = time.perf_counter()
            try:
                stage3.process(out.snapshot(geometry), out.arrival, stats)
            except Exception as e:  # sink failure: stop with partial stats
                stats.error = f"{type(e).__name__}: {e}"
                pool23.put(out)
                abort()
                break
            stats.processed += 1
            pool23.put(out)
            stats.stage3_us.append((time.perf_counter() - t0) * 1e6)

    threads = [threading.Thread(target=f, name=n, daemon=True)
               for f, n in ((stage1_body, "evmocap-source"),
                            (stage2_body, "evmocap-convert"),
                            (stage3_body, "evmocap-detect"))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stats.dropped = drops[0] + drops[1]
    stats.wall_s = time.perf_counter() - t_begin
    return stats


def run_reference(source, config: PipelineConfig, sink) -> PipelineStats:
    """Single-threaded execution of the same three stages, in order.

    With a lossless threaded run and the same seed this produces the same
    pose records byte for byte.
    """
    stats = PipelineStats()
    geometry = source.geometry
    stage2 = _Stage2(config, geometry)
    stage3 = _Stage3(config, geometry, sink)
    buf = _BatchBuffer()
    out = _SnapBuffer(config.depth)
    t_begin = time.perf_counter()
    gen = 0
    for batch in source:
        t0 = time.perf_counter()
        buf.load(batch, gen)
        buf.arrival = time.perf_counter()
        stats.produced += 1
        stats.data_duration_us += batch.t_end - batch.t_start
        t1 = time.perf_counter()
        stage2.convert(buf, out)
        t2 = time.perf_counter()
        try:
            stage3.process(out.snapshot(geometry), out.arrival, stats)
        except Exception as e:
            stats.error = f"{type(e).__name__}: {e}"
            break
        t3 = time.perf_counter()
        stats.processed += 1
        stats.stage1_us.append((t1 - t0) * 1e6)
        stats.stage2_us.append((t2 - t1) * 1e6)
        stats.stage3_us.append((t3 - t2) * 1e6)
        gen += 1
    stats.wall_s = time.perf_counter() - t_begin
    return stats
