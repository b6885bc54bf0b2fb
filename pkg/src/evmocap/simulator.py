"""Synthetic event streams of a blinking-LED rig on a trajectory.

Each LED is an ideal square wave (its physical switching time is far below
the microsecond timestamp resolution); every on/off edge illuminates a
small image blob and each blob pixel fires an event with a probability
shaped by the falloff profile. Noise knobs cover missed transitions,
false double events, spurious events inside blobs and across the sensor,
and timestamp jitter. Output is a sorted event stream plus ground-truth
poses at a fixed cadence, deterministic per seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .camera import DsIntrinsics, project, project_valid_mask
from .detector import LedSpec, validate_rig
from .events import EventArray, SensorGeometry
from .transforms import RigidTransform, quats_to_matrices, slerp_many

US = 1_000_000


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Per-pixel event generation model; all knobs are configuration, not
    claims about a particular sensor."""

    beta_sim: float = 0.99          # transition detection probability
    double_prob: float = 0.1        # extra event per detected transition
    double_lag_us: float = 15.0
    double_lag_jitter_us: float = 5.0
    spurious_blob_rate: float = 1000.0   # events / pixel / s inside blobs
    spurious_bg_rate: float = 10.0       # events / pixel / s elsewhere
    timestamp_jitter_us: float = 2.0
    blob_radius_px: float = 2.0
    falloff: str = "cosine"         # "cosine" | "flat"

    def __post_init__(self):
        if not 0 <= self.beta_sim <= 1 or not 0 <= self.double_prob <= 1:
            raise ValueError("probabilities must be in [0, 1]")
        if min(self.spurious_blob_rate, self.spurious_bg_rate) < 0:
            raise ValueError("rates must be non-negative")
        if self.falloff not in ("cosine", "flat"):
            raise ValueError("falloff must be 'cosine' or 'flat'")

    @classmethod
    def noiseless(cls, **kw) -> "NoiseModel":
        base = dict(beta_sim=1.0, double_prob=0.0, spurious_blob_rate=0.0,
                    spurious_bg_rate=0.0, timestamp_jitter_us=0.0)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class Trajectory:
    """Pose samples T_WB(t), linearly interpolated (slerp for rotation)."""

    kind: str
    times_us: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.times_us) <= 0):
            raise ValueError("trajectory samples must be strictly time-increasing")

    def sample(self, ts_us: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Positions (n, 3) and quaternions (n, 4) at the given times."""
        ts = np.clip(np.asarray(ts_us, np.float64),
                     self.times_us[0], self.times_us[-1])
        if len(self.times_us) == 1:
            n = len(ts)
            return (np.repeat(self.positions, n, axis=0),
                    np.repeat(self.quaternions, n, axis=0))
        hi = np.clip(np.searchsorted(self.times_us, ts, side="right"),
                     1, len(self.times_us) - 1)
        lo = hi - 1
        t0, t1 = self.times_us[lo], self.times_us[hi]
        u = (ts - t0) / (t1 - t0)
        pos = self.positions[lo] + (self.positions[hi] - self.positions[lo]) * u[:, None]
        quat = slerp_many(self.quaternions[lo], self.quaternions[hi], u)
        return pos, quat

    def pose(self, t_us: float) -> RigidTransform:
        pos, quat = self.sample(np.array([t_us]))
        return RigidTransform(quat[0], pos[0])


# The default world frame: the camera sits at the origin with its optical
# axis along +x_W; body markers face back toward the camera.
DEFAULT_T_CW = RigidTransform.from_matrix(
    np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]), np.zeros(3))
DEFAULT_BODY_Q = RigidTransform.from_matrix(
    np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]), np.zeros(3)).q


def default_intrinsics(lens: str = "25mm") -> DsIntrinsics:
    """VGA sensor with the focal length implied by the stated field of view
    (22 deg for the 25 mm lens, 11 deg for the 50 mm one)."""
    fov_deg = {"25mm": 22.0, "50mm": 11.0}[lens]
    width, height = 640, 480
    fx = (width / 2) / math.tan(math.radians(fov_deg) / 2)
    return DsIntrinsics(fx, fx, (width - 1) / 2, (height - 1) / 2, 0.0, 0.0,
                        SensorGeometry(width, height))


def default_rig(side_m: float = 0.08, center_raise_m: float = 0.015):
    """Five markers at the measured board frequencies and duty cycles:
    square corners plus a raised center to break planarity."""
    freqs = (1730.0, 1980.0, 2290.0, 2610.0, 2860.0)
    duties = (0.0066, 0.0075, 0.0087, 0.0099, 0.0109)
    h = side_m / 2
    positions = [(-h, -h, 0.0), (h, -h, 0.0), (h, h, 0.0), (-h, h, 0.0),
                 (0.0, 0.0, center_raise_m)]
    from .detector import LedRig

    return LedRig([LedSpec(i, p, f, d)
                   for i, (p, f, d) in enumerate(zip(positions, freqs, duties))])


def make_trajectory(kind: str, **params) -> Trajectory:
    """Build a trajectory: `static` (fixed pose), `rectangle` (rounded
    rectangle in the world x-y plane at constant speed), or `csv`."""
    if kind == "static":
        pose = params.get("pose")
        if pose is None:
            distance = params.get("distance_m", 2.0)
            pose = RigidTransform(DEFAULT_BODY_Q, np.array([distance, 0.0, 0.0]))
        return Trajectory("static", np.array([0.0]), pose.t[None, :], pose.q[None, :])

    if kind == "rectangle":
        x0, x1 = params.get("x_range_m", (2.0, 3.0))
        y0, y1 = params.get("y_range_m", (-0.1, 0.1))
        height = params.get("height_m", 0.0)
        speed = params.get("speed_m_s", 0.5)
        radius = params.get("corner_radius_m", 0.05)
        duration_s = params.get("duration_s", 10.0)
        q = params.get("orientation_q", DEFAULT_BODY_Q)
        radius = min(radius, (x1 - x0) / 2, (y1 - y0) / 2)

        # dense rounded-rectangle polyline, walked at constant speed
        pts = []
        corners = [(x1 - radius, y0 + radius, -0.5 * np.pi),
                   (x1 - radius, y1 - radius, 0.0),
                   (x0 + radius, y1 - radius, 0.5 * np.pi),
                   (x0 + radius, y0 + radius, np.pi)]
        for cx, cy, a0 in corners:
            for a in np.linspace(a0, a0 + 0.5 * np.pi, 16, endpoint=False):
                pts.append((cx + radius * np.cos(a), cy + radius * np.sin(a)))
        poly = np.array(pts)
        seg = np.linalg.norm(np.diff(np.vstack([poly, poly[:1]]), axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        total = arc[-1]

        times = np.arange(0.0, duration_s * US + 1, 1000.0)  # 1 kHz samples
        s = (speed * times / US) % total
        idx = np.clip(np.searchsorted(arc, s, side="right") - 1, 0, len(poly) - 1)
        nxt = (idx + 1) % len(poly)
        u = (s - arc[idx]) / np.maximum(seg[idx], 1e-12)
        xy = poly[idx] + (poly[nxt] - poly[idx]) * u[:, None]
        positions = np.column_stack([xy, np.full(len(times), height)])
        quats = np.repeat(np.asarray(q, np.float64)[None, :], len(times), axis=0)
        return Trajectory("rectangle", times, positions, quats)

    if kind == "csv":
        path = params["path"]
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return Trajectory("csv", data[:, 0], data[:, 1:4], data[:, 4:8])

    raise ValueError(f"unknown trajectory kind {kind!r}")


def write_trajectory_csv(path, traj: Trajectory) -> None:
    with open(path, "w") as f:
        f.write("t_us,x,y,z,qw,qx,qy,qz\n")
        for t, p, q in zip(traj.times_us, traj.positions, traj.quaternions):
            row = [float(t), *map(float, p), *map(float, q)]
            f.write(",".join(repr(v) for v in row) + "\n")


@dataclass(frozen=True)
class SimScene:
    rig: object                    # LedRig or a plain sequence of LedSpec
    intrinsics: DsIntrinsics
    t_cw: RigidTransform
    trajectory: Trajectory
    noise: NoiseModel
    duration_s: float
    truth_interval_us: int = 2500
    phases: tuple | None = None    # per-marker phase (us); None randomizes

    @property
    def markers(self) -> tuple:
        return tuple(getattr(self.rig, "markers", self.rig))

    def validate(self):
        from .detector import ValidationIssue

        issues = list(validate_rig(self.markers))
        geom = self.intrinsics.geometry
        ts = np.arange(0, max(self.duration_s, 0.01) * US, 10_000.0)
        pos, quat = self.trajectory.sample(ts)
        rot_wb = quats_to_matrices(quat)
        rot_cw = self.t_cw.matrix
        for m in self.markers:
            pw = rot_wb @ m.position + pos
            pc = pw @ rot_cw.T + self.t_cw.t
            if not project_valid_mask(pc, self.intrinsics).all():
                issues.append(ValidationIssue(
                    "marker-visibility", "error",
                    f"marker {m.id} behind the camera on the trajectory"))
                continue
            uv = project(pc, self.intrinsics)
            inside = ((uv[:, 0] >= 0) & (uv[:, 0] <= geom.width - 1)
                      & (uv[:, 1] >= 0) & (uv[:, 1] <= geom.height - 1))
            if not inside.all():
                t_bad = ts[np.argmin(inside)] / US
                issues.append(ValidationIssue(
                    "marker-visibility", "warning",
                    f"marker {m.id} leaves the image near t={t_bad:.2f} s"))
        return issues


@dataclass(frozen=True)
class TruthRecord:
    t_us: int
    position: np.ndarray      # T_WB translation, world frame
    q_wxyz: np.ndarray
    marker_pixels: dict[int, tuple[float, float]]


def _marker_camera_positions(scene: SimScene, marker: LedSpec,
                             ts_us: np.ndarray) -> np.ndarray:
    pos, quat = scene.trajectory.sample(ts_us)
    rot_wb = quats_to_matrices(quat)
    pw = rot_wb @ marker.position + pos
    return pw @ scene.t_cw.matrix.T + scene.t_cw.t


def _falloff(noise: NoiseModel, dist: np.ndarray) -> np.ndarray:
    """Detection-probability profile across the blob.

    The cosine profile keeps a saturated core (full detection out to 70 %
    of the radius, like a bright pulsed LED spot) and tapers to zero at
    the rim.
    """
    r = noise.blob_radius_px
    if r <= 0:
        return np.ones_like(dist)
    if noise.falloff == "flat":
        return (dist <= r).astype(np.float64)
    core = 0.7 * r
    taper = np.cos(0.5 * np.pi * np.clip((dist - core) / (r - core), 0.0, 1.0))
    return np.where(dist <= r, taper, 0.0)


def _blob_pixel_sets(centroids: np.ndarray, radius: float, geom: SensorGeometry):
    """Union of pixels within the blob radius of each centroid."""
    if radius <= 0:
        px = np.round(centroids).astype(np.int64)
        return px
    r_int = int(math.ceil(radius))
    out = []
    base = np.round(centroids).astype(np.int64)
    for dx in range(-r_int, r_int + 1):
        for dy in range(-r_int, r_int + 1):
            cand = base + np.array([dx, dy])
            d = np.linalg.norm(cand - centroids, axis=1)
            keep = (d <= radius) & (cand[:, 0] >= 0) & (cand[:, 1] >= 0) \
                & (cand[:, 0] < geom.width) & (cand[:, 1] < geom.height)
            out.append(cand[keep])
    return np.unique(np.concatenate(out), axis=0) if out else base


def simulate(scene: SimScene, seed: int) -> tuple[EventArray, list[TruthRecord]]:
    """Render the scene into a sorted event stream plus ground truth.

    Deterministic for a given (scene, seed). Raises SceneError if a marker
    falls outside the valid projection domain anywhere on the trajectory.
    """
    rng = np.random.default_rng(seed)
    noise = scene.noise
    geom = scene.intrinsics.geometry
    duration_us = scene.duration_s * US

    xs, ys, ps, ts = [], [], [], []

    r_int = max(0, int(math.ceil(noise.blob_radius_px)))
    grid = np.array([(dx, dy)
                     for dx in range(-r_int, r_int + 1)
                     for dy in range(-r_int, r_int + 1)], np.int64).reshape(-1, 2)

    for mi, marker in enumerate(scene.markers):
        period = US / marker.frequency_hz
        on_len = marker.duty_cycle * period
        phase = (rng.uniform(0, period) if scene.phases is None
                 else float(scene.phases[mi]))
        n_periods = int(duration_us // period) + 2
        on_times = phase + period * np.arange(n_periods)
        edges = np.empty(2 * n_periods)
        edges[0::2] = on_times
        edges[1::2] = on_times + on_len
        pol = np.empty(2 * n_periods, np.int8)
        pol[0::2] = 1
        pol[1::2] = -1
        keep = edges < duration_us
        edges, pol = edges[keep], pol[keep]

        pc = _marker_camera_positions(scene, marker, edges)
        if not project_valid_mask(pc, scene.intrinsics).all():
            raise SceneError(f"marker {marker.id} leaves the valid projection domain")
        uv = project(pc, scene.intrinsics)

        # blob pixels around each edge's centroid, all offsets at once
        base = np.round(uv).astype(np.int64)
        px = base[:, None, 0] + grid[None, :, 0]           # (edges, offsets)
        py = base[:, None, 1] + grid[None, :, 1]
        d = np.hypot(px - uv[:, None, 0], py - uv[:, None, 1])
        p_fire = noise.beta_sim * _falloff(noise, d)
        inb = (px >= 0) & (py >= 0) & (px < geom.width) & (py < geom.height)
        fire = inb & (rng.random(px.shape) < p_fire)
        e_idx, _ = np.nonzero(fire)
        fx = px[fire].astype(np.uint16)
        fy = py[fire].astype(np.uint16)
        fp = pol[e_idx]
        ft = edges[e_idx]
        if noise.timestamp_jitter_us > 0:
            ft = ft + rng.normal(scale=noise.timestamp_jitter_us, size=len(ft))
        xs.append(fx)
        ys.append(fy)
        ps.append(fp)
        ts.append(ft)
        if noise.double_prob > 0 and len(ft):
            dbl = rng.random(len(ft)) < noise.double_prob
            if dbl.any():
                lag = noise.double_lag_us + rng.normal(
                    scale=max(noise.double_lag_jitter_us, 1e-12),
                    size=int(dbl.sum()))
                xs.append(fx[dbl])
                ys.append(fy[dbl])
                ps.append(fp[dbl])
                ts.append(ft[dbl] + np.abs(lag))

        # spurious events inside the moving blob, chunked over the timeline
        if noise.spurious_blob_rate > 0:
            chunk_us = 10_000.0
            starts = np.arange(0, duration_us, chunk_us)
            mids = starts + np.minimum(chunk_us, duration_us - starts) / 2
            cpos = _marker_camera_positions(scene, marker, mids)
            cuv = project(cpos, scene.intrinsics)
            for s0, mid_uv in zip(starts, cuv):
                span = min(chunk_us, duration_us - s0)
                pixset = _blob_pixel_sets(mid_uv[None, :], noise.blob_radius_px, geom)
                lam = noise.spurious_blob_rate * len(pixset) * span / US
                n = rng.poisson(lam)
                if n == 0:
                    continue
                pick = pixset[rng.integers(0, len(pixset), n)]
                xs.append(pick[:, 0].astype(np.uint16))
                ys.append(pick[:, 1].astype(np.uint16))
                ps.append(rng.choice(np.array([-1, 1], np.int8), n))
                ts.append(s0 + rng.uniform(0, span, n))

    # led/blob events: round the float times once, ahead of the merge
    tsi = [np.round(t).astype(np.int64) for t in ts]

    if noise.spurious_bg_rate > 0:
        lam = noise.spurious_bg_rate * geom.pixel_count * scene.duration_s
        n = rng.poisson(lam)
        if n:
            xs.append(rng.integers(0, geom.width, n).astype(np.uint16))
            ys.append(rng.integers(0, geom.height, n).astype(np.uint16))
            ps.append(rng.choice(np.array([-1, 1], np.int8), n))
            bg_t = rng.integers(0, int(duration_us), n, dtype=np.int64)
            bg_t.sort()
            tsi.append(bg_t)

    if xs:
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        p = np.concatenate(ps).astype(np.int8)
        t = np.concatenate(tsi)
        keep = (t >= 0) & (t < int(duration_us))
        if not keep.all():
            x, y, p, t = x[keep], y[keep], p[keep], t[keep]
        order = np.argsort(t, kind="stable")
        events = EventArray(x[order], y[order], p[order], t[order])
    else:
        events = EventArray.empty()

    truth = []
    truth_ts = np.arange(0, int(duration_us), scene.truth_interval_us, dtype=np.int64)
    pos, quat = scene.trajectory.sample(truth_ts.astype(np.float64))
    body_pts = np.stack([m.position for m in scene.markers])
    rot_wb = quats_to_matrices(quat)
    rot_cw = scene.t_cw.matrix
    for k, t_us in enumerate(truth_ts):
        pw = body_pts @ rot_wb[k].T + pos[k]
        pcam = pw @ rot_cw.T + scene.t_cw.t
        uv = project(pcam, scene.intrinsics)
        truth.append(TruthRecord(
            int(t_us), pos[k].copy(), quat[k].copy(),
            {m.id: (float(uv[i, 0]), float(uv[i, 1]))
             for i, m in enumerate(scene.markers)}))
    return events, truth


def write_truth_jsonl(path, records: list[TruthRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({
                "t_us": r.t_us,
                "position_m": list(r.position),
                "quaternion_wxyz": list(r.q_wxyz),
                "marker_pixels": {str(k): list(v) for k, v in r.marker_pixels.items()},
            }) + "\n")


def read_truth_jsonl(path) -> list[TruthRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(TruthRecord(
                int(d["t_us"]), np.array(d["position_m"]),
                np.array(d["quaternion_wxyz"]),
                {int(k): tuple(v) for k, v in d["marker_pixels"].items()}))
    return out
