"""Blinking-LED detection: from delta-time stacks and event counts to
per-LED sub-pixel image centroids.

The chain per batch: rate filter (event count threshold) -> per-pixel
period statistics -> 8-connected clustering of similar periods ->
frequency association against the rig -> constant-velocity particle
filter per LED. Stage 3 of the pipeline runs `detect_snapshot` on a read
copy of the candidate stacks; `detect` is the same chain starting from a
full count frame.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .events import SensorGeometry
from .sdtv import Sdtv, extract_periods, _period_stats

DEFAULT_MATCH_TOL_US = 25.0
DEFAULT_BETA = 0.8


@dataclass(frozen=True)
class ValidationIssue:
    rule: str
    level: str  # "warning" | "error"
    message: str

    def __str__(self):
        return f"[{self.level}] {self.rule}: {self.message}"


@dataclass(frozen=True)
class LedSpec:
    """One marker: body-frame position, blink frequency and duty cycle."""

    id: int
    position: np.ndarray
    frequency_hz: float
    duty_cycle: float

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, np.float64).reshape(3))
        if self.frequency_hz <= 0:
            raise ValueError("blink frequency must be positive")
        if not 0 < self.duty_cycle <= 1:
            raise ValueError("duty cycle must be in (0, 1]")

    @property
    def period_us(self) -> float:
        return 1e6 / self.frequency_hz


def validate_rig(markers, match_tol_us: float = DEFAULT_MATCH_TOL_US):
    """Check the marker set against the design rules; returns issues."""
    issues = []
    if len(markers) < 4:
        issues.append(ValidationIssue(
            "four-marker-minimum", "error",
            f"{len(markers)} markers; at least four 3D-2D correspondences "
            "are required for a unique pose"))
    freqs = [m.frequency_hz for m in markers]
    if len(set(freqs)) != len(freqs):
        issues.append(ValidationIssue(
            "distinct-frequencies", "error", "blink frequencies must be pairwise distinct"))
    if freqs and max(freqs) / min(freqs) > 2.0:
        issues.append(ValidationIssue(
            "frequency-factor-of-two", "error",
            f"max/min frequency ratio {max(freqs) / min(freqs):.2f} exceeds 2; "
            "periods would alias into each other"))
    ids = [m.id for m in markers]
    if len(set(ids)) != len(ids):
        issues.append(ValidationIssue("unique-ids", "error", "marker ids must be unique"))
    for m in markers:
        if m.duty_cycle > 0.02:
            issues.append(ValidationIssue(
                "duty-cycle-limit", "warning",
                f"marker {m.id} duty cycle {m.duty_cycle:.3f} exceeds the 2 % "
                "pulsed-current limit of the LED"))
    periods = sorted(1e6 / f for f in freqs)
    for a, b in zip(periods, periods[1:]):
        if b - a < 2 * match_tol_us:
            issues.append(ValidationIssue(
                "period-separation", "warning",
                f"periods {a:.1f} and {b:.1f} us are closer than twice the "
                f"{match_tol_us:.0f} us association tolerance; ties resolve "
                "to the nearer period"))
    return issues


@dataclass(frozen=True)
class LedRig:
    """The tracked marker set. Hard rule violations raise; soft ones warn."""

    markers: tuple

    def __init__(self, markers):
        object.__setattr__(self, "markers", tuple(markers))
        issues = validate_rig(self.markers)
        errors = [i for i in issues if i.level == "error"]
        if errors:
            raise ValueError("; ".join(str(i) for i in errors))
        for i in issues:
            warnings.warn(str(i), stacklevel=2)

    @property
    def f_min(self) -> float:
        return min(m.frequency_hz for m in self.markers)

    @property
    def f_max(self) -> float:
        return max(m.frequency_hz for m in self.markers)

    def positions(self) -> np.ndarray:
        return np.stack([m.position for m in self.markers])

    def by_id(self, led_id: int) -> LedSpec:
        for m in self.markers:
            if m.id == led_id:
                return m
        raise KeyError(led_id)


@dataclass(frozen=True)
class PeriodStats:
    pixel: tuple[int, int]
    mean_us: float
    median_us: float
    std_us: float
    count: int


@dataclass(frozen=True)
class Cluster:
    pixels: np.ndarray       # (n, 2) integer x, y
    centroid: np.ndarray     # (2,) sub-pixel u, v
    period_us: float         # sample-count-weighted mean period
    samples: int             # total period measurements inside

    def __len__(self):
        return len(self.pixels)


def rate_threshold(batch_duration_us: float, f_min_hz: float,
                   beta: float = DEFAULT_BETA) -> int:
    """Minimum event count for a pixel to be considered: each period fires
    an on and an off event, each detected with probability beta."""
    if not 0 < beta <= 1:
        raise ValueError("beta must be in (0, 1]")
    return math.ceil(beta * 2.0 * (batch_duration_us * 1e-6) * f_min_hz)


def candidate_pixels(count_frame: np.ndarray, threshold: int) -> np.ndarray:
    """Pixels with count >= threshold, as (n, 2) x,y pairs."""
    ys, xs = np.nonzero(count_frame >= threshold)
    return np.stack([xs, ys], axis=1).astype(np.int64)


@dataclass(frozen=True)
class CandidateSnapshot:
    """Read copy of the candidate pixels' stacks that crosses from the
    volume-owning stage to the detection stage."""

    t_start: int
    t_end: int
    geometry: SensorGeometry
    pixels: np.ndarray   # flat indices
    counts: np.ndarray
    stacks: np.ndarray   # (n, D) oldest to newest
    lens: np.ndarray
    stale: np.ndarray


def build_snapshot(sdtv: Sdtv, touched: np.ndarray, counts: np.ndarray,
                   threshold: int, t_start: int, t_end: int) -> CandidateSnapshot:
    keep = counts >= threshold
    pixels = touched[keep]
    stacks, lens, stale = sdtv.gather(pixels)
    return CandidateSnapshot(t_start, t_end, sdtv.geometry, pixels,
                             counts[keep].astype(np.int64), stacks, lens, stale)


def _stats_arrays(stacks, lens, stale, std_max_us: float, std_max_frac: float):
    """Period statistics per stack row plus the survivor mask."""
    periods, counts = extract_periods(stacks, lens, stale)
    mean, median, std = _period_stats(periods, counts)
    keep = (counts > 0) & (std <= np.maximum(std_max_us, std_max_frac * mean))
    return mean, median, std, counts, keep


def period_stats(sdtv: Sdtv, pixels: np.ndarray,
                 std_max_us: float = 25.0,
                 std_max_frac: float = 0.05) -> list[PeriodStats]:
    """Per-pixel period statistics; drops pixels without complete periods
    and pixels whose period spread exceeds max(std_max_us, frac * mean)."""
    pixels = np.asarray(pixels).reshape(-1, 2)
    flat = pixels[:, 1].astype(np.int64) * sdtv.geometry.width + pixels[:, 0]
    stacks, lens, stale = sdtv.gather(flat)
    mean, median, std, counts, keep = _stats_arrays(
        stacks, lens, stale, std_max_us, std_max_frac)
    return [
        PeriodStats((int(pixels[i, 0]), int(pixels[i, 1])),
                    float(mean[i]), float(median[i]), float(std[i]), int(counts[i]))
        for i in np.flatnonzero(keep)
    ]


def _cluster_arrays(flat_pixels, means, counts, width,
                    link_tol_us, size_bounds) -> list[Cluster]:
    order = np.argsort(flat_pixels)
    flat = flat_pixels[order]
    means = means[order]
    counts = counts[order]
    index = {int(p): i for i, p in enumerate(flat)}
    parent = list(range(len(flat)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    # forward half of the 8-neighborhood; the reverse links are symmetric
    for i, p in enumerate(flat):
        x, y = int(p) % width, int(p) // width
        for dx, dy in ((1, 0), (-1, 1), (0, 1), (1, 1)):
            j = index.get((y + dy) * width + (x + dx))
            if j is not None and abs(means[i] - means[j]) <= link_tol_us:
                union(i, j)

    groups: dict[int, list[int]] = {}
    for i in range(len(flat)):
        groups.setdefault(find(i), []).append(i)

    lo, hi = size_bounds
    clusters = []
    for members in groups.values():
        if not lo <= len(members) <= hi:
            continue
        idx = np.array(members)
        w = counts[idx].astype(np.float64)
        xs = (flat[idx] % width).astype(np.float64)
        ys = (flat[idx] // width).astype(np.float64)
        wsum = w.sum()
        centroid = np.array([(xs * w).sum() / wsum, (ys * w).sum() / wsum])
        period = float((means[idx] * w).sum() / wsum)
        pix = np.stack([flat[idx] % width, flat[idx] // width], axis=1)
        clusters.append(Cluster(pix, centroid, period, int(wsum)))
    clusters.sort(key=lambda c: (c.centroid[1], c.centroid[0]))
    return clusters


def cluster_candidates(stats: list[PeriodStats], geometry: SensorGeometry,
                       period_link_tol_us: float = 25.0,
                       size_bounds: tuple[int, int] = (2, 500)) -> list[Cluster]:
    """8-connected components of pixels whose mean periods differ by at
    most the link tolerance; small and large components are rejected.
    Centroids and cluster periods weight each pixel by its sample count."""
    if not stats:
        return []
    flat = np.array([s.pixel[1] * geometry.width + s.pixel[0] for s in stats], np.int64)
    means = np.array([s.mean_us for s in stats])
    counts = np.array([s.count for s in stats], np.int64)
    return _cluster_arrays(flat, means, counts, geometry.width,
                           period_link_tol_us, size_bounds)


def associate_clusters(clusters, rig: LedRig,
                       match_tol_us: float = DEFAULT_MATCH_TOL_US,
                       counters: dict | None = None) -> dict[int, Cluster]:
    """Greedy nearest-period assignment, one cluster per LED.

    Ties between pairs break on distance, then on larger sample count. A
    cluster equally distant from two LEDs is discarded (and counted when a
    counters dict is supplied).
    """
    pairs = []
    for ci, c in enumerate(clusters):
        for m in rig.markers:
            d = abs(c.period_us - m.period_us)
            if d <= match_tol_us:
                pairs.append((d, -c.samples, m.id, ci))
    # pathological exact ties: one cluster, two LEDs, identical distance
    discarded = set()
    by_cluster: dict[int, list] = {}
    for d, negs, led, ci in pairs:
        by_cluster.setdefault(ci, []).append((d, led))
    for ci, cands in by_cluster.items():
        best = min(d for d, _ in cands)
        if sum(1 for d, _ in cands if d == best) > 1:
            discarded.add(ci)
            if counters is not None:
                counters["tie_discards"] = counters.get("tie_discards", 0) + 1

    assigned: dict[int, Cluster] = {}
    taken = set(discarded)
    for d, negs, led, ci in sorted(pairs):
        if led in assigned or ci in taken:
            continue
        assigned[led] = clusters[ci]
        taken.add(ci)
    return assigned


# ---------------------------------------------------------------------------
# Constant-velocity particle filter, one instance per LED


@dataclass(frozen=True)
class TrackerParams:
    n_particles: int = 200
    process_pos: float = 0.5    # px per batch
    process_vel: float = 0.2    # px per batch, on velocity
    meas_sigma: float = 0.5     # px
    init_pos_sigma: float = 1.0
    init_vel_sigma: float = 1.0
    gate_sigmas: float = 4.0
    staleness_us: int = 50_000
    batch_us: int = 2500        # velocity time unit


@dataclass
class LedTrack:
    led_id: int
    params: TrackerParams
    particles: np.ndarray    # (n, 4): u, v, du, dv (px per batch)
    weights: np.ndarray
    last_update_us: int
    last_obs_us: int
    reinitialized: bool = False

    @property
    def centroid(self) -> np.ndarray:
        return self.particles[:, :2].T @ self.weights

    @property
    def velocity(self) -> np.ndarray:
        return self.particles[:, 2:].T @ self.weights

    @property
    def covariance(self) -> np.ndarray:
        d = self.particles[:, :2] - self.centroid
        return (d * self.weights[:, None]).T @ d

    def is_live(self, t_us: int) -> bool:
        return t_us - self.last_obs_us <= self.params.staleness_us


def make_track(led_id: int, obs: np.ndarray, t_us: int, rng,
               params: TrackerParams, velocity_seed=None) -> LedTrack:
    n = params.n_particles
    parts = np.empty((n, 4))
    parts[:, 0] = obs[0] + params.init_pos_sigma * rng.standard_normal(n)
    parts[:, 1] = obs[1] + params.init_pos_sigma * rng.standard_normal(n)
    seed = np.zeros(2) if velocity_seed is None else velocity_seed
    parts[:, 2] = seed[0] + params.init_vel_sigma * rng.standard_normal(n)
    parts[:, 3] = seed[1] + params.init_vel_sigma * rng.standard_normal(n)
    return LedTrack(led_id, params, parts, np.full(n, 1.0 / n), t_us, t_us)


def _systematic_resample(particles, weights, rng):
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    idx = np.searchsorted(cumulative, positions)
    return particles[idx].copy()


def track_update(track: LedTrack, observation, dt_us: int, rng) -> LedTrack:
    """Predict under constant velocity (plus process noise), then weight by
    a Gaussian likelihood around the observation and resample.

    Without an observation only the prediction runs, so the spread grows.
    An observation outside the gate (or degenerate weights) reinitializes
    the track at the observation, seeding velocity from the displacement
    since the last estimate, and flags the track.
    """
    p = track.params
    if dt_us <= 0:
        raise ValueError("dt must be positive")
    dtb = dt_us / p.batch_us
    sq = math.sqrt(dtb)
    n = len(track.weights)

    prev_centroid = track.centroid
    parts = track.particles
    parts[:, 0] += parts[:, 2] * dtb
    parts[:, 1] += parts[:, 3] * dtb
    if p.process_pos > 0:
        parts[:, :2] += p.process_pos * sq * rng.standard_normal((n, 2))
    if p.process_vel > 0:
        parts[:, 2:] += p.process_vel * sq * rng.standard_normal((n, 2))
    track.last_update_us += dt_us

    if observation is None:
        return track

    obs = np.asarray(observation, np.float64)
    pred = track.centroid
    spread = track.covariance
    pred_var = 0.5 * (spread[0, 0] + spread[1, 1]) + p.meas_sigma ** 2
    dist2 = float(np.sum((obs - pred) ** 2))
    if dist2 > p.gate_sigmas ** 2 * pred_var:
        seed = (obs - prev_centroid) / dtb if np.isfinite(prev_centroid).all() else None
        fresh = make_track(track.led_id, obs, track.last_update_us, rng, p,
                           velocity_seed=seed)
        track.particles = fresh.particles
        track.weights = fresh.weights
        track.last_obs_us = track.last_update_us
        track.reinitialized = True
        return track

    sigma = max(p.meas_sigma, 1e-9)
    d2 = np.sum((parts[:, :2] - obs) ** 2, axis=1)
    logw = np.log(track.weights + 1e-300) - d2 / (2 * sigma * sigma)
    logw -= logw.max()
    w = np.exp(logw)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        fresh = make_track(track.led_id, obs, track.last_update_us, rng, p)
        track.particles = fresh.particles
        track.weights = fresh.weights
        track.last_obs_us = track.last_update_us
        track.reinitialized = True
        return track
    w /= total
    track.particles = _systematic_resample(parts, w, rng)
    track.weights = np.full(n, 1.0 / n)
    track.last_obs_us = track.last_update_us
    return track


# ---------------------------------------------------------------------------
# Full chain


@dataclass(frozen=True)
class DetectorConfig:
    batch_duration_us: int = 2500
    beta: float = DEFAULT_BETA
    match_tol_us: float = DEFAULT_MATCH_TOL_US
    link_tol_us: float = 25.0
    size_bounds: tuple[int, int] = (2, 500)
    std_max_us: float = 25.0
    std_max_frac: float = 0.05
    tracker: TrackerParams = field(default_factory=TrackerParams)


@dataclass
class DetectionResult:
    t_us: int
    centroids: dict[int, np.ndarray]
    pose_sufficient: bool
    n_candidates: int = 0
    n_stat_pixels: int = 0
    n_clusters: int = 0
    associations: dict[int, Cluster] = field(default_factory=dict)
    counters: dict = field(default_factory=dict)


def detect_snapshot(snap: CandidateSnapshot, rig: LedRig, config: DetectorConfig,
                    tracks: dict[int, LedTrack], rng) -> DetectionResult:
    """Run stats -> cluster -> associate -> track on a candidate snapshot;
    returns filtered centroids for LEDs whose tracks are live."""
    mean, median, std, counts, keep = _stats_arrays(
        snap.stacks, snap.lens, snap.stale, config.std_max_us, config.std_max_frac)
    idx = np.flatnonzero(keep)
    clusters = _cluster_arrays(snap.pixels[idx], mean[idx], counts[idx],
                               snap.geometry.width, config.link_tol_us,
                               config.size_bounds)
    counters: dict = {}
    assoc = associate_clusters(clusters, rig, config.match_tol_us, counters)

    t_now = snap.t_end
    dt = snap.t_end - snap.t_start
    for m in rig.markers:  # rig order keeps the rng sequence deterministic
        cluster = assoc.get(m.id)
        obs = cluster.centroid if cluster is not None else None
        track = tracks.get(m.id)
        if track is None:
            if obs is not None:
                tracks[m.id] = make_track(m.id, obs, t_now, rng, config.tracker)
            continue
        if not track.is_live(t_now):
            del tracks[m.id]
            if obs is not None:
                tracks[m.id] = make_track(m.id, obs, t_now, rng, config.tracker)
            continue
        track_update(track, obs, dt, rng)

    centroids = {
        led_id: tr.centroid
        for led_id, tr in sorted(tracks.items())
        if tr.is_live(t_now)
    }
    return DetectionResult(
        t_us=t_now,
        centroids=centroids,
        pose_sufficient=len(centroids) >= 4,
        n_candidates=len(snap.pixels),
        n_stat_pixels=int(keep.sum()),
        n_clusters=len(clusters),
        associations=assoc,
        counters=counters,
    )


def detect(sdtv: Sdtv, count_frame: np.ndarray, rig: LedRig,
           config: DetectorConfig, tracks: dict[int, LedTrack], rng,
           t_start_us: int, t_end_us: int) -> DetectionResult:
    """Full chain from a count frame (rate filter first); see detect_snapshot."""
    threshold = rate_threshold(config.batch_duration_us, rig.f_min, config.beta)
    cand = candidate_pixels(count_frame, threshold)
    flat = cand[:, 1] * sdtv.geometry.width + cand[:, 0]
    counts = count_frame.reshape(-1)[flat].astype(np.int64)
    stacks, lens, stale = sdtv.gather(flat)
    snap = CandidateSnapshot(t_start_us, t_end_us, sdtv.geometry, flat,
                             counts, stacks, lens, stale)
    return detect_snapshot(snap, rig, config, tracks, rng)
