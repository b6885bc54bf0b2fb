import numpy as np
import pytest

from evmocap.detector import (
    Cluster,
    DetectorConfig,
    LedRig,
    LedSpec,
    PeriodStats,
    TrackerParams,
    associate_clusters,
    candidate_pixels,
    cluster_candidates,
    detect,
    make_track,
    period_stats,
    rate_threshold,
    track_update,
    validate_rig,
)
from evmocap.events import Event, EventArray, EventBatch, SensorGeometry
from evmocap.sdtv import Sdtv

GEOM = SensorGeometry(64, 48)

TABLE_FREQS = (1730.0, 1980.0, 2290.0, 2610.0, 2860.0)


def make_rig(freqs=(1730.0, 1980.0, 2290.0, 2610.0), duty=0.01):
    markers = [
        LedSpec(i, [0.04 * np.cos(k), 0.04 * np.sin(k), 0.005 * i], f, duty)
        for i, (f, k) in enumerate(zip(freqs, np.linspace(0, 5, len(freqs))))
    ]
    return LedRig(markers)


def ingest_blobs(sdtv, blobs, duration_us=4000):
    """Drive pixel groups with square waves; blobs = [(pixels, period, phase)]."""
    events = []
    for pixels, period, phase in blobs:
        on = max(1, int(0.1 * period))
        t = phase
        while t + on < duration_us:
            for (x, y) in pixels:
                events.append(Event(x, y, 1, int(t)))
                events.append(Event(x, y, -1, int(t + on)))
            t += period
    events.sort(key=lambda e: e.t)
    batch = EventBatch(EventArray.from_events(events), 0, duration_us)
    return sdtv.ingest_batch(batch)


def disk(cx, cy, r=1):
    return [(cx + dx, cy + dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)
            if dx * dx + dy * dy <= r * r]


class TestRigValidation:
    def test_table_rig_valid_with_separation_warning(self):
        with pytest.warns(UserWarning, match="period-separation"):
            rig = make_rig(TABLE_FREQS)
        assert rig.f_min == 1730.0 and rig.f_max == 2860.0

    def test_three_markers_rejected(self):
        with pytest.raises(ValueError, match="four-marker-minimum"):
            make_rig((1730.0, 1980.0, 2290.0))

    def test_factor_of_two_rejected(self):
        with pytest.raises(ValueError, match="factor-of-two"):
            make_rig((1000.0, 1300.0, 1700.0, 2100.0))

    def test_duty_cycle_warning(self):
        issues = validate_rig([LedSpec(i, [0, 0, 0], f, 0.05)
                               for i, f in enumerate((1730.0, 1980.0, 2290.0, 2610.0))])
        assert any(i.rule == "duty-cycle-limit" and i.level == "warning" for i in issues)


class TestRateThreshold:
    def test_table_values(self):
        assert rate_threshold(2500, 1730, 0.8) == 7
        assert rate_threshold(1000, 1730, 0.8) == 3

    def test_two_events_per_period(self):
        assert rate_threshold(1_000_000, 1.0, 1.0) == 2


class TestCandidates:
    def test_empty(self):
        assert len(candidate_pixels(np.zeros((4, 4), np.uint16), 1)) == 0

    def test_boundary_inclusive(self):
        frame = np.zeros((4, 4), np.uint16)
        frame[2, 3] = 5
        out = candidate_pixels(frame, 5)
        assert out.tolist() == [[3, 2]]

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(0)
        frame = rng.poisson(2.0, (16, 16)).astype(np.uint16)
        sizes = [len(candidate_pixels(frame, t)) for t in range(8)]
        assert sizes == sorted(sizes, reverse=True)


class TestPeriodStats:
    def test_clean_pixel(self):
        s = Sdtv(GEOM, 16)
        ingest_blobs(s, [([(5, 5)], 300, 0)])
        stats = period_stats(s, np.array([[5, 5]]))
        assert len(stats) == 1
        st = stats[0]
        assert st.mean_us == 300 and st.median_us == 300 and st.std_us == 0

    def test_noisy_blinker_within_bounds(self, noisy_blinker_events):
        s = Sdtv(GEOM, 32)
        batch = EventBatch(EventArray.from_events(noisy_blinker_events), 0, 3000)
        s.ingest_batch(batch)
        x, y = noisy_blinker_events[0].x, noisy_blinker_events[0].y
        stats = period_stats(s, np.array([[x, y]]))
        assert len(stats) == 1
        assert 295 <= stats[0].mean_us <= 305
        assert stats[0].std_us <= 10

    def test_wild_spread_rejected(self):
        # periods {280, 600}: std far above max(25 us, 5 % of mean)
        s = Sdtv(GEOM, 16)
        pairs = [(0, 1), (5, 1), (35, -1), (285, 1), (315, -1), (885, 1), (915, -1)]
        ev = [Event(6, 6, p, t) for t, p in pairs]
        s.ingest_batch(EventBatch(EventArray.from_events(ev), 0, 1000))
        from evmocap.sdtv import pixel_periods
        assert list(pixel_periods(s, (6, 6))) == [280, 600]
        assert period_stats(s, np.array([[6, 6]])) == []

    def test_zero_period_pixels_dropped(self):
        s = Sdtv(GEOM, 16)
        ev = [Event(7, 7, 1, t) for t in (0, 100, 200, 300)]
        s.ingest_batch(EventBatch(EventArray.from_events(ev), 0, 1000))
        assert period_stats(s, np.array([[7, 7]])) == []


class TestClustering:
    def stats(self, entries):
        return [PeriodStats(p, m, m, 0.0, c) for p, m, c in entries]

    def test_diagonal_adjacency_links(self):
        stats = self.stats([((10, 10), 500.0, 4), ((11, 11), 510.0, 4)])
        out = cluster_candidates(stats, GEOM, period_link_tol_us=25, size_bounds=(2, 500))
        assert len(out) == 1
        np.testing.assert_allclose(out[0].centroid, [10.5, 10.5])
        assert out[0].period_us == 505.0

    def test_tight_tolerance_splits_and_min_size_rejects(self):
        stats = self.stats([((10, 10), 500.0, 4), ((11, 11), 510.0, 4)])
        out = cluster_candidates(stats, GEOM, period_link_tol_us=5, size_bounds=(2, 500))
        assert out == []

    def test_sample_weighted_centroid(self):
        stats = self.stats([((10, 10), 500.0, 9), ((11, 10), 500.0, 3)])
        out = cluster_candidates(stats, GEOM, period_link_tol_us=25, size_bounds=(1, 500))
        assert len(out) == 1
        np.testing.assert_allclose(out[0].centroid, [10.25, 10.0])

    def test_max_size_rejects(self):
        stats = self.stats([((x, 20), 400.0, 1) for x in range(10)])
        assert cluster_candidates(stats, GEOM, 25, (2, 5)) == []

    def test_removing_pixel_moves_centroid_by_at_most_weight_share(self):
        rng = np.random.default_rng(1)
        entries = [((int(x), int(y)), 400.0, int(c))
                   for x, y, c in zip(rng.integers(10, 14, 8),
                                      rng.integers(10, 14, 8),
                                      rng.integers(1, 10, 8))]
        # make pixels unique
        entries = list({e[0]: e for e in entries}.values())
        full = cluster_candidates(self.stats(entries), GEOM, 1e9, (1, 500))[0]
        for k in range(len(entries)):
            rest = entries[:k] + entries[k + 1:]
            if not rest:
                continue
            part = cluster_candidates(self.stats(rest), GEOM, 1e9, (1, 500))
            if len(part) != 1:
                continue  # removal split the component
            w_removed = entries[k][2] / full.samples
            extent = np.max(np.linalg.norm(full.pixels - full.centroid, axis=1))
            shift = np.linalg.norm(part[0].centroid - full.centroid)
            assert shift <= w_removed / (1 - w_removed) * extent + 1e-9


class TestAssociation:
    def cluster(self, period, samples=10, at=(10.0, 10.0)):
        return Cluster(np.array([[10, 10]]), np.array(at), period, samples)

    def test_within_tolerance_matches(self):
        rig = make_rig(TABLE_FREQS)
        out = associate_clusters([self.cluster(565.0)], rig)
        assert list(out) == [0]  # 1730 Hz <-> 578.0 us, distance 13

    def test_outside_tolerance_unmatched(self):
        rig = make_rig(TABLE_FREQS)
        assert associate_clusters([self.cluster(540.0)], rig) == {}

    def test_bijective_on_exact_periods(self):
        rig = make_rig(TABLE_FREQS)
        clusters = [self.cluster(m.period_us, at=(float(i), 0.0))
                    for i, m in enumerate(rig.markers)]
        out = associate_clusters(clusters, rig)
        assert sorted(out) == [0, 1, 2, 3, 4]
        for led_id, c in out.items():
            assert abs(c.period_us - rig.by_id(led_id).period_us) < 1e-9

    def test_injective_two_clusters_one_led(self):
        # both clusters sit near the 1730 Hz period (578.03 us); only the
        # closer one is assigned, the other stays unmatched
        rig = make_rig(TABLE_FREQS)
        c1 = self.cluster(578.0, samples=10)
        c2 = self.cluster(577.0, samples=50)
        out = associate_clusters([c1, c2], rig)
        assert list(out) == [0]
        assert out[0] is c1

    def test_closer_period_breaks_conflict(self):
        rig = make_rig((1730.0, 1980.0, 2290.0, 2610.0))
        # midway-ish cluster: distances 11.0 to led0 (578.03) and 14.1 off led1 (505.05)
        c = self.cluster(567.0)
        out = associate_clusters([c], rig)
        assert list(out) == [0]

    def test_exact_tie_discards_cluster(self):
        # periods 500 and 512 us are float-exact; a cluster at 506 us is
        # exactly 6 us from both
        rig = LedRig([LedSpec(0, [0, 0, 0], 2000.0, 0.01),
                      LedSpec(1, [1, 0, 0], 1953.125, 0.01),
                      LedSpec(2, [0, 1, 0], 2500.0, 0.01),
                      LedSpec(3, [1, 1, 0], 3000.0, 0.01)])
        counters = {}
        out = associate_clusters([self.cluster(506.0)], rig,
                                 match_tol_us=25, counters=counters)
        assert out == {}
        assert counters["tie_discards"] == 1


class TestParticleFilter:
    def test_stationary_convergence(self):
        rng = np.random.default_rng(2)
        params = TrackerParams()
        track = make_track(0, np.array([100.0, 100.0]), 0, rng, params)
        for k in range(10):
            track_update(track, np.array([100.0, 100.0]), 2500, rng)
        assert np.linalg.norm(track.centroid - [100.0, 100.0]) < 1.0

    def test_noiseless_constant_velocity_exact(self):
        rng = np.random.default_rng(3)
        params = TrackerParams(process_pos=0.0, process_vel=0.0, meas_sigma=0.0,
                               init_pos_sigma=0.0, init_vel_sigma=0.0)
        v = np.array([0.8, -0.4])  # px per batch
        track = make_track(0, np.array([50.0, 60.0]), 0, rng, params)
        for k in range(1, 6):
            obs = np.array([50.0, 60.0]) + v * k
            track_update(track, obs, 2500, rng)
            if k >= 2:
                np.testing.assert_allclose(track.centroid, obs, atol=1e-9)
        np.testing.assert_allclose(track.velocity, v, atol=1e-9)

    def test_recovers_after_missed_batches_without_reinit(self):
        rng = np.random.default_rng(4)
        params = TrackerParams()
        pos = np.array([100.0, 100.0])
        v = np.array([0.3, 0.1])
        track = make_track(0, pos, 0, rng, params)
        t = 0
        for k in range(1, 11):
            t += 2500
            track_update(track, pos + v * k, 2500, rng)
        track.reinitialized = False
        for _ in range(5):
            t += 2500
            track_update(track, None, 2500, rng)
        k = 15
        track_update(track, pos + v * k, 2500, rng)
        assert not track.reinitialized
        assert np.linalg.norm(track.centroid - (pos + v * k)) < 2.0

    def test_far_observation_reinitializes_and_flags(self):
        rng = np.random.default_rng(5)
        track = make_track(0, np.array([10.0, 10.0]), 0, rng, TrackerParams())
        track_update(track, np.array([10.0, 10.0]), 2500, rng)
        track_update(track, np.array([300.0, 300.0]), 2500, rng)
        assert track.reinitialized
        assert np.linalg.norm(track.centroid - [300.0, 300.0]) < 2.0

    def test_weights_stay_normalized(self):
        rng = np.random.default_rng(6)
        track = make_track(0, np.array([20.0, 20.0]), 0, rng, TrackerParams())
        for k in range(20):
            obs = np.array([20.0, 20.0]) + rng.normal(scale=0.5, size=2)
            track_update(track, obs if k % 3 else None, 2500, rng)
            assert abs(track.weights.sum() - 1.0) < 1e-9

    def test_variance_reduction_statistical(self):
        # over 50 seeds: steady-state error of the filtered centroid on a
        # static target stays below the observation noise sigma
        sigma = 1.0
        errs = []
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            params = TrackerParams(n_particles=100, meas_sigma=sigma,
                                   process_pos=0.3, process_vel=0.1)
            target = np.array([100.0, 100.0])
            track = make_track(0, target + rng.normal(scale=sigma, size=2), 0, rng, params)
            tail = []
            for k in range(40):
                obs = target + rng.normal(scale=sigma, size=2)
                track_update(track, obs, 2500, rng)
                if k >= 30:
                    tail.append(np.linalg.norm(track.centroid - target))
            errs.append(np.mean(tail))
        mean_err = np.mean(errs)
        sem = np.std(errs, ddof=1) / np.sqrt(len(errs))
        assert mean_err + 3 * sem <= sigma, (mean_err, sem)


class TestDetect:
    def run_detect(self, blobs, rig, duration=4000):
        sdtv = Sdtv(GEOM, 16)
        frame = ingest_blobs(sdtv, blobs, duration)
        cfg = DetectorConfig(batch_duration_us=duration)
        tracks = {}
        rng = np.random.default_rng(7)
        return detect(sdtv, frame, rig, cfg, tracks, rng, 0, duration), tracks

    def test_full_rig_detected(self):
        rig = make_rig(TABLE_FREQS)
        blobs = [(disk(10 + 8 * i, 10 + 4 * i), m.period_us, 7 * i)
                 for i, m in enumerate(rig.markers)]
        result, tracks = self.run_detect(blobs, rig)
        assert result.pose_sufficient
        assert sorted(result.centroids) == [0, 1, 2, 3, 4]
        for i, m in enumerate(rig.markers):
            np.testing.assert_allclose(result.centroids[m.id],
                                       [10 + 8 * i, 10 + 4 * i], atol=0.75)

    def test_occluded_led_still_solvable(self):
        rig = make_rig(TABLE_FREQS)
        blobs = [(disk(10 + 8 * i, 10 + 4 * i), m.period_us, 0)
                 for i, m in enumerate(rig.markers) if i != 2]
        result, _ = self.run_detect(blobs, rig)
        assert sorted(result.centroids) == [0, 1, 3, 4]
        assert result.pose_sufficient

    def test_too_few_leds_marks_insufficient(self):
        rig = make_rig(TABLE_FREQS)
        blobs = [(disk(10 + 8 * i, 10 + 4 * i), rig.markers[i].period_us, 0)
                 for i in range(3)]
        result, _ = self.run_detect(blobs, rig)
        assert not result.pose_sufficient

    def test_empty_batch_empty_result(self):
        rig = make_rig(TABLE_FREQS)
        result, _ = self.run_detect([], rig)
        assert result.centroids == {}
        assert not result.pose_sufficient
