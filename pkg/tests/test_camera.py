import numpy as np
import pytest

from evmocap.camera import (
    DsIntrinsics,
    ProjectionDomainError,
    project,
    project_valid_mask,
    undistort_to_normalized,
    unproject,
)
from evmocap.events import SensorGeometry

GEOM = SensorGeometry(640, 480)
PINHOLE = DsIntrinsics(400.0, 420.0, 319.5, 239.5, 0.0, 0.0, GEOM)
WIDE = DsIntrinsics(350.0, 350.0, 319.5, 239.5, -0.2, 0.55, GEOM)


def random_intrinsics(rng):
    return DsIntrinsics(
        fx=float(rng.uniform(200, 1800)),
        fy=float(rng.uniform(200, 1800)),
        cx=float(rng.uniform(300, 340)),
        cy=float(rng.uniform(220, 260)),
        xi=float(rng.uniform(-0.25, 0.9)),
        alpha_ds=float(rng.uniform(0.0, 0.85)),
        geometry=GEOM,
    )


class TestPinholeDegeneracy:
    def test_matches_reference_pinhole(self):
        rng = np.random.default_rng(0)
        pts = np.stack([rng.uniform(-1, 1, 1000), rng.uniform(-1, 1, 1000),
                        rng.uniform(0.2, 10, 1000)], axis=1)
        uv = project(pts, PINHOLE)
        ref_u = PINHOLE.fx * pts[:, 0] / pts[:, 2] + PINHOLE.cx
        ref_v = PINHOLE.fy * pts[:, 1] / pts[:, 2] + PINHOLE.cy
        np.testing.assert_allclose(uv[:, 0], ref_u, rtol=1e-14, atol=1e-12)
        np.testing.assert_allclose(uv[:, 1], ref_v, rtol=1e-14, atol=1e-12)

    def test_unproject_pinhole_algebra(self):
        ray = unproject(np.array([PINHOLE.cx + PINHOLE.fx, PINHOLE.cy]), PINHOLE)
        expected = np.array([1.0, 0.0, 1.0]) / np.sqrt(2)
        np.testing.assert_allclose(ray, expected, atol=1e-12)


class TestAxisAndDomain:
    @pytest.mark.parametrize("intr", [PINHOLE, WIDE])
    def test_optical_axis_hits_principal_point(self, intr):
        for z in (0.1, 1.0, 25.0):
            np.testing.assert_allclose(project(np.array([0.0, 0.0, z]), intr),
                                       [intr.cx, intr.cy], atol=1e-12)

    def test_principal_point_unprojects_to_axis(self):
        for intr in (PINHOLE, WIDE):
            np.testing.assert_allclose(unproject(np.array([intr.cx, intr.cy]), intr),
                                       [0.0, 0.0, 1.0], atol=1e-12)

    def test_point_behind_camera_rejected(self):
        with pytest.raises(ProjectionDomainError):
            project(np.array([0.0, 0.0, -1.0]), PINHOLE)

    def test_valid_mask(self):
        pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
        assert list(project_valid_mask(pts, PINHOLE)) == [True, False]

    def test_normalized_requires_forward_ray(self):
        # far outside the image of a strongly distorted camera the ray bends
        # behind the camera plane
        intr = DsIntrinsics(120.0, 120.0, 319.5, 239.5, 0.6, 0.6, GEOM)
        with pytest.raises(ProjectionDomainError):
            undistort_to_normalized(np.array([3000.0, 239.5]), intr)


class TestRoundTrip:
    def test_project_unproject_collinear(self):
        rng = np.random.default_rng(7)
        total = 0
        for _ in range(20):
            intr = random_intrinsics(rng)
            px = np.stack([rng.uniform(0, 639, 5000), rng.uniform(0, 479, 5000)], axis=1)
            rays = unproject(px, intr)
            pts = rays * rng.uniform(0.1, 50.0, 5000)[:, None]
            mask = project_valid_mask(pts, intr)
            uv = project(pts[mask], intr)
            np.testing.assert_allclose(uv, px[mask], rtol=1e-9, atol=1e-9)
            back = unproject(uv, intr)
            cross = np.linalg.norm(np.cross(back, pts[mask]), axis=1)
            denom = np.linalg.norm(pts[mask], axis=1)
            assert np.max(cross / denom) < 1e-9
            total += int(mask.sum())
        assert total > 90_000

    def test_normalized_coordinates(self):
        rng = np.random.default_rng(8)
        intr = random_intrinsics(rng)
        pts = np.stack([rng.uniform(-0.5, 0.5, 100), rng.uniform(-0.5, 0.5, 100),
                        rng.uniform(0.5, 5.0, 100)], axis=1)
        uv = project(pts, intr)
        xy = undistort_to_normalized(uv, intr)
        np.testing.assert_allclose(xy, pts[:, :2] / pts[:, 2:3], rtol=1e-9, atol=1e-11)


class TestSmoothness:
    def test_jacobian_step_consistency(self):
        # central differences at h and h/2 agree: locally Lipschitz projection
        rng = np.random.default_rng(9)
        intr = WIDE
        pts = np.stack([rng.uniform(-0.4, 0.4, 50), rng.uniform(-0.4, 0.4, 50),
                        rng.uniform(0.5, 4.0, 50)], axis=1)

        def jac(p, h):
            cols = []
            for k in range(3):
                d = np.zeros(3)
                d[k] = h
                cols.append((project(p + d, intr) - project(p - d, intr)) / (2 * h))
            return np.stack(cols, axis=1)

        for p in pts:
            j1 = jac(p, 1e-5)
            j2 = jac(p, 5e-6)
            assert np.max(np.abs(j1 - j2)) / max(1.0, np.max(np.abs(j1))) < 1e-5
