import numpy as np
from scipy.spatial.transform import Rotation

from evmocap.transforms import (
    RigidTransform,
    matrix_to_quat,
    quat_angle,
    quat_angle_between,
    quat_canonical,
    quat_mean,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_slerp,
    quat_to_matrix,
)


def random_quat(rng):
    return quat_normalize(rng.normal(size=4))


def test_matrix_roundtrip_all_branches(seed=0):
    rng = np.random.default_rng(seed)
    # large rotations exercise every branch of matrix_to_quat
    for _ in range(500):
        q = quat_canonical(random_quat(rng))
        q2 = matrix_to_quat(quat_to_matrix(q))
        assert np.allclose(q, q2, atol=1e-12)


def test_matches_scipy_convention():
    rng = np.random.default_rng(1)
    for _ in range(100):
        q = random_quat(rng)
        r = Rotation.from_quat([q[1], q[2], q[3], q[0]])  # scipy is xyzw
        assert np.allclose(quat_to_matrix(q), r.as_matrix(), atol=1e-12)


def test_multiply_matches_matrix_product():
    rng = np.random.default_rng(2)
    a, b = random_quat(rng), random_quat(rng)
    m = quat_to_matrix(quat_multiply(a, b))
    assert np.allclose(m, quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


def test_rotate_points():
    q = matrix_to_quat(Rotation.from_euler("z", 90, degrees=True).as_matrix())
    out = quat_rotate(q, np.array([[1.0, 0, 0]]))
    assert np.allclose(out, [[0, 1, 0]], atol=1e-12)


def test_angle():
    q = matrix_to_quat(Rotation.from_euler("x", 0.3).as_matrix())
    assert abs(quat_angle(q) - 0.3) < 1e-12
    assert abs(quat_angle_between(q, q)) < 1e-9


def test_slerp_endpoints_and_midpoint():
    rng = np.random.default_rng(3)
    a, b = random_quat(rng), random_quat(rng)
    assert np.allclose(np.abs(quat_slerp(a, b, 0.0)), np.abs(a), atol=1e-12)
    assert np.allclose(np.abs(quat_slerp(a, b, 1.0)), np.abs(b), atol=1e-12)
    mid = quat_slerp(a, b, 0.5)
    assert abs(quat_angle_between(a, mid) - quat_angle_between(mid, b)) < 1e-9


def test_quat_mean_of_cluster():
    rng = np.random.default_rng(4)
    base = random_quat(rng)
    qs = []
    for _ in range(200):
        d = Rotation.from_rotvec(rng.normal(scale=0.01, size=3)).as_matrix()
        q = matrix_to_quat(quat_to_matrix(base) @ d)
        qs.append(q if rng.random() < 0.5 else -q)  # random double-cover signs
    m = quat_mean(np.array(qs))
    assert quat_angle_between(m, quat_canonical(base)) < 0.005


def test_rigid_compose_inverse_identity():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = RigidTransform(random_quat(rng), rng.normal(size=3))
        b = RigidTransform(random_quat(rng), rng.normal(size=3))
        p = rng.normal(size=(7, 3))
        assert np.allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)
        ia = a.inverse()
        assert np.allclose((ia @ a).apply(p), p, atol=1e-12)
        assert np.allclose(ia.apply(a.apply(p)), p, atol=1e-12)


def test_identity():
    p = np.array([[1.0, 2.0, 3.0]])
    assert np.allclose(RigidTransform.identity().apply(p), p)
