"""Perspective-n-point solvers and frame bookkeeping.

Two solvers over normalized image coordinates:

* `solve_sqpnp`: sequential quadratic programming over the 9-vector of
  rotation-matrix entries. The translation is eliminated in closed form,
  leaving min r^T Omega r over the rotation manifold; SQP iterations start
  from the eigenvectors of Omega with the smallest eigenvalues and the
  candidate with the lowest objective wins, which is what makes the result
  globally optimal in practice.
* `solve_epnp`: barycentric formulation over four control points (three in
  the planar fallback), closed-form betas for the one/two/three null-vector
  cases, no iterative refinement.

Both consume body-frame points paired with normalized image coordinates
(output of `undistort_to_normalized`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .transforms import RigidTransform, matrix_to_quat

SQP_SQUARED_TOLERANCE = 1e-10
SQP_MAX_ITERATIONS = 15
ORTHOGONALITY_SQ_ERROR_THRESHOLD = 1e-8
DET_THRESHOLD = 1e-3
NULL_EIGENVALUE_REL_TOL = 1e-10
ORTHONORMALIZATION_DRIFT_LIMIT = 1e-6


class InsufficientCorrespondencesError(ValueError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Correspondence:
    """Body-frame point and its normalized image coordinates."""

    point: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, np.float64).reshape(3))
        object.__setattr__(self, "xy", np.asarray(self.xy, np.float64).reshape(2))
        if not (np.isfinite(self.point).all() and np.isfinite(self.xy).all()):
            raise ValueError("correspondence values must be finite")


@dataclass(frozen=True)
class PoseEstimate:
    """Body-to-camera transform with solver metadata.

    `reproj_rmse` is in normalized image units; multiply by the focal
    length for pixels (see `reprojection_rmse`).
    """

    q: np.ndarray
    t: np.ndarray
    reproj_rmse: float
    solver: str
    t_us: int = 0

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform(self.q, self.t)

    @property
    def rotation(self) -> np.ndarray:
        return self.transform.matrix


def _unpack(correspondences) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(correspondences, tuple) and len(correspondences) == 2:
        pts, xy = correspondences
        return (np.asarray(pts, np.float64).reshape(-1, 3),
                np.asarray(xy, np.float64).reshape(-1, 2))
    pts = np.array([c.point for c in correspondences], np.float64)
    xy = np.array([c.xy for c in correspondences], np.float64)
    return pts.reshape(-1, 3), xy.reshape(-1, 2)


def _check_input(pts: np.ndarray, xy: np.ndarray) -> None:
    if len(pts) < 4:
        raise InsufficientCorrespondencesError(
            f"need at least 4 correspondences, got {len(pts)}"
        )
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] < 1e-9 * max(s[0], 1e-12):
        raise DegenerateConfigurationError("body points are collinear")


def _omega_and_p(pts: np.ndarray, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic form of the squared projection objective and the linear
    map recovering the optimal translation: E = r^T Omega r, t = P r."""
    n = len(pts)
    x, y = xy[:, 0], xy[:, 1]
    m = np.zeros((n, 3, 3))
    m[:, 0, 0] = 1.0
    m[:, 1, 1] = 1.0
    m[:, 0, 2] = m[:, 2, 0] = -x
    m[:, 1, 2] = m[:, 2, 1] = -y
    m[:, 2, 2] = x * x + y * y
    sm = m.sum(axis=0)
    sma = np.einsum("nac,nd->acd", m, pts).reshape(3, 9)
    omega0 = np.einsum("nac,nb,nd->abcd", m, pts, pts).reshape(9, 9)
    p = -np.linalg.solve(sm, sma)
    omega = omega0 + sma.T @ p
    return 0.5 * (omega + omega.T), p


@njit(cache=True)
def _det9(r):
    return (r[0] * (r[4] * r[8] - r[5] * r[7])
            - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]))


@njit(cache=True)
def _orthogonality_sq_error(r):
    e = 0.0
    for i in range(3):
        ri = r[3 * i:3 * i + 3]
        n2 = ri[0] * ri[0] + ri[1] * ri[1] + ri[2] * ri[2]
        e += (n2 - 1.0) ** 2
    for i in range(3):
        for j in range(i + 1, 3):
            d = (r[3 * i] * r[3 * j] + r[3 * i + 1] * r[3 * j + 1]
                 + r[3 * i + 2] * r[3 * j + 2])
            e += 2.0 * d * d
    return e


@njit(cache=True)
def _nearest_rotation(e):
    b = e.copy().reshape(3, 3)
    u, s, vt = np.linalg.svd(b)
    d = np.linalg.det(u @ vt)
    dd = np.eye(3)
    dd[2, 2] = d
    return (u @ dd @ vt).copy().reshape(9)


@njit(cache=True)
def _sqp_step(omega, r):
    """Equality-constrained QP step: minimize (r+d)^T Omega (r+d) subject to
    the linearized orthonormality constraints J d = -h, solved as one KKT
    system in (d, lambda)."""
    kkt = np.zeros((15, 15))
    rhs = np.zeros(15)
    kkt[:9, :9] = omega
    h = np.empty(6)
    jac = np.zeros((6, 9))
    for i in range(3):
        ri = r[3 * i:3 * i + 3]
        h[i] = ri[0] * ri[0] + ri[1] * ri[1] + ri[2] * ri[2] - 1.0
        jac[i, 3 * i:3 * i + 3] = 2.0 * ri
    k = 3
    for i in range(3):
        for j in range(i + 1, 3):
            h[k] = (r[3 * i] * r[3 * j] + r[3 * i + 1] * r[3 * j + 1]
                    + r[3 * i + 2] * r[3 * j + 2])
            jac[k, 3 * i:3 * i + 3] = r[3 * j:3 * j + 3]
            jac[k, 3 * j:3 * j + 3] = r[3 * i:3 * i + 3]
            k += 1
    kkt[:9, 9:] = jac.T
    kkt[9:, :9] = jac
    rhs[:9] = -(omega @ r)
    rhs[9:] = -h
    try:
        sol = np.linalg.solve(kkt, rhs)
    except Exception:
        sol = np.linalg.lstsq(kkt, rhs)[0]
    return sol[:9]


@njit(cache=True)
def _run_sqp(omega, r0):
    r = r0.copy()
    for _ in range(SQP_MAX_ITERATIONS):
        delta = _sqp_step(omega, r)
        r = r + delta
        if delta @ delta <= SQP_SQUARED_TOLERANCE:
            break
    if _det9(r) < 0:
        r = -r
    if abs(_det9(r)) - 1.0 > DET_THRESHOLD:
        r = _nearest_rotation(r)
    return r


@njit(cache=True)
def _mean_depth_positive(r, p_mat, pmean):
    tz = p_mat[2] @ r
    return r[6] * pmean[0] + r[7] * pmean[1] + r[8] * pmean[2] + tz > 0.0


@njit(cache=True)
def _solve_candidates(omega, eigvals, eigvecs, p_mat, pmean):
    """Examine SQP runs seeded from small-eigenvalue directions; returns the
    feasible 9-vector with the lowest objective.

    Near-planar rigs admit a mirrored solution with an equal objective and
    negated depths; candidates must put the point mean in front of the
    camera. If no candidate does (pathological data), the best objective
    wins regardless.
    """
    sqrt3 = math.sqrt(3.0)
    best_obj = np.inf
    best_r = np.zeros(9)
    fallback_obj = np.inf
    fallback_r = np.zeros(9)

    lam_max = eigvals[8]
    num_null = 0
    for i in range(9):
        if eigvals[i] < NULL_EIGENVALUE_REL_TOL * lam_max:
            num_null += 1
    num_eigen = max(1, num_null)

    for i in range(num_eigen):
        e = sqrt3 * eigvecs[:, i]
        direct = _orthogonality_sq_error(e) < ORTHOGONALITY_SQ_ERROR_THRESHOLD
        n_cand = 1 if direct else 2
        for which in range(n_cand):
            if direct:
                r = _det9(e) * e  # flips an improper direction to det +1
            elif which == 0:
                r = _run_sqp(omega, _nearest_rotation(e))
            else:
                r = _run_sqp(omega, _nearest_rotation(-e))
            obj = r @ omega @ r
            if obj < fallback_obj:
                fallback_obj = obj
                fallback_r = r
            if obj < best_obj and _mean_depth_positive(r, p_mat, pmean):
                best_obj = obj
                best_r = r

    # a rotation built along eigdirection c has objective >= 3 * eigvals[c];
    # keep probing while a better candidate could still exist
    c = num_eigen
    while c < 9 and best_obj > 3.0 * eigvals[c]:
        e = eigvecs[:, c]
        for sign in (1.0, -1.0):
            r = _run_sqp(omega, _nearest_rotation(sign * e))
            obj = r @ omega @ r
            if obj < fallback_obj:
                fallback_obj = obj
                fallback_r = r
            if obj < best_obj and _mean_depth_positive(r, p_mat, pmean):
                best_obj = obj
                best_r = r
        c += 1
    if not np.isfinite(best_obj):
        return fallback_r, fallback_obj
    return best_r, best_obj


@njit(cache=True)
def _build_omega_p(pts, xy):
    n = len(pts)
    sm = np.zeros((3, 3))
    sma = np.zeros((3, 9))
    omega = np.zeros((9, 9))
    for i in range(n):
        x = xy[i, 0]
        y = xy[i, 1]
        p = pts[i]
        # m = Q^T Q for Q = [[1,0,-x],[0,1,-y]]
        m00, m02 = 1.0, -x
        m11, m12 = 1.0, -y
        m22 = x * x + y * y
        sm[0, 0] += m00
        sm[0, 2] += m02
        sm[1, 1] += m11
        sm[1, 2] += m12
        sm[2, 0] += m02
        sm[2, 1] += m12
        sm[2, 2] += m22
        for d in range(3):
            sma[0, d] += m00 * p[d]
            sma[0, 6 + d] += m02 * p[d]
            sma[1, 3 + d] += m11 * p[d]
            sma[1, 6 + d] += m12 * p[d]
            sma[2, d] += m02 * p[d]
            sma[2, 3 + d] += m12 * p[d]
            sma[2, 6 + d] += m22 * p[d]
        for b in range(3):
            pb = p[b]
            for d in range(3):
                pd = p[d] * pb
                omega[b, d] += m00 * pd
                omega[b, 6 + d] += m02 * pd
                omega[3 + b, 3 + d] += m11 * pd
                omega[3 + b, 6 + d] += m12 * pd
                omega[6 + b, d] += m02 * pd
                omega[6 + b, 3 + d] += m12 * pd
                omega[6 + b, 6 + d] += m22 * pd
    p_mat = -np.linalg.solve(sm, sma)
    omega = omega + sma.T @ p_mat
    return 0.5 * (omega + omega.T), p_mat


@njit(cache=True)
def _sqpnp_core(pts, xy):
    omega, p_mat = _build_omega_p(pts, xy)
    eigvals, eigvecs = np.linalg.eigh(omega)
    pmean = np.array([pts[:, 0].mean(), pts[:, 1].mean(), pts[:, 2].mean()])
    r9, obj = _solve_candidates(omega, eigvals, eigvecs, p_mat, pmean)
    return r9, p_mat @ r9, obj


def _finish_rotation(r9: np.ndarray, solver: str) -> np.ndarray:
    rot = r9.reshape(3, 3)
    u, _, vt = np.linalg.svd(rot)
    d = np.eye(3)
    d[2, 2] = np.linalg.det(u @ vt)
    nearest = u @ d @ vt
    drift = float(np.max(np.abs(nearest - rot)))
    if drift > ORTHONORMALIZATION_DRIFT_LIMIT:
        warnings.warn(
            f"{solver}: rotation drifted {drift:.2e} from orthonormality "
            "before the final correction",
            stacklevel=3,
        )
    return nearest


def squared_projection_objective(pose: PoseEstimate, correspondences) -> float:
    """Sum over points of |(X - x Z, Y - y Z)|^2 with (X, Y, Z) = R p + t.

    This is the algebraic objective both solvers are compared on.
    """
    pts, xy = _unpack(correspondences)
    pc = pts @ pose.rotation.T + pose.t
    ru = pc[:, 0] - xy[:, 0] * pc[:, 2]
    rv = pc[:, 1] - xy[:, 1] * pc[:, 2]
    return float(np.sum(ru * ru + rv * rv))


def reprojection_rmse(pose: PoseEstimate, correspondences, intrinsics=None) -> float:
    """RMS reprojection residual in normalized units, or pixels when
    intrinsics are given (residuals scaled by fx/fy per axis)."""
    pts, xy = _unpack(correspondences)
    pc = pts @ pose.rotation.T + pose.t
    if np.any(pc[:, 2] <= 0):
        return float("inf")
    res = pc[:, :2] / pc[:, 2:3] - xy
    if intrinsics is not None:
        res = res * np.array([intrinsics.fx, intrinsics.fy])
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def solve_sqpnp(correspondences, t_us: int = 0) -> PoseEstimate:
    """Globally optimal PnP over the squared projection objective."""
    pts, xy = _unpack(correspondences)
    _check_input(pts, xy)
    r9, t, _ = _sqpnp_core(np.ascontiguousarray(pts), np.ascontiguousarray(xy))
    rot = _finish_rotation(r9, "sqpnp")
    pc = pts @ rot.T + t
    if np.any(pc[:, 2] <= 0):
        rmse = float("inf")
    else:
        res = pc[:, :2] / pc[:, 2:3] - xy
        rmse = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    return PoseEstimate(matrix_to_quat(rot), t, rmse, "sqpnp", t_us)


# ---------------------------------------------------------------------------
# EPnP

PLANARITY_EIGENVALUE_RATIO = 1e-8


def _control_points(pts: np.ndarray, planar: bool) -> np.ndarray:
    centroid = pts.mean(axis=0)
    cov = (pts - centroid).T @ (pts - centroid)
    w, v = np.linalg.eigh(cov)  # ascending
    if planar:
        axes = v[:, 1:][:, ::-1] * np.sqrt(np.maximum(w[1:][::-1], 1e-300) / len(pts))
        return np.vstack([centroid, centroid + axes.T[0], centroid + axes.T[1]])
    axes = v[:, ::-1] * np.sqrt(np.maximum(w[::-1], 1e-300) / len(pts))
    return np.vstack([centroid, centroid + axes.T[0], centroid + axes.T[1],
                      centroid + axes.T[2]])


def _barycentric(pts: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    k = len(ctrl)
    a = np.vstack([ctrl.T, np.ones(k)])          # (4, k)
    b = np.vstack([pts.T, np.ones(len(pts))])    # (4, n)
    alphas, *_ = np.linalg.lstsq(a, b, rcond=None)
    return alphas                                 # (k, n)


def _constraint_matrix(alphas: np.ndarray, xy: np.ndarray) -> np.ndarray:
    k, n = alphas.shape
    m = np.zeros((2 * n, 3 * k))
    for j in range(k):
        m[0::2, 3 * j] = alphas[j]
        m[0::2, 3 * j + 2] = -alphas[j] * xy[:, 0]
        m[1::2, 3 * j + 1] = alphas[j]
        m[1::2, 3 * j + 2] = -alphas[j] * xy[:, 1]
    return m


def _pairwise_sq_dists(ctrl: np.ndarray) -> np.ndarray:
    k = len(ctrl)
    out = []
    for i in range(k):
        for j in range(i + 1, k):
            d = ctrl[i] - ctrl[j]
            out.append(d @ d)
    return np.array(out)


def _scale_to_world(cc: np.ndarray, alphas: np.ndarray, dist_w: np.ndarray):
    """Closed-form scale so camera control-point distances match the body
    ones; flips the sign if the cloud lands behind the camera."""
    dist_c = np.sqrt(_pairwise_sq_dists(cc))
    dw = np.sqrt(dist_w)
    denom = dist_c @ dist_c
    beta = (dist_c @ dw) / denom if denom > 0 else 0.0
    cc = cc * beta
    pc = (alphas.T @ cc)
    if pc[:, 2].mean() < 0:
        cc, pc = -cc, -pc
    return cc, pc


def _absolute_orientation(pw: np.ndarray, pc: np.ndarray):
    muw, muc = pw.mean(axis=0), pc.mean(axis=0)
    h = (pw - muw).T @ (pc - muc)
    u, _, vt = np.linalg.svd(h)
    d = np.eye(3)
    d[2, 2] = np.linalg.det(vt.T @ u.T)
    rot = vt.T @ d @ u.T
    return rot, muc - rot @ muw


def _l_matrix(v: np.ndarray, k: int) -> np.ndarray:
    """Distance-constraint matrix over the linearized beta products."""
    nv = v.shape[1]
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    cols = nv * (nv + 1) // 2
    l_mat = np.zeros((len(pairs), cols))
    for row, (i, j) in enumerate(pairs):
        diffs = [v[3 * i:3 * i + 3, a] - v[3 * j:3 * j + 3, a] for a in range(nv)]
        col = 0
        for a in range(nv):
            for b in range(a, nv):
                f = 1.0 if a == b else 2.0
                l_mat[row, col] = f * (diffs[a] @ diffs[b])
                col += 1
    return l_mat


def solve_epnp(correspondences, t_us: int = 0) -> PoseEstimate:
    """Standard EPnP: closed-form betas, best case by reprojection error.

    Falls back to the three-control-point planar variant when the body
    points' smallest covariance eigenvalue is below 1e-8 of the largest.
    """
    pts, xy = _unpack(correspondences)
    _check_input(pts, xy)

    centered = pts - pts.mean(axis=0)
    w = np.linalg.eigvalsh(centered.T @ centered)
    planar = w[0] < PLANARITY_EIGENVALUE_RATIO * w[-1]

    ctrl = _control_points(pts, planar)
    k = len(ctrl)
    alphas = _barycentric(pts, ctrl)
    m = _constraint_matrix(alphas, xy)
    _, vecs = np.linalg.eigh(m.T @ m)
    nv = 3 if not planar else 2
    v = vecs[:, :max(nv, 2)]  # null-ish vectors, smallest eigenvalues first
    rho = _pairwise_sq_dists(ctrl)
    dist_w = rho

    candidates = []
    # case N=1
    candidates.append(v[:, 0].copy())
    # case N=2
    l_mat = _l_matrix(v[:, :2], k)
    sol, *_ = np.linalg.lstsq(l_mat, rho, rcond=None)
    b1 = math.sqrt(abs(sol[0]))
    b2 = (-1.0 if (sol[0] > 0) != (sol[1] > 0) else 1.0) * math.sqrt(abs(sol[2]))
    candidates.append(v[:, :2] @ np.array([b1, b2]))
    if not planar:
        # case N=3
        l3 = _l_matrix(v[:, :3], k)
        try:
            sol3 = np.linalg.solve(l3, rho)
        except np.linalg.LinAlgError:
            sol3 = np.linalg.lstsq(l3, rho, rcond=None)[0]
        b1 = math.sqrt(abs(sol3[0]))
        b2 = (-1.0 if (sol3[0] > 0) != (sol3[1] > 0) else 1.0) * math.sqrt(abs(sol3[3]))
        b3 = (-1.0 if (sol3[0] > 0) != (sol3[2] > 0) else 1.0) * math.sqrt(abs(sol3[5]))
        candidates.append(v[:, :3] @ np.array([b1, b2, b3]))

    best = None
    for cand in candidates:
        cc = cand.reshape(k, 3)
        cc, pc = _scale_to_world(cc, alphas, dist_w)
        rot, t = _absolute_orientation(pts, pc)
        pose = PoseEstimate(matrix_to_quat(rot), t, 0.0, "epnp", t_us)
        err = reprojection_rmse(pose, (pts, xy))
        if best is None or err < best[0]:
            best = (err, pose)

    err, pose = best
    return PoseEstimate(pose.q, pose.t, err, "epnp", t_us)


SOLVERS = {"sqpnp": solve_sqpnp, "epnp": solve_epnp}


def refine_pose(pose: PoseEstimate, correspondences) -> PoseEstimate:
    """Local nonlinear refinement of the squared projection objective.

    Oracle for tests; not part of the published pipeline path.
    """
    from scipy.optimize import least_squares
    from scipy.spatial.transform import Rotation

    pts, xy = _unpack(correspondences)

    def residuals(params):
        rot = Rotation.from_rotvec(params[:3]).as_matrix()
        pc = pts @ rot.T + params[3:]
        return np.concatenate([pc[:, 0] - xy[:, 0] * pc[:, 2],
                               pc[:, 1] - xy[:, 1] * pc[:, 2]])

    x0 = np.concatenate([Rotation.from_matrix(pose.rotation).as_rotvec(), pose.t])
    res = least_squares(residuals, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    rot = Rotation.from_rotvec(res.x[:3]).as_matrix()
    refined = PoseEstimate(matrix_to_quat(rot), res.x[3:], 0.0,
                           pose.solver + "+refined", pose.t_us)
    return PoseEstimate(refined.q, refined.t,
                        reprojection_rmse(refined, (pts, xy)),
                        refined.solver, refined.t_us)


def to_world(pose_cb: RigidTransform, t_cw: RigidTransform) -> RigidTransform:
    """Body-to-world pose: T_WB = inverse(T_CW) composed with T_CB."""
    return t_cw.inverse() @ pose_cb


def depth_sigma(z_c: float, marker_span_b: float, focal_f: float,
                sigma_u: float) -> float:
    """Predicted depth noise: grows with the square of the distance.

    sigma_pz = z^2 * sigma_u / (b * f), with b the marker span perpendicular
    to the optical axis and f in pixels.
    """
    if min(z_c, marker_span_b, focal_f, sigma_u) <= 0:
        raise ValueError("all depth-noise model inputs must be positive")
    return z_c * z_c * sigma_u / (marker_span_b * focal_f)


def marker_span_perpendicular(points_cam: np.ndarray) -> float:
    """Largest pairwise marker distance projected onto the image plane."""
    pts = np.asarray(points_cam, np.float64).reshape(-1, 3)[:, :2]
    best = 0.0
    for i in range(len(pts)):
        d = np.linalg.norm(pts[i + 1:] - pts[i], axis=1)
        if len(d):
            best = max(best, float(d.max()))
    return best
