"""Double-sphere camera model: projection, unprojection, undistortion.

The model projects through two unit spheres whose centers are offset by xi
along the optical axis, blended by alpha_ds; it degenerates to a pinhole
for xi = 0, alpha_ds = 0. All functions accept (3,)/(2,) vectors or (N, d)
arrays. The blend parameter is named alpha_ds to keep it apart from the LED
duty cycle alpha used elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import SensorGeometry


class ProjectionDomainError(ValueError):
    """Point or pixel outside the model's valid domain."""


@dataclass(frozen=True)
class DsIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    xi: float
    alpha_ds: float
    geometry: SensorGeometry

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0.0 <= self.alpha_ds < 1.0:
            raise ValueError("alpha_ds must be in [0, 1)")

    @property
    def focal_mean(self) -> float:
        """Geometric-mean focal length, used by the depth-noise model."""
        return float(np.sqrt(self.fx * self.fy))


def _w2(intr: DsIntrinsics) -> float:
    a, xi = intr.alpha_ds, intr.xi
    w1 = a / (1 - a) if a <= 0.5 else (1 - a) / a
    return (w1 + xi) / np.sqrt(2 * w1 * xi + xi * xi + 1)


def project_valid_mask(points: np.ndarray, intr: DsIntrinsics) -> np.ndarray:
    """True where a camera-frame point lies in the valid projection domain."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d1 = np.linalg.norm(pts, axis=1)
    return (pts[:, 2] > -_w2(intr) * d1) & (d1 > 0)


def project(points: np.ndarray, intr: DsIntrinsics) -> np.ndarray:
    """Camera-frame points -> sub-pixel image coordinates.

    Raises ProjectionDomainError if any point is outside the valid domain.
    """
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    pts = np.atleast_2d(points)
    if not project_valid_mask(pts, intr).all():
        raise ProjectionDomainError("point outside valid projection domain")
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    d1 = np.sqrt(x * x + y * y + z * z)
    zed = intr.xi * d1 + z
    d2 = np.sqrt(x * x + y * y + zed * zed)
    denom = intr.alpha_ds * d2 + (1 - intr.alpha_ds) * zed
    uv = np.stack([intr.fx * x / denom + intr.cx, intr.fy * y / denom + intr.cy], axis=1)
    return uv[0] if single else uv


def unproject(pixels: np.ndarray, intr: DsIntrinsics) -> np.ndarray:
    """Pixels -> unit ray directions in the camera frame."""
    pixels = np.asarray(pixels, dtype=np.float64)
    single = pixels.ndim == 1
    px = np.atleast_2d(pixels)
    a, xi = intr.alpha_ds, intr.xi
    mx = (px[:, 0] - intr.cx) / intr.fx
    my = (px[:, 1] - intr.cy) / intr.fy
    r2 = mx * mx + my * my
    if a > 0.5 and np.any(r2 > 1.0 / (2 * a - 1)):
        raise ProjectionDomainError("pixel outside valid unprojection domain")
    under = 1 - (2 * a - 1) * r2
    mz = (1 - a * a * r2) / (a * np.sqrt(np.maximum(under, 0.0)) + 1 - a)
    scale = (mz * xi + np.sqrt(mz * mz + (1 - xi * xi) * r2)) / (mz * mz + r2)
    rays = np.stack([scale * mx, scale * my, scale * mz - xi], axis=1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    return rays[0] if single else rays


def undistort_to_normalized(pixels: np.ndarray, intr: DsIntrinsics) -> np.ndarray:
    """Pixels -> normalized image coordinates (x/z, y/z) ready for PnP.

    Raises ProjectionDomainError when the back-projected ray does not point
    in front of the camera; markers behind the camera are impossible here.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    single = pixels.ndim == 1
    rays = np.atleast_2d(unproject(pixels, intr))
    if np.any(rays[:, 2] <= 0):
        raise ProjectionDomainError("ray does not point in front of the camera")
    xy = rays[:, :2] / rays[:, 2:3]
    return xy[0] if single else xy
