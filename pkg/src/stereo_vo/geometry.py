"""SE(3) rigid-body transforms, pinhole projection and the rectified stereo rig.

All functions here are pure and operate on immutable values; twists are
ordered (v, omega) with the translational part first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Rotation angles below this use the second-order Taylor expansion of the
# exp/log coefficient functions.
SMALL_ANGLE = 1e-8

# Rotations closer to pi than this are rejected by se3_log (principal branch).
LOG_ANGLE_MARGIN = 1e-6


class GeometryError(ValueError):
    """Raised on invalid geometric input (non-principal log, bad inverse depth...)."""


@dataclass(frozen=True)
class Se3:
    """Rigid-body transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "Se3":
        return Se3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Se3":
        m = np.asarray(m, dtype=np.float64)
        return Se3(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Se3") -> "Se3":
        """self o other: apply `other` first, then `self`."""
        return Se3(self.rotation @ other.rotation,
                   self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Se3":
        rt = self.rotation.T
        return Se3(rt, -rt @ self.translation)

    def __matmul__(self, other: "Se3") -> "Se3":
        return self.compose(other)


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Pinhole camera with zero skew on a rectified image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def as_vector(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def scaled(self, level: int) -> "PinholeIntrinsics":
        """Intrinsics for pyramid level `level` under 2x2 mean-pool downsampling.

        The pixel-center mapping between levels is x_l = (x + 0.5) / 2**l - 0.5.
        """
        s = 2 ** level
        return PinholeIntrinsics(
            fx=self.fx / s,
            fy=self.fy / s,
            cx=(self.cx + 0.5) / s - 0.5,
            cy=(self.cy + 0.5) / s - 0.5,
            width=self.width // s,
            height=self.height // s,
        )


@dataclass(frozen=True)
class StereoRig:
    """Fixed rectified stereo extrinsics.

    The left->right point transform is the pure translation (-baseline, 0, 0):
    the right camera sits at +baseline along the left camera's x axis.
    """

    baseline: float  # meters

    def __post_init__(self):
        if self.baseline <= 0:
            raise GeometryError("baseline must be positive")

    def left_to_right(self) -> Se3:
        return Se3(np.eye(3), np.array([-self.baseline, 0.0, 0.0]))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (Rodrigues)."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = math.sqrt(float(omega @ omega))
    w = _skew(omega)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        # second-order Taylor of sin(t)/t and (1-cos t)/t^2
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * w + b * w2


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix; principal branch only."""
    rot = np.asarray(rot, dtype=np.float64)
    cos_theta = max(-1.0, min(1.0, 0.5 * (np.trace(rot) - 1.0)))
    theta = math.acos(cos_theta)
    if math.pi - theta < LOG_ANGLE_MARGIN:
        raise GeometryError(f"rotation angle {theta:.9f} too close to pi for principal log")
    vee = 0.5 * np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if theta < SMALL_ANGLE:
        return vee  # sin(theta)/theta -> 1
    return vee * theta / math.sin(theta)


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    """V matrix coupling translation and rotation in the SE(3) exponential."""
    theta = math.sqrt(float(omega @ omega))
    w = _skew(omega)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        b = 0.5 - theta * theta / 24.0
        c = 1.0 / 6.0 - theta * theta / 120.0
    else:
        b = (1.0 - math.cos(theta)) / (theta * theta)
        c = (theta - math.sin(theta)) / (theta ** 3)
    return np.eye(3) + b * w + c * w2


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(omega @ omega))
    w = _skew(omega)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        c = (1.0 - 0.5 * theta * math.sin(theta) / (1.0 - math.cos(theta))) / (theta * theta)
    return np.eye(3) - 0.5 * w + c * w2


def se3_exp(twist: np.ndarray) -> Se3:
    """Closed-form exponential of a (v, omega) twist."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(twist)):
        raise GeometryError("twist must be finite")
    v, omega = twist[:3], twist[3:]
    rot = so3_exp(omega)
    trans = _left_jacobian(omega) @ v
    return Se3(rot, trans)


def se3_log(t: Se3) -> np.ndarray:
    """Principal-branch logarithm; inverse of se3_exp."""
    omega = so3_log(t.rotation)
    v = _left_jacobian_inv(omega) @ t.translation
    return np.concatenate([v, omega])


def rotation_angle(rot: np.ndarray) -> float:
    """Rotation angle in radians, in [0, pi]."""
    cos_theta = max(-1.0, min(1.0, 0.5 * (np.trace(np.asarray(rot)) - 1.0)))
    return math.acos(cos_theta)


def backproject(uv: np.ndarray, inv_depth: float, intr: PinholeIntrinsics) -> np.ndarray:
    """Pixel plus inverse depth to a camera-frame 3D point."""
    if inv_depth <= 0:
        raise GeometryError("inverse depth must be positive")
    u, v = float(uv[0]), float(uv[1])
    return np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0]) / inv_depth


# Outcomes of projecting a point into a target image.
PROJ_OK = 0
PROJ_BEHIND = 1
PROJ_OUT_OF_IMAGE = 2

# Border margin for projections: the residual pattern reaches 2 px from the
# center and bilinear sampling needs one more valid pixel on the high side.
PATTERN_MARGIN = 3.0


def project(uv: np.ndarray, inv_depth: float, t_target_host: Se3,
            intr: PinholeIntrinsics, margin: float = PATTERN_MARGIN):
    """Project a host pixel with inverse depth into a target camera.

    Returns (uv_target, status). The pixel is only meaningful when status is
    PROJ_OK; points behind the target camera and points landing outside the
    image minus `margin` are reported as distinct non-fatal outcomes.
    """
    x = backproject(uv, inv_depth, intr)
    xt = t_target_host.apply(x)
    if xt[2] <= 0:
        return None, PROJ_BEHIND
    u = intr.fx * xt[0] / xt[2] + intr.cx
    v = intr.fy * xt[1] / xt[2] + intr.cy
    if not (margin <= u <= intr.width - 1 - margin and margin <= v <= intr.height - 1 - margin):
        return np.array([u, v]), PROJ_OUT_OF_IMAGE
    return np.array([u, v]), PROJ_OK


def project_batch(uv: np.ndarray, inv_depth: np.ndarray, t_target_host: Se3,
                  intr: PinholeIntrinsics, margin: float = PATTERN_MARGIN):
    """Vectorized projection of (N, 2) pixels with (N,) inverse depths.

    Returns (uv_target (N, 2), depth_target (N,), ok mask (N,)). Entries with
    non-positive host inverse depth or target depth, or out-of-margin
    projections, have ok=False; their uv rows are unspecified.
    """
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(inv_depth, dtype=np.float64)
    n = np.empty((uv.shape[0], 3))
    n[:, 0] = (uv[:, 0] - intr.cx) / intr.fx
    n[:, 1] = (uv[:, 1] - intr.cy) / intr.fy
    n[:, 2] = 1.0
    safe_d = np.where(d > 0, d, 1.0)
    x = n / safe_d[:, None]
    xt = x @ t_target_host.rotation.T + t_target_host.translation
    z = xt[:, 2]
    ok = (d > 0) & (z > 0)
    safe_z = np.where(z > 0, z, 1.0)
    out = np.empty_like(uv)
    out[:, 0] = intr.fx * xt[:, 0] / safe_z + intr.cx
    out[:, 1] = intr.fy * xt[:, 1] / safe_z + intr.cy
    ok &= (out[:, 0] >= margin) & (out[:, 0] <= intr.width - 1 - margin)
    ok &= (out[:, 1] >= margin) & (out[:, 1] <= intr.height - 1 - margin)
    return out, z, ok
