"""Coarse-to-fine direct image alignment of a new stereo frame against the
newest keyframe: Gauss-Newton over (pose, affine brightness) per pyramid
level, with point depths held fixed."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PATTERN_MARGIN, PinholeIntrinsics, Se3, se3_exp
from .image import GRADIENT_CONSTANT, ImagePyramid, gradient_weight, sample_bilinear_batch
from .point_selector import RESIDUAL_PATTERN

HUBER_GAMMA = 9.0  # intensity units

MAX_ITERATIONS_PER_LEVEL = 50
RELATIVE_DECREASE_TOL = 1e-5
DAMPING_INITIAL = 1e-4
DAMPING_UP = 10.0
DAMPING_DOWN = 10.0
DAMPING_MAX = 1e6

DIVERGED_ENERGY_FACTOR = 1.5
MIN_INLIER_FRACTION = 0.3
MIN_VALID_POINTS = 20
MIN_REFERENCE_POINTS = 50

# A residual center within this multiple of the Huber threshold counts as an
# inlier for the diagnostics.
INLIER_RESIDUAL_FACTOR = 3.0

# Weak pull of the new frame's affine towards the reference's, orders of
# magnitude below the photometric information; bounds drift on degenerate
# frames without biasing genuine brightness changes measurably.
AFFINE_CHANGE_PRIOR_A = 1e2
AFFINE_CHANGE_PRIOR_B = 1e1


class TrackingLostError(RuntimeError):
    pass


@dataclass(frozen=True)
class AffineBrightness:
    """Per-image brightness model: corrected intensity is e^-a (I - b)."""

    a: float = 0.0
    b: float = 0.0


def huber_cost(r, gamma: float = HUBER_GAMMA):
    """Huber cost: r^2/2 inside the threshold, gamma(|r| - gamma/2) outside."""
    if gamma <= 0:
        raise ValueError("huber threshold must be positive")
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    return np.where(a <= gamma, 0.5 * r * r, gamma * (a - 0.5 * gamma))


def huber_weight(r, gamma: float = HUBER_GAMMA):
    """IRLS weight: 1 inside the threshold, gamma/|r| outside."""
    if gamma <= 0:
        raise ValueError("huber threshold must be positive")
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    with np.errstate(divide="ignore"):
        return np.where(a <= gamma, 1.0, gamma / np.where(a > 0, a, 1.0))


@dataclass(frozen=True)
class TrackingResult:
    t_new_ref: Se3  # maps reference-camera coordinates into the new camera
    affine: AffineBrightness  # new frame's absolute (a, b)
    energy: float  # mean weighted Huber cost per valid residual, finest level
    inlier_fraction: float
    flow: float  # mean squared optical flow, px^2
    flow_translation_only: float  # same, with the rotation removed
    brightness_change: float  # |a_new - a_ref|
    n_valid: int


@dataclass
class TrackingReference:
    """Reference-keyframe data the tracker aligns against.

    Points carry fixed inverse depths in the reference frame; per-level host
    pattern intensities and gradient weights are precomputed lazily.
    """

    pyramid: ImagePyramid
    intrinsics: PinholeIntrinsics
    uv: np.ndarray  # (N, 2) level-0 pixels
    inv_depth: np.ndarray  # (N,)
    affine: AffineBrightness
    gradient_constant: float = GRADIENT_CONSTANT

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        self.inv_depth = np.asarray(self.inv_depth, dtype=np.float64).reshape(-1)
        if len(self.uv) != len(self.inv_depth):
            raise ValueError("uv and inv_depth lengths differ")
        if np.any(self.inv_depth <= 0):
            raise ValueError("reference inverse depths must be positive")
        self._levels: dict[int, dict] = {}

    @property
    def num_points(self) -> int:
        return len(self.uv)

    def level_data(self, level: int) -> dict:
        if level not in self._levels:
            img = self.pyramid[level]
            s = 2.0 ** level
            uv_l = (self.uv + 0.5) / s - 0.5
            pts = uv_l[:, None, :] + RESIDUAL_PATTERN[None, :, :]
            host_int, hgx, hgy, ok = sample_bilinear_batch(img, pts)
            weight = gradient_weight(hgx, hgy, self.gradient_constant)
            # normalized camera rays are level-independent
            rays = np.empty((len(self.uv), 3))
            rays[:, 0] = (self.uv[:, 0] - self.intrinsics.cx) / self.intrinsics.fx
            rays[:, 1] = (self.uv[:, 1] - self.intrinsics.cy) / self.intrinsics.fy
            rays[:, 2] = 1.0
            self._levels[level] = {
                "uv": uv_l,
                "host_int": host_int,
                "weight": weight,
                "host_ok": ok,
                "points": rays / self.inv_depth[:, None],
                "intr": self.intrinsics.scaled(level),
            }
        return self._levels[level]


def constant_motion_prior(t_prev_rel: Se3 | None) -> Se3:
    """Initialization for the next frame: the last inter-frame motion, or the
    identity when there is no history."""
    return Se3.identity() if t_prev_rel is None else t_prev_rel


def _project_points(points: np.ndarray, t: Se3, intr: PinholeIntrinsics,
                    margin: float = PATTERN_MARGIN):
    """Camera-frame points through t, then the pinhole. Returns (uv, xt, ok)."""
    xt = points @ t.rotation.T + t.translation
    z = xt[:, 2]
    ok = z > 0
    safe_z = np.where(ok, z, 1.0)
    uv = np.empty((len(points), 2))
    uv[:, 0] = intr.fx * xt[:, 0] / safe_z + intr.cx
    uv[:, 1] = intr.fy * xt[:, 1] / safe_z + intr.cy
    ok &= (uv[:, 0] >= margin) & (uv[:, 0] <= intr.width - 1 - margin)
    ok &= (uv[:, 1] >= margin) & (uv[:, 1] <= intr.height - 1 - margin)
    return uv, xt, ok


def _evaluate_level(ref: TrackingReference, target, level: int, t: Se3,
                    affine: AffineBrightness, gamma: float, with_jacobian: bool,
                    point_mask: np.ndarray | None = None):
    """Residuals (and optionally the Gauss-Newton system) at one level.

    Returns a dict with mean energy, valid counts and, when requested, the
    8x8 Hessian and gradient over (twist(6), a, b). `point_mask` restricts
    the evaluation to a fixed point subset.
    """
    data = ref.level_data(level)
    intr = data["intr"]
    img = target[level]
    uv_c, xt, ok_c = _project_points(data["points"], t, intr)

    pts = uv_c[:, None, :] + RESIDUAL_PATTERN[None, :, :]
    t_int, t_gx, t_gy, ok_s = sample_bilinear_batch(img, pts)
    valid = ok_c[:, None] & ok_s & data["host_ok"]
    if point_mask is not None:
        valid = valid & point_mask[:, None]

    s = math.exp(min(20.0, max(-20.0, affine.a - ref.affine.a)))
    corrected_host = s * (data["host_int"] - ref.affine.b)
    r = t_int - affine.b - corrected_host
    # saturate beyond 3 gamma: structured outliers (occluded or aliased
    # surfaces) otherwise drag the affine estimate and, through it, the pose
    cap = INLIER_RESIDUAL_FACTOR * gamma
    saturated = np.abs(r) > cap
    w_huber = np.where(saturated, 0.0, huber_weight(r, gamma))
    w = np.where(valid, data["weight"] * w_huber, 0.0)
    cost = np.minimum(huber_cost(r, gamma), huber_cost(cap, gamma))
    energy_elems = np.where(valid, data["weight"] * cost, 0.0)
    n_valid_elems = int(valid.sum())

    out = {
        "n_points": int(ok_c.sum()),
        "n_elems": n_valid_elems,
        "energy": float(energy_elems.sum() / max(n_valid_elems, 1)),
        "residual_center": r[:, 0],
        "valid_center": valid[:, 0],
        "uv_center": uv_c,
        "ok_center": ok_c,
    }
    if not with_jacobian:
        return out

    # geometric chain shared by all pattern offsets of a point
    z = np.where(ok_c, xt[:, 2], 1.0)
    inv_z = 1.0 / z
    x_n = xt[:, 0] * inv_z
    y_n = xt[:, 1] * inv_z
    # d(uv)/d(twist) = P * [I | -[X']_x], premultiplied by the focal lengths
    du = np.stack([
        intr.fx * inv_z,
        np.zeros_like(z),
        -intr.fx * x_n * inv_z,
        -intr.fx * x_n * y_n,
        intr.fx * (1.0 + x_n * x_n),
        -intr.fx * y_n,
    ], axis=1)
    dv = np.stack([
        np.zeros_like(z),
        intr.fy * inv_z,
        -intr.fy * y_n * inv_z,
        -intr.fy * (1.0 + y_n * y_n),
        intr.fy * x_n * y_n,
        intr.fy * x_n,
    ], axis=1)

    jac = np.empty(r.shape + (8,))
    jac[:, :, :6] = t_gx[:, :, None] * du[:, None, :] + t_gy[:, :, None] * dv[:, None, :]
    jac[:, :, 6] = -corrected_host  # d/d a_new
    jac[:, :, 7] = -1.0  # d/d b_new

    wj = w[:, :, None] * jac
    h = np.einsum("nko,nkp->op", wj, jac)
    g = np.einsum("nko,nk->o", wj, r)
    h[6, 6] += AFFINE_CHANGE_PRIOR_A
    h[7, 7] += AFFINE_CHANGE_PRIOR_B
    g[6] += AFFINE_CHANGE_PRIOR_A * (affine.a - ref.affine.a)
    g[7] += AFFINE_CHANGE_PRIOR_B * (affine.b - ref.affine.b)
    out["H"] = h
    out["g"] = g
    return out


def track(ref: TrackingReference, new_pyramid: ImagePyramid, t_init: Se3,
          affine_init: AffineBrightness | None = None,
          gamma: float = HUBER_GAMMA) -> TrackingResult:
    """Align a new frame against the reference by coarse-to-fine Gauss-Newton.

    Minimizes the affine-corrected photometric error over (T, a, b) per
    pyramid level, coarsest first, with multiplicative damping: rejected
    steps raise the damping tenfold, accepted steps lower it. Raises
    TrackingLostError when the final energy exceeds 1.5x the initial energy
    at the finest level, or too few residuals remain valid, or the inlier
    fraction falls below 0.3.
    """
    if ref.num_points < MIN_REFERENCE_POINTS:
        raise TrackingLostError(
            f"reference has {ref.num_points} points, need {MIN_REFERENCE_POINTS}")
    t = t_init
    affine = affine_init if affine_init is not None else ref.affine

    initial_finest = _evaluate_level(ref, new_pyramid, 0, t, affine, gamma, False)

    def run_level(level: int, t, affine, point_mask=None):
        damping = DAMPING_INITIAL
        cur = _evaluate_level(ref, new_pyramid, level, t, affine, gamma, True, point_mask)
        for _ in range(MAX_ITERATIONS_PER_LEVEL):
            if cur["n_elems"] == 0:
                break
            h = cur["H"].copy()
            h[np.diag_indices_from(h)] *= 1.0 + damping
            h[np.diag_indices_from(h)] += 1e-12
            try:
                delta = np.linalg.solve(h, -cur["g"])
            except np.linalg.LinAlgError:
                break
            t_try = se3_exp(delta[:6]) @ t
            affine_try = AffineBrightness(affine.a + delta[6], affine.b + delta[7])
            trial = _evaluate_level(ref, new_pyramid, level, t_try, affine_try, gamma,
                                    True, point_mask)
            if trial["n_elems"] > 0 and trial["energy"] < cur["energy"]:
                rel_decrease = (cur["energy"] - trial["energy"]) / max(cur["energy"], 1e-12)
                t, affine, cur = t_try, affine_try, trial
                damping = max(damping / DAMPING_DOWN, 1e-9)
                if rel_decrease < RELATIVE_DECREASE_TOL:
                    break
            else:
                damping *= DAMPING_UP
                if damping > DAMPING_MAX:
                    break
        return t, affine

    for level in range(len(new_pyramid) - 1, -1, -1):
        t, affine = run_level(level, t, affine)

    # trimmed refinement: freeze the inlier set and re-solve the finest level.
    # Points crossing the saturation boundary otherwise bend the energy
    # surface into a shallow valley whose minimum wanders with the outliers.
    probe = _evaluate_level(ref, new_pyramid, 0, t, affine, gamma, False)
    trim_mask = probe["valid_center"] & (np.abs(probe["residual_center"])
                                         <= INLIER_RESIDUAL_FACTOR * gamma)
    if trim_mask.sum() >= MIN_VALID_POINTS:
        t, affine = run_level(0, t, affine, trim_mask)

    final = _evaluate_level(ref, new_pyramid, 0, t, affine, gamma, False)
    n_valid = int(final["valid_center"].sum())
    inliers = final["valid_center"] & (np.abs(final["residual_center"])
                                       <= INLIER_RESIDUAL_FACTOR * gamma)
    inlier_fraction = float(inliers.sum()) / max(ref.num_points, 1)

    if n_valid < MIN_VALID_POINTS:
        raise TrackingLostError(f"only {n_valid} points remain valid after alignment")
    if initial_finest["n_elems"] > 0 and final["energy"] > DIVERGED_ENERGY_FACTOR * initial_finest["energy"]:
        raise TrackingLostError(
            f"energy diverged: {final['energy']:.3f} > 1.5 x {initial_finest['energy']:.3f}")
    if inlier_fraction < MIN_INLIER_FRACTION:
        raise TrackingLostError(f"inlier fraction {inlier_fraction:.2f} below threshold")

    data0 = ref.level_data(0)
    uv_new, _, ok_new = _project_points(data0["points"], t, ref.intrinsics)
    t_trans = Se3(np.eye(3), t.translation)
    uv_t, _, ok_t = _project_points(data0["points"], t_trans, ref.intrinsics)
    ok_flow = ok_new & ok_t
    if np.any(ok_flow):
        d_full = uv_new[ok_flow] - ref.uv[ok_flow]
        d_trans = uv_t[ok_flow] - ref.uv[ok_flow]
        flow = float(np.mean(np.sum(d_full ** 2, axis=1)))
        flow_t = float(np.mean(np.sum(d_trans ** 2, axis=1)))
    else:
        flow = flow_t = 0.0

    return TrackingResult(
        t_new_ref=t,
        affine=affine,
        energy=final["energy"],
        inlier_fraction=inlier_fraction,
        flow=flow,
        flow_translation_only=flow_t,
        brightness_change=abs(affine.a - ref.affine.a),
        n_valid=n_valid,
    )
