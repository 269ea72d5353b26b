"""Sliding-window photometric bundle adjustment.

Jointly optimizes keyframe poses, per-image affine brightness, active-point
inverse depths (and optionally the shared intrinsics) by Gauss-Newton over
temporal and static-stereo residuals, eliminating the depth block by Schur
complement. Old keyframes and points are folded into a quadratic prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (GeometryError, PATTERN_MARGIN, PinholeIntrinsics, Se3,
                       StereoRig, se3_exp, se3_log)
from .image import ImagePyramid, sample_bilinear_batch
from .point_selector import ACTIVE, CandidatePoint, MARGINALIZED, RESIDUAL_PATTERN
from .tracker import AffineBrightness, HUBER_GAMMA, huber_cost, huber_weight

COUPLING_DEFAULT = 1.0
WINDOW_KEYFRAMES = 7
ACTIVE_POINT_TARGET = 2000

MAX_STEP_HALVINGS = 6
MAX_GN_ITERATIONS = 12
STEP_NORM_TOL = 1e-8
ENERGY_DECREASE_TOL = 1e-7

# Observations whose RMS residual exceeds this multiple of the Huber
# threshold after convergence are excluded from subsequent rounds.
OUTLIER_RESIDUAL_FACTOR = 3.0

# Zero-mean priors fixing the affine gauge directions (common shifts of a and
# of b leave the photometric energy flat when gains are equal). Still several
# orders below the photometric information on observable combinations.
AFFINE_PRIOR_A = 100.0
AFFINE_PRIOR_B = 1.0

# Hard state bounds keeping exp(a) and the bias inside sane numerics.
AFFINE_A_LIMIT = 8.0
AFFINE_B_LIMIT = 255.0

IDEPTH_MIN = 1e-6
IDEPTH_MAX = 1e3

MARGINALIZATION_REGULARIZER = 1e-8

# Step-acceptance penalty per invalid residual element (cost of a residual at
# twice the Huber threshold). Without it, a step that pushes a point out of
# the image would spuriously lower the summed energy.
def _oob_cost(gamma: float) -> float:
    return 1.5 * gamma * gamma


class OptimizerError(RuntimeError):
    pass


class MarginalizationError(RuntimeError):
    pass


@dataclass
class Keyframe:
    kf_id: int
    frame_index: int
    timestamp: float
    left: ImagePyramid
    right: ImagePyramid
    t_wc: Se3  # left camera to world
    affine_left: AffineBrightness = field(default_factory=AffineBrightness)
    affine_right: AffineBrightness = field(default_factory=AffineBrightness)
    candidates: list[CandidatePoint] = field(default_factory=list)


@dataclass
class ActivePoint:
    """A point hosted in one keyframe and observed by the others.

    Pattern intensities and gradient weights are frozen at activation time
    from the host image; observations flagged as outliers stay excluded.
    """

    point_id: int
    host_id: int
    uv: np.ndarray  # (2,) host pixel
    inv_depth: float
    host_int: np.ndarray  # (8,)
    weights: np.ndarray  # (8,) gradient weights
    status: str = ACTIVE
    outlier_targets: set[int] = field(default_factory=set)
    stereo_outlier: bool = False


@dataclass
class MarginalizationPrior:
    """Quadratic prior H x = b over kept frame variables, anchored at a frozen
    linearization point (first-estimate evaluation thereafter)."""

    keys: list[tuple]  # ("pose", kf_id) dim 6 | ("affine", kf_id) dim 4 | ("intrinsics",) dim 4
    lin_points: dict
    H: np.ndarray
    b: np.ndarray

    def dim(self) -> int:
        return self.H.shape[0]


_KEY_DIMS = {"pose": 6, "affine": 4, "intrinsics": 4}


def _key_dim(key: tuple) -> int:
    return _KEY_DIMS[key[0]]


@dataclass
class WindowState:
    """Optimization state: one pose and affine 4-vector per keyframe, the
    shared intrinsics, and per-point inverse depths.

    boxplus applies the SE(3) exponential on poses and plain addition on
    everything else.
    """

    poses: list[Se3]
    affine: np.ndarray  # (F, 4): aL, bL, aR, bR
    intrinsics: PinholeIntrinsics
    idepth: np.ndarray  # (Np,)

    def copy(self) -> "WindowState":
        return WindowState(list(self.poses), self.affine.copy(), self.intrinsics,
                           self.idepth.copy())

    def dim(self, intrinsics_frozen: bool = True) -> int:
        return 10 * len(self.poses) + len(self.idepth) + (0 if intrinsics_frozen else 4)

    def boxplus(self, frame_delta: np.ndarray, depth_delta: np.ndarray,
                c_delta: np.ndarray | None = None) -> "WindowState":
        poses = [se3_exp(frame_delta[f, :6]) @ self.poses[f] for f in range(len(self.poses))]
        affine = self.affine + frame_delta[:, 6:10]
        affine[:, 0::2] = np.clip(affine[:, 0::2], -AFFINE_A_LIMIT, AFFINE_A_LIMIT)
        affine[:, 1::2] = np.clip(affine[:, 1::2], -AFFINE_B_LIMIT, AFFINE_B_LIMIT)
        intr = self.intrinsics
        if c_delta is not None:
            v = intr.as_vector() + c_delta
            intr = PinholeIntrinsics(v[0], v[1], v[2], v[3], intr.width, intr.height)
        idepth = np.clip(self.idepth + depth_delta, IDEPTH_MIN, IDEPTH_MAX)
        return WindowState(poses, affine, intr, idepth)


@dataclass
class KeyframeWindow:
    intrinsics: PinholeIntrinsics
    rig: StereoRig
    keyframes: list[Keyframe] = field(default_factory=list)
    points: list[ActivePoint] = field(default_factory=list)
    prior: MarginalizationPrior | None = None

    def keyframe_index(self, kf_id: int) -> int:
        for i, kf in enumerate(self.keyframes):
            if kf.kf_id == kf_id:
                return i
        raise KeyError(f"keyframe {kf_id} not in window")

    def state(self) -> WindowState:
        affine = np.array([[kf.affine_left.a, kf.affine_left.b,
                            kf.affine_right.a, kf.affine_right.b]
                           for kf in self.keyframes]).reshape(len(self.keyframes), 4)
        return WindowState(
            poses=[kf.t_wc for kf in self.keyframes],
            affine=affine,
            intrinsics=self.intrinsics,
            idepth=np.array([p.inv_depth for p in self.points]),
        )

    def apply_state(self, state: WindowState) -> None:
        for f, kf in enumerate(self.keyframes):
            kf.t_wc = state.poses[f]
            kf.affine_left = AffineBrightness(state.affine[f, 0], state.affine[f, 1])
            kf.affine_right = AffineBrightness(state.affine[f, 2], state.affine[f, 3])
        self.intrinsics = state.intrinsics
        for i, p in enumerate(self.points):
            p.inv_depth = float(state.idepth[i])


# ---------------------------------------------------------------------------
# residuals and Jacobians
# ---------------------------------------------------------------------------


def _projection_rows(xt: np.ndarray, ok: np.ndarray, intr: PinholeIntrinsics):
    """Per-point d(u,v)/dX_target rows; entries for invalid points are junk
    but get zero weight downstream."""
    z = np.where(ok, xt[:, 2], 1.0)
    inv_z = 1.0 / z
    x_n = xt[:, 0] * inv_z
    y_n = xt[:, 1] * inv_z
    pu = np.stack([intr.fx * inv_z, np.zeros_like(z), -intr.fx * x_n * inv_z], axis=1)
    pv = np.stack([np.zeros_like(z), intr.fy * inv_z, -intr.fy * y_n * inv_z], axis=1)
    return pu, pv, x_n, y_n


def _intrinsics_backprojection_cols(rays: np.ndarray, idepth: np.ndarray,
                                    intr: PinholeIntrinsics) -> np.ndarray:
    """d X_host / d (fx, fy, cx, cy), shape (N, 3, 4)."""
    n = len(rays)
    out = np.zeros((n, 3, 4))
    x_h = rays / idepth[:, None]
    out[:, 0, 0] = -x_h[:, 0] / intr.fx
    out[:, 1, 1] = -x_h[:, 1] / intr.fy
    out[:, 0, 2] = -1.0 / (intr.fx * idepth)
    out[:, 1, 3] = -1.0 / (intr.fy * idepth)
    return out


def _rays(uv: np.ndarray, intr: PinholeIntrinsics) -> np.ndarray:
    rays = np.empty((len(uv), 3))
    rays[:, 0] = (uv[:, 0] - intr.cx) / intr.fx
    rays[:, 1] = (uv[:, 1] - intr.cy) / intr.fy
    rays[:, 2] = 1.0
    return rays


def _temporal_eval(uv, idepth, host_int, t_wc_host, t_wc_target, affine_host,
                   affine_target, target_img, intr, with_jacobian: bool):
    """Residuals (N, 8) + validity of points hosted in one keyframe observed
    in another; optionally the (N, 8, 21) Jacobian over
    (T_host 6, T_target 6, d 1, c 4, a_i, b_i, a_j, b_j)."""
    rays = _rays(uv, intr)
    x_h = rays / idepth[:, None]
    world = x_h @ t_wc_host.rotation.T + t_wc_host.translation
    r_t = t_wc_target.rotation
    xt = (world - t_wc_target.translation) @ r_t
    z = xt[:, 2]
    ok = (idepth > 0) & (z > 0)
    safe_z = np.where(ok, z, 1.0)
    uv_c = np.empty_like(uv)
    uv_c[:, 0] = intr.fx * xt[:, 0] / safe_z + intr.cx
    uv_c[:, 1] = intr.fy * xt[:, 1] / safe_z + intr.cy
    ok &= (uv_c[:, 0] >= PATTERN_MARGIN) & (uv_c[:, 0] <= intr.width - 1 - PATTERN_MARGIN)
    ok &= (uv_c[:, 1] >= PATTERN_MARGIN) & (uv_c[:, 1] <= intr.height - 1 - PATTERN_MARGIN)

    pts = uv_c[:, None, :] + RESIDUAL_PATTERN[None, :, :]
    t_int, t_gx, t_gy, ok_s = sample_bilinear_batch(target_img, pts,
                                                    with_gradient=with_jacobian)
    valid = ok[:, None] & ok_s

    s = math.exp(min(20.0, max(-20.0, affine_target.a - affine_host.a)))
    corrected = s * (host_int - affine_host.b)
    r = t_int - affine_target.b - corrected

    if not with_jacobian:
        return r, valid, uv_c

    pu, pv, x_n, y_n = _projection_rows(xt, ok, intr)
    w_skew = np.empty((len(uv), 3, 3))
    w_skew[:, 0, 0] = w_skew[:, 1, 1] = w_skew[:, 2, 2] = 0.0
    w_skew[:, 0, 1] = -world[:, 2]
    w_skew[:, 0, 2] = world[:, 1]
    w_skew[:, 1, 0] = world[:, 2]
    w_skew[:, 1, 2] = -world[:, 0]
    w_skew[:, 2, 0] = -world[:, 1]
    w_skew[:, 2, 1] = world[:, 0]

    # dX_t/d(host twist) = R_t^T [I | -[W]_x]; the target twist negates it
    dxt_dhost = np.empty((len(uv), 3, 6))
    dxt_dhost[:, :, :3] = r_t.T[None, :, :]
    dxt_dhost[:, :, 3:] = -np.einsum("ij,njk->nik", r_t.T, w_skew)

    du_dhost = np.einsum("ni,nij->nj", pu, dxt_dhost)
    dv_dhost = np.einsum("ni,nij->nj", pv, dxt_dhost)

    r_th = r_t.T @ t_wc_host.rotation
    dxt_dd = (-x_h / idepth[:, None]) @ r_th.T
    du_dd = np.einsum("ni,ni->n", pu, dxt_dd)
    dv_dd = np.einsum("ni,ni->n", pv, dxt_dd)

    dxh_dc = _intrinsics_backprojection_cols(rays, idepth, intr)
    dxt_dc = np.einsum("ij,njk->nik", r_th, dxh_dc)
    du_dc = np.einsum("ni,nik->nk", pu, dxt_dc)
    dv_dc = np.einsum("ni,nik->nk", pv, dxt_dc)
    # direct dependence of the projection on the intrinsics
    du_dc[:, 0] += x_n
    du_dc[:, 2] += 1.0
    dv_dc[:, 1] += y_n
    dv_dc[:, 3] += 1.0

    jac = np.zeros(r.shape + (21,))
    gx = t_gx
    gy = t_gy
    jac[:, :, 0:6] = gx[:, :, None] * du_dhost[:, None, :] + gy[:, :, None] * dv_dhost[:, None, :]
    jac[:, :, 6:12] = -jac[:, :, 0:6]
    jac[:, :, 12] = gx * du_dd[:, None] + gy * dv_dd[:, None]
    jac[:, :, 13:17] = gx[:, :, None] * du_dc[:, None, :] + gy[:, :, None] * dv_dc[:, None, :]
    jac[:, :, 17] = s * (host_int - affine_host.b)  # d/d a_i
    jac[:, :, 18] = s  # d/d b_i
    jac[:, :, 19] = -corrected  # d/d a_j
    jac[:, :, 20] = -1.0  # d/d b_j
    return r, valid, uv_c, jac


def _static_eval(uv, idepth, host_int, affine_4: np.ndarray, right_img, intr,
                 rig: StereoRig, with_jacobian: bool):
    """Static-stereo residuals against the host's right image; Jacobian over
    (d 1, c 4, aL, bL, aR, bR) — the rig transform is fixed."""
    rays = _rays(uv, intr)
    x_h = rays / idepth[:, None]
    t_lr = np.array([-rig.baseline, 0.0, 0.0])
    xt = x_h + t_lr
    z = xt[:, 2]
    ok = (idepth > 0) & (z > 0)
    safe_z = np.where(ok, z, 1.0)
    uv_c = np.empty_like(uv)
    uv_c[:, 0] = intr.fx * xt[:, 0] / safe_z + intr.cx
    uv_c[:, 1] = intr.fy * xt[:, 1] / safe_z + intr.cy
    ok &= (uv_c[:, 0] >= PATTERN_MARGIN) & (uv_c[:, 0] <= intr.width - 1 - PATTERN_MARGIN)
    ok &= (uv_c[:, 1] >= PATTERN_MARGIN) & (uv_c[:, 1] <= intr.height - 1 - PATTERN_MARGIN)

    pts = uv_c[:, None, :] + RESIDUAL_PATTERN[None, :, :]
    t_int, t_gx, t_gy, ok_s = sample_bilinear_batch(right_img, pts,
                                                    with_gradient=with_jacobian)
    valid = ok[:, None] & ok_s

    a_l, b_l, a_r, b_r = affine_4
    s = math.exp(min(20.0, max(-20.0, a_r - a_l)))
    corrected = s * (host_int - b_l)
    r = t_int - b_r - corrected

    if not with_jacobian:
        return r, valid, uv_c

    pu, pv, x_n, y_n = _projection_rows(xt, ok, intr)
    dxt_dd = -x_h / idepth[:, None]
    du_dd = np.einsum("ni,ni->n", pu, dxt_dd)
    dv_dd = np.einsum("ni,ni->n", pv, dxt_dd)

    dxh_dc = _intrinsics_backprojection_cols(rays, idepth, intr)
    du_dc = np.einsum("ni,nik->nk", pu, dxh_dc)
    dv_dc = np.einsum("ni,nik->nk", pv, dxh_dc)
    du_dc[:, 0] += x_n
    du_dc[:, 2] += 1.0
    dv_dc[:, 1] += y_n
    dv_dc[:, 3] += 1.0

    jac = np.zeros(r.shape + (9,))
    jac[:, :, 0] = t_gx * du_dd[:, None] + t_gy * dv_dd[:, None]
    jac[:, :, 1:5] = t_gx[:, :, None] * du_dc[:, None, :] + t_gy[:, :, None] * dv_dc[:, None, :]
    jac[:, :, 5] = corrected  # d/d a_L
    jac[:, :, 6] = s  # d/d b_L
    jac[:, :, 7] = -corrected  # d/d a_R
    jac[:, :, 8] = -1.0  # d/d b_R
    return r, valid, uv_c, jac


def residual_temporal(point: ActivePoint, host: Keyframe, target: Keyframe,
                      intr: PinholeIntrinsics):
    """Residuals of one point in one target keyframe: (8,) values + validity."""
    r, valid, _ = _temporal_eval(
        point.uv.reshape(1, 2), np.array([point.inv_depth]),
        point.host_int.reshape(1, 8), host.t_wc, target.t_wc,
        host.affine_left, target.affine_left, target.left[0], intr, False)
    return r[0], valid[0]


def residual_static(point: ActivePoint, host: Keyframe, intr: PinholeIntrinsics,
                    rig: StereoRig):
    affine4 = np.array([host.affine_left.a, host.affine_left.b,
                        host.affine_right.a, host.affine_right.b])
    r, valid, _ = _static_eval(
        point.uv.reshape(1, 2), np.array([point.inv_depth]),
        point.host_int.reshape(1, 8), affine4, host.right[0], intr, rig, False)
    return r[0], valid[0]


def jacobian_temporal(point: ActivePoint, host: Keyframe, target: Keyframe,
                      intr: PinholeIntrinsics):
    """Analytic Jacobian (8, 21) over (T_i 6, T_j 6, d, c 4, a_i, b_i, a_j, b_j),
    plus the residuals and validity mask."""
    r, valid, _, jac = _temporal_eval(
        point.uv.reshape(1, 2), np.array([point.inv_depth]),
        point.host_int.reshape(1, 8), host.t_wc, target.t_wc,
        host.affine_left, target.affine_left, target.left[0], intr, True)
    return jac[0], r[0], valid[0]


def jacobian_static(point: ActivePoint, host: Keyframe, intr: PinholeIntrinsics,
                    rig: StereoRig):
    """Analytic Jacobian (8, 9) over (d, c 4, aL, bL, aR, bR) plus residuals."""
    affine4 = np.array([host.affine_left.a, host.affine_left.b,
                        host.affine_right.a, host.affine_right.b])
    r, valid, _, jac = _static_eval(
        point.uv.reshape(1, 2), np.array([point.inv_depth]),
        point.host_int.reshape(1, 8), affine4, host.right[0], intr, rig, True)
    return jac[0], r[0], valid[0]


# ---------------------------------------------------------------------------
# normal equations over the window
# ---------------------------------------------------------------------------


@dataclass
class FrameLayout:
    """Column layout of the frame block: per keyframe a pose slice (None when
    gauge-fixed) and an affine slice, plus an optional intrinsics slice."""

    pose_cols: dict
    affine_cols: dict
    c_cols: slice | None
    n_cols: int
    kf_ids: list[int]

    @staticmethod
    def build(window: KeyframeWindow, fix_oldest_pose: bool = True,
              freeze_intrinsics: bool = True) -> "FrameLayout":
        pose_cols: dict = {}
        affine_cols: dict = {}
        col = 0
        for i, kf in enumerate(window.keyframes):
            if fix_oldest_pose and i == 0:
                pose_cols[kf.kf_id] = None
            else:
                pose_cols[kf.kf_id] = slice(col, col + 6)
                col += 6
            affine_cols[kf.kf_id] = slice(col, col + 4)
            col += 4
        c_cols = None
        if not freeze_intrinsics:
            c_cols = slice(col, col + 4)
            col += 4
        return FrameLayout(pose_cols, affine_cols, c_cols, col,
                           [kf.kf_id for kf in window.keyframes])


class _HostBlock:
    """Per-host point data frozen for one optimization epoch."""

    def __init__(self, window: KeyframeWindow, host: Keyframe):
        idx = [i for i, p in enumerate(window.points)
               if p.host_id == host.kf_id and p.status == ACTIVE]
        self.point_idx = np.array(idx, dtype=np.int64)
        pts = [window.points[i] for i in idx]
        self.uv = np.array([p.uv for p in pts]).reshape(-1, 2)
        self.host_int = np.array([p.host_int for p in pts]).reshape(-1, 8)
        self.weights = np.array([p.weights for p in pts]).reshape(-1, 8)
        self.stereo_ok = np.array([not p.stereo_outlier for p in pts], dtype=bool)
        self.temporal_ok = {
            kf.kf_id: np.array([kf.kf_id not in p.outlier_targets for p in pts], dtype=bool)
            for kf in window.keyframes if kf.kf_id != host.kf_id
        }


@dataclass
class NormalEquations:
    layout: FrameLayout
    h_ff: np.ndarray
    h_fd: np.ndarray  # (n_frame_cols, n_points)
    h_dd: np.ndarray  # (n_points,)
    b_f: np.ndarray
    b_d: np.ndarray
    energy_temporal: float
    energy_static: float
    energy_penalty: float  # out-of-bounds charge, acceptance objective only
    n_residuals: int


def _group_cols(layout: FrameLayout, host_id: int, target_id: int):
    """Map group-local temporal Jacobian columns to global frame columns."""
    local: list[int] = []
    global_: list[int] = []
    hp = layout.pose_cols[host_id]
    if hp is not None:
        local.extend(range(0, 6))
        global_.extend(range(hp.start, hp.stop))
    tp = layout.pose_cols[target_id]
    if tp is not None:
        local.extend(range(6, 12))
        global_.extend(range(tp.start, tp.stop))
    if layout.c_cols is not None:
        local.extend(range(13, 17))
        global_.extend(range(layout.c_cols.start, layout.c_cols.stop))
    ha = layout.affine_cols[host_id]
    local.extend([17, 18])
    global_.extend([ha.start, ha.start + 1])
    ta = layout.affine_cols[target_id]
    local.extend([19, 20])
    global_.extend([ta.start, ta.start + 1])
    return np.array(local), np.array(global_)


def _static_cols(layout: FrameLayout, host_id: int):
    local: list[int] = []
    global_: list[int] = []
    if layout.c_cols is not None:
        local.extend(range(1, 5))
        global_.extend(range(layout.c_cols.start, layout.c_cols.stop))
    ha = layout.affine_cols[host_id]
    local.extend([5, 6, 7, 8])
    global_.extend(range(ha.start, ha.stop))
    return np.array(local), np.array(global_)


def build_normal_equations(window: KeyframeWindow, state: WindowState,
                           coupling: float, layout: FrameLayout,
                           host_blocks: dict | None = None,
                           gamma: float = HUBER_GAMMA,
                           with_jacobians: bool = True):
    """Assemble the photometric Gauss-Newton system H x = b (b = -J^T W r)
    over the frame block and the diagonal depth block.

    With with_jacobians=False only the energies are computed and the matrix
    fields of the result are None.
    """
    if host_blocks is None:
        host_blocks = {kf.kf_id: _HostBlock(window, kf) for kf in window.keyframes}
    n_points = len(window.points)
    n_f = layout.n_cols
    if with_jacobians:
        h_ff = np.zeros((n_f, n_f))
        h_fd = np.zeros((n_f, n_points))
        h_dd = np.zeros(n_points)
        b_f = np.zeros(n_f)
        b_d = np.zeros(n_points)
    energy_t = 0.0
    energy_s = 0.0
    energy_pen = 0.0
    oob = _oob_cost(gamma)
    n_res = 0

    for hi, host in enumerate(window.keyframes):
        block = host_blocks[host.kf_id]
        if len(block.point_idx) == 0:
            continue
        idepth = state.idepth[block.point_idx]
        t_wc_host = state.poses[hi]
        aff_h = AffineBrightness(state.affine[hi, 0], state.affine[hi, 1])

        for ti, target in enumerate(window.keyframes):
            if target.kf_id == host.kf_id:
                continue
            obs_ok = block.temporal_ok[target.kf_id]
            if not np.any(obs_ok):
                continue
            aff_t = AffineBrightness(state.affine[ti, 0], state.affine[ti, 1])
            out = _temporal_eval(block.uv, idepth, block.host_int, t_wc_host,
                                 state.poses[ti], aff_h, aff_t, target.left[0],
                                 state.intrinsics, with_jacobians)
            r, valid = out[0], out[1]
            valid = valid & obs_ok[:, None]
            w_pat = np.where(valid, block.weights, 0.0)
            energy_t += float(np.sum(w_pat * huber_cost(r, gamma)))
            energy_pen += oob * float(np.sum(np.where(~valid & obs_ok[:, None],
                                                      block.weights, 0.0)))
            n_res += int(valid.sum())
            if not with_jacobians:
                continue
            jac = out[3]
            w = w_pat * huber_weight(r, gamma)
            lcols, gcols = _group_cols(layout, host.kf_id, target.kf_id)
            j_f = jac[:, :, lcols]
            j_d = jac[:, :, 12]
            wj = w[:, :, None] * j_f
            h_ff[np.ix_(gcols, gcols)] += np.einsum("nko,nkp->op", wj, j_f)
            b_f[gcols] -= np.einsum("nko,nk->o", wj, r)
            hfd_local = np.einsum("nko,nk->no", wj, j_d)  # (N, G)
            np.add.at(h_fd, (gcols[:, None], block.point_idx[None, :]), hfd_local.T)
            h_dd_local = np.einsum("nk,nk,nk->n", w, j_d, j_d)
            np.add.at(h_dd, block.point_idx, h_dd_local)
            np.subtract.at(b_d, block.point_idx, np.einsum("nk,nk,nk->n", w, j_d, r))

        # static stereo against the host's own right image
        if coupling > 0 and np.any(block.stereo_ok):
            affine4 = state.affine[hi]
            out = _static_eval(block.uv, idepth, block.host_int, affine4,
                               host.right[0], state.intrinsics, window.rig,
                               with_jacobians)
            r, valid = out[0], out[1]
            valid = valid & block.stereo_ok[:, None]
            w_pat = np.where(valid, block.weights, 0.0)
            energy_s += float(np.sum(w_pat * huber_cost(r, gamma)))
            energy_pen += coupling * oob * float(np.sum(
                np.where(~valid & block.stereo_ok[:, None], block.weights, 0.0)))
            n_res += int(valid.sum())
            if with_jacobians:
                jac = out[3]
                w = coupling * w_pat * huber_weight(r, gamma)
                lcols, gcols = _static_cols(layout, host.kf_id)
                j_f = jac[:, :, lcols]
                j_d = jac[:, :, 0]
                wj = w[:, :, None] * j_f
                h_ff[np.ix_(gcols, gcols)] += np.einsum("nko,nkp->op", wj, j_f)
                b_f[gcols] -= np.einsum("nko,nk->o", wj, r)
                hfd_local = np.einsum("nko,nk->no", wj, j_d)
                np.add.at(h_fd, (gcols[:, None], block.point_idx[None, :]), hfd_local.T)
                h_dd_local = np.einsum("nk,nk,nk->n", w, j_d, j_d)
                np.add.at(h_dd, block.point_idx, h_dd_local)
                np.subtract.at(b_d, block.point_idx, np.einsum("nk,nk,nk->n", w, j_d, r))

    if not with_jacobians:
        return NormalEquations(layout, None, None, None, None, None,
                               energy_t, energy_s, energy_pen, n_res)
    return NormalEquations(layout, h_ff, h_fd, h_dd, b_f, b_d,
                           energy_t, energy_s, energy_pen, n_res)


def total_energy(window: KeyframeWindow, coupling: float,
                 gamma: float = HUBER_GAMMA, state: WindowState | None = None) -> float:
    """Photometric window energy: temporal Huber costs plus coupling times the
    static-stereo costs, each weighted by the host gradient weights."""
    if coupling < 0:
        raise ValueError("coupling factor must be non-negative")
    if state is None:
        state = window.state()
    layout = FrameLayout.build(window)
    eq = build_normal_equations(window, state, coupling, layout, with_jacobians=False)
    return eq.energy_temporal + coupling * eq.energy_static


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


def _affine_gauge_prior(layout: FrameLayout, state: WindowState):
    """Weak quadratic pulling every (a, b) to zero; returns (H, b, energy)."""
    n = layout.n_cols
    h = np.zeros((n, n))
    b = np.zeros(n)
    energy = 0.0
    w = np.array([AFFINE_PRIOR_A, AFFINE_PRIOR_B, AFFINE_PRIOR_A, AFFINE_PRIOR_B])
    for f, kf_id in enumerate(layout.kf_ids):
        cols = layout.affine_cols[kf_id]
        vals = state.affine[f]
        h[cols, cols] += w
        b[cols.start:cols.stop] -= w * vals
        energy += 0.5 * float(np.sum(w * vals * vals))
    return h, b, energy


def _state_value(state: WindowState, window: KeyframeWindow, key: tuple):
    kind = key[0]
    if kind == "pose":
        return state.poses[window.keyframe_index(key[1])]
    if kind == "affine":
        return state.affine[window.keyframe_index(key[1])].copy()
    return state.intrinsics.as_vector()


def _boxminus(current, lin_point, kind: str) -> np.ndarray:
    if kind == "pose":
        return se3_log(current @ lin_point.inverse())
    return np.asarray(current) - np.asarray(lin_point)


def prior_delta(prior: MarginalizationPrior, window: KeyframeWindow,
                state: WindowState) -> np.ndarray:
    parts = [
        _boxminus(_state_value(state, window, key), prior.lin_points[key], key[0])
        for key in prior.keys
    ]
    return np.concatenate(parts) if parts else np.zeros(0)


def prior_energy(prior: MarginalizationPrior | None, window: KeyframeWindow,
                 state: WindowState) -> float:
    if prior is None or prior.dim() == 0:
        return 0.0
    d = prior_delta(prior, window, state)
    return 0.5 * float(d @ prior.H @ d) - float(prior.b @ d)


def _prior_contribution(prior: MarginalizationPrior, window: KeyframeWindow,
                        state: WindowState, layout: FrameLayout):
    """Prior folded into the frame block at the current state: H stays, the
    right-hand side is shifted by the distance from the linearization point."""
    n = layout.n_cols
    h = np.zeros((n, n))
    b = np.zeros(n)
    cols: list[int] = []
    keep_rows: list[int] = []
    row = 0
    for key in prior.keys:
        dim = _key_dim(key)
        if key[0] == "pose":
            sl = layout.pose_cols.get(key[1])
        elif key[0] == "affine":
            sl = layout.affine_cols.get(key[1])
        else:
            sl = layout.c_cols
        if sl is not None:
            cols.extend(range(sl.start, sl.stop))
            keep_rows.extend(range(row, row + dim))
        row += dim
    if not cols:
        return h, b
    delta = prior_delta(prior, window, state)
    b_shifted = prior.b - prior.H @ delta
    idx = np.asarray(keep_rows)
    gcols = np.asarray(cols)
    h[np.ix_(gcols, gcols)] += prior.H[np.ix_(idx, idx)]
    b[gcols] += b_shifted[idx]
    return h, b


# ---------------------------------------------------------------------------
# Schur complement, solving, marginalization
# ---------------------------------------------------------------------------


def schur_complement(h: np.ndarray, b: np.ndarray, keep_idx, marg_idx,
                     regularizer: float = 0.0):
    """Eliminate the marg block from H x = b: returns (H_hat, b_hat) over the
    kept variables. Raises MarginalizationError when the marginalized block is
    singular even after regularization."""
    keep_idx = np.asarray(keep_idx, dtype=np.int64)
    marg_idx = np.asarray(marg_idx, dtype=np.int64)
    if marg_idx.size == 0:
        return h[np.ix_(keep_idx, keep_idx)].copy(), b[keep_idx].copy()
    h_aa = h[np.ix_(keep_idx, keep_idx)]
    h_ab = h[np.ix_(keep_idx, marg_idx)]
    h_bb = h[np.ix_(marg_idx, marg_idx)]
    b_a = b[keep_idx]
    b_b = b[marg_idx]
    try:
        sol = np.linalg.solve(h_bb, np.concatenate([h_ab.T, b_b[:, None]], axis=1))
    except np.linalg.LinAlgError:
        reg = regularizer if regularizer > 0 else MARGINALIZATION_REGULARIZER
        try:
            sol = np.linalg.solve(h_bb + reg * np.eye(len(marg_idx)),
                                  np.concatenate([h_ab.T, b_b[:, None]], axis=1))
        except np.linalg.LinAlgError as exc:
            raise MarginalizationError("marginalized block is singular") from exc
    h_hat = h_aa - h_ab @ sol[:, :-1]
    b_hat = b_a - h_ab @ sol[:, -1]
    h_hat = 0.5 * (h_hat + h_hat.T)
    return h_hat, b_hat


def _solve_spd(h: np.ndarray, b: np.ndarray):
    """Solve with escalating diagonal damping; None when hopeless."""
    if h.shape[0] == 0:
        return np.zeros(0)
    scale = max(float(np.mean(np.diag(h))), 1e-12)
    for reg in (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2):
        try:
            np.linalg.cholesky(h + reg * scale * np.eye(h.shape[0]))
        except np.linalg.LinAlgError:
            continue
        return np.linalg.solve(h + reg * scale * np.eye(h.shape[0]), b)
    return None


@dataclass
class StepReport:
    accepted: bool
    energy_before: float
    energy_after: float
    photometric_before: float
    photometric_after: float
    step_norm: float
    retries: int
    damping: float  # Levenberg damping to seed the next iteration with


def _objective(window: KeyframeWindow, state: WindowState, coupling: float,
               layout: FrameLayout, host_blocks, gamma: float):
    """Full acceptance objective; states outside the representable region
    (rotation at the log branch cut, overflowing gains) rank as +inf so the
    step control rejects them."""
    try:
        eq = build_normal_equations(window, state, coupling, layout, host_blocks,
                                    gamma, with_jacobians=False)
        phot = eq.energy_temporal + coupling * eq.energy_static
        _, _, e_gauge = _affine_gauge_prior(layout, state)
        total = phot + eq.energy_penalty + e_gauge + prior_energy(window.prior, window, state)
    except (GeometryError, OverflowError, FloatingPointError):
        return float("inf"), float("inf")
    if not np.isfinite(total):
        return float("inf"), float("inf")
    return total, phot


def gauss_newton_iterate(window: KeyframeWindow, coupling: float,
                         prior: MarginalizationPrior | None = None,
                         gamma: float = HUBER_GAMMA,
                         fix_oldest_pose: bool = True,
                         freeze_intrinsics: bool = True,
                         host_blocks: dict | None = None,
                         damping: float = 0.0) -> StepReport:
    """One Gauss-Newton step on the window: assemble, add priors, eliminate
    the depth block by Schur complement, solve the reduced frame system,
    back-substitute depths and apply the boxplus update.

    The step is accepted only if the full objective (photometric + priors +
    out-of-bounds charge) decreases; a rejected step is retried with tenfold
    Levenberg damping up to MAX_STEP_HALVINGS times (the window is left
    unchanged when all retries fail). The returned report carries the damping
    the next iteration should start from, lowered after well-modelled steps
    and raised after poorly-modelled ones. Raises OptimizerError when the
    reduced system stays indefinite after maximal regularization.
    """
    if len(window.keyframes) < 2:
        raise OptimizerError("window optimization needs at least 2 keyframes")
    if prior is not None:
        window.prior = prior
    layout = FrameLayout.build(window, fix_oldest_pose, freeze_intrinsics)
    if host_blocks is None:
        host_blocks = {kf.kf_id: _HostBlock(window, kf) for kf in window.keyframes}
    state = window.state()

    eq = build_normal_equations(window, state, coupling, layout, host_blocks, gamma)
    h_ff, b_f = eq.h_ff.copy(), eq.b_f.copy()
    hg, bg, _ = _affine_gauge_prior(layout, state)
    h_ff += hg
    b_f += bg
    if window.prior is not None:
        hp, bp = _prior_contribution(window.prior, window, state, layout)
        h_ff += hp
        b_f += bp

    energy0, phot0 = _objective(window, state, coupling, layout, host_blocks, gamma)
    n_frames = len(window.keyframes)

    def expand(dff: np.ndarray) -> np.ndarray:
        frame_delta = np.zeros((n_frames, 10))
        for f, kf_id in enumerate(layout.kf_ids):
            psl = layout.pose_cols[kf_id]
            if psl is not None:
                frame_delta[f, :6] = dff[psl]
            asl = layout.affine_cols[kf_id]
            frame_delta[f, 6:10] = dff[asl]
        return frame_delta

    def solve(lam: float):
        """Schur-eliminate the depth block of the damped system."""
        h_ff_d = h_ff.copy()
        h_ff_d[np.diag_indices_from(h_ff_d)] *= 1.0 + lam
        h_dd_d = eq.h_dd * (1.0 + lam)
        solvable = h_dd_d > 1e-12
        h_dd_safe = np.where(solvable, h_dd_d, 1.0)
        u = eq.h_fd * solvable[None, :]
        h_red = h_ff_d - (u / h_dd_safe[None, :]) @ u.T
        b_red = b_f - u @ (np.where(solvable, eq.b_d, 0.0) / h_dd_safe)
        h_red = 0.5 * (h_red + h_red.T)
        delta_f = _solve_spd(h_red, b_red)
        if delta_f is None:
            return None
        delta_d = np.where(solvable, (eq.b_d - delta_f @ u) / h_dd_safe, 0.0)
        return delta_f, delta_d

    lam = damping
    retries = 0
    while True:
        sol = solve(lam)
        if sol is None:
            raise OptimizerError("reduced frame system not positive definite after max damping")
        delta_f, delta_d = sol
        step_norm = float(np.sqrt(delta_f @ delta_f + delta_d @ delta_d))
        c_delta = delta_f[layout.c_cols] if layout.c_cols is not None else None
        trial = state.boxplus(expand(delta_f), delta_d, c_delta)
        energy1, phot1 = _objective(window, trial, coupling, layout, host_blocks, gamma)
        if energy1 < energy0 or step_norm < STEP_NORM_TOL:
            # gain ratio: actual vs model-predicted decrease of the quadratic
            h_df = eq.h_fd.T @ delta_f
            predicted = (delta_f @ b_f + delta_d @ eq.b_d
                         - 0.5 * (delta_f @ (h_ff @ delta_f) + 2.0 * delta_d @ h_df
                                  + delta_d @ (eq.h_dd * delta_d)))
            rho = (energy0 - energy1) / max(predicted, 1e-12)
            if retries > 0:
                lam_next = lam
            elif rho > 0.5:
                lam_next = max(lam / 3.0, 1e-7) if lam > 0 else 0.0
            elif rho < 0.25:
                lam_next = max(lam, 1e-6) * 3.0
            else:
                lam_next = lam
            window.apply_state(trial)
            return StepReport(True, energy0, energy1, phot0, phot1,
                              step_norm, retries, lam_next)
        if retries >= MAX_STEP_HALVINGS:
            return StepReport(False, energy0, energy0, phot0, phot0, 0.0,
                              retries, max(lam, 1e-6) * 10.0)
        lam = max(lam, 1e-6) * 10.0
        retries += 1


def flag_outliers(window: KeyframeWindow, coupling: float,
                  gamma: float = HUBER_GAMMA, reset: bool = True) -> int:
    """Re-derive per-observation outlier flags from the current state.

    An observation whose RMS residual over the valid pattern exceeds 3x the
    Huber threshold is excluded from the next optimization round. With
    `reset` (the default) previously flagged observations that have become
    consistent again are readmitted. Returns the number flagged.
    """
    state = window.state()
    threshold = OUTLIER_RESIDUAL_FACTOR * gamma
    flagged = 0
    kf_index = {kf.kf_id: i for i, kf in enumerate(window.keyframes)}
    for host in window.keyframes:
        pts = [p for p in window.points if p.host_id == host.kf_id and p.status == ACTIVE]
        if not pts:
            continue
        uv = np.array([p.uv for p in pts]).reshape(-1, 2)
        idepth = np.array([p.inv_depth for p in pts])
        host_int = np.array([p.host_int for p in pts]).reshape(-1, 8)
        hi = kf_index[host.kf_id]
        aff_h = AffineBrightness(state.affine[hi, 0], state.affine[hi, 1])
        for target in window.keyframes:
            if target.kf_id == host.kf_id:
                continue
            ti = kf_index[target.kf_id]
            aff_t = AffineBrightness(state.affine[ti, 0], state.affine[ti, 1])
            r, valid, _ = _temporal_eval(uv, idepth, host_int, state.poses[hi],
                                         state.poses[ti], aff_h, aff_t,
                                         target.left[0], state.intrinsics, False)
            n_valid = valid.sum(axis=1)
            rms = np.sqrt(np.sum(np.where(valid, r * r, 0.0), axis=1)
                          / np.maximum(n_valid, 1))
            bad = (n_valid > 0) & (rms > threshold)
            for k, p in enumerate(pts):
                if reset:
                    p.outlier_targets.discard(target.kf_id)
                if bad[k]:
                    p.outlier_targets.add(target.kf_id)
                    flagged += 1
        if coupling > 0:
            r, valid, _ = _static_eval(uv, idepth, host_int, state.affine[hi],
                                       host.right[0], state.intrinsics,
                                       window.rig, False)
            n_valid = valid.sum(axis=1)
            rms = np.sqrt(np.sum(np.where(valid, r * r, 0.0), axis=1)
                          / np.maximum(n_valid, 1))
            bad = (n_valid > 0) & (rms > threshold)
            for k, p in enumerate(pts):
                if reset:
                    p.stereo_outlier = False
                if bad[k]:
                    p.stereo_outlier = True
                    flagged += 1
    return flagged


def renormalize_affine_gauge(window: KeyframeWindow) -> None:
    """Re-express the affine parameters in the zero-mean gauge.

    The transform a_i += delta, b_i += beta * exp(a_i) leaves every
    photometric residual exactly unchanged; applying it with delta, beta
    chosen to zero the window means keeps exp(a) and b numerically tame no
    matter how far the unobservable common mode has walked. The prior's
    linearization points are carried along.
    """
    if not window.keyframes:
        return
    a_vals = np.array([kf.affine_left.a for kf in window.keyframes])
    b_vals = np.array([kf.affine_left.b for kf in window.keyframes])
    delta = -float(np.mean(a_vals))
    beta = -float(np.sum(b_vals) / np.sum(np.exp(a_vals)))

    def shift(aff: AffineBrightness) -> AffineBrightness:
        return AffineBrightness(aff.a + delta, aff.b + beta * math.exp(aff.a))

    for kf in window.keyframes:
        kf.affine_left = shift(kf.affine_left)
        kf.affine_right = shift(kf.affine_right)
    if window.prior is not None:
        for key in window.prior.keys:
            if key[0] == "affine":
                v = window.prior.lin_points[key]
                window.prior.lin_points[key] = np.array([
                    v[0] + delta, v[1] + beta * math.exp(v[0]),
                    v[2] + delta, v[3] + beta * math.exp(v[2]),
                ])


def optimize_window(window: KeyframeWindow, coupling: float,
                    gamma: float = HUBER_GAMMA,
                    max_iterations: int = MAX_GN_ITERATIONS,
                    fix_oldest_pose: bool = True,
                    freeze_intrinsics: bool = True,
                    initial_damping: float = 1e-4) -> list[StepReport]:
    """Run Gauss-Newton iterations until the energy decrease stalls, then
    flag outlier observations. The Levenberg damping persists across
    iterations; outlier flags are refreshed from the incoming state so that
    observations that became consistent again are readmitted."""
    reports: list[StepReport] = []
    flag_outliers(window, coupling, gamma, reset=True)
    host_blocks = {kf.kf_id: _HostBlock(window, kf) for kf in window.keyframes}
    damping = initial_damping
    for _ in range(max_iterations):
        rep = gauss_newton_iterate(window, coupling, gamma=gamma,
                                   fix_oldest_pose=fix_oldest_pose,
                                   freeze_intrinsics=freeze_intrinsics,
                                   host_blocks=host_blocks, damping=damping)
        reports.append(rep)
        damping = rep.damping
        if not rep.accepted or rep.step_norm < STEP_NORM_TOL:
            break
        if rep.energy_before - rep.energy_after < ENERGY_DECREASE_TOL * max(rep.energy_before, 1.0):
            break
    renormalize_affine_gauge(window)
    flag_outliers(window, coupling, gamma)
    return reports


# ---------------------------------------------------------------------------
# marginalization
# ---------------------------------------------------------------------------


def marginalize(window: KeyframeWindow, kf_id_to_drop: int | None,
                point_ids_to_drop: list[int], coupling: float,
                gamma: float = HUBER_GAMMA,
                freeze_intrinsics: bool = True) -> MarginalizationPrior:
    """Fold the dropped keyframe and points into a quadratic prior on the
    kept frame variables via the Schur complement.

    All photometric factors of the dropped points are absorbed (linearized at
    the current state). Observations of *kept* points that target the dropped
    keyframe are deleted rather than absorbed — absorbing them would couple
    kept depths in the prior and destroy the diagonal point block. Points
    hosted in the dropped keyframe must be in the drop set.
    """
    drop_set = set(point_ids_to_drop)
    if kf_id_to_drop is not None:
        hosted = {p.point_id for p in window.points if p.host_id == kf_id_to_drop}
        if not hosted.issubset(drop_set):
            raise MarginalizationError(
                "all points hosted in the dropped keyframe must be marginalized with it")

    # layout over every frame variable (no gauge fixing here) + dropped depths
    layout = FrameLayout.build(window, fix_oldest_pose=False,
                               freeze_intrinsics=freeze_intrinsics)
    drop_points = [p for p in window.points if p.point_id in drop_set and p.status == ACTIVE]
    n_d = len(drop_points)
    n = layout.n_cols + n_d
    h = np.zeros((n, n))
    b = np.zeros(n)
    state = window.state()
    kf_index = {kf.kf_id: i for i, kf in enumerate(window.keyframes)}

    # absorbed photometric factors: everything touching the dropped points
    for host in window.keyframes:
        pts = [(k, p) for k, p in enumerate(drop_points) if p.host_id == host.kf_id]
        if not pts:
            continue
        dcols = np.array([layout.n_cols + k for k, _ in pts])
        plist = [p for _, p in pts]
        uv = np.array([p.uv for p in plist]).reshape(-1, 2)
        idepth = np.array([p.inv_depth for p in plist])
        host_int = np.array([p.host_int for p in plist]).reshape(-1, 8)
        weights = np.array([p.weights for p in plist]).reshape(-1, 8)
        hi = kf_index[host.kf_id]
        aff_h = AffineBrightness(state.affine[hi, 0], state.affine[hi, 1])

        for target in window.keyframes:
            if target.kf_id == host.kf_id:
                continue
            obs_ok = np.array([target.kf_id not in p.outlier_targets for p in plist])
            if not np.any(obs_ok):
                continue
            ti = kf_index[target.kf_id]
            aff_t = AffineBrightness(state.affine[ti, 0], state.affine[ti, 1])
            r, valid, _, jac = _temporal_eval(uv, idepth, host_int, state.poses[hi],
                                              state.poses[ti], aff_h, aff_t,
                                              target.left[0], state.intrinsics, True)
            valid = valid & obs_ok[:, None]
            w = np.where(valid, weights, 0.0) * huber_weight(r, gamma)
            lcols, gcols = _group_cols(layout, host.kf_id, target.kf_id)
            j_f = jac[:, :, lcols]
            j_d = jac[:, :, 12]
            wj = w[:, :, None] * j_f
            h[np.ix_(gcols, gcols)] += np.einsum("nko,nkp->op", wj, j_f)
            b[gcols] -= np.einsum("nko,nk->o", wj, r)
            hfd = np.einsum("nko,nk->no", wj, j_d)
            np.add.at(h, (gcols[:, None], dcols[None, :]), hfd.T)
            np.add.at(h, (dcols[:, None], gcols[None, :]), hfd)
            np.add.at(h, (dcols, dcols), np.einsum("nk,nk,nk->n", w, j_d, j_d))
            np.subtract.at(b, dcols, np.einsum("nk,nk,nk->n", w, j_d, r))

        if coupling > 0:
            stereo_ok = np.array([not p.stereo_outlier for p in plist])
            if np.any(stereo_ok):
                r, valid, _, jac = _static_eval(uv, idepth, host_int, state.affine[hi],
                                                host.right[0], state.intrinsics,
                                                window.rig, True)
                valid = valid & stereo_ok[:, None]
                w = coupling * np.where(valid, weights, 0.0) * huber_weight(r, gamma)
                lcols, gcols = _static_cols(layout, host.kf_id)
                j_f = jac[:, :, lcols]
                j_d = jac[:, :, 0]
                wj = w[:, :, None] * j_f
                h[np.ix_(gcols, gcols)] += np.einsum("nko,nkp->op", wj, j_f)
                b[gcols] -= np.einsum("nko,nk->o", wj, r)
                hfd = np.einsum("nko,nk->no", wj, j_d)
                np.add.at(h, (gcols[:, None], dcols[None, :]), hfd.T)
                np.add.at(h, (dcols[:, None], gcols[None, :]), hfd)
                np.add.at(h, (dcols, dcols), np.einsum("nk,nk,nk->n", w, j_d, j_d))
                np.subtract.at(b, dcols, np.einsum("nk,nk,nk->n", w, j_d, r))

    # The dropped keyframe's affine gauge prior is NOT absorbed: it is
    # synthetic gauge fixing, and folding it in would anchor the affine
    # common mode at whatever value it had drifted to. A tiny regularizer
    # keeps the dropped affine block invertible instead.
    if kf_id_to_drop is not None:
        cols = layout.affine_cols[kf_id_to_drop]
        h[cols, cols] += MARGINALIZATION_REGULARIZER

    # existing prior, re-anchored (exactly, it is quadratic) at the current state
    if window.prior is not None and window.prior.dim() > 0:
        delta = prior_delta(window.prior, window, state)
        b_shift = window.prior.b - window.prior.H @ delta
        row = 0
        rows_map: list[np.ndarray] = []
        for key in window.prior.keys:
            dim = _key_dim(key)
            if key[0] == "pose":
                sl = layout.pose_cols[key[1]]
            elif key[0] == "affine":
                sl = layout.affine_cols[key[1]]
            else:
                sl = layout.c_cols
            rows_map.append(np.arange(sl.start, sl.stop))
            row += dim
        gidx = np.concatenate(rows_map)
        h[np.ix_(gidx, gidx)] += window.prior.H
        b[gidx] += b_shift

    # partition into kept / marginalized columns
    marg_cols: list[int] = list(range(layout.n_cols, n))
    keep_keys: list[tuple] = []
    keep_cols: list[int] = []
    for kf in window.keyframes:
        psl = layout.pose_cols[kf.kf_id]
        asl = layout.affine_cols[kf.kf_id]
        if kf.kf_id == kf_id_to_drop:
            marg_cols.extend(range(psl.start, psl.stop))
            marg_cols.extend(range(asl.start, asl.stop))
        else:
            keep_keys.append(("pose", kf.kf_id))
            keep_cols.extend(range(psl.start, psl.stop))
            keep_keys.append(("affine", kf.kf_id))
            keep_cols.extend(range(asl.start, asl.stop))
    if layout.c_cols is not None:
        keep_keys.append(("intrinsics",))
        keep_cols.extend(range(layout.c_cols.start, layout.c_cols.stop))

    h_hat, b_hat = schur_complement(h, b, keep_cols, marg_cols,
                                    MARGINALIZATION_REGULARIZER)

    lin_points: dict = {}
    for key in keep_keys:
        lin_points[key] = _state_value(state, window, key)
    return MarginalizationPrior(keys=keep_keys, lin_points=lin_points,
                                H=h_hat, b=b_hat)


def apply_marginalization(window: KeyframeWindow, kf_id_to_drop: int | None,
                          point_ids_to_drop: list[int], coupling: float,
                          gamma: float = HUBER_GAMMA,
                          freeze_intrinsics: bool = True) -> MarginalizationPrior:
    """marginalize() plus the bookkeeping: install the new prior, mark the
    dropped points, remove the dropped keyframe and its candidates."""
    prior = marginalize(window, kf_id_to_drop, point_ids_to_drop, coupling,
                        gamma, freeze_intrinsics)
    window.prior = prior
    drop_set = set(point_ids_to_drop)
    for p in window.points:
        if p.point_id in drop_set and p.status == ACTIVE:
            p.status = MARGINALIZED
    window.points = [p for p in window.points if p.point_id not in drop_set]
    if kf_id_to_drop is not None:
        for p in window.points:
            p.outlier_targets.discard(kf_id_to_drop)
        window.keyframes = [kf for kf in window.keyframes if kf.kf_id != kf_id_to_drop]
    return prior
