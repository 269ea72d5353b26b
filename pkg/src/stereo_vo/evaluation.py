"""KITTI-protocol relative trajectory errors and rigid/similarity alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Se3, rotation_angle

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
SEGMENT_START_STEP = 10  # frames, devkit convention
SPEED_BIN_KMH = 10.0

COLLINEARITY_TOL = 1e-9


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentError:
    first_frame: int
    length: float  # meters of ground-truth arc
    t_err: float  # fraction (translation error / length)
    r_err: float  # rad per meter
    speed: float  # m/s, 0 when timestamps are absent


@dataclass(frozen=True)
class RelativeErrorReport:
    """Average translational RMSE (%) and rotational RMSE (deg per 100 m)
    over 100..800 m segments, with per-length and per-speed breakdowns."""

    t_rel: float  # percent
    r_rel: float  # deg / 100 m
    segments: tuple[SegmentError, ...]
    by_length: dict = field(default_factory=dict)  # length -> (t_rel %, r_rel deg/100m, n)
    by_speed: dict = field(default_factory=dict)  # bin lower edge km/h -> (t_rel, r_rel, n)

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    @property
    def empty(self) -> bool:
        return not self.segments


def _trajectory_distances(poses: list[Se3]) -> np.ndarray:
    pos = np.array([p.translation for p in poses])
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _frame_at_distance(dist: np.ndarray, first: int, length: float) -> int:
    target = dist[first] + length
    idx = int(np.searchsorted(dist, target, side="left"))
    return idx if idx < len(dist) else -1


def kitti_relative_errors(gt: list[Se3], est: list[Se3],
                          timestamps: np.ndarray | None = None) -> RelativeErrorReport:
    """Relative errors per the KITTI odometry protocol.

    For each start frame (every 10) and segment length L in 100..800 m of
    ground-truth arclength, the error transform is
    E = (gt_i^-1 gt_j)^-1 (est_i^-1 est_j); the segment contributes
    |translation(E)| / L and angle(E) / L. Reported averages are in percent
    and degrees per 100 m. A trajectory shorter than 100 m yields an empty
    (flagged) report.
    """
    if len(gt) != len(est):
        raise EvaluationError(f"length mismatch: {len(gt)} gt vs {len(est)} estimated")
    if len(gt) < 2:
        raise EvaluationError("need at least two poses")
    dist = _trajectory_distances(gt)
    segments: list[SegmentError] = []
    for first in range(0, len(gt), SEGMENT_START_STEP):
        for length in SEGMENT_LENGTHS:
            last = _frame_at_distance(dist, first, length)
            if last < 0:
                break
            gt_rel = gt[first].inverse() @ gt[last]
            est_rel = est[first].inverse() @ est[last]
            err = gt_rel.inverse() @ est_rel
            t_err = float(np.linalg.norm(err.translation)) / length
            r_err = rotation_angle(err.rotation) / length
            if timestamps is not None:
                dt = float(timestamps[last] - timestamps[first])
                speed = length / dt if dt > 0 else 0.0
            else:
                speed = 0.0
            segments.append(SegmentError(first, length, t_err, r_err, speed))

    if not segments:
        return RelativeErrorReport(0.0, 0.0, (), {}, {})

    t_rel = 100.0 * float(np.mean([s.t_err for s in segments]))
    r_rel = float(np.mean([s.r_err for s in segments])) * 180.0 / math.pi * 100.0

    by_length: dict = {}
    for length in SEGMENT_LENGTHS:
        sel = [s for s in segments if s.length == length]
        if sel:
            by_length[length] = (
                100.0 * float(np.mean([s.t_err for s in sel])),
                float(np.mean([s.r_err for s in sel])) * 180.0 / math.pi * 100.0,
                len(sel),
            )
    by_speed: dict = {}
    if timestamps is not None:
        for s in segments:
            kmh = s.speed * 3.6
            lo = SPEED_BIN_KMH * math.floor(kmh / SPEED_BIN_KMH)
            by_speed.setdefault(lo, []).append(s)
        by_speed = {
            lo: (100.0 * float(np.mean([s.t_err for s in sel])),
                 float(np.mean([s.r_err for s in sel])) * 180.0 / math.pi * 100.0,
                 len(sel))
            for lo, sel in sorted(by_speed.items())
        }
    return RelativeErrorReport(t_rel, r_rel, tuple(segments), by_length, by_speed)


def _check_noncollinear(centered: np.ndarray) -> None:
    svals = np.linalg.svd(centered, compute_uv=False)
    if len(svals) < 2 or svals[1] <= COLLINEARITY_TOL * max(svals[0], 1.0):
        raise EvaluationError("positions are collinear; alignment is degenerate")


def _procrustes(source: np.ndarray, target: np.ndarray, with_scale: bool):
    """Least squares over target ~ s R source + t (orthogonal Procrustes)."""
    if len(source) < 3:
        raise EvaluationError("alignment needs at least 3 positions")
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    a = source - mu_s
    b = target - mu_t
    _check_noncollinear(a)
    cov = b.T @ a / len(source)
    u, s, vt = np.linalg.svd(cov)
    d = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        d[2, 2] = -1.0
    rot = u @ d @ vt
    if with_scale:
        var_a = float(np.mean(np.sum(a * a, axis=1)))
        scale = float(np.trace(np.diag(s) @ d)) / var_a
    else:
        scale = 1.0
    trans = mu_t - scale * rot @ mu_s
    return scale, Se3(rot, trans)


def align_rigid(gt: list[Se3], est: list[Se3]) -> Se3:
    """Rigid transform mapping the ground-truth positions onto the estimate:
    est_i ~ R gt_i + t, as the global least-squares minimum."""
    gt_pos = np.array([p.translation for p in gt])
    est_pos = np.array([p.translation for p in est])
    _, t = _procrustes(gt_pos, est_pos, with_scale=False)
    return t


def align_similarity(gt: list[Se3], est: list[Se3]) -> tuple[float, Se3]:
    """Similarity alignment est_i ~ s R gt_i + t; the returned scale is the
    estimate's scale relative to the ground truth."""
    gt_pos = np.array([p.translation for p in gt])
    est_pos = np.array([p.translation for p in est])
    return _procrustes(gt_pos, est_pos, with_scale=True)


def format_report(report: RelativeErrorReport, title: str = "trajectory evaluation") -> str:
    lines = [title, "=" * len(title)]
    if report.empty:
        lines.append("trajectory shorter than the smallest segment (100 m); no segments")
        return "\n".join(lines) + "\n"
    lines.append(f"segments evaluated : {report.num_segments}")
    lines.append(f"t_rel              : {report.t_rel:.4f} %")
    lines.append(f"r_rel              : {report.r_rel:.4f} deg/100m")
    lines.append("")
    lines.append("by segment length:")
    for length, (t, r, n) in sorted(report.by_length.items()):
        lines.append(f"  {int(length):4d} m : t {t:8.4f} %   r {r:8.4f} deg/100m   ({n} segments)")
    if report.by_speed:
        lines.append("by speed bin:")
        for lo, (t, r, n) in report.by_speed.items():
            lines.append(f"  {int(lo):3d}-{int(lo + SPEED_BIN_KMH):3d} km/h : t {t:8.4f} %   "
                         f"r {r:8.4f} deg/100m   ({n} segments)")
    return "\n".join(lines) + "\n"


def write_segment_csv(report: RelativeErrorReport, sink) -> None:
    own = isinstance(sink, str)
    fh = open(sink, "w", encoding="ascii") if own else sink
    try:
        fh.write("first_frame,length_m,t_err_percent,r_err_deg_per_100m,speed_kmh\n")
        for s in report.segments:
            fh.write("%d,%.1f,%.6f,%.6f,%.2f\n"
                     % (s.first_frame, s.length, 100.0 * s.t_err,
                        s.r_err * 180.0 / math.pi * 100.0, s.speed * 3.6))
    finally:
        if own:
            fh.close()
