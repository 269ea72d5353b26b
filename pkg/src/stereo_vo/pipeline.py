"""End-to-end driver: stereo bootstrap, per-frame tracking, keyframe
management, windowed optimization, marginalization and outputs."""

from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig, format_config
from .dataset_io import write_points_ply, write_trajectory_kitti
from .frame_manager import (activate_candidates, needs_keyframe, refine_candidates,
                            select_marginalization_targets)
from .geometry import PinholeIntrinsics, Se3, project_batch
from .image import build_pyramid
from .point_selector import ACTIVE, CANDIDATE, CandidatePoint, select_candidates
from .stereo_matcher import InitializationError, bootstrap_depth_map
from .tracker import (AffineBrightness, TrackingLostError, TrackingReference,
                      TrackingResult, constant_motion_prior, track)
from .window_optimizer import (ActivePoint, Keyframe, KeyframeWindow,
                               OptimizerError, apply_marginalization,
                               optimize_window)

MIN_ACTIVE_FOR_WINDOW_OPT = 50

# Below this many optimized points the tracking reference is padded with raw
# stereo-initialized candidates (bootstrap phase only: their depths are
# noisier and correlate tracking errors across frames).
MIN_REFERENCE_ACTIVE = 150

# When no alignment attempt converges, the constant-motion prediction holds
# the frame; this many consecutive holds mean tracking is genuinely lost.
MAX_CONSECUTIVE_FALLBACKS = 3


class PipelineError(RuntimeError):
    pass


@dataclass
class FrameRecord:
    frame_index: int
    timestamp: float
    ref_kf_id: int
    t_ref_frame: Se3  # reference-keyframe -> this frame (tracker output)
    t_wc_tracked: Se3  # world pose as of tracking time
    is_keyframe: bool
    tracking_energy: float
    inlier_fraction: float
    elapsed: float
    keyframe_score: float


@dataclass
class RunResult:
    trajectory: list[Se3]  # camera-to-world per input frame, as tracked
    trajectory_final: list[Se3]  # re-anchored through final keyframe poses
    cloud_points: np.ndarray  # (N, 3) world
    cloud_intensities: np.ndarray  # (N,)
    records: list[FrameRecord]
    report: str
    completed: bool
    failure_reason: str | None = None

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        write_trajectory_kitti(self.trajectory, os.path.join(out_dir, "trajectory.txt"))
        write_trajectory_kitti(self.trajectory_final,
                               os.path.join(out_dir, "trajectory_final.txt"))
        write_points_ply(self.cloud_points, self.cloud_intensities,
                         os.path.join(out_dir, "points.ply"))
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="ascii") as fh:
            fh.write(self.report)


class Pipeline:
    """Sequential odometry loop over a sequence manifest.

    The manifest must expose num_frames, timestamps, intrinsics, rig and
    load_frame(index, camera) -> IntensityImage.
    """

    def __init__(self, manifest, config: PipelineConfig):
        self.manifest = manifest
        self.cfg = config
        self.window = KeyframeWindow(intrinsics=manifest.intrinsics, rig=manifest.rig)
        self.records: list[FrameRecord] = []
        self.kf_final_poses: dict[int, Se3] = {}
        self.cloud_xyz: list[np.ndarray] = []
        self.cloud_int: list[float] = []
        self.events: list[str] = []
        self.next_kf_id = 0
        self.next_point_id = 0
        self.tracking_ref: TrackingReference | None = None
        self.last_motion: Se3 | None = None  # previous inter-frame motion
        self.t_wc_prev: Se3 | None = None

    # ------------------------------------------------------------------

    def _log(self, msg: str) -> None:
        self.events.append(msg)

    def _new_candidates(self, kf: Keyframe) -> list[CandidatePoint]:
        """Select candidate pixels on a fresh keyframe and initialize their
        inverse depths by static-stereo NCC; unmatched candidates are kept
        out (the stereo pair is the verification at selection time)."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pixels = select_candidates(kf.left, self.cfg.candidate_budget)
        if len(pixels) == 0:
            return []
        try:
            matches = bootstrap_depth_map(kf.left[0], kf.right[0], pixels,
                                          self.window.intrinsics, self.window.rig,
                                          min_matches=1)
        except InitializationError:
            return []
        out = []
        for uv, inv_depth, var in matches:
            out.append(CandidatePoint(uv=np.asarray(uv), inv_depth=float(inv_depth),
                                      inv_depth_var=float(var), host_id=kf.kf_id))
        return out

    def _build_tracking_reference(self) -> TrackingReference:
        """Semi-dense depth map in the newest keyframe: active points project
        onto integer pixels (raw image values, no resampling — interpolated
        host intensities would systematically lose contrast and ratchet the
        affine estimates), plus the keyframe's own candidates."""
        newest = self.window.keyframes[-1]
        intr = self.window.intrinsics
        taken: dict[tuple[int, int], float] = {}
        for p in self.window.points:
            if p.status != ACTIVE:
                continue
            host = self.window.keyframes[self.window.keyframe_index(p.host_id)]
            t_nh = newest.t_wc.inverse() @ host.t_wc
            uv_n, z_n, ok = project_batch(p.uv.reshape(1, 2), np.array([p.inv_depth]),
                                          t_nh, intr)
            if not ok[0]:
                continue
            key = (int(round(uv_n[0][0])), int(round(uv_n[0][1])))
            inv_z = 1.0 / float(z_n[0])
            # nearest surface wins when two points land on one pixel
            if key not in taken or inv_z > taken[key]:
                taken[key] = inv_z
        if len(taken) < MIN_REFERENCE_ACTIVE:
            # bootstrap phase: fall back on raw stereo-initialized candidates
            for c in newest.candidates:
                if c.status == CANDIDATE and c.inv_depth > 0:
                    key = (int(round(c.uv[0])), int(round(c.uv[1])))
                    if key not in taken:
                        taken[key] = c.inv_depth
        if not taken:
            raise PipelineError("no points available for the tracking reference")
        uvs = np.array([[x, y] for (x, y) in taken.keys()], dtype=np.float64)
        depths = np.array(list(taken.values()))
        return TrackingReference(newest.left, intr, uvs, depths,
                                 newest.affine_left, self.cfg.gradient_constant)

    def _make_keyframe(self, frame_index: int, pyr_left, pyr_right, t_wc: Se3,
                       affine: AffineBrightness) -> Keyframe:
        kf = Keyframe(
            kf_id=self.next_kf_id,
            frame_index=frame_index,
            timestamp=float(self.manifest.timestamps[frame_index]),
            left=pyr_left,
            right=pyr_right,
            t_wc=t_wc,
            affine_left=affine,
            affine_right=AffineBrightness(affine.a, affine.b),
        )
        self.next_kf_id += 1
        kf.candidates = self._new_candidates(kf)
        return kf

    def _bootstrap(self) -> None:
        pyr_left = build_pyramid(self.manifest.load_frame(0, "left"),
                                 self.cfg.pyramid_levels)
        pyr_right = build_pyramid(self.manifest.load_frame(0, "right"),
                                  self.cfg.pyramid_levels)
        kf = self._make_keyframe(0, pyr_left, pyr_right, Se3.identity(),
                                 AffineBrightness())
        if len(kf.candidates) < MIN_ACTIVE_FOR_WINDOW_OPT:
            raise InitializationError(
                f"bootstrap produced only {len(kf.candidates)} stereo-matched candidates")
        self.window.keyframes.append(kf)
        self._log(f"frame 0: bootstrap keyframe {kf.kf_id} with "
                  f"{len(kf.candidates)} stereo candidates")
        self.tracking_ref = self._build_tracking_reference()
        self.t_wc_prev = Se3.identity()
        self.records.append(FrameRecord(0, float(self.manifest.timestamps[0]),
                                        kf.kf_id, Se3.identity(), Se3.identity(),
                                        True, 0.0, 1.0, 0.0, 0.0))

    def _world_points_of(self, p: ActivePoint) -> tuple[np.ndarray, float]:
        host = self.window.keyframes[self.window.keyframe_index(p.host_id)]
        ray = np.array([(p.uv[0] - self.window.intrinsics.cx) / self.window.intrinsics.fx,
                        (p.uv[1] - self.window.intrinsics.cy) / self.window.intrinsics.fy,
                        1.0]) / p.inv_depth
        return host.t_wc.apply(ray), float(p.host_int[0])

    def _harvest_points(self, point_ids: list[int]) -> None:
        ids = set(point_ids)
        for p in self.window.points:
            if p.point_id in ids:
                xyz, intensity = self._world_points_of(p)
                self.cloud_xyz.append(xyz)
                self.cloud_int.append(intensity)

    def _refine_window_candidates(self, pyr_left, affine: AffineBrightness,
                                  t_wc_frame: Se3) -> None:
        img = pyr_left[0]
        for host in self.window.keyframes:
            if not host.candidates:
                continue
            t_fh = t_wc_frame.inverse() @ host.t_wc
            refine_candidates(host, host.candidates, img, affine, t_fh,
                              self.window.intrinsics, self.cfg.huber_gamma)

    def _handle_keyframe(self, frame_index: int, pyr_left, t_wc: Se3,
                         affine: AffineBrightness) -> None:
        pyr_right = build_pyramid(self.manifest.load_frame(frame_index, "right"),
                                  self.cfg.pyramid_levels)
        kf = self._make_keyframe(frame_index, pyr_left, pyr_right, t_wc, affine)
        self.window.keyframes.append(kf)
        self._log(f"frame {frame_index}: new keyframe {kf.kf_id} "
                  f"({len(kf.candidates)} candidates)")

        n_active = sum(1 for p in self.window.points if p.status == ACTIVE)
        slots = self.cfg.active_points - n_active
        promoted = activate_candidates(self.window, slots, self.next_point_id)
        self.next_point_id += len(promoted)
        if promoted:
            self._log(f"  activated {len(promoted)} points "
                      f"({n_active + len(promoted)} active)")

        n_active = sum(1 for p in self.window.points if p.status == ACTIVE)
        if len(self.window.keyframes) >= 2 and n_active >= MIN_ACTIVE_FOR_WINDOW_OPT:
            try:
                reports = optimize_window(self.window, self.cfg.coupling_lambda,
                                          gamma=self.cfg.huber_gamma,
                                          freeze_intrinsics=self.cfg.freeze_intrinsics)
                if reports:
                    self._log(f"  window opt: {len(reports)} iterations, photometric "
                              f"{reports[0].photometric_before:.1f} -> {reports[-1].photometric_after:.1f}")
            except OptimizerError as exc:
                self._log(f"  window opt failed: {exc}")
        for kf_w in self.window.keyframes:
            self.kf_final_poses[kf_w.kf_id] = kf_w.t_wc

        if len(self.window.keyframes) > self.cfg.window_keyframes:
            victim, point_ids = select_marginalization_targets(self.window)
            self._harvest_points(point_ids)
            apply_marginalization(self.window, victim, point_ids,
                                  self.cfg.coupling_lambda, self.cfg.huber_gamma,
                                  self.cfg.freeze_intrinsics)
            self._log(f"  marginalized keyframe {victim} and {len(point_ids)} points")

        self.tracking_ref = self._build_tracking_reference()

    # ------------------------------------------------------------------

    def run(self, max_frames: int | None = None) -> RunResult:
        n_frames = self.manifest.num_frames
        if max_frames is not None:
            n_frames = min(n_frames, max_frames)
        if n_frames < 1:
            raise PipelineError("empty sequence")

        completed = True
        failure = None
        t_start = time.perf_counter()
        self._bootstrap()
        consecutive_fallbacks = 0

        for frame_index in range(1, n_frames):
            t0 = time.perf_counter()
            pyr_left = build_pyramid(self.manifest.load_frame(frame_index, "left"),
                                     self.cfg.pyramid_levels)
            ref_kf = self.window.keyframes[-1]
            motion = constant_motion_prior(self.last_motion)
            t_wc_pred = self.t_wc_prev @ motion
            t_init = t_wc_pred.inverse() @ ref_kf.t_wc

            # align from both the motion prediction and the identity; the
            # lower-energy result wins. A single init can slide into a local
            # valley shaped by its own error and amplify drift.
            attempts = []
            for init in (t_init, Se3.identity()):
                try:
                    attempts.append(track(self.tracking_ref, pyr_left, init,
                                          gamma=self.cfg.huber_gamma))
                except TrackingLostError:
                    continue
            tr = min(attempts, key=lambda r: r.energy) if attempts else None
            if tr is None and self.last_motion is None:
                completed = False
                failure = f"tracking lost at frame {frame_index}: no alignment converged"
                self._log(failure)
                break

            if tr is None:
                # hold the constant-motion prediction for this frame; repeated
                # fallbacks mean tracking is genuinely lost
                consecutive_fallbacks += 1
                self._log(f"frame {frame_index}: no alignment converged, holding "
                          f"constant-motion prediction ({consecutive_fallbacks})")
                if consecutive_fallbacks > MAX_CONSECUTIVE_FALLBACKS:
                    completed = False
                    failure = f"tracking lost at frame {frame_index}: repeated implausible alignments"
                    self._log(failure)
                    break
                rel = t_wc_pred.inverse() @ ref_kf.t_wc
                self.records.append(FrameRecord(
                    frame_index, float(self.manifest.timestamps[frame_index]),
                    ref_kf.kf_id, rel, t_wc_pred, False, float("nan"), 0.0,
                    time.perf_counter() - t0, 0.0))
                self.last_motion = self.t_wc_prev.inverse() @ t_wc_pred
                self.t_wc_prev = t_wc_pred
                continue
            consecutive_fallbacks = 0

            t_wc_frame = ref_kf.t_wc @ tr.t_new_ref.inverse()
            decision = needs_keyframe(tr, window_empty=False,
                                      w_flow=self.cfg.weight_flow,
                                      w_flow_t=self.cfg.weight_flow_translation,
                                      w_brightness=self.cfg.weight_brightness)

            if decision.is_keyframe:
                self._handle_keyframe(frame_index, pyr_left, t_wc_frame, tr.affine)
                ref_id = self.window.keyframes[-1].kf_id
                rel = Se3.identity()
            else:
                self._refine_window_candidates(pyr_left, tr.affine, t_wc_frame)
                ref_id = ref_kf.kf_id
                rel = tr.t_new_ref

            self.records.append(FrameRecord(
                frame_index, float(self.manifest.timestamps[frame_index]),
                ref_id, rel, t_wc_frame, decision.is_keyframe,
                tr.energy, tr.inlier_fraction, time.perf_counter() - t0,
                decision.score))
            self.last_motion = self.t_wc_prev.inverse() @ t_wc_frame
            self.t_wc_prev = t_wc_frame

        for kf in self.window.keyframes:
            self.kf_final_poses[kf.kf_id] = kf.t_wc
        remaining = [p.point_id for p in self.window.points if p.status == ACTIVE]
        self._harvest_points(remaining)

        trajectory = [rec.t_wc_tracked for rec in self.records]
        trajectory_final = []
        for rec in self.records:
            anchor = self.kf_final_poses.get(rec.ref_kf_id, rec.t_wc_tracked)
            trajectory_final.append(anchor @ rec.t_ref_frame.inverse())

        total_s = time.perf_counter() - t_start
        report = self._format_report(total_s, completed, failure)
        cloud = (np.array(self.cloud_xyz).reshape(-1, 3), np.array(self.cloud_int))
        return RunResult(trajectory, trajectory_final, cloud[0], cloud[1],
                         self.records, report, completed, failure)

    def _format_report(self, total_s: float, completed: bool,
                       failure: str | None) -> str:
        lines = ["run report", "==========", ""]
        lines.append("config:")
        lines.extend("  " + ln for ln in format_config(self.cfg).splitlines())
        lines.append("")
        lines.append(f"frames processed   : {len(self.records)}")
        n_kf = sum(1 for r in self.records if r.is_keyframe)
        lines.append(f"keyframes          : {n_kf}")
        lines.append(f"completed          : {completed}")
        if failure:
            lines.append(f"failure            : {failure}")
        lines.append(f"total time         : {total_s:.2f} s")
        per_frame = [r.elapsed for r in self.records[1:]]
        if per_frame:
            lines.append(f"mean frame time    : {np.mean(per_frame):.3f} s")
        scale_observable = self.cfg.coupling_lambda > 0
        lines.append(f"scale observable   : {scale_observable}"
                     + ("" if scale_observable else
                        "  (coupling_lambda = 0: metric scale is a gauge freedom)"))
        lines.append("")
        lines.append("frame log: index, time_s, ref_kf, keyframe, score, energy, inliers")
        for r in self.records:
            lines.append("  %5d  %7.3f  %3d  %s  %6.3f  %8.3f  %.2f"
                         % (r.frame_index, r.elapsed, r.ref_kf_id,
                            "KF " if r.is_keyframe else "  .",
                            r.keyframe_score, r.tracking_energy, r.inlier_fraction))
        lines.append("")
        lines.append("events:")
        lines.extend("  " + e for e in self.events)
        return "\n".join(lines) + "\n"


def run_pipeline(manifest, config: PipelineConfig,
                 max_frames: int | None = None) -> RunResult:
    return Pipeline(manifest, config).run(max_frames)
