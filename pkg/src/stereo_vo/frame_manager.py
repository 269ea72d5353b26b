"""Keyframe-need decisions, candidate depth refinement from non-keyframes,
candidate activation and marginalization-victim selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PinholeIntrinsics, Se3, project_batch
from .image import ImagePyramid, IntensityImage, gradient_weight, sample_bilinear_batch
from .point_selector import ACTIVE, CANDIDATE, CandidatePoint, DROPPED, RESIDUAL_PATTERN
from .stereo_matcher import match_ncc, prior_search_range
from .tracker import AffineBrightness, HUBER_GAMMA, TrackingResult
from .window_optimizer import ActivePoint, Keyframe, KeyframeWindow

# Keyframe-decision weights: w_f sqrt(flow) + w_ft sqrt(flow_t) + w_a |da| > 1
WEIGHT_FLOW = 1.0 / 17.0
WEIGHT_FLOW_TRANSLATION = 1.0 / 17.0
WEIGHT_BRIGHTNESS = 1.0 / 3.0

# Candidate refinement
SEARCH_SAMPLES = 21
MIN_SEGMENT_PX = 0.5
MIN_VALID_PATTERN = 6
REFINE_PIXEL_NOISE = 1.0  # px, epipolar matching error
MAX_OUTLIER_STRIKES = 3

# Marginalization victim heuristic
DISTANCE_EPS = 1e-5
# A keyframe whose hosted points have (nearly) all left the newest view no
# longer constrains the window and is evicted before the spread heuristic.
MIN_VISIBLE_FRACTION = 0.05


@dataclass(frozen=True)
class KeyframeDecision:
    flow: float
    flow_no_rotation: float
    brightness_delta: float
    is_keyframe: bool
    score: float


def needs_keyframe(tr: TrackingResult, window_empty: bool = False,
                   w_flow: float = WEIGHT_FLOW,
                   w_flow_t: float = WEIGHT_FLOW_TRANSLATION,
                   w_brightness: float = WEIGHT_BRIGHTNESS) -> KeyframeDecision:
    """Weighted-sum rule on RMS optical flow, rotation-free RMS flow and the
    relative brightness factor; an empty window always takes a keyframe."""
    score = (w_flow * math.sqrt(max(tr.flow, 0.0))
             + w_flow_t * math.sqrt(max(tr.flow_translation_only, 0.0))
             + w_brightness * tr.brightness_change)
    return KeyframeDecision(
        flow=tr.flow,
        flow_no_rotation=tr.flow_translation_only,
        brightness_delta=tr.brightness_change,
        is_keyframe=window_empty or score > 1.0,
        score=score,
    )


def _ssd_outlier_threshold(gamma: float) -> float:
    # mean squared pattern residual above (2 gamma)^2 counts as a failed match
    return (2.0 * gamma) ** 2


def refine_candidates(host: Keyframe, candidates: list[CandidatePoint],
                      target_img: IntensityImage, target_affine: AffineBrightness,
                      t_target_host: Se3, intr: PinholeIntrinsics,
                      gamma: float = HUBER_GAMMA) -> int:
    """Refine candidate inverse depths by discrete epipolar search in one
    non-keyframe.

    The searched interval is [d - 2 sigma, d + 2 sigma]; the best photometric
    SSD over the pattern is refined by a parabola fit and fused with the
    prior, shrinking the variance. Degenerate (sub-pixel) epipolar segments
    are skipped; matches worse than the SSD threshold count as strikes, and
    MAX_OUTLIER_STRIKES strikes drop the candidate. Returns the number of
    candidates updated.
    """
    live = [c for c in candidates if c.status == CANDIDATE]
    if not live:
        return 0
    uv = np.array([c.uv for c in live]).reshape(-1, 2)
    d_hat = np.array([c.inv_depth for c in live])
    sigma = np.sqrt(np.array([c.inv_depth_var for c in live]))

    host_img = host.left[0]
    pat = uv[:, None, :] + RESIDUAL_PATTERN[None, :, :]
    host_int, _, _, host_ok = sample_bilinear_batch(host_img, pat)

    d_lo = np.maximum(d_hat - 2.0 * sigma, 1e-6)
    d_hi = d_hat + 2.0 * sigma
    uv_lo, _, ok_lo = project_batch(uv, d_lo, t_target_host, intr)
    uv_hi, _, ok_hi = project_batch(uv, d_hi, t_target_host, intr)
    seg_len = np.linalg.norm(uv_hi - uv_lo, axis=1)
    searchable = ok_lo & ok_hi & (seg_len >= MIN_SEGMENT_PX)
    if not np.any(searchable):
        return 0

    steps = np.linspace(0.0, 1.0, SEARCH_SAMPLES)
    d_grid = d_lo[:, None] + (d_hi - d_lo)[:, None] * steps[None, :]  # (C, S)
    n, s = d_grid.shape
    uv_rep = np.repeat(uv, s, axis=0)
    uv_t, _, ok_c = project_batch(uv_rep, d_grid.ravel(), t_target_host, intr)
    pat_t = uv_t[:, None, :] + RESIDUAL_PATTERN[None, :, :]
    t_int, _, _, ok_s = sample_bilinear_batch(target_img, pat_t, with_gradient=False)

    scale = math.exp(target_affine.a - host.affine_left.a)
    corrected = scale * (host_int - host.affine_left.b)  # (C, 8)
    r = t_int.reshape(n, s, 8) - target_affine.b - corrected[:, None, :]
    valid = (ok_c.reshape(n, s)[:, :, None] & ok_s.reshape(n, s, 8)
             & host_ok[:, None, :])
    n_valid = valid.sum(axis=2)
    ssd = np.where(n_valid >= MIN_VALID_PATTERN,
                   np.sum(np.where(valid, r * r, 0.0), axis=2) / np.maximum(n_valid, 1),
                   np.inf)

    threshold = _ssd_outlier_threshold(gamma)
    updated = 0
    for i, cand in enumerate(live):
        if not searchable[i]:
            continue
        scores = ssd[i]
        best = int(np.argmin(scores))
        if not np.isfinite(scores[best]) or scores[best] > threshold:
            cand.outlier_strikes += 1
            if cand.outlier_strikes >= MAX_OUTLIER_STRIKES:
                cand.advance_status(DROPPED)
            continue
        d_best = d_grid[i, best]
        if 0 < best < s - 1 and np.isfinite(scores[best - 1]) and np.isfinite(scores[best + 1]):
            denom = scores[best - 1] - 2 * scores[best] + scores[best + 1]
            if denom > 1e-12:
                shift = 0.5 * (scores[best - 1] - scores[best + 1]) / denom
                d_best = d_best + np.clip(shift, -1.0, 1.0) * (d_grid[i, 1] - d_grid[i, 0])
        # measurement variance from the epipolar geometry: a one-pixel match
        # error maps to seg_len / (d_hi - d_lo) pixels per unit inverse depth
        px_per_d = seg_len[i] / max(d_hi[i] - d_lo[i], 1e-12)
        sigma_meas = REFINE_PIXEL_NOISE / max(px_per_d, 1e-12)
        var_prior = cand.inv_depth_var
        var_meas = sigma_meas * sigma_meas
        w = 1.0 / var_prior + 1.0 / var_meas
        cand.inv_depth = float((cand.inv_depth / var_prior + d_best / var_meas) / w)
        cand.inv_depth_var = float(1.0 / w)
        updated += 1
    return updated


def refine_candidate(cand: CandidatePoint, host: Keyframe,
                     target_img: IntensityImage, target_affine: AffineBrightness,
                     t_target_host: Se3, intr: PinholeIntrinsics,
                     gamma: float = HUBER_GAMMA) -> bool:
    """Single-candidate wrapper over refine_candidates."""
    return refine_candidates(host, [cand], target_img, target_affine,
                             t_target_host, intr, gamma) == 1


def _occupancy_key(uv: np.ndarray) -> tuple[int, int]:
    return int(round(uv[0])), int(round(uv[1]))


class _Occupancy:
    """Chebyshev-distance-2 exclusion mask over a pixel grid."""

    def __init__(self, width: int, height: int):
        self.blocked = np.zeros((height, width), dtype=bool)

    def is_free(self, uv) -> bool:
        x, y = _occupancy_key(uv)
        if not (0 <= x < self.blocked.shape[1] and 0 <= y < self.blocked.shape[0]):
            return False
        return not self.blocked[y, x]

    def mark(self, uv) -> None:
        x, y = _occupancy_key(uv)
        h, w = self.blocked.shape
        self.blocked[max(0, y - 1):min(h, y + 2), max(0, x - 1):min(w, x + 2)] = True


def _temporal_ssd(host: Keyframe, uv: np.ndarray, inv_depth: float,
                  target: Keyframe, intr: PinholeIntrinsics,
                  host_affine: AffineBrightness) -> float | None:
    """Mean squared pattern residual of one candidate observed in `target`;
    None when the projection leaves the image."""
    t_th = target.t_wc.inverse() @ host.t_wc
    uv_t, _, ok = project_batch(uv.reshape(1, 2), np.array([inv_depth]), t_th, intr)
    if not ok[0]:
        return None
    host_pat = uv.reshape(1, 2)[:, None, :] + RESIDUAL_PATTERN[None, :, :]
    h_int, _, _, h_ok = sample_bilinear_batch(host.left[0], host_pat)
    pat = uv_t[:, None, :] + RESIDUAL_PATTERN[None, :, :]
    t_int, _, _, t_ok = sample_bilinear_batch(target.left[0], pat, with_gradient=False)
    s = math.exp(target.affine_left.a - host_affine.a)
    r = t_int - target.affine_left.b - s * (h_int - host_affine.b)
    valid = h_ok & t_ok
    if valid.sum() < MIN_VALID_PATTERN:
        return None
    return float(np.sum(np.where(valid, r * r, 0.0)) / valid.sum())


def activate_candidates(window: KeyframeWindow, slots: int,
                        next_point_id: int,
                        verify_stereo: bool = True,
                        verify_temporal: bool = True) -> list[ActivePoint]:
    """Promote the lowest-variance candidates into the joint optimization,
    subject to spatial spread in the newest keyframe (no activation within
    2 px of an existing active point's projection).

    When verify_stereo is set, a prior-ranged NCC re-match against the host
    stereo pair must not contradict the refined depth; hard disagreements
    drop the candidate, while mere no-matches are tolerated (stereo can fail
    on structures parallel to the epipolar line). verify_temporal requires a
    plausible pattern residual in the second-newest keyframe before
    promotion; failures keep the candidate unpromoted rather than dropping
    it, so photometrically unstable (distant, aliased) pixels wait.
    """
    if slots <= 0 or not window.keyframes:
        return []
    newest = window.keyframes[-1]
    intr = window.intrinsics
    occ = _Occupancy(intr.width, intr.height)
    for p in window.points:
        if p.status != ACTIVE:
            continue
        host = window.keyframes[window.keyframe_index(p.host_id)]
        t_nh = newest.t_wc.inverse() @ host.t_wc
        uv_n, _, ok = project_batch(p.uv.reshape(1, 2), np.array([p.inv_depth]), t_nh, intr)
        if ok[0]:
            occ.mark(uv_n[0])

    ranked: list[tuple, ...] = []
    for kf in window.keyframes:
        for c in kf.candidates:
            if c.status == CANDIDATE and c.inv_depth > 0:
                ranked.append((c.inv_depth_var, kf.kf_id, c.uv[1], c.uv[0], c, kf))
    ranked.sort(key=lambda t: t[:4])

    promoted: list[ActivePoint] = []
    fxb = intr.fx * window.rig.baseline
    for _, _, _, _, cand, host in ranked:
        if len(promoted) >= slots:
            break
        t_nh = newest.t_wc.inverse() @ host.t_wc
        uv_n, _, ok = project_batch(cand.uv.reshape(1, 2), np.array([cand.inv_depth]),
                                    t_nh, intr)
        if not ok[0] or not occ.is_free(uv_n[0]):
            continue
        if verify_stereo:
            prior_disp = cand.inv_depth * fxb
            m = match_ncc(host.left[0], host.right[0], cand.uv,
                          prior_search_range(prior_disp), intr, window.rig)
            if m is not None:
                tol = 3.0 * math.sqrt(cand.inv_depth_var + m.inverse_depth_variance)
                if abs(m.inverse_depth - cand.inv_depth) > max(tol, 0.01):
                    cand.advance_status(DROPPED)
                    continue
        if verify_temporal and len(window.keyframes) >= 2 and host is not newest:
            ssd = _temporal_ssd(host, cand.uv, cand.inv_depth, newest, intr,
                                host.affine_left)
            if ssd is None or ssd > _ssd_outlier_threshold(HUBER_GAMMA):
                continue
        elif verify_temporal and len(window.keyframes) >= 2 and host is newest:
            second = window.keyframes[-2]
            ssd = _temporal_ssd(host, cand.uv, cand.inv_depth, second, intr,
                                host.affine_left)
            if ssd is not None and ssd > _ssd_outlier_threshold(HUBER_GAMMA):
                continue
        pat = cand.uv[None, :] + RESIDUAL_PATTERN
        host_int, gx, gy, valid = sample_bilinear_batch(host.left[0], pat)
        if not np.all(valid):
            continue
        weights = gradient_weight(gx, gy)
        cand.advance_status(ACTIVE)
        point = ActivePoint(point_id=next_point_id + len(promoted),
                            host_id=host.kf_id, uv=cand.uv.copy(),
                            inv_depth=float(cand.inv_depth),
                            host_int=host_int, weights=weights)
        window.points.append(point)
        promoted.append(point)
        occ.mark(uv_n[0])
    return promoted


def _visible_in(window: KeyframeWindow, point: ActivePoint, kf: Keyframe) -> bool:
    if kf.kf_id == point.host_id:
        return True
    if kf.kf_id in point.outlier_targets:
        return False
    host = window.keyframes[window.keyframe_index(point.host_id)]
    t_th = kf.t_wc.inverse() @ host.t_wc
    _, _, ok = project_batch(point.uv.reshape(1, 2), np.array([point.inv_depth]),
                             t_th, window.intrinsics)
    return bool(ok[0])


def select_marginalization_targets(window: KeyframeWindow) -> tuple[int | None, list[int]]:
    """Pick the keyframe to marginalize plus the points to fold in: every
    active point observed by neither of the two latest keyframes, and every
    active point hosted in the victim.

    The victim is never one of the two newest. A keyframe whose hosted points
    are (almost) no longer visible in the newest view is evicted first;
    otherwise the distance-spread heuristic drops the frame that is close to
    the others and far from the newest.
    """
    if len(window.keyframes) < 3:
        return None, []
    newest = window.keyframes[-1]
    second = window.keyframes[-2]
    eligible = window.keyframes[:-2]

    best_id = None
    # stale anchors first: lowest visible fraction below the threshold
    worst_fraction = MIN_VISIBLE_FRACTION
    for kf in eligible:
        hosted = [p for p in window.points
                  if p.host_id == kf.kf_id and p.status == ACTIVE]
        if not hosted:
            continue
        visible = sum(1 for p in hosted if _visible_in(window, p, newest))
        fraction = visible / len(hosted)
        if fraction < worst_fraction:
            worst_fraction = fraction
            best_id = kf.kf_id

    if best_id is None:
        best_score = -np.inf
        for kf in eligible:
            d_new = np.linalg.norm(kf.t_wc.translation - newest.t_wc.translation)
            closeness = 0.0
            for other in window.keyframes:
                if other.kf_id in (kf.kf_id, newest.kf_id):
                    continue
                d = np.linalg.norm(kf.t_wc.translation - other.t_wc.translation)
                closeness += 1.0 / (d + DISTANCE_EPS)
            score = math.sqrt(d_new) * closeness
            if score > best_score:
                best_score = score
                best_id = kf.kf_id

    point_ids = []
    for p in window.points:
        if p.status != ACTIVE:
            continue
        if p.host_id == best_id:
            point_ids.append(p.point_id)
        elif not _visible_in(window, p, newest) and not _visible_in(window, p, second):
            point_ids.append(p.point_id)
    return best_id, point_ids
