"""Static-stereo correspondence along the horizontal epipolar line.

Matching maximizes zero-mean NCC of a 3-row x 5-column patch, which makes it
invariant to the unknown affine brightness transfer between the two cameras
of the rig.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PinholeIntrinsics, StereoRig
from .image import IntensityImage

NCC_ROWS = 3
NCC_COLS = 5
NCC_HALF_ROWS = NCC_ROWS // 2
NCC_HALF_COLS = NCC_COLS // 2

NCC_ACCEPT_THRESHOLD = 0.85
SECOND_PEAK_RATIO = 0.95
SECOND_PEAK_MIN_SEPARATION = 2  # px

# Fraction of the image width searched when no disparity prior exists.
BOOTSTRAP_SEARCH_FRACTION = 0.3
# Half-width of the disparity window searched around a prior estimate.
PRIOR_SEARCH_RADIUS = 10.0

MIN_BOOTSTRAP_MATCHES = 50

# Matches at (near-)zero disparity carry no depth information and would
# violate the positive-inverse-depth invariant downstream.
MIN_DISPARITY = 0.1

# Bootstrap matches must survive a right-to-left re-match within this many
# pixels; random correlations on repetitive texture rarely do.
LR_CONSISTENCY_TOL = 1.5

# The score run connected to the best disparity may extend at most this far
# on either side before the peak counts as too flat to localize.
PLATEAU_HALF_WIDTH = 4

_PATCH_VAR_EPS = 1e-12


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StereoMatch:
    disparity: float  # px, >= 0
    ncc_score: float
    inverse_depth: float  # disparity / (fx * baseline)
    inverse_depth_variance: float


def _patch(img: IntensityImage, x: int, y: int) -> np.ndarray:
    return img.intensities[y - NCC_HALF_ROWS: y + NCC_HALF_ROWS + 1,
                           x - NCC_HALF_COLS: x + NCC_HALF_COLS + 1]


def _ncc_scores(left: IntensityImage, right: IntensityImage, x: int, y: int,
                disparities: np.ndarray) -> np.ndarray:
    """Zero-mean NCC of the left patch at (x, y) against right patches at
    x - disparity (vectorized over the disparity set). Degenerate
    (zero-variance) pairs score -inf."""
    lp = _patch(left, x, y).reshape(-1)
    lp = lp - lp.mean()
    l_norm = np.sqrt(float(lp @ lp))
    scores = np.full(len(disparities), -np.inf)
    if l_norm < _PATCH_VAR_EPS:
        return scores
    xr = x - np.asarray(disparities, dtype=np.int64)
    ok = (xr >= NCC_HALF_COLS) & (xr < right.width - NCC_HALF_COLS)
    if not np.any(ok):
        return scores
    xs = xr[ok]
    rows = right.intensities[y - NCC_HALF_ROWS: y + NCC_HALF_ROWS + 1]
    cols = xs[:, None] + np.arange(-NCC_HALF_COLS, NCC_HALF_COLS + 1)[None, :]
    patches = rows[:, cols]  # (3, n, 5)
    patches = np.moveaxis(patches, 1, 0).reshape(len(xs), -1)  # (n, 15)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", patches, patches))
    good = norms >= _PATCH_VAR_EPS
    vals = np.full(len(xs), -np.inf)
    vals[good] = (patches[good] @ lp) / (norms[good] * l_norm)
    scores[ok] = vals
    return scores


def match_ncc(left: IntensityImage, right: IntensityImage, p: np.ndarray,
              search: tuple[float, float], intr: PinholeIntrinsics,
              rig: StereoRig) -> StereoMatch | None:
    """Match one left-image pixel against the right image.

    `search` is the inclusive integer disparity range scanned; the best peak
    is refined to sub-pixel by a parabola fit over its two neighbours. Returns
    None when the patch is degenerate, the best score is below the acceptance
    threshold, or a distant second peak comes within SECOND_PEAK_RATIO of it.
    """
    x, y = int(round(p[0])), int(round(p[1]))
    if not (NCC_HALF_COLS <= x < left.width - NCC_HALF_COLS
            and NCC_HALF_ROWS <= y < left.height - NCC_HALF_ROWS):
        return None
    d_lo = max(0, int(np.floor(search[0])))
    d_hi = min(x - NCC_HALF_COLS, int(np.ceil(search[1])))
    if d_hi < d_lo:
        return None
    disparities = np.arange(d_lo, d_hi + 1)
    scores = _ncc_scores(left, right, x, y, disparities)
    best = int(np.argmax(scores))
    best_score = scores[best]
    if not np.isfinite(best_score) or best_score < NCC_ACCEPT_THRESHOLD:
        return None
    # ambiguity: a second peak, i.e. a near-best score separated from the best
    # by a valley; the run connected to the best is its own shoulder, but an
    # overly wide run means the peak cannot be localized either
    thresh = SECOND_PEAK_RATIO * best_score
    above = scores >= thresh
    lo = best
    while lo - 1 >= 0 and above[lo - 1]:
        lo -= 1
    hi = best
    while hi + 1 < len(scores) and above[hi + 1]:
        hi += 1
    if best - lo > PLATEAU_HALF_WIDTH or hi - best > PLATEAU_HALF_WIDTH:
        return None
    if np.any(above[:lo]) or np.any(above[hi + 1:]):
        return None

    disparity = float(disparities[best])
    if 0 < best < len(disparities) - 1:
        s_prev, s0, s_next = scores[best - 1], scores[best], scores[best + 1]
        denom = s_prev - 2 * s0 + s_next
        if np.isfinite(s_prev) and np.isfinite(s_next) and denom < -_PATCH_VAR_EPS:
            delta = 0.5 * (s_prev - s_next) / denom
            disparity += float(np.clip(delta, -0.5, 0.5))

    fxb = intr.fx * rig.baseline
    inv_depth = disparity / fxb
    sigma = (1.0 / fxb) / (best_score * best_score)
    return StereoMatch(disparity=disparity, ncc_score=float(best_score),
                       inverse_depth=inv_depth, inverse_depth_variance=sigma * sigma)


def bootstrap_search_range(intr: PinholeIntrinsics) -> tuple[float, float]:
    return 0.0, BOOTSTRAP_SEARCH_FRACTION * intr.width


def prior_search_range(prior_disparity: float) -> tuple[float, float]:
    return (max(0.0, prior_disparity - PRIOR_SEARCH_RADIUS),
            prior_disparity + PRIOR_SEARCH_RADIUS)


def _lr_consistent(left: IntensityImage, right: IntensityImage, x: int, y: int,
                   disparity: float, search: tuple[float, float]) -> bool:
    """Re-match from the right image back to the left; a mutual match pins
    down random correlations that a single direction lets through."""
    xr = int(round(x - disparity))
    if not (NCC_HALF_COLS <= xr < right.width - NCC_HALF_COLS):
        return False
    d_lo = max(0, int(np.floor(search[0])))
    d_hi = int(np.ceil(search[1]))
    disp = np.arange(d_lo, d_hi + 1)
    scores = _ncc_scores(right, left, xr, y, -disp)
    if not np.any(np.isfinite(scores)):
        return False
    d_rl = float(disp[int(np.argmax(scores))])
    return abs(d_rl - disparity) <= LR_CONSISTENCY_TOL


def bootstrap_depth_map(left: IntensityImage, right: IntensityImage,
                        candidates: np.ndarray, intr: PinholeIntrinsics,
                        rig: StereoRig,
                        min_matches: int = MIN_BOOTSTRAP_MATCHES) -> list[tuple[np.ndarray, float, float]]:
    """Stereo-match a list of candidate pixels of the first frame.

    Returns one (pixel, inverse_depth, variance) triple per candidate that
    matches and survives the left-right consistency check; raises
    InitializationError when fewer than `min_matches` candidates do.
    """
    search = bootstrap_search_range(intr)
    out = []
    for uv in np.asarray(candidates, dtype=np.float64).reshape(-1, 2):
        m = match_ncc(left, right, uv, search, intr, rig)
        if m is None or m.disparity < MIN_DISPARITY:
            continue
        if not _lr_consistent(left, right, int(round(uv[0])), int(round(uv[1])),
                              m.disparity, search):
            continue
        out.append((uv, m.inverse_depth, m.inverse_depth_variance))
    if len(out) < min_matches:
        raise InitializationError(
            f"stereo bootstrap matched only {len(out)} of {len(candidates)} candidates "
            f"(minimum {min_matches})")
    return out
