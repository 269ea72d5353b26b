"""Candidate-pixel selection with block-adaptive gradient thresholds, and the
fixed 8-offset residual pattern shared by all photometric residuals."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .image import ImagePyramid, IntensityImage

# Residual pattern: integer offsets around the center pixel. The maximum
# absolute offset (2) defines the projection border margin.
RESIDUAL_PATTERN = np.array([
    (0, 0), (-2, 0), (2, 0), (0, -2), (0, 2), (-1, -1), (1, -1), (-1, 1),
], dtype=np.int64)

PATTERN_SIZE = 8
PATTERN_HALF_WIDTH = 2

# Additive constant on top of the per-block median gradient magnitude.
BLOCK_THRESHOLD_ADD = 7.0

# Horizontal block count; vertical count scales with the aspect ratio so the
# blocks stay square-ish regardless of image shape.
BLOCKS_ACROSS_WIDTH = 32

# Accepted band around the requested budget, and retry cap for threshold
# rescaling when the count falls outside it.
BUDGET_LOW_FACTOR = 0.8
BUDGET_HIGH_FACTOR = 1.25
MAX_SELECTION_RETRIES = 3

CANDIDATE = "candidate"
ACTIVE = "active"
MARGINALIZED = "marginalized"
DROPPED = "dropped"

_STATUS_ORDER = (CANDIDATE, ACTIVE, MARGINALIZED, DROPPED)


class LowTextureWarning(UserWarning):
    pass


@dataclass
class CandidatePoint:
    """A selected pixel awaiting activation, with its evolving depth estimate.

    Status only moves forward: candidate -> active -> marginalized -> dropped
    (dropping is allowed from any earlier status).
    """

    uv: np.ndarray  # (2,) pixel in the host keyframe
    inv_depth: float = 0.0
    inv_depth_var: float = float("inf")
    status: str = CANDIDATE
    outlier_strikes: int = 0
    host_id: int = -1

    def advance_status(self, new_status: str) -> None:
        if _STATUS_ORDER.index(new_status) < _STATUS_ORDER.index(self.status):
            raise ValueError(f"illegal status transition {self.status} -> {new_status}")
        self.status = new_status


def block_grid(width: int, height: int) -> tuple[int, int]:
    """Block counts (bx, by) with block side proportional to the image size."""
    bx = BLOCKS_ACROSS_WIDTH
    by = max(1, round(bx * height / width))
    return bx, by


def block_thresholds(img: IntensityImage, grid: tuple[int, int],
                     add: float = BLOCK_THRESHOLD_ADD) -> np.ndarray:
    """Per-block threshold: median gradient magnitude of the block + add."""
    bx, by = grid
    if bx < 1 or by < 1:
        raise ValueError("block grid must be at least 1x1")
    mag = img.gradient_magnitude()
    out = np.empty((by, bx))
    xs = np.linspace(0, img.width, bx + 1).astype(int)
    ys = np.linspace(0, img.height, by + 1).astype(int)
    for j in range(by):
        for i in range(bx):
            block = mag[ys[j]:ys[j + 1], xs[i]:xs[i + 1]]
            out[j, i] = (np.median(block) if block.size else 0.0) + add
    return out


def _local_maxima(mag: np.ndarray) -> np.ndarray:
    """Mask of pixels that are >= all 8 neighbours (non-strict argmax)."""
    h, w = mag.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = mag
    center = padded[1:-1, 1:-1]
    is_max = np.ones_like(mag, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            is_max &= center >= padded[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]
    return is_max & (mag > 0)


def _select_pass(img: IntensityImage, thresholds: np.ndarray, multiplier: float) -> np.ndarray:
    """One selection sweep: threshold + local-max test, then min-distance
    suppression in row-major order. Returns (N, 2) pixel coordinates."""
    mag = img.gradient_magnitude()
    by, bx = thresholds.shape
    xs = np.linspace(0, img.width, bx + 1).astype(int)
    ys = np.linspace(0, img.height, by + 1).astype(int)
    # expand the per-block thresholds to a full-resolution map
    thresh_map = np.empty_like(mag)
    for j in range(by):
        for i in range(bx):
            thresh_map[ys[j]:ys[j + 1], xs[i]:xs[i + 1]] = thresholds[j, i] * multiplier
    passes = (mag > thresh_map) & _local_maxima(mag)
    # keep the pattern stamp inside the image
    passes[:PATTERN_HALF_WIDTH, :] = False
    passes[-PATTERN_HALF_WIDTH:, :] = False
    passes[:, :PATTERN_HALF_WIDTH] = False
    passes[:, -PATTERN_HALF_WIDTH:] = False

    ys_sel, xs_sel = np.nonzero(passes)
    blocked = np.zeros(mag.shape, dtype=bool)
    keep = []
    for y, x in zip(ys_sel, xs_sel):
        if blocked[y, x]:
            continue
        keep.append((x, y))
        blocked[max(0, y - 1):y + 2, max(0, x - 1):x + 2] = True
    return np.array(keep, dtype=np.float64).reshape(-1, 2)


def select_candidates(pyr: ImagePyramid, budget: int) -> np.ndarray:
    """Select well-spread high-gradient pixels on the full-resolution level.

    Returns (N, 2) pixel coordinates in deterministic (row-major) order with
    no two selections closer than the pattern half-width. The count is steered
    into [0.8, 1.25] x budget by rescaling the block thresholds, with at most
    MAX_SELECTION_RETRIES re-runs; a near-constant image yields an (possibly
    empty) under-budget selection plus a LowTextureWarning.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    img = pyr[0]
    thresholds = block_thresholds(img, block_grid(img.width, img.height))
    low = BUDGET_LOW_FACTOR * budget
    high = BUDGET_HIGH_FACTOR * budget

    multiplier = 1.0
    passes = [_select_pass(img, thresholds, multiplier)]
    for _ in range(MAX_SELECTION_RETRIES):
        if low <= len(passes[-1]) <= high:
            break
        # damped update: raising the multiplier thins the selection
        ratio = max(len(passes[-1]), 1) / budget
        multiplier *= min(3.0, max(0.3, ratio ** 0.7))
        passes.append(_select_pass(img, thresholds, multiplier))

    # prefer the sparsest pass that still meets the lower band edge; an
    # overshoot is truncated below, an undershoot is reported as-is
    reaching = [p for p in passes if len(p) >= low]
    if reaching:
        selected = min(reaching, key=len)
    else:
        selected = max(passes, key=len)

    if len(selected) > high:
        # deterministic truncation: keep the strongest gradients
        mag = img.gradient_magnitude()
        strengths = mag[selected[:, 1].astype(int), selected[:, 0].astype(int)]
        order = np.lexsort((selected[:, 0], selected[:, 1], -strengths))
        keep = np.sort(order[: int(high)])
        selected = selected[keep]
    if len(selected) < 0.1 * budget:
        warnings.warn(f"low-texture image: selected {len(selected)} of {budget} requested",
                      LowTextureWarning)
    return selected
