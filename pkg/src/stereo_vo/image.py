"""Intensity images with precomputed gradients, mean-pool pyramids and
sub-pixel bilinear sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Default constant of the gradient-dependent down-weighting, on the 0-255
# intensity scale.
GRADIENT_CONSTANT = 50.0

DEFAULT_PYRAMID_LEVELS = 5


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class IntensityImage:
    """Single-channel image with central-difference gradients.

    Intensities are stored as float64 row-major arrays; border gradients use
    one-sided differences.
    """

    intensities: np.ndarray  # (H, W)
    gx: np.ndarray
    gy: np.ndarray

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    def gradient_magnitude(self) -> np.ndarray:
        return np.sqrt(self.gx ** 2 + self.gy ** 2)


def make_image(intensities: np.ndarray) -> IntensityImage:
    """Wrap a raster into an IntensityImage, computing its gradient arrays."""
    arr = np.ascontiguousarray(intensities, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ImageError(f"image must be 2-D and at least 2x2, got shape {arr.shape}")
    gx = np.empty_like(arr)
    gy = np.empty_like(arr)
    gx[:, 1:-1] = 0.5 * (arr[:, 2:] - arr[:, :-2])
    gx[:, 0] = arr[:, 1] - arr[:, 0]
    gx[:, -1] = arr[:, -1] - arr[:, -2]
    gy[1:-1, :] = 0.5 * (arr[2:, :] - arr[:-2, :])
    gy[0, :] = arr[1, :] - arr[0, :]
    gy[-1, :] = arr[-1, :] - arr[-2, :]
    return IntensityImage(arr, gx, gy)


@dataclass(frozen=True)
class ImagePyramid:
    """Mean-pool pyramid; level 0 is full resolution, each level halves
    (floor) the previous one's dimensions."""

    levels: tuple[IntensityImage, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> IntensityImage:
        return self.levels[level]


def build_pyramid(img: IntensityImage, num_levels: int = DEFAULT_PYRAMID_LEVELS) -> ImagePyramid:
    """Each coarser pixel is the mean of its 2x2 children; odd rows/columns
    are cropped. Gradients are recomputed per level."""
    if num_levels < 1:
        raise ImageError("num_levels must be >= 1")
    min_dim = 2 ** (num_levels - 1)
    if img.width < min_dim or img.height < min_dim:
        raise ImageError(
            f"image {img.width}x{img.height} too small for {num_levels} pyramid levels")
    levels = [img]
    for _ in range(num_levels - 1):
        prev = levels[-1].intensities
        h2, w2 = prev.shape[0] // 2, prev.shape[1] // 2
        cropped = prev[: 2 * h2, : 2 * w2]
        pooled = 0.25 * (cropped[0::2, 0::2] + cropped[0::2, 1::2]
                         + cropped[1::2, 0::2] + cropped[1::2, 1::2])
        levels.append(make_image(pooled))
    return ImagePyramid(tuple(levels))


def sample_bilinear(img: IntensityImage, x: float, y: float) -> tuple[float, float, float]:
    """Bilinear interpolation of intensity and of both gradient channels.

    Coordinates must satisfy 0 <= x < width-1 and 0 <= y < height-1; callers
    are expected to bounds-check first.
    """
    if not (0.0 <= x < img.width - 1 and 0.0 <= y < img.height - 1):
        raise ImageError(f"sample coordinates ({x}, {y}) outside interpolable region")
    ix, iy = int(x), int(y)
    ax, ay = x - ix, y - iy
    w00 = (1 - ax) * (1 - ay)
    w10 = ax * (1 - ay)
    w01 = (1 - ax) * ay
    w11 = ax * ay

    def blend(a: np.ndarray) -> float:
        return (w00 * a[iy, ix] + w10 * a[iy, ix + 1]
                + w01 * a[iy + 1, ix] + w11 * a[iy + 1, ix + 1])

    return blend(img.intensities), blend(img.gx), blend(img.gy)


def sample_bilinear_batch(img: IntensityImage, xy: np.ndarray, with_gradient: bool = True):
    """Vectorized bilinear sampling of (..., 2) coordinates.

    Returns (intensity, gx, gy, valid); out-of-range samples get valid=False
    and zeros instead of raising. gx/gy are None when with_gradient is False.
    """
    xy = np.asarray(xy, dtype=np.float64)
    x = xy[..., 0]
    y = xy[..., 1]
    valid = (x >= 0) & (x < img.width - 1) & (y >= 0) & (y < img.height - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    ix = xs.astype(np.int64)
    iy = ys.astype(np.int64)
    ax = xs - ix
    ay = ys - iy
    w00 = (1 - ax) * (1 - ay)
    w10 = ax * (1 - ay)
    w01 = (1 - ax) * ay
    w11 = ax * ay

    def blend(a: np.ndarray) -> np.ndarray:
        return (w00 * a[iy, ix] + w10 * a[iy, ix + 1]
                + w01 * a[iy + 1, ix] + w11 * a[iy + 1, ix + 1])

    intensity = np.where(valid, blend(img.intensities), 0.0)
    if not with_gradient:
        return intensity, None, None, valid
    gx = np.where(valid, blend(img.gx), 0.0)
    gy = np.where(valid, blend(img.gy), 0.0)
    return intensity, gx, gy, valid


def gradient_weight(gx, gy, c: float = GRADIENT_CONSTANT):
    """Down-weighting of high-gradient pixels: c^2 / (c^2 + |grad|^2).

    Accepts scalars or arrays; the result lies in (0, 1].
    """
    if c <= 0:
        raise ImageError("gradient constant must be positive")
    c2 = c * c
    return c2 / (c2 + np.asarray(gx) ** 2 + np.asarray(gy) ** 2)
