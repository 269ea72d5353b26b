"""Stereo direct sparse visual odometry.

Tracks a calibrated, rectified stereo camera through an image sequence by
minimizing photometric error over a sliding window of keyframes, jointly
optimizing poses, inverse depths and affine brightness, with static-stereo
constraints providing metric scale.
"""

from .geometry import PinholeIntrinsics, Se3, StereoRig, se3_exp, se3_log
from .image import ImagePyramid, IntensityImage, build_pyramid, make_image

__all__ = [
    "PinholeIntrinsics",
    "Se3",
    "StereoRig",
    "se3_exp",
    "se3_log",
    "ImagePyramid",
    "IntensityImage",
    "build_pyramid",
    "make_image",
]

__version__ = "0.1.0"
