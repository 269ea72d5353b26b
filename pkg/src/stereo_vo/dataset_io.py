"""KITTI-odometry-format sequence loading and trajectory / point-cloud output."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import PinholeIntrinsics, Se3, StereoRig
from .image import IntensityImage, make_image


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SequenceManifest:
    left_paths: tuple[str, ...]
    right_paths: tuple[str, ...]
    timestamps: np.ndarray  # seconds, strictly increasing
    intrinsics: PinholeIntrinsics
    rig: StereoRig

    @property
    def num_frames(self) -> int:
        return len(self.left_paths)

    def load_frame(self, index: int, camera: str = "left") -> IntensityImage:
        path = self.left_paths[index] if camera == "left" else self.right_paths[index]
        return load_image(path)


def load_image(path: str) -> IntensityImage:
    """Decode a raster to grayscale (ITU-R 601 luma for color input)."""
    with Image.open(path) as img:
        gray = img.convert("L") if img.mode != "L" else img
        arr = np.asarray(gray, dtype=np.float64)
    return make_image(arr)


def _parse_projection(line: str, name: str, path: str) -> np.ndarray:
    parts = line.split()
    if len(parts) != 12:
        raise DatasetError(f"{path}: {name} must carry 12 floats, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise DatasetError(f"{path}: non-numeric value in {name}") from exc
    return np.array(vals).reshape(3, 4)


def load_kitti_calibration(path: str) -> tuple[tuple[float, float, float, float], StereoRig]:
    """Parse P0/P1 from a KITTI calib.txt; returns ((fx, fy, cx, cy), rig).

    The image size is not recorded in calib.txt, so the intrinsics proper are
    assembled by the caller from the first decoded frame.
    """
    p_mats: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or ":" not in line:
                continue
            key, rest = line.split(":", 1)
            key = key.strip()
            if key in ("P0", "P1"):
                p_mats[key] = _parse_projection(rest, key, path)
    for key in ("P0", "P1"):
        if key not in p_mats:
            raise DatasetError(f"{path}: missing {key} row")
    p0, p1 = p_mats["P0"], p_mats["P1"]
    if p1[0, 3] >= 0:
        raise DatasetError(
            f"{path}: P1[0,3] = {p1[0, 3]} must be negative (right camera at +x "
            "gives a negative projection offset)")
    baseline = -p1[0, 3] / p1[0, 0]
    return (p0[0, 0], p0[1, 1], p0[0, 2], p0[1, 2]), StereoRig(baseline)


def load_kitti_sequence(path: str) -> SequenceManifest:
    """Load a KITTI odometry sequence directory: image_0/, image_1/,
    times.txt and calib.txt."""
    left_dir = os.path.join(path, "image_0")
    right_dir = os.path.join(path, "image_1")
    times_file = os.path.join(path, "times.txt")
    calib_file = os.path.join(path, "calib.txt")
    for p in (left_dir, right_dir):
        if not os.path.isdir(p):
            raise DatasetError(f"missing image directory {p}")
    for p in (times_file, calib_file):
        if not os.path.isfile(p):
            raise DatasetError(f"missing file {p}")

    left_paths = sorted(os.path.join(left_dir, f) for f in os.listdir(left_dir)
                        if f.endswith(".png"))
    right_paths = sorted(os.path.join(right_dir, f) for f in os.listdir(right_dir)
                         if f.endswith(".png"))
    if not left_paths:
        raise DatasetError(f"{left_dir} contains no .png frames")
    if len(left_paths) != len(right_paths):
        raise DatasetError(f"frame count mismatch: {len(left_paths)} left vs "
                           f"{len(right_paths)} right")

    timestamps = []
    with open(times_file, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                timestamps.append(float(line))
            except ValueError as exc:
                raise DatasetError(f"{times_file}:{lineno}: bad timestamp {line!r}") from exc
    if len(timestamps) != len(left_paths):
        raise DatasetError(f"{times_file}: {len(timestamps)} timestamps for "
                           f"{len(left_paths)} frames")
    times = np.array(timestamps)
    if np.any(np.diff(times) <= 0):
        bad = int(np.argmax(np.diff(times) <= 0)) + 1
        raise DatasetError(f"{times_file}: timestamps not strictly increasing at index {bad}")

    (fx, fy, cx, cy), rig = load_kitti_calibration(calib_file)
    first = load_image(left_paths[0])
    intr = PinholeIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                             width=first.width, height=first.height)
    return SequenceManifest(tuple(left_paths), tuple(right_paths), times, intr, rig)


def write_trajectory_kitti(poses: list[Se3], sink) -> None:
    """Write camera-to-world poses as KITTI 12-float lines (row-major top
    3x4 of the pose matrix, %.6e)."""
    own = isinstance(sink, str)
    fh = open(sink, "w", encoding="ascii") if own else sink
    try:
        for pose in poses:
            top = pose.matrix()[:3, :].reshape(-1)
            fh.write(" ".join("%.6e" % v for v in top) + "\n")
    finally:
        if own:
            fh.close()


def read_trajectory_kitti(source) -> list[Se3]:
    own = isinstance(source, str)
    fh = open(source, "r", encoding="ascii") if own else source
    poses = []
    try:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 12:
                raise DatasetError(f"pose line {lineno}: expected 12 floats, got {len(vals)}")
            m = np.eye(4)
            m[:3, :] = np.array(vals).reshape(3, 4)
            poses.append(Se3.from_matrix(m))
    finally:
        if own:
            fh.close()
    return poses


def write_points_ply(points: np.ndarray, intensities: np.ndarray, sink) -> None:
    """ASCII PLY with one x y z intensity vertex per point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if len(points) != len(intensities):
        raise ValueError("points and intensities lengths differ")
    own = isinstance(sink, str)
    fh = open(sink, "w", encoding="ascii") if own else sink
    try:
        fh.write("ply\n")
        fh.write("format ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\n")
        fh.write("property float y\n")
        fh.write("property float z\n")
        fh.write("property float intensity\n")
        fh.write("end_header\n")
        for p, i in zip(points, intensities):
            fh.write("%.6f %.6f %.6f %.3f\n" % (p[0], p[1], p[2], i))
    finally:
        if own:
            fh.close()


def write_image_png(img: IntensityImage, path: str) -> None:
    """8-bit PNG encode (used by the synthetic dataset exporter)."""
    arr = np.clip(np.round(img.intensities), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
