"""Deterministic synthetic stereo sequences with exact ground-truth poses and
depths.

Scenes are textured infinite planes; textures come from a seeded lattice
value-noise function evaluated analytically at plane coordinates, so renders
with the same seed are bit-identical and the depth channel is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import PinholeIntrinsics, Se3, StereoRig, so3_exp
from .image import IntensityImage, make_image

BACKGROUND_INTENSITY = 0.0
MIN_RAY_DEPTH = 0.1


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1); integer mixing, wrap-safe."""
    seed_mix = np.uint64((seed * 0xD6E8FEB86659FD93) % (1 << 64))
    h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ seed_mix)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def value_noise(u: np.ndarray, v: np.ndarray, seed: int, octaves: int = 3,
                base_scale: float = 1.0, gain: float = 0.5) -> np.ndarray:
    """Multi-octave lattice value noise in [0, 1], C2-smooth.

    `base_scale` is lattice cells per world unit of the first octave; each
    octave doubles the frequency and scales the amplitude by `gain` (gain
    near 1 puts more energy into fine detail, sharpening stereo matching at
    the cost of larger resampling error).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    acc = np.zeros(np.broadcast(u, v).shape)
    amp_total = 0.0
    amp = 1.0
    freq = base_scale
    for o in range(octaves):
        uu = u * freq
        vv = v * freq
        iu = np.floor(uu)
        iv = np.floor(vv)
        fu = _smoothstep(uu - iu)
        fv = _smoothstep(vv - iv)
        s = seed + 7919 * o
        n00 = _hash01(iu, iv, s)
        n10 = _hash01(iu + 1, iv, s)
        n01 = _hash01(iu, iv + 1, s)
        n11 = _hash01(iu + 1, iv + 1, s)
        acc += amp * ((n00 * (1 - fu) + n10 * fu) * (1 - fv)
                      + (n01 * (1 - fu) + n11 * fu) * fv)
        amp_total += amp
        amp *= gain
        freq *= 2.0
    return acc / amp_total


@dataclass(frozen=True)
class TexturedPlane:
    """Plane normal . X + offset = 0 with a value-noise texture.

    `extent` optionally bounds the plane to a rectangle in its own (u, v)
    texture coordinates; None means infinite. `drift` translates the texture
    anchor per frame (world units/frame) while leaving the geometry fixed;
    used to simulate a photometrically moving object with unchanged depth.
    """

    normal: np.ndarray  # (3,) unit, world frame
    offset: float
    tex_seed: int
    tex_scale: float = 0.5  # noise cells per meter
    octaves: int = 3
    gain: float = 0.5
    aniso: tuple[float, float] = (1.0, 1.0)  # frequency multipliers along (u, v)
    intensity_low: float = 40.0
    intensity_high: float = 215.0
    drift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extent: tuple[float, float, float, float] | None = None  # (u_min, u_max, v_min, v_max)

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        object.__setattr__(self, "drift", np.asarray(self.drift, dtype=np.float64).reshape(3))

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Two orthonormal in-plane texture axes, deterministic."""
        n = self.normal
        ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(n, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2

    def plane_coords(self, points: np.ndarray, frame_index: int):
        e1, e2 = self.axes()
        anchor = -self.offset * self.normal + frame_index * self.drift
        rel = points - anchor
        return rel @ e1, rel @ e2

    def contains(self, points: np.ndarray, frame_index: int) -> np.ndarray:
        if self.extent is None:
            return np.ones(len(points), dtype=bool)
        u, v = self.plane_coords(points, frame_index)
        u_min, u_max, v_min, v_max = self.extent
        return (u >= u_min) & (u <= u_max) & (v >= v_min) & (v <= v_max)

    def intensity_at(self, points: np.ndarray, frame_index: int) -> np.ndarray:
        u, v = self.plane_coords(points, frame_index)
        noise = value_noise(u * self.aniso[0], v * self.aniso[1], self.tex_seed,
                            self.octaves, self.tex_scale, self.gain)
        return self.intensity_low + (self.intensity_high - self.intensity_low) * noise


TRAJECTORY_KINDS = ("straight_line", "arc", "pure_rotation", "stationary")


@dataclass(frozen=True)
class Trajectory:
    """Parametric camera path; poses are left-camera-to-world."""

    kind: str
    num_frames: int
    step: float = 1.0  # meters/frame, or radians/frame for pure_rotation
    radius: float = 0.0  # meters, arc only

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "arc" and self.radius <= 0:
            raise ValueError("arc trajectory needs a positive radius")

    def pose(self, frame_index: int) -> Se3:
        k = frame_index
        if self.kind == "stationary":
            return Se3.identity()
        if self.kind == "straight_line":
            return Se3(np.eye(3), np.array([0.0, 0.0, k * self.step]))
        if self.kind == "pure_rotation":
            return Se3(so3_exp(np.array([0.0, k * self.step, 0.0])), np.zeros(3))
        # arc in the x-z plane, yaw following the tangent
        phi = k * self.step / self.radius
        center = np.array([self.radius, 0.0, 0.0])
        pos = center + self.radius * np.array([-math.cos(phi), 0.0, math.sin(phi)])
        rot = so3_exp(np.array([0.0, phi, 0.0]))
        return Se3(rot, pos)


@dataclass(frozen=True)
class SyntheticScene:
    planes: tuple[TexturedPlane, ...]
    trajectory: Trajectory
    intrinsics: PinholeIntrinsics
    rig: StereoRig
    seed: int = 0
    frame_dt: float = 0.1  # seconds
    # optional per-frame brightness corruption, see affine_params()
    brightness_amp_a: float = 0.0
    brightness_amp_b: float = 0.0
    brightness_period: float = 40.0

    @property
    def num_frames(self) -> int:
        return self.trajectory.num_frames

    def pose(self, frame_index: int) -> Se3:
        return self.trajectory.pose(frame_index)

    def timestamps(self) -> np.ndarray:
        return self.frame_dt * np.arange(self.num_frames)

    def affine_params(self, frame_index: int, camera: str) -> tuple[float, float]:
        """Ground-truth brightness corruption (a, b) of one image.

        The rendered image is e^a * clean + b, matching the model in which
        e^-a (I - b) recovers the scene radiance.
        """
        if self.brightness_amp_a == 0.0 and self.brightness_amp_b == 0.0:
            return 0.0, 0.0
        phase = 0.0 if camera == "left" else 0.7
        t = 2.0 * math.pi * frame_index / self.brightness_period + phase
        return self.brightness_amp_a * math.sin(t), self.brightness_amp_b * math.cos(t)


def render(scene: SyntheticScene, frame_index: int, camera: str = "left"
           ) -> tuple[IntensityImage, np.ndarray]:
    """Render one view plus its exact inverse-depth map.

    Per-pixel ray-plane intersection, nearest plane wins; pixels hitting no
    plane get background intensity and inverse depth 0 (invalid marker).
    """
    if not 0 <= frame_index < scene.num_frames:
        raise ValueError(f"frame {frame_index} outside trajectory of {scene.num_frames}")
    if camera not in ("left", "right"):
        raise ValueError(f"camera must be 'left' or 'right', got {camera!r}")
    intr = scene.intrinsics
    pose = scene.pose(frame_index)
    if camera == "right":
        pose = pose @ scene.rig.left_to_right().inverse()

    xs = np.arange(intr.width, dtype=np.float64)
    ys = np.arange(intr.height, dtype=np.float64)
    u, v = np.meshgrid(xs, ys)
    dirs_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                         np.ones_like(u)], axis=-1)
    dirs_world = dirs_cam @ pose.rotation.T
    origin = pose.translation

    depth = np.full((intr.height, intr.width), np.inf)
    intensity = np.full((intr.height, intr.width), BACKGROUND_INTENSITY)
    for plane in scene.planes:
        denom = dirs_world @ plane.normal
        num = -(origin @ plane.normal + plane.offset)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        hit = np.isfinite(t) & (t > MIN_RAY_DEPTH) & (t < depth)
        if not np.any(hit):
            continue
        pts = origin + t[hit, None] * dirs_world[hit]
        inside = plane.contains(pts, frame_index)
        if not np.any(inside):
            continue
        hit[hit] = inside
        pts = pts[inside]
        intensity[hit] = plane.intensity_at(pts, frame_index)
        depth[hit] = t[hit]

    a, b = scene.affine_params(frame_index, camera)
    if a != 0.0 or b != 0.0:
        lit = depth < np.inf
        intensity = np.where(lit, math.exp(a) * intensity + b, intensity)

    inv_depth = np.where(np.isfinite(depth), 1.0 / depth, 0.0)
    return make_image(intensity), inv_depth


def corridor_scene(num_frames: int = 100, step: float = 1.5,
                   kind: str = "straight_line", radius: float = 0.0,
                   width: int = 640, height: int = 480, fx: float = 500.0,
                   baseline: float = 0.5, seed: int = 0,
                   tex_scale: float = 0.3, octaves: int = 4, gain: float = 0.7,
                   half_width: float = 8.0, ground_y: float = 1.7,
                   far_margin: float = 40.0) -> SyntheticScene:
    """Street-canyon style scene: two richly textured side walls, a smoother
    ground plane (grazing angles resample badly) and a far wall."""
    length = num_frames * step + far_margin
    planes = (
        TexturedPlane(normal=(1.0, 0.0, 0.0), offset=half_width, tex_seed=seed + 1,
                      tex_scale=tex_scale, octaves=octaves, gain=gain),
        TexturedPlane(normal=(-1.0, 0.0, 0.0), offset=half_width, tex_seed=seed + 2,
                      tex_scale=tex_scale, octaves=octaves, gain=gain),
        TexturedPlane(normal=(0.0, -1.0, 0.0), offset=ground_y, tex_seed=seed + 3,
                      tex_scale=tex_scale * 2.0, octaves=octaves, gain=1.6,
                      aniso=(0.25, 1.0)),
        # far-wall texture sized for its viewing range (it is seen from
        # `length` down to `far_margin` meters)
        TexturedPlane(normal=(0.0, 0.0, -1.0), offset=length, tex_seed=seed + 4,
                      tex_scale=min(tex_scale * 0.3, 24.0 / length), octaves=octaves,
                      gain=gain),
    )
    traj = Trajectory(kind=kind, num_frames=num_frames, step=step, radius=radius)
    intr = PinholeIntrinsics(fx=fx, fy=fx, cx=width / 2 - 0.5, cy=height / 2 - 0.5,
                             width=width, height=height)
    return SyntheticScene(planes=planes, trajectory=traj, intrinsics=intr,
                          rig=StereoRig(baseline), seed=seed)


class SyntheticManifest:
    """Duck-typed sequence manifest rendering frames on demand; lets the
    pipeline consume a synthetic scene without any image files."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene
        self.intrinsics = scene.intrinsics
        self.rig = scene.rig
        self.timestamps = scene.timestamps()

    @property
    def num_frames(self) -> int:
        return self.scene.num_frames

    def load_frame(self, index: int, camera: str = "left") -> IntensityImage:
        img, _ = render(self.scene, index, camera)
        return img

    def ground_truth_poses(self) -> list[Se3]:
        return [self.scene.pose(i) for i in range(self.num_frames)]


def scene_to_text(scene: SyntheticScene) -> str:
    """Flat key=value serialization for regression fixtures."""
    intr = scene.intrinsics
    lines = [
        f"width={intr.width}",
        f"height={intr.height}",
        f"fx={intr.fx!r}",
        f"fy={intr.fy!r}",
        f"cx={intr.cx!r}",
        f"cy={intr.cy!r}",
        f"baseline={scene.rig.baseline!r}",
        f"seed={scene.seed}",
        f"frame_dt={scene.frame_dt!r}",
        f"trajectory={scene.trajectory.kind}",
        f"num_frames={scene.trajectory.num_frames}",
        f"step={scene.trajectory.step!r}",
        f"radius={scene.trajectory.radius!r}",
        f"brightness_amp_a={scene.brightness_amp_a!r}",
        f"brightness_amp_b={scene.brightness_amp_b!r}",
        f"brightness_period={scene.brightness_period!r}",
        f"num_planes={len(scene.planes)}",
    ]
    for i, pl in enumerate(scene.planes):
        lines.append(f"plane{i}.normal={pl.normal[0]!r},{pl.normal[1]!r},{pl.normal[2]!r}")
        lines.append(f"plane{i}.offset={pl.offset!r}")
        lines.append(f"plane{i}.tex_seed={pl.tex_seed}")
        lines.append(f"plane{i}.tex_scale={pl.tex_scale!r}")
        lines.append(f"plane{i}.octaves={pl.octaves}")
        lines.append(f"plane{i}.gain={pl.gain!r}")
        lines.append(f"plane{i}.aniso={pl.aniso[0]!r},{pl.aniso[1]!r}")
        lines.append(f"plane{i}.intensity_low={pl.intensity_low!r}")
        lines.append(f"plane{i}.intensity_high={pl.intensity_high!r}")
        lines.append(f"plane{i}.drift={pl.drift[0]!r},{pl.drift[1]!r},{pl.drift[2]!r}")
        if pl.extent is not None:
            lines.append(f"plane{i}.extent=" + ",".join(repr(float(x)) for x in pl.extent))
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> SyntheticScene:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"scene file line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()

    def fvec(s: str) -> np.ndarray:
        return np.array([float(x) for x in s.split(",")])

    intr = PinholeIntrinsics(fx=float(kv["fx"]), fy=float(kv["fy"]),
                             cx=float(kv["cx"]), cy=float(kv["cy"]),
                             width=int(kv["width"]), height=int(kv["height"]))
    traj = Trajectory(kind=kv["trajectory"], num_frames=int(kv["num_frames"]),
                      step=float(kv["step"]), radius=float(kv["radius"]))
    planes = []
    for i in range(int(kv["num_planes"])):
        p = f"plane{i}."
        extent = None
        if p + "extent" in kv:
            extent = tuple(float(x) for x in kv[p + "extent"].split(","))
        planes.append(TexturedPlane(
            normal=fvec(kv[p + "normal"]),
            offset=float(kv[p + "offset"]),
            tex_seed=int(kv[p + "tex_seed"]),
            tex_scale=float(kv[p + "tex_scale"]),
            octaves=int(kv[p + "octaves"]),
            gain=float(kv.get(p + "gain", "0.5")),
            aniso=tuple(float(x) for x in kv.get(p + "aniso", "1.0,1.0").split(",")),
            intensity_low=float(kv[p + "intensity_low"]),
            intensity_high=float(kv[p + "intensity_high"]),
            drift=fvec(kv[p + "drift"]),
            extent=extent,
        ))
    return SyntheticScene(planes=tuple(planes), trajectory=traj, intrinsics=intr,
                          rig=StereoRig(float(kv["baseline"])), seed=int(kv["seed"]),
                          frame_dt=float(kv["frame_dt"]),
                          brightness_amp_a=float(kv["brightness_amp_a"]),
                          brightness_amp_b=float(kv["brightness_amp_b"]),
                          brightness_period=float(kv["brightness_period"]))
