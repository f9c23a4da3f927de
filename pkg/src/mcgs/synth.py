"""Procedural multi-camera sequences and ground-truth front-end oracles.

The learned parts of a dense SLAM front-end (optical-flow correspondences,
monocular depth and normal networks) are replaced here by oracles that read
the exact geometry of a ray-traced synthetic scene, optionally corrupted with
controlled noise, scale bias and outliers.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, RotationSpline

from .errors import GenerationError, InvalidArgument
from .geometry import (
    Z_MIN, PinholeIntrinsics, RigCalibration, RigCamera, SE3Pose, pair_transform,
    project_points, rotation_about,
)
from .jdsa import ScaleGrid

log = logging.getLogger(__name__)

OCCLUSION_EPS = 1e-6


# ---------------------------------------------------------------------------
# scene primitives
# ---------------------------------------------------------------------------

@dataclass
class ColorField:
    """Smooth albedo: ``clip(base + sum_k amp_k * sin(freq_k . x + phase_k), 0, 1)``."""

    base: np.ndarray
    freqs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    amps: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    phases: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float).reshape(3)
        self.freqs = np.asarray(self.freqs, dtype=float).reshape(-1, 3)
        self.amps = np.asarray(self.amps, dtype=float).reshape(-1, 3)
        self.phases = np.asarray(self.phases, dtype=float).reshape(-1)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.base, points.shape).copy()
        for f, a, ph in zip(self.freqs, self.amps, self.phases):
            out += np.sin(points @ f + ph)[:, None] * a
        return np.clip(out, 0.0, 1.0)


def _safe_div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(b != 0, a / np.where(b != 0, b, 1.0), np.where(a >= 0, np.inf, -np.inf))


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: ColorField

    def intersect(self, o: np.ndarray, d: np.ndarray):
        oc = o - self.center
        a = np.einsum("ij,ij->i", d, d)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(hit, t, np.inf)
        x = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        n = (x - self.center) / self.radius
        return t, n


@dataclass
class Box:
    """Axis-aligned solid box seen from outside."""

    lo: np.ndarray
    hi: np.ndarray
    color: ColorField

    def intersect(self, o: np.ndarray, d: np.ndarray):
        t1 = _safe_div(self.lo - o, d)
        t2 = _safe_div(self.hi - o, d)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tnear = tmin.max(axis=1)
        tfar = tmax.min(axis=1)
        axis = tmin.argmax(axis=1)
        hit = (tnear <= tfar) & (tnear > 1e-9)
        t = np.where(hit, tnear, np.inf)
        n = np.zeros_like(d)
        rows = np.arange(len(d))
        n[rows, axis] = -np.sign(d[rows, axis])
        return t, n


@dataclass
class Room:
    """Axis-aligned box seen from inside (floor, ceiling and walls)."""

    lo: np.ndarray
    hi: np.ndarray
    colors: list  # one ColorField per face: -x, +x, -y, +y, -z, +z

    def intersect(self, o: np.ndarray, d: np.ndarray):
        inside = np.all((o > self.lo) & (o < self.hi), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            tk = np.where(d > 0, (self.hi - o) / np.where(d != 0, d, 1.0),
                          np.where(d < 0, (self.lo - o) / np.where(d != 0, d, 1.0), np.inf))
        axis = tk.argmin(axis=1)
        rows = np.arange(len(d))
        t = np.where(inside, tk[rows, axis], np.inf)
        n = np.zeros_like(d)
        n[rows, axis] = -np.sign(d[rows, axis])
        return t, n

    def color_at(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        axis = np.abs(normals).argmax(axis=1)
        faces = axis * 2 + (normals[np.arange(len(normals)), axis] < 0)
        out = np.zeros((len(points), 3))
        for f in range(6):
            m = faces == f
            if np.any(m):
                out[m] = self.colors[f](points[m])
        return out


@dataclass
class SyntheticScene:
    surfaces: list
    bounds: tuple[np.ndarray, np.ndarray]
    rng_seed: int = 0
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, -1.0, 0.4]))

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit along ``o + t d``; returns ``(t, world normal, albedo)``.

        ``t`` is ``inf`` where nothing is hit.
        """
        o = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
        d = np.asarray(dirs, dtype=float)
        best_t = np.full(len(d), np.inf)
        best_n = np.zeros_like(d)
        best_s = np.full(len(d), -1)
        for k, s in enumerate(self.surfaces):
            t, n = s.intersect(o, d)
            better = t < best_t
            best_t = np.where(better, t, best_t)
            best_n[better] = n[better]
            best_s[better] = k
        hitpts = o + np.where(np.isfinite(best_t), best_t, 0.0)[:, None] * d
        color = np.zeros_like(d)
        for k, s in enumerate(self.surfaces):
            m = best_s == k
            if not np.any(m):
                continue
            if isinstance(s, Room):
                color[m] = s.color_at(hitpts[m], best_n[m])
            else:
                color[m] = s.color(hitpts[m])
        return best_t, best_n, color

    def shade(self, normals_world: np.ndarray, albedo: np.ndarray) -> np.ndarray:
        l = self.light_dir / np.linalg.norm(self.light_dir)
        lam = np.abs(normals_world @ l)
        return np.clip(albedo * (0.8 + 0.2 * lam)[:, None], 0.0, 1.0)


@dataclass
class SceneConfig:
    seed: int = 0
    bounds_lo: tuple = (-5.0, -2.5, -3.0)
    bounds_hi: tuple = (5.0, 1.5, 14.0)
    n_spheres: int = 3
    n_boxes: int = 2
    texture_freq: float = 0.6
    texture_amp: float = 0.12
    corridor_half_width: float = 1.6

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "SceneConfig":
        d = dict(data)
        for k in ("bounds_lo", "bounds_hi"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _random_field(rng: np.random.Generator, freq: float, amp: float) -> ColorField:
    base = rng.uniform(0.25, 0.75, size=3)
    freqs = rng.normal(size=(2, 3))
    freqs *= freq / np.linalg.norm(freqs, axis=1, keepdims=True)
    amps = rng.uniform(0.3, 1.0, size=(2, 3)) * amp
    phases = rng.uniform(0, 2 * np.pi, size=2)
    return ColorField(base, freqs, amps, phases)


def build_scene(config: SceneConfig) -> SyntheticScene:
    """Seeded room with textured walls and a few objects flanking the corridor."""
    rng = np.random.default_rng(config.seed)
    lo = np.array(config.bounds_lo, dtype=float)
    hi = np.array(config.bounds_hi, dtype=float)
    room = Room(lo, hi, [_random_field(rng, config.texture_freq, config.texture_amp) for _ in range(6)])
    surfaces: list = [room]
    floor_y = hi[1]
    for _ in range(config.n_spheres):
        r = rng.uniform(0.4, 0.8)
        side = rng.choice([-1.0, 1.0])
        x = side * rng.uniform(config.corridor_half_width + r, hi[0] - r - 0.2)
        z = rng.uniform(lo[2] + 4.0, hi[2] - 1.0)
        y = floor_y - r - rng.uniform(0.0, 0.6)
        surfaces.append(Sphere(np.array([x, y, z]), r,
                               _random_field(rng, config.texture_freq, config.texture_amp)))
    for _ in range(config.n_boxes):
        half = rng.uniform(0.3, 0.7, size=3)
        side = rng.choice([-1.0, 1.0])
        x = side * rng.uniform(config.corridor_half_width + half[0], hi[0] - half[0] - 0.2)
        z = rng.uniform(lo[2] + 4.0, hi[2] - 1.0)
        c = np.array([x, floor_y - half[1], z])
        surfaces.append(Box(c - half, c + half,
                            _random_field(rng, config.texture_freq, config.texture_amp)))
    return SyntheticScene(surfaces, (lo, hi), config.seed)


# ---------------------------------------------------------------------------
# rig and trajectory
# ---------------------------------------------------------------------------

def make_rig(n_cameras: int = 3, width: int = 64, height: int = 48, fx: float = 40.0,
             yaw_deg: float = 50.0, baseline: float = 0.25) -> RigCalibration:
    """Forward camera plus side cameras yawed by ``+-yaw_deg`` about the body y axis."""
    intr = PinholeIntrinsics(fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    cams = [RigCamera("front", intr, SE3Pose(t=[0.0, 0.0, 0.1]))]
    names = [("right", 1.0), ("left", -1.0), ("rear", 0.0)]
    for k in range(1, n_cameras):
        name, side = names[k - 1]
        yaw = np.deg2rad(yaw_deg) * side if side else np.pi
        q = rotation_about([0, 1, 0], yaw)
        cams.append(RigCamera(name, intr, SE3Pose(q, [side * baseline, 0.0, 0.0])))
    return RigCalibration(tuple(cams))


@dataclass
class TrajectoryConfig:
    kind: str = "drive"  # drive | static | custom
    duration: float = 2.0
    length: float = 4.0
    sway: float = 0.3
    yaw_amp_deg: float = 6.0
    start: tuple = (0.0, 0.0, 0.0)
    controls: list | None = None  # custom: [[t, tx, ty, tz, qw, qx, qy, qz], ...]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "TrajectoryConfig":
        d = dict(data)
        if "start" in d:
            d["start"] = tuple(d["start"])
        return cls(**d)


class Trajectory:
    """Smooth body trajectory: cubic spline on translation, rotation spline on attitude."""

    def __init__(self, times: Sequence[float], poses: Sequence[SE3Pose]):
        self.times = np.asarray(times, dtype=float)
        if len(self.times) < 2:
            raise InvalidArgument("trajectory needs at least two control poses")
        self.poses = list(poses)
        self._pos = CubicSpline(self.times, np.array([p.t for p in self.poses]), bc_type="natural")
        quats = np.array([p.q for p in self.poses])
        self._rot = RotationSpline(self.times, Rotation.from_quat(quats[:, [1, 2, 3, 0]]))

    def pose_at(self, t: float) -> SE3Pose:
        t = float(np.clip(t, self.times[0], self.times[-1]))
        q = self._rot(t).as_quat()
        return SE3Pose([q[3], q[0], q[1], q[2]], self._pos(t))

    @classmethod
    def from_config(cls, cfg: TrajectoryConfig) -> "Trajectory":
        start = np.array(cfg.start, dtype=float)
        if cfg.kind == "static":
            p = SE3Pose(t=start)
            return cls([0.0, cfg.duration], [p, p])
        if cfg.kind == "custom":
            if not cfg.controls:
                raise InvalidArgument("custom trajectory needs control poses")
            rows = np.asarray(cfg.controls, dtype=float)
            return cls(rows[:, 0], [SE3Pose(r[4:8], r[1:4]) for r in rows])
        if cfg.kind == "drive":
            n = 6
            s = np.linspace(0.0, 1.0, n)
            times = s * cfg.duration
            poses = []
            for si in s:
                x = cfg.sway * np.sin(2 * np.pi * si)
                yaw = np.deg2rad(cfg.yaw_amp_deg) * np.sin(2 * np.pi * si + 0.5)
                poses.append(SE3Pose(rotation_about([0, 1, 0], yaw), start + [x, 0.0, cfg.length * si]))
            return cls(times, poses)
        raise InvalidArgument(f"unknown trajectory kind {cfg.kind!r}")


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

@dataclass
class CameraFrame:
    image: np.ndarray   # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W) z-depth, inf where nothing was hit
    normals: np.ndarray  # (H, W, 3) camera-frame unit normals facing the camera


@dataclass
class Frame:
    index: int
    timestamp: float
    pose: SE3Pose   # ground-truth body pose
    views: dict     # camera id -> CameraFrame


def render_view(scene: SyntheticScene, rig: RigCalibration, body_pose: SE3Pose, cam_id: str) -> CameraFrame:
    intr = rig.intrinsics(cam_id)
    T_wc = rig.camera_pose(body_pose, cam_id)
    rays_c = intr.rays(intr.pixel_grid()).reshape(-1, 3)
    dirs = rays_c @ T_wc.R.T
    t, n_w, albedo = scene.raycast(T_wc.t[None, :], dirs)
    color = scene.shade(n_w, albedo)
    n_c = n_w @ T_wc.R
    flip = np.einsum("ij,ij->i", n_c, rays_c) > 0
    n_c[flip] *= -1
    H, W = intr.shape
    return CameraFrame(color.reshape(H, W, 3), t.reshape(H, W), n_c.reshape(H, W, 3))


def _inside(scene: SyntheticScene, p: np.ndarray, margin: float = 0.05) -> bool:
    lo, hi = scene.bounds
    return bool(np.all(p > lo + margin) and np.all(p < hi - margin))


def iter_sequence(scene: SyntheticScene, rig: RigCalibration, trajectory: Trajectory,
                  n_frames: int) -> Iterator[Frame]:
    """Yield ray-traced frames sampled uniformly in time along ``trajectory``."""
    if n_frames < 2:
        raise InvalidArgument("a sequence needs at least two frames")
    t0, t1 = trajectory.times[0], trajectory.times[-1]
    for i in range(n_frames):
        ts = t0 + (t1 - t0) * i / (n_frames - 1)
        pose = trajectory.pose_at(ts)
        for cam in rig.ids:
            c = rig.camera_pose(pose, cam).t
            if not _inside(scene, c):
                raise GenerationError(f"frame {i}: camera {cam!r} at {np.round(c, 3).tolist()} "
                                      f"is outside the scene bounds", frame=i)
        views = {cam: render_view(scene, rig, pose, cam) for cam in rig.ids}
        yield Frame(i, float(ts), pose, views)


def generate_sequence(scene: SyntheticScene, rig: RigCalibration, trajectory: Trajectory,
                      n_frames: int) -> list[Frame]:
    return list(iter_sequence(scene, rig, trajectory, n_frames))


# ---------------------------------------------------------------------------
# depth priors
# ---------------------------------------------------------------------------

@dataclass
class BiasField:
    """Low-order polynomial multiplier over normalized image coordinates in [-1, 1].

    ``b(x, y) = c0 + c1 x + c2 y + c3 x y + c4 x^2 + c5 y^2``
    """

    coeffs: tuple = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def constant(cls, value: float) -> "BiasField":
        return cls((float(value), 0.0, 0.0, 0.0, 0.0, 0.0))

    def raster(self, width: int, height: int) -> np.ndarray:
        v, u = np.mgrid[0:height, 0:width].astype(float)
        x = (u + 0.5) / width * 2 - 1
        y = (v + 0.5) / height * 2 - 1
        c = list(self.coeffs) + [0.0] * (6 - len(self.coeffs))
        return c[0] + c[1] * x + c[2] * y + c[3] * x * y + c[4] * x * x + c[5] * y * y


def corrupt_depth_prior(exact_depth: np.ndarray, noise_sigma: float = 0.0,
                        scale_bias_field: np.ndarray | float = 1.0,
                        rng: np.random.Generator | None = None,
                        min_depth: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Depth prior ``d * bias * (1 + N(0, sigma))``, clamped positive.

    Returns ``(prior, bias_raster)``; the bias raster is kept as ground truth.
    """
    if noise_sigma < 0:
        raise InvalidArgument("noise_sigma must be non-negative")
    bias = np.broadcast_to(np.asarray(scale_bias_field, dtype=float), exact_depth.shape).copy()
    if np.any(~(bias > 0)):
        raise InvalidArgument("scale bias field must be positive everywhere")
    prior = exact_depth * bias
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        prior = prior * (1.0 + rng.normal(0.0, noise_sigma, size=exact_depth.shape))
    finite = np.isfinite(prior)
    prior = np.where(finite, np.maximum(prior, min_depth), prior)
    return prior, bias


# ---------------------------------------------------------------------------
# keyframes
# ---------------------------------------------------------------------------

def sample_grid(intr: PinholeIntrinsics, stride: int) -> np.ndarray:
    """Regular sample pixels ``(N, 2)``, row-major, at ``k * stride + stride // 2``."""
    us = np.arange(stride // 2, intr.width, stride)
    vs = np.arange(stride // 2, intr.height, stride)
    v, u = np.meshgrid(vs, us, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(float)


def grid_index(intr: PinholeIntrinsics, stride: int, pixels: np.ndarray) -> np.ndarray:
    nx = len(range(stride // 2, intr.width, stride))
    px = np.asarray(pixels).astype(int)
    return (px[:, 1] // stride) * nx + px[:, 0] // stride


@dataclass
class KeyframeView:
    image: np.ndarray
    depth_prior: np.ndarray
    normal_prior: np.ndarray
    inv_depth: np.ndarray
    valid: np.ndarray
    scale_grid: ScaleGrid

    def copy(self) -> "KeyframeView":
        return KeyframeView(self.image.copy(), self.depth_prior.copy(), self.normal_prior.copy(),
                            self.inv_depth.copy(), self.valid.copy(), self.scale_grid.copy())

    def prior_inv_depth(self) -> np.ndarray:
        """Inverse depth of the bias-corrected prior ``d_prior / B``."""
        scale = self.scale_grid.raster()
        with np.errstate(divide="ignore"):
            out = scale / self.depth_prior
        return np.where(self.valid, out, 0.0)

    def refined_depth(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.valid, 1.0 / np.where(self.valid, self.inv_depth, 1.0), np.inf)


@dataclass
class Keyframe:
    index: int
    timestamp: float
    pose: SE3Pose
    views: dict
    frame_index: int = -1
    frame: Frame | None = None  # ground truth, oracle use only

    @property
    def gt_pose(self) -> SE3Pose:
        if self.frame is None:
            raise InvalidArgument(f"keyframe {self.index} carries no ground truth")
        return self.frame.pose

    def copy(self) -> "Keyframe":
        return Keyframe(self.index, self.timestamp, self.pose, {c: v.copy() for c, v in self.views.items()},
                        self.frame_index, self.frame)


def make_keyframe(index: int, frame: Frame, rig: RigCalibration, pose: SE3Pose | None = None,
                  noise_sigma: float = 0.0, bias: dict | None = None, grid_shape=(8, 8),
                  rng: np.random.Generator | None = None, max_depth: float = 1e3) -> Keyframe:
    """Promote a frame: attach priors, initialize inverse depth from the prior.

    ``bias`` maps camera id to a :class:`BiasField` or a constant multiplier.
    """
    rng = rng if rng is not None else np.random.default_rng(index)
    views = {}
    for cam in rig.ids:
        intr = rig.intrinsics(cam)
        fv = frame.views[cam]
        b = (bias or {}).get(cam, 1.0)
        b_raster = b.raster(intr.width, intr.height) if isinstance(b, BiasField) else float(b)
        prior, _ = corrupt_depth_prior(fv.depth, noise_sigma, b_raster, rng)
        valid = np.isfinite(prior) & (prior < max_depth)
        grid = ScaleGrid.constant(grid_shape[0], grid_shape[1], intr.width, intr.height)
        with np.errstate(divide="ignore"):
            inv = np.where(valid, 1.0 / np.where(valid, prior, 1.0), 0.0)
        views[cam] = KeyframeView(fv.image.copy(), prior, fv.normals.copy(), inv, valid, grid)
    return Keyframe(index, frame.timestamp, pose if pose is not None else frame.pose, views,
                    frame.index, frame)


def keyframe_select(current: Frame, reference: Keyframe, threshold_px: float,
                    rig: RigCalibration, stride: int = 8) -> tuple[bool, float]:
    """Mean true reprojected displacement from the reference keyframe to ``current``.

    Returns ``(promote, mean_flow)``; promotion when the flow exceeds the threshold.
    """
    ref = reference.frame
    if ref is None:
        raise InvalidArgument("reference keyframe has no ground-truth frame")
    flows = []
    for cam in rig.ids:
        intr = rig.intrinsics(cam)
        px = sample_grid(intr, stride)
        depth = ref.views[cam].depth[px[:, 1].astype(int), px[:, 0].astype(int)]
        ok = np.isfinite(depth) & (depth > 0)
        if not np.any(ok):
            continue
        X = intr.rays(px[ok]) * depth[ok, None]
        T = pair_transform("temporal", ref.pose, current.pose, rig, cam, cam)
        proj, valid = project_points(intr, T.apply(X))
        if np.any(valid):
            flows.append(np.linalg.norm(proj[valid] - px[ok][valid], axis=1))
    if not flows:
        return True, float("inf")
    mean_flow = float(np.concatenate(flows).mean())
    return mean_flow > threshold_px, mean_flow


# ---------------------------------------------------------------------------
# covisibility graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Edge:
    i: int
    cam_i: str
    j: int
    cam_j: str
    kind: str  # temporal | cross_view

    def key(self) -> tuple:
        return (self.i, self.cam_i, self.j, self.cam_j, self.kind)


@dataclass
class CovisibilityGraph:
    nodes: list
    edges: list

    def __post_init__(self):
        for e in self.edges:
            if e.i == e.j and e.cam_i == e.cam_j:
                raise InvalidArgument(f"self-edge {e}")
            if e.kind == "temporal" and (e.cam_i != e.cam_j or e.i == e.j):
                raise InvalidArgument(f"malformed temporal edge {e}")
            if e.kind == "cross_view" and (e.cam_i == e.cam_j or e.i != e.j):
                raise InvalidArgument(f"malformed cross-view edge {e}")


def overlap_fraction(src: CameraFrame, intr_s: PinholeIntrinsics, intr_t: PinholeIntrinsics,
                     T_ts: SE3Pose, stride: int = 8) -> float:
    px = sample_grid(intr_s, stride)
    depth = src.depth[px[:, 1].astype(int), px[:, 0].astype(int)]
    ok = np.isfinite(depth) & (depth > 0)
    if not np.any(ok):
        return 0.0
    X = intr_s.rays(px[ok]) * depth[ok, None]
    _, valid = project_points(intr_t, T_ts.apply(X))
    return float(valid.sum()) / len(px)


def build_graph(keyframes: Sequence[Keyframe], window: int, rig: RigCalibration,
                overlap_min: float = 0.05, stride: int = 8,
                cross_pairs: dict | None = None) -> CovisibilityGraph:
    """Temporal edges within ``window`` keyframes per camera, plus overlapping cross-view pairs.

    Edges are directed; each covisible pair appears in both directions.
    ``cross_pairs`` caches the overlap decision per ordered camera pair (the
    extrinsics are fixed); when absent the overlap is measured on every keyframe.
    """
    if window < 1:
        raise InvalidArgument("window must be >= 1")
    kfs = sorted(keyframes, key=lambda k: k.index)
    edges = []
    for a in range(len(kfs)):
        for b in range(len(kfs)):
            if a == b or abs(kfs[a].index - kfs[b].index) > window:
                continue
            for cam in rig.ids:
                edges.append(Edge(kfs[a].index, cam, kfs[b].index, cam, "temporal"))
    for kf in kfs:
        for ci in rig.ids:
            for cj in rig.ids:
                if ci == cj:
                    continue
                if cross_pairs is not None and (ci, cj) in cross_pairs:
                    ok = cross_pairs[(ci, cj)]
                else:
                    T = pair_transform("cross_view", kf.pose, kf.pose, rig, ci, cj)
                    src = kf.frame.views[ci] if kf.frame is not None else None
                    if src is None:
                        raise InvalidArgument("overlap test needs ground-truth depth")
                    frac = overlap_fraction(src, rig.intrinsics(ci), rig.intrinsics(cj), T, stride)
                    ok = frac >= overlap_min
                if ok:
                    edges.append(Edge(kf.index, ci, kf.index, cj, "cross_view"))
    return CovisibilityGraph([k.index for k in kfs], edges)


# ---------------------------------------------------------------------------
# correspondences
# ---------------------------------------------------------------------------

@dataclass
class CorrespondenceSet:
    edge: Edge
    src_index: np.ndarray  # (N,) sample-grid index of each source pixel
    pixels: np.ndarray     # (N, 2)
    targets: np.ndarray    # (N, 2)
    weights: np.ndarray    # (N, 2)

    def __len__(self) -> int:
        return len(self.src_index)

    def subset(self, mask: np.ndarray) -> "CorrespondenceSet":
        return CorrespondenceSet(self.edge, self.src_index[mask], self.pixels[mask],
                                 self.targets[mask], self.weights[mask])


@dataclass(frozen=True)
class NoisyMode:
    sigma: float = 1.0
    outlier_rate: float = 0.0
    outlier_weight: float = 0.01


def sample_correspondences(edge: Edge, keyframes: dict, rig: RigCalibration, scene: SyntheticScene,
                           mode: str | NoisyMode = "exact", stride: int = 4,
                           rng: np.random.Generator | None = None) -> CorrespondenceSet:
    """Oracle correspondences for ``edge`` on the stride grid of the source view.

    Targets are the ground-truth reprojections of source pixels, kept only
    when visible (in front, in bounds, not occluded) in the target view.
    """
    ki, kj = keyframes[edge.i], keyframes[edge.j]
    fi, fj = ki.frame, kj.frame
    intr_i, intr_j = rig.intrinsics(edge.cam_i), rig.intrinsics(edge.cam_j)
    px = sample_grid(intr_i, stride)
    idx = np.arange(len(px))
    depth = fi.views[edge.cam_i].depth[px[:, 1].astype(int), px[:, 0].astype(int)]
    ok = np.isfinite(depth) & (depth > 0)
    px, idx, depth = px[ok], idx[ok], depth[ok]
    T = pair_transform(edge.kind, fi.pose, fj.pose, rig, edge.cam_i, edge.cam_j)
    Y = T.apply(intr_i.rays(px) * depth[:, None])
    tgt, valid = project_points(intr_j, Y)
    if np.any(valid):
        # occlusion: the target ray must hit the same surface point
        T_wc = rig.camera_pose(fj.pose, edge.cam_j)
        rays = intr_j.rays(tgt[valid]) @ T_wc.R.T
        t_hit, _, _ = scene.raycast(T_wc.t[None, :], rays)
        vis = np.abs(t_hit - Y[valid, 2]) <= OCCLUSION_EPS
        valid[np.flatnonzero(valid)[~vis]] = False
    cs = CorrespondenceSet(edge, idx[valid], px[valid], tgt[valid], np.ones((int(valid.sum()), 2)))
    if mode == "exact" or len(cs) == 0:
        return cs
    if not isinstance(mode, NoisyMode):
        raise InvalidArgument(f"unknown correspondence mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(cs)
    targets = cs.targets + rng.normal(0.0, mode.sigma, size=(n, 2))
    weights = np.ones((n, 2))
    if mode.outlier_rate > 0:
        out = rng.random(n) < mode.outlier_rate
        k = int(out.sum())
        targets[out] = np.stack([rng.uniform(-0.5, intr_j.width - 0.5, k),
                                 rng.uniform(-0.5, intr_j.height - 0.5, k)], axis=1)
        weights[out] = mode.outlier_weight
    return CorrespondenceSet(edge, cs.src_index, cs.pixels, targets, weights)


# ---------------------------------------------------------------------------
# shared keyframe buffer
# ---------------------------------------------------------------------------

class KeyframeBuffer:
    """Single-writer / multi-reader store; readers get deep copies of whole keyframes."""

    def __init__(self):
        self._lock = threading.Lock()
        self._items: dict = {}

    def put(self, kf: Keyframe) -> None:
        snap = kf.copy()
        with self._lock:
            self._items[kf.index] = snap

    def update_pose(self, index: int, pose: SE3Pose) -> None:
        with self._lock:
            self._items[index].pose = pose

    def get(self, index: int) -> Keyframe:
        with self._lock:
            return self._items[index].copy()

    def indices(self) -> list:
        with self._lock:
            return sorted(self._items)

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


# ---------------------------------------------------------------------------
# raster files
# ---------------------------------------------------------------------------

RASTER_MAGIC = b"MCGS"


def write_raster(path: str | Path, data: np.ndarray) -> None:
    """Little-endian float32 raster with a 16-byte header ``MCGS, u32 w, u32 h, u32 c``."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    Path(path).write_bytes(RASTER_MAGIC + struct.pack("<III", w, h, c) + arr.astype("<f4").tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != RASTER_MAGIC:
        raise InvalidArgument(f"{path}: not an MCGS raster")
    w, h, c = struct.unpack("<III", raw[4:16])
    arr = np.frombuffer(raw[16:], dtype="<f4").reshape(h, w, c).astype(float)
    return arr[:, :, 0] if c == 1 else arr


def write_png(path: str | Path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    Path(path).write_bytes(buf.getvalue())


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0
