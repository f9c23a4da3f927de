"""Rigid and similarity transforms, pinhole cameras and rig calibration.

Conventions used throughout the package:

* Twists are ordered ``(v, omega)``: translational part first, rotational
  part second.
* Quaternions are stored ``(w, x, y, z)`` and kept at unit norm.
* Body poses map body coordinates to world coordinates.
* A camera extrinsic ``T_CB`` maps camera coordinates into the body frame.
* Pixel ``(u, v)`` addresses column ``u`` and row ``v``; integer values are
  pixel centres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument

Z_MIN = 1e-4


# ---------------------------------------------------------------------------
# rotation helpers (vectorized over a leading axis where noted)
# ---------------------------------------------------------------------------

def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, or of a stack of them."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    # leave already-unit quaternions bitwise untouched so normalization is idempotent
    q = np.where(np.abs(n - 1.0) <= 4e-16, q, q / n)
    # canonical hemisphere keeps serialized output stable
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method on a single 3x3 rotation."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def so3_exp_quat(w: np.ndarray) -> np.ndarray:
    """Axis-angle vector(s) to unit quaternion(s)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x with its Taylor expansion near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * w], axis=-1)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    qv = q[..., 1:]
    s = np.linalg.norm(qv, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    k = np.where(small, 2.0 / np.where(small, q[..., :1], 1.0), theta / np.where(small, 1.0, s))
    return k * qv


def rotation_about(axis: Sequence[float], angle: float) -> np.ndarray:
    """Unit quaternion for ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    return so3_exp_quat(a * angle)


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform ``x -> R x + t`` with ``R`` held as a unit quaternion."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise InvalidArgument("pose contains non-finite values")
        q = quat_normalize(q)
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "SE3Pose":
        return cls(rotmat_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "SE3Pose":
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return SE3Pose(qi, -(quat_to_rotmat(qi) @ self.t))

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        return SE3Pose(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.t

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for ``(v, omega)`` twists: ``T exp(x) T^-1 = exp(Ad x)``."""
        R = self.R
        A = np.zeros((6, 6))
        A[:3, :3] = R
        A[:3, 3:] = hat(self.t) @ R
        A[3:, 3:] = R
        return A

    def allclose(self, other: "SE3Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol, rtol=0.0))

    def __repr__(self) -> str:
        return f"SE3Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def _se3_V(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-6:
        a = 0.5 - theta ** 2 / 24.0
        b = 1.0 / 6.0 - theta ** 2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta ** 2
        b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) + a * W + b * (W @ W)


def se3_exp(xi: Sequence[float]) -> SE3Pose:
    """Exponential map of a ``(v, omega)`` twist (closed-form Rodrigues)."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (6,):
        raise InvalidArgument(f"twist must have 6 entries, got {xi.shape}")
    if not np.all(np.isfinite(xi)):
        raise InvalidArgument("twist contains non-finite values")
    v, w = xi[:3], xi[3:]
    return SE3Pose(so3_exp_quat(w), _se3_V(w) @ v)


def se3_log(pose: SE3Pose) -> np.ndarray:
    """Logarithm of a pose, computed from the quaternion and the closed-form V^-1."""
    w = so3_log_quat(pose.q)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-6:
        c = 1.0 / 12.0 + theta ** 2 / 720.0
    else:
        half = 0.5 * theta
        c = (1.0 - half * np.cos(half) / np.sin(half)) / theta ** 2
    V_inv = np.eye(3) - 0.5 * W + c * (W @ W)
    return np.concatenate([V_inv @ pose.t, w])


def retract(pose: SE3Pose, dxi: np.ndarray) -> SE3Pose:
    """Left retraction ``exp(dxi) * pose``."""
    return se3_exp(dxi) @ pose


# ---------------------------------------------------------------------------
# Sim(3)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """Similarity ``x -> s R x + t``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgument(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) @ self.R.T) + self.t

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return ((np.asarray(points, dtype=float) - self.t) @ self.R) / self.scale

    def apply_pose(self, pose: SE3Pose) -> SE3Pose:
        """Map a pose through the similarity (rotation composed, centre scaled)."""
        return SE3Pose(quat_mul(self.q, pose.q), self.apply(pose.t))


def _positions(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return np.asarray(poses, dtype=float).reshape(-1, 3)
    return np.array([p.t for p in poses], dtype=float).reshape(-1, 3)


def sim3_align(estimate, reference) -> Sim3Transform:
    """Closed-form least-squares similarity mapping ``estimate`` onto ``reference``.

    Accepts pose lists or ``(N, 3)`` position arrays. Minimizes
    ``sum ||s R p_i + t - q_i||^2`` (Umeyama 1991).
    """
    P = _positions(estimate)
    Q = _positions(reference)
    if P.shape != Q.shape:
        raise InvalidArgument(f"trajectory length mismatch: {len(P)} vs {len(Q)}")
    if len(P) < 3:
        raise InvalidArgument("Sim3 alignment needs at least 3 poses")
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    sv_p = np.linalg.svd(Pc, compute_uv=False)
    if sv_p[0] <= 1e-12 or sv_p[1] <= 1e-9 * max(sv_p[0], 1.0):
        raise InvalidArgument("degenerate trajectory: positions are collinear or coincident")
    n = len(P)
    cov = Qc.T @ Pc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_p = (Pc ** 2).sum() / n
    s = float(np.trace(np.diag(D) @ S) / var_p)
    t = mq - s * R @ mp
    return Sim3Transform(rotmat_to_quat(R), t, s)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def in_bounds(self, pixels: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Inside the image rectangle ``[-0.5, W - 0.5] x [-0.5, H - 0.5]`` grown by ``margin``."""
        px = np.asarray(pixels, dtype=float)
        u, v = px[..., 0], px[..., 1]
        lo = -0.5 - margin
        return (u >= lo) & (u <= self.width - 0.5 + margin) & (v >= lo) & (v <= self.height - 0.5 + margin)

    def rays(self, pixels: np.ndarray) -> np.ndarray:
        """Camera-frame ray directions with unit z component."""
        px = np.asarray(pixels, dtype=float)
        out = np.ones(px.shape[:-1] + (3,))
        out[..., 0] = (px[..., 0] - self.cx) / self.fx
        out[..., 1] = (px[..., 1] - self.cy) / self.fy
        return out

    def pixel_grid(self) -> np.ndarray:
        """``(H, W, 2)`` array of integer pixel centres ``(u, v)``."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return np.stack([u, v], axis=-1).astype(float)


def project_points(intr: PinholeIntrinsics, points: np.ndarray, z_min: float = Z_MIN,
                   margin: float = 0.0):
    """Vectorized pinhole projection; returns ``(pixels, valid)``."""
    pts = np.asarray(points, dtype=float)
    z = pts[..., 2]
    zs = np.where(np.abs(z) > 0, z, 1.0)
    px = np.stack([intr.fx * pts[..., 0] / zs + intr.cx, intr.fy * pts[..., 1] / zs + intr.cy], axis=-1)
    valid = (z > z_min) & intr.in_bounds(px, margin)
    return px, valid


def project(intr: PinholeIntrinsics, point_cam: Sequence[float], z_min: float = Z_MIN):
    px, valid = project_points(intr, np.asarray(point_cam, dtype=float).reshape(3), z_min)
    return px, bool(valid)


def backproject_points(intr: PinholeIntrinsics, pixels: np.ndarray, inv_depth: np.ndarray) -> np.ndarray:
    inv_depth = np.asarray(inv_depth, dtype=float)
    if np.any(~(inv_depth > 0)):
        raise InvalidArgument("inverse depth must be positive")
    return intr.rays(pixels) / inv_depth[..., None]


def backproject(intr: PinholeIntrinsics, pixel: Sequence[float], inv_depth: float) -> np.ndarray:
    if not (inv_depth > 0):
        raise InvalidArgument(f"inverse depth must be positive, got {inv_depth}")
    return backproject_points(intr, np.asarray(pixel, dtype=float).reshape(2), np.float64(inv_depth))


# ---------------------------------------------------------------------------
# rig
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RigCamera:
    id: str
    intrinsics: PinholeIntrinsics
    T_CB: SE3Pose  # camera -> body


@dataclass(frozen=True, eq=False)
class RigCalibration:
    cameras: tuple[RigCamera, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise InvalidArgument("rig needs at least one camera")
        ids = [c.id for c in cams]
        if len(set(ids)) != len(ids):
            raise InvalidArgument(f"duplicate camera ids in rig: {ids}")
        object.__setattr__(self, "cameras", cams)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cameras]

    def camera(self, cam_id: str) -> RigCamera:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise InvalidArgument(f"unknown camera id {cam_id!r}")

    def intrinsics(self, cam_id: str) -> PinholeIntrinsics:
        return self.camera(cam_id).intrinsics

    def extrinsic(self, cam_id: str) -> SE3Pose:
        return self.camera(cam_id).T_CB

    def camera_pose(self, body_pose: SE3Pose, cam_id: str) -> SE3Pose:
        """Camera-to-world pose of ``cam_id`` for a body-to-world pose."""
        return body_pose @ self.extrinsic(cam_id)

    def world_to_camera(self, body_pose: SE3Pose, cam_id: str) -> SE3Pose:
        return self.camera_pose(body_pose, cam_id).inverse()

    def to_json(self) -> dict:
        return {"cameras": [
            {"id": c.id, "fx": c.intrinsics.fx, "fy": c.intrinsics.fy,
             "cx": c.intrinsics.cx, "cy": c.intrinsics.cy,
             "width": c.intrinsics.width, "height": c.intrinsics.height,
             "q_CB": [float(x) for x in c.T_CB.q], "t_CB": [float(x) for x in c.T_CB.t]}
            for c in self.cameras]}

    @classmethod
    def from_json(cls, data: dict) -> "RigCalibration":
        cams = []
        for c in data["cameras"]:
            intr = PinholeIntrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                                     int(c["width"]), int(c["height"]))
            cams.append(RigCamera(str(c["id"]), intr, SE3Pose(c["q_CB"], c["t_CB"])))
        return cls(tuple(cams))


def pair_transform(kind: str, Ti: SE3Pose, Tj: SE3Pose, rig: RigCalibration,
                   cam_i: str, cam_j: str) -> SE3Pose:
    """Transform taking points from camera ``cam_i`` at pose ``Ti`` to ``cam_j`` at ``Tj``.

    ``temporal``: ``T_CB^-1 Tj^-1 Ti T_CB`` for a single camera.
    ``cross_view``: ``T_CjB^-1 T_CiB``, independent of the body poses.
    """
    Ei = rig.extrinsic(cam_i)
    Ej = rig.extrinsic(cam_j)
    if kind == "temporal":
        if cam_i != cam_j:
            raise InvalidArgument("temporal pairs must use a single camera")
        return Ej.inverse() @ Tj.inverse() @ Ti @ Ei
    if kind == "cross_view":
        return Ej.inverse() @ Ei
    raise InvalidArgument(f"unknown pair kind {kind!r}")


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_rig(path: str | Path, rig: RigCalibration) -> None:
    Path(path).write_text(json.dumps(rig.to_json(), indent=2) + "\n")


def load_rig(path: str | Path) -> RigCalibration:
    return RigCalibration.from_json(json.loads(Path(path).read_text()))


def save_trajectory(path: str | Path, stamps: Iterable[float], poses: Iterable[SE3Pose]) -> None:
    """Write ``timestamp tx ty tz qw qx qy qz`` lines with round-trip precision."""
    lines = []
    for ts, p in zip(stamps, poses):
        vals = [float(ts), *map(float, p.t), *map(float, p.q)]
        lines.append(" ".join(repr(v) for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_trajectory(path: str | Path) -> tuple[np.ndarray, list[SE3Pose]]:
    stamps, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 8:
            raise InvalidArgument(f"trajectory line needs 8 values: {line!r}")
        stamps.append(vals[0])
        poses.append(SE3Pose(vals[4:8], vals[1:4]))
    return np.array(stamps), poses
