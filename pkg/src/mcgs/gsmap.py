"""Persistent Gaussian map with stable ids and keyframe anchoring.

The map is a structure of arrays. Covariances are kept factored as a unit
quaternion and three semi-axis lengths, so every rigid or scaling transport
leaves them symmetric positive definite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import InvalidArgument
from .geometry import RigCalibration, SE3Pose, quat_mul, quat_normalize, quat_to_rotmat

log = logging.getLogger(__name__)

OPACITY_INIT = 0.5
FALLBACK_RADIUS = 0.05
ALPHA_MIN = 0.02
COVERAGE_MIN = 0.5
OPACITY_EPS = 1e-6
SCALE_FLOOR = 1e-6


@dataclass
class Gaussian:
    mean: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: float
    color: np.ndarray
    anchor: int = -1
    id: int = -1

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.quat = quat_normalize(np.asarray(self.quat, dtype=float).reshape(4))
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if np.any(~(self.scale > 0)):
            raise InvalidArgument("Gaussian scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise InvalidArgument("Gaussian opacity must lie in (0, 1)")

    @property
    def covariance(self) -> np.ndarray:
        R = quat_to_rotmat(self.quat)
        return R @ np.diag(self.scale ** 2) @ R.T


@dataclass
class GaussianBatch:
    """Unregistered Gaussians (no ids yet), as produced by initialization."""

    mean: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    anchor: np.ndarray

    def __len__(self) -> int:
        return len(self.mean)

    @classmethod
    def empty(cls) -> "GaussianBatch":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0, dtype=np.int64))


class GaussianMap:
    """Growable set of Gaussians; ids increase monotonically and are never reused."""

    FIELDS = ("ids", "mean", "scale", "quat", "opacity", "color", "anchor")

    def __init__(self):
        self.ids = np.zeros(0, dtype=np.int64)
        self.mean = np.zeros((0, 3))
        self.scale = np.zeros((0, 3))
        self.quat = np.zeros((0, 4))
        self.opacity = np.zeros(0)
        self.color = np.zeros((0, 3))
        self.anchor = np.zeros(0, dtype=np.int64)
        self.next_id = 0
        self.anchor_poses: dict = {}

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> "GaussianMap":
        out = GaussianMap()
        for f in self.FIELDS:
            setattr(out, f, getattr(self, f).copy())
        out.next_id = self.next_id
        out.anchor_poses = dict(self.anchor_poses)
        return out

    def gaussian(self, gid: int) -> Gaussian:
        k = self.row(gid)
        return Gaussian(self.mean[k], self.scale[k], self.quat[k], float(self.opacity[k]), self.color[k],
                        int(self.anchor[k]), int(self.ids[k]))

    def row(self, gid: int) -> int:
        k = int(np.searchsorted(self.ids, gid))
        if k >= len(self.ids) or self.ids[k] != gid:
            raise InvalidArgument(f"unknown Gaussian id {gid}")
        return k

    @property
    def anchor_index(self) -> dict:
        """Keyframe id to the sorted ids of the Gaussians anchored there."""
        return {int(a): self.ids[self.anchor == a].tolist() for a in np.unique(self.anchor)}

    def covariances(self) -> np.ndarray:
        R = quat_to_rotmat(self.quat)
        return np.einsum("nij,nj,nkj->nik", R, self.scale ** 2, R)

    def register_anchor(self, kf_id: int, pose: SE3Pose) -> None:
        self.anchor_poses[int(kf_id)] = pose

    def add(self, batch: GaussianBatch) -> np.ndarray:
        if len(batch) == 0:
            return np.zeros(0, dtype=np.int64)
        new_ids = np.arange(self.next_id, self.next_id + len(batch), dtype=np.int64)
        self.next_id += len(batch)
        self.ids = np.concatenate([self.ids, new_ids])
        self.mean = np.concatenate([self.mean, batch.mean])
        self.scale = np.concatenate([self.scale, batch.scale])
        self.quat = np.concatenate([self.quat, quat_normalize(batch.quat)])
        self.opacity = np.concatenate([self.opacity, batch.opacity])
        self.color = np.concatenate([self.color, batch.color])
        self.anchor = np.concatenate([self.anchor, np.asarray(batch.anchor, dtype=np.int64)])
        return new_ids

    def add_gaussians(self, gaussians) -> np.ndarray:
        gs = list(gaussians)
        if not gs:
            return np.zeros(0, dtype=np.int64)
        return self.add(GaussianBatch(np.array([g.mean for g in gs]), np.array([g.scale for g in gs]),
                                      np.array([g.quat for g in gs]), np.array([g.opacity for g in gs]),
                                      np.array([g.color for g in gs]), np.array([g.anchor for g in gs])))

    def remove(self, keep: np.ndarray) -> None:
        for f in self.FIELDS:
            setattr(self, f, getattr(self, f)[keep])

    def check(self) -> None:
        """Raise if any structural invariant is violated."""
        if np.any(np.diff(self.ids) <= 0) or (len(self.ids) and self.ids[-1] >= self.next_id):
            raise InvalidArgument("ids must be increasing and below next_id")
        if np.any(~(self.scale > 0)):
            raise InvalidArgument("non-positive scale")
        if np.any(~((self.opacity > 0) & (self.opacity < 1))):
            raise InvalidArgument("opacity outside (0, 1)")
        if not np.allclose(np.linalg.norm(self.quat, axis=1), 1.0, atol=1e-9):
            raise InvalidArgument("quaternions not normalized")


# ---------------------------------------------------------------------------
# initialization and densification
# ---------------------------------------------------------------------------

def frames_from_normals(normals: np.ndarray) -> np.ndarray:
    """Quaternions of rotations whose first column is the given unit normal."""
    n = np.asarray(normals, dtype=float).reshape(-1, 3)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    b1 = np.cross(n, helper)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(n, b1)
    R = np.stack([n, b1, b2], axis=2)
    xyzw = Rotation.from_matrix(R).as_quat()
    return quat_normalize(xyzw[:, [3, 0, 1, 2]])


def knn_scale(points: np.ndarray, k: int = 3, fallback: float = FALLBACK_RADIUS) -> np.ndarray:
    """Mean distance to the ``k`` nearest other points; ``fallback`` when fewer exist."""
    pts = np.asarray(points, dtype=float)
    if len(pts) <= k:
        return np.full(len(pts), float(fallback))
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    # coincident points would give a degenerate covariance
    return np.maximum(dist[:, 1:].mean(axis=1), SCALE_FLOOR)


def strided_pixels(width: int, height: int, stride: int) -> np.ndarray:
    us = np.arange(stride // 2, width, stride)
    vs = np.arange(stride // 2, height, stride)
    v, u = np.meshgrid(vs, us, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def init_from_keyframe(kf, cam: str, rig: RigCalibration, stride: int = 2, mask: np.ndarray | None = None,
                       opacity_init: float = OPACITY_INIT, fallback_radius: float = FALLBACK_RADIUS,
                       use_normal_prior: bool = True) -> GaussianBatch:
    """One Gaussian per valid strided pixel of ``kf``'s refined depth for ``cam``.

    ``mask`` (H x W bool) further restricts the pixels that may spawn. The
    initial orientation puts the first axis along the normal prior; scales
    are isotropic, so the choice only matters once they diverge.
    """
    if stride < 1:
        raise InvalidArgument("stride must be >= 1")
    if not 0.0 < opacity_init < 1.0:
        raise InvalidArgument("opacity_init must lie in (0, 1)")
    view = kf.views[cam]
    intr = rig.intrinsics(cam)
    px = strided_pixels(intr.width, intr.height, stride)
    u, v = px[:, 0], px[:, 1]
    ok = view.valid[v, u] & (view.inv_depth[v, u] > 0)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)[v, u]
    if not np.any(ok):
        return GaussianBatch.empty()
    px = px[ok]
    u, v = px[:, 0], px[:, 1]
    X_c = intr.rays(px.astype(float)) / view.inv_depth[v, u][:, None]
    T_wc = rig.camera_pose(kf.pose, cam)
    X_w = T_wc.apply(X_c)
    s = knn_scale(X_w, 3, fallback_radius)
    if use_normal_prior:
        n_c = view.normal_prior[v, u]
        good = np.isfinite(n_c).all(axis=1) & (np.linalg.norm(n_c, axis=1) > 0.5)
        n_c = np.where(good[:, None], n_c, [[0.0, 0.0, -1.0]])
        quat = frames_from_normals(n_c @ T_wc.R.T)
    else:
        quat = np.tile([1.0, 0.0, 0.0, 0.0], (len(px), 1))
    n = len(px)
    return GaussianBatch(X_w, np.repeat(s[:, None], 3, axis=1), quat, np.full(n, float(opacity_init)),
                         np.clip(view.image[v, u], 0.0, 1.0), np.full(n, int(kf.index), dtype=np.int64))


def densify(gmap: GaussianMap, kf, cam: str, rig: RigCalibration, coverage: np.ndarray, stride: int = 2,
            coverage_min: float = COVERAGE_MIN, **init_kw) -> np.ndarray:
    """Spawn Gaussians at strided pixels whose rendered coverage is below ``coverage_min``."""
    mask = np.asarray(coverage) < coverage_min
    batch = init_from_keyframe(kf, cam, rig, stride, mask=mask, **init_kw)
    if len(batch) and kf.index not in gmap.anchor_poses:
        gmap.register_anchor(kf.index, kf.pose)
    return gmap.add(batch)


def prune(gmap: GaussianMap, alpha_min: float = ALPHA_MIN) -> np.ndarray:
    """Remove every Gaussian with opacity below ``alpha_min``; returns the removed ids."""
    drop = gmap.opacity < alpha_min
    removed = gmap.ids[drop].copy()
    if len(removed):
        gmap.remove(~drop)
    return removed


def apply_pose_update(gmap: GaussianMap, kf_id: int, delta: SE3Pose, scale_change: float | None = None,
                      origin: np.ndarray | None = None) -> int:
    """Carry the Gaussians anchored at ``kf_id`` along with a keyframe pose update.

    ``delta`` is the left increment (``T_new = delta * T_old``). With a scale
    change ``s`` the offsets from the keyframe origin (the old keyframe
    position unless ``origin`` is given) are multiplied by ``s`` together
    with the semi-axes. Returns the number of Gaussians moved.
    """
    kf_id = int(kf_id)
    if kf_id not in gmap.anchor_poses and not np.any(gmap.anchor == kf_id):
        raise InvalidArgument(f"unknown keyframe id {kf_id}")
    if scale_change is not None and not scale_change > 0:
        raise InvalidArgument("scale_change must be positive")
    old_pose = gmap.anchor_poses.get(kf_id)
    sel = gmap.anchor == kf_id
    n = int(sel.sum())
    if n:
        mu = gmap.mean[sel]
        if scale_change is not None:
            o = np.asarray(origin, dtype=float) if origin is not None else (
                old_pose.t if old_pose is not None else np.zeros(3))
            mu = o + scale_change * (mu - o)
            gmap.scale[sel] = gmap.scale[sel] * scale_change
        gmap.mean[sel] = delta.apply(mu)
        gmap.quat[sel] = quat_normalize(quat_mul(np.broadcast_to(delta.q, (n, 4)), gmap.quat[sel]))
    if old_pose is not None:
        gmap.anchor_poses[kf_id] = delta @ old_pose
    return n


# ---------------------------------------------------------------------------
# PLY export
# ---------------------------------------------------------------------------

PLY_PROPERTIES = ("x", "y", "z", "scale_x", "scale_y", "scale_z", "rot_0", "rot_1", "rot_2", "rot_3",
                  "opacity", "r", "g", "b", "anchor", "id")


def save_ply(path: str | Path, gmap: GaussianMap) -> None:
    """Binary little-endian PLY, one vertex per Gaussian, all properties double.

    Property order is fixed by ``PLY_PROPERTIES``; ``rot_*`` is the
    ``(w, x, y, z)`` quaternion and ``scale_*`` are linear semi-axes.
    """
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(gmap)}"]
    header += [f"property double {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    data = np.column_stack([gmap.mean, gmap.scale, gmap.quat, gmap.opacity, gmap.color,
                            gmap.anchor.astype(float), gmap.ids.astype(float)]) if len(gmap) else np.zeros((0, 16))
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_ply(path: str | Path) -> GaussianMap:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise InvalidArgument(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise InvalidArgument(f"{path}: only binary little-endian PLY is supported")
    props = [ln.split()[-1] for ln in lines if ln.startswith("property")]
    if tuple(props) != PLY_PROPERTIES:
        raise InvalidArgument(f"{path}: unexpected vertex properties {props}")
    count = int(next(ln.split()[-1] for ln in lines if ln.startswith("element vertex")))
    body = raw[end + len(b"end_header\n"):]
    if len(body) != count * 8 * len(PLY_PROPERTIES):
        raise InvalidArgument(f"{path}: truncated vertex data")
    data = np.frombuffer(body, dtype="<f8").reshape(count, len(PLY_PROPERTIES))
    gmap = GaussianMap()
    gmap.mean = data[:, 0:3].copy()
    gmap.scale = data[:, 3:6].copy()
    gmap.quat = data[:, 6:10].copy()
    gmap.opacity = data[:, 10].copy()
    gmap.color = data[:, 11:14].copy()
    gmap.anchor = data[:, 14].astype(np.int64)
    gmap.ids = data[:, 15].astype(np.int64)
    gmap.next_id = int(gmap.ids.max()) + 1 if count else 0
    return gmap
