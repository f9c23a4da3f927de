"""Multi-camera bundle adjustment over body poses and per-pixel inverse depths.

Residuals are ``r = p_target - Pi_j(T_ij * Pi_i^-1(p, d))`` for temporal
(same camera, two keyframes) and cross-view (two cameras, one keyframe)
edges. The damped Gauss-Newton system

    [ B   E ] [dxi]   [v]
    [ E^T C ] [dd ] = [w]

is solved by eliminating the diagonal depth block ``C`` (Schur complement).
Pose updates are left retractions ``T <- exp(dxi) T`` on body poses.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import ConvergenceError, InvalidArgument, LinearizationError, SolverError
from .geometry import (
    Z_MIN, PinholeIntrinsics, RigCalibration, SE3Pose, hat, pair_transform, project_points,
    retract,
)

log = logging.getLogger(__name__)

INV_DEPTH_MIN, INV_DEPTH_MAX = 1e-4, 1e3
SNAPSHOT_FORMAT = "mcgs-baproblem"
SNAPSHOT_VERSION = 1


def sample_pixels(intr: PinholeIntrinsics, stride: int) -> np.ndarray:
    us = np.arange(stride // 2, intr.width, stride)
    vs = np.arange(stride // 2, intr.height, stride)
    v, u = np.meshgrid(vs, us, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(float)


@dataclass
class BAProblem:
    """Windowed bundle-adjustment state.

    ``inv_depths[(kf, cam)]`` holds the inverse depth at every pixel of the
    stride grid of that view (row-major); correspondence ``src_index`` values
    address this vector.
    """

    rig: RigCalibration
    poses: dict
    inv_depths: dict
    correspondences: list
    fixed: set = field(default_factory=set)
    stride: int = 4
    huber_delta: float | None = None
    depth_prior_weight: float = 0.0
    bounds_margin: float = 0.0
    # joint depth-scale alignment state (optional)
    grids: dict | None = None
    prior_depth: dict | None = None  # (kf, cam) -> prior metric depth at sample pixels (inf = invalid)

    def __post_init__(self):
        if not self.fixed and self.depth_prior_weight <= 0:
            raise InvalidArgument("gauge: at least one pose must be fixed")
        unknown = set(self.fixed) - set(self.poses)
        if unknown:
            raise InvalidArgument(f"fixed poses not in problem: {sorted(unknown)}")
        for cs in self.correspondences:
            e = cs.edge
            if e.i not in self.poses or e.j not in self.poses:
                raise InvalidArgument(f"edge {e} references a keyframe outside the problem")
            n = len(self.inv_depths[(e.i, e.cam_i)])
            if len(cs) and (cs.src_index.min() < 0 or cs.src_index.max() >= n):
                raise InvalidArgument(f"edge {e}: sample index outside the depth grid")

    @property
    def free_ids(self) -> list:
        return [k for k in sorted(self.poses) if k not in self.fixed]

    @property
    def depth_keys(self) -> list:
        return sorted(self.inv_depths)

    def depth_offsets(self) -> dict:
        off, out = 0, {}
        for k in self.depth_keys:
            out[k] = off
            off += len(self.inv_depths[k])
        return out

    def n_depths(self) -> int:
        return sum(len(v) for v in self.inv_depths.values())

    def state(self) -> tuple[dict, dict]:
        return dict(self.poses), {k: v.copy() for k, v in self.inv_depths.items()}

    def set_state(self, poses: dict, inv_depths: dict) -> None:
        self.poses = dict(poses)
        self.inv_depths = {k: v.copy() for k, v in inv_depths.items()}

    def stack_depths(self, inv_depths: dict | None = None) -> np.ndarray:
        src = self.inv_depths if inv_depths is None else inv_depths
        return np.concatenate([src[k] for k in self.depth_keys]) if src else np.zeros(0)

    def unstack_depths(self, flat: np.ndarray) -> dict:
        out, off = {}, 0
        for k in self.depth_keys:
            n = len(self.inv_depths[k])
            out[k] = flat[off:off + n].copy()
            off += n
        return out


@dataclass
class NormalEquations:
    B: np.ndarray          # (6k, 6k) dense
    E: sp.csr_matrix       # (6k, nd)
    C: np.ndarray          # (nd,)
    v: np.ndarray          # (6k,)
    w: np.ndarray          # (nd,)
    damping: float = 0.0
    cost: float = 0.0
    pose_ids: list = field(default_factory=list)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Full damped system matrix and right-hand side (for verification)."""
        k, nd = self.B.shape[0], len(self.C)
        H = np.zeros((k + nd, k + nd))
        H[:k, :k] = self.B + self.damping * np.eye(k)
        E = self.E.toarray()
        H[:k, k:] = E
        H[k:, :k] = E.T
        H[k:, k:] = np.diag(self.C + self.damping)
        return H, np.concatenate([self.v, self.w])


# ---------------------------------------------------------------------------
# residuals and Jacobians
# ---------------------------------------------------------------------------

def _proj_jacobian(intr: PinholeIntrinsics, Y: np.ndarray) -> np.ndarray:
    x, y, z = Y[:, 0], Y[:, 1], Y[:, 2]
    zs = np.where(np.abs(z) > 0, z, 1.0)
    P = np.zeros((len(Y), 2, 3))
    P[:, 0, 0] = intr.fx / zs
    P[:, 0, 2] = -intr.fx * x / zs ** 2
    P[:, 1, 1] = intr.fy / zs
    P[:, 1, 2] = -intr.fy * y / zs ** 2
    return P


@dataclass
class EdgeTerms:
    r: np.ndarray            # (n, 2)
    w: np.ndarray            # (n, 2) effective weights (0 on invalid samples)
    valid: np.ndarray        # (n,)
    J_i: np.ndarray | None = None   # (n, 2, 6) wrt source body pose twist
    J_d: np.ndarray | None = None   # (n, 2) wrt source inverse depth


def edge_terms(problem: BAProblem, cs, poses: dict | None = None, inv_depths: dict | None = None,
               jacobians: bool = False) -> EdgeTerms:
    poses = problem.poses if poses is None else poses
    inv_depths = problem.inv_depths if inv_depths is None else inv_depths
    e = cs.edge
    rig = problem.rig
    intr_i, intr_j = rig.intrinsics(e.cam_i), rig.intrinsics(e.cam_j)
    Ti, Tj = poses[e.i], poses[e.j]
    T = pair_transform(e.kind, Ti, Tj, rig, e.cam_i, e.cam_j)
    d = inv_depths[(e.i, e.cam_i)][cs.src_index]
    q = intr_i.rays(cs.pixels)
    ds = np.where(d > 0, d, 1.0)
    X = q / ds[:, None]
    R = T.R
    Y = X @ R.T + T.t
    proj, valid = project_points(intr_j, Y, margin=problem.bounds_margin)
    valid &= d > 0
    r = cs.targets - proj
    w = cs.weights * valid[:, None]
    if problem.huber_delta is not None:
        s = np.sqrt(np.einsum("ni,ni->n", w * r, r))
        k = np.where(s > problem.huber_delta, problem.huber_delta / np.maximum(s, 1e-300), 1.0)
        w = w * k[:, None]
    terms = EdgeTerms(np.where(valid[:, None], r, 0.0), w, valid)
    if not jacobians:
        return terms
    P = _proj_jacobian(intr_j, Y)
    terms.J_d = np.einsum("nij,nj->ni", P, (q @ R.T)) / ds[:, None] ** 2
    if e.kind == "temporal":
        Ei, Ej = rig.extrinsic(e.cam_i), rig.extrinsic(e.cam_j)
        wpt = (Ti @ Ei).apply(X)
        M = (Ej.inverse() @ Tj.inverse()).R
        A = np.empty((len(X), 3, 6))
        A[:, :, :3] = M
        A[:, :, 3:] = -M @ hat(wpt)
        terms.J_i = -np.einsum("nij,njk->nik", P, A)
    return terms


def residual(edge, pixel, target, weight, Ti: SE3Pose, Tj: SE3Pose, inv_depth: float,
             rig: RigCalibration, bounds_margin: float = 0.0):
    """Single-sample residual ``(r, w)``; ``w = 0`` when the reprojection is invalid."""
    intr_i, intr_j = rig.intrinsics(edge.cam_i), rig.intrinsics(edge.cam_j)
    T = pair_transform(edge.kind, Ti, Tj, rig, edge.cam_i, edge.cam_j)
    if not inv_depth > 0:
        return np.zeros(2), np.zeros(2)
    X = intr_i.rays(np.asarray(pixel, dtype=float)) / inv_depth
    proj, valid = project_points(intr_j, T.apply(X), margin=bounds_margin)
    if not valid:
        return np.zeros(2), np.zeros(2)
    return np.asarray(target, dtype=float) - proj, np.asarray(weight, dtype=float)


def _robust_cost(problem: BAProblem, t: EdgeTerms, cs) -> float:
    if problem.huber_delta is None:
        return float(np.sum(t.w * t.r * t.r))
    w0 = cs.weights * t.valid[:, None]
    s2 = np.einsum("ni,ni->n", w0 * t.r, t.r)
    s = np.sqrt(s2)
    dlt = problem.huber_delta
    return float(np.sum(np.where(s <= dlt, s2, 2 * dlt * s - dlt * dlt)))


def reprojection_cost(problem: BAProblem, poses: dict | None = None, inv_depths: dict | None = None) -> float:
    total = 0.0
    for cs in problem.correspondences:
        if len(cs) == 0:
            continue
        total += _robust_cost(problem, edge_terms(problem, cs, poses, inv_depths), cs)
    return total


def all_residuals(problem: BAProblem, poses=None, inv_depths=None) -> np.ndarray:
    """Stacked raw residuals of every sample (invalid samples contribute zeros)."""
    out = [edge_terms(problem, cs, poses, inv_depths).r.reshape(-1)
           for cs in problem.correspondences if len(cs)]
    return np.concatenate(out) if out else np.zeros(0)


def linearize(problem: BAProblem, poses: dict | None = None, inv_depths: dict | None = None) -> NormalEquations:
    """Accumulate ``J^T W J`` and ``-J^T W r`` into the block system."""
    poses = problem.poses if poses is None else poses
    free = problem.free_ids
    pidx = {k: n for n, k in enumerate(free)}
    k6 = 6 * len(free)
    offsets = problem.depth_offsets()
    nd = problem.n_depths()
    B = np.zeros((k6, k6))
    v = np.zeros(k6)
    C = np.zeros(nd)
    w = np.zeros(nd)
    rows, cols, vals = [], [], []
    cost = 0.0
    for cs in problem.correspondences:
        if len(cs) == 0:
            continue
        e = cs.edge
        t = edge_terms(problem, cs, poses, inv_depths, jacobians=True)
        cost += _robust_cost(problem, t, cs)
        if not (np.all(np.isfinite(t.J_d)) and np.all(np.isfinite(t.r))
                and (t.J_i is None or np.all(np.isfinite(t.J_i)))):
            raise LinearizationError(f"non-finite Jacobian on edge {e}", edge=e)
        col = offsets[(e.i, e.cam_i)] + cs.src_index
        wr = t.w * t.r
        C += np.bincount(col, weights=np.einsum("ni,ni->n", t.w, t.J_d ** 2), minlength=nd)
        w -= np.bincount(col, weights=np.einsum("ni,ni->n", t.J_d, wr), minlength=nd)
        if t.J_i is None:
            continue
        H = np.einsum("nai,na,naj->ij", t.J_i, t.w, t.J_i)
        g = np.einsum("nai,na->i", t.J_i, wr)
        Ed = np.einsum("nai,na,na->ni", t.J_i, t.w, t.J_d)
        for pose_id, sign in ((e.i, 1.0), (e.j, -1.0)):
            if pose_id not in pidx:
                continue
            a = 6 * pidx[pose_id]
            v[a:a + 6] -= sign * g
            rows.append(np.repeat(a + np.arange(6)[None, :], len(col), axis=0).ravel())
            cols.append(np.repeat(col, 6))
            vals.append((sign * Ed).ravel())
            for other, sign2 in ((e.i, 1.0), (e.j, -1.0)):
                if other not in pidx:
                    continue
                b = 6 * pidx[other]
                B[a:a + 6, b:b + 6] += sign * sign2 * H
    if rows:
        E = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(k6, nd)).tocsr()
    else:
        E = sp.csr_matrix((k6, nd))
    return NormalEquations(B, E, C, v, w, 0.0, cost, list(free))


def schur_solve(ne: NormalEquations) -> tuple[np.ndarray, np.ndarray]:
    """Solve the damped system by eliminating the diagonal depth block."""
    Cd = ne.C + ne.damping
    if np.any(~(Cd > 0)):
        raise SolverError("depth block has non-positive diagonal entries; increase damping")
    Cinv = 1.0 / Cd
    k = ne.B.shape[0]
    if k == 0:
        return np.zeros(0), Cinv * ne.w
    EC = ne.E.multiply(Cinv[None, :]).tocsr()
    S = ne.B + ne.damping * np.eye(k) - (EC @ ne.E.T).toarray()
    rhs = ne.v - EC @ ne.w
    S = 0.5 * (S + S.T)
    try:
        cf = scipy.linalg.cho_factor(S)
        dxi = scipy.linalg.cho_solve(cf, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"reduced pose system is singular: {exc}") from exc
    if not np.all(np.isfinite(dxi)):
        raise SolverError("reduced pose system produced a non-finite update")
    dd = Cinv * (ne.w - ne.E.T @ dxi)
    return dxi, dd


def dense_solve(ne: NormalEquations) -> tuple[np.ndarray, np.ndarray]:
    H, g = ne.dense()
    x = np.linalg.solve(H, g)
    k = ne.B.shape[0]
    return x[:k], x[k:]


def apply_update(problem: BAProblem, dxi: np.ndarray, dd: np.ndarray,
                 poses: dict | None = None, inv_depths: dict | None = None) -> tuple[dict, dict]:
    poses = dict(problem.poses if poses is None else poses)
    inv_depths = problem.inv_depths if inv_depths is None else inv_depths
    for n, k in enumerate(problem.free_ids):
        poses[k] = retract(poses[k], dxi[6 * n:6 * n + 6])
    flat = problem.stack_depths(inv_depths) + dd
    flat = np.clip(flat, INV_DEPTH_MIN, INV_DEPTH_MAX)
    return poses, problem.unstack_depths(flat)


# ---------------------------------------------------------------------------
# Levenberg-style damped Gauss-Newton
# ---------------------------------------------------------------------------

@dataclass
class OptimizeResult:
    poses: dict
    inv_depths: dict
    cost_trace: list
    iterations: int
    converged: bool
    damping: float


def mcba_optimize(problem: BAProblem, iters: int = 10, lam_init: float = 1e-4,
                  lam_up: float = 10.0, lam_down: float = 0.5, max_retries: int = 10,
                  rel_tol: float = 1e-12, abs_tol: float = 1e-20) -> OptimizeResult:
    """Optimize poses and inverse depths in place; returns the cost trace.

    Steps that raise the weighted cost are rejected and the damping grows;
    accepted steps shrink it. The trace therefore never increases.
    """
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    lam = lam_init
    cost = reprojection_cost(problem)
    trace = [cost]
    converged = False
    it = 0
    for it in range(1, iters + 1):
        if cost <= abs_tol:
            converged = True
            break
        ne = linearize(problem)
        retries = 0
        while True:
            ne.damping = lam
            try:
                dxi, dd = schur_solve(ne)
            except SolverError:
                dxi = None
            if dxi is not None:
                pred = 0.5 * (float(dxi @ ne.v) + float(dd @ ne.w))
                if pred <= rel_tol * cost + 1e-300:
                    converged = True
                    break
                poses, depths = apply_update(problem, dxi, dd)
                new_cost = reprojection_cost(problem, poses, depths)
                if np.isfinite(new_cost) and new_cost <= cost:
                    problem.set_state(poses, depths)
                    cost = new_cost
                    lam = max(lam * lam_down, 1e-12)
                    break
            lam *= lam_up
            retries += 1
            if retries > max_retries:
                raise ConvergenceError(f"bundle adjustment rejected {retries} consecutive steps",
                                       trace=trace, stage="mcba")
        if converged:
            break
        trace.append(cost)
    return OptimizeResult(dict(problem.poses), {k: v.copy() for k, v in problem.inv_depths.items()},
                          trace, len(trace) - 1, converged, lam)


# ---------------------------------------------------------------------------
# single-camera reference path
# ---------------------------------------------------------------------------

def single_camera_residuals(intr: PinholeIntrinsics, world_to_cam: dict, inv_depths: dict,
                            correspondences: list) -> np.ndarray:
    """Residuals of the monocular formulation ``p~ - Pi(G_j G_i^-1 Pi^-1(p, d))``.

    ``world_to_cam`` maps keyframe id to a 4x4 world-to-camera matrix and
    ``inv_depths`` maps keyframe id to its sample-grid inverse depths.
    Written against homogeneous matrices, independent of the rig machinery.
    """
    out = []
    for cs in correspondences:
        if len(cs) == 0:
            continue
        Gi, Gj = world_to_cam[cs.edge.i], world_to_cam[cs.edge.j]
        Gij = Gj @ np.linalg.inv(Gi)
        d = inv_depths[cs.edge.i][cs.src_index]
        u, v = cs.pixels[:, 0], cs.pixels[:, 1]
        Xh = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u), d], axis=0)
        Y = Gij @ Xh
        proj = np.stack([intr.fx * Y[0] / Y[2] + intr.cx, intr.fy * Y[1] / Y[2] + intr.cy], axis=1)
        ok = (Y[2] / d > Z_MIN) & intr.in_bounds(proj) & (d > 0)
        out.append(np.where(ok[:, None], cs.targets - proj, 0.0).reshape(-1))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# keyframe bridge
# ---------------------------------------------------------------------------

def problem_from_keyframes(keyframes, correspondences: list, rig: RigCalibration, fixed,
                           stride: int = 4, huber_delta: float | None = None,
                           with_grids: bool = False, bounds_margin: float = 0.0) -> BAProblem:
    """Gather window state: body poses and stride-grid inverse depths per view.

    Sample depths start from the current full-resolution inverse depth of the
    keyframe; samples without a valid prior start at the lower clamp.
    """
    poses, inv, grids, priors = {}, {}, {}, {}
    for kf in keyframes:
        poses[kf.index] = kf.pose
        for cam in rig.ids:
            view = kf.views[cam]
            px = sample_pixels(rig.intrinsics(cam), stride).astype(int)
            ok = view.valid[px[:, 1], px[:, 0]]
            d = view.inv_depth[px[:, 1], px[:, 0]]
            inv[(kf.index, cam)] = np.where(ok & (d > 0), d, INV_DEPTH_MIN).astype(float)
            grids[(kf.index, cam)] = view.scale_grid.copy()
            priors[(kf.index, cam)] = np.where(ok, view.depth_prior[px[:, 1], px[:, 0]], np.inf)
    return BAProblem(rig, poses, inv, [c for c in correspondences if len(c)], set(fixed), stride,
                     huber_delta, bounds_margin=bounds_margin, grids=grids if with_grids else None,
                     prior_depth=priors if with_grids else None)


def write_back(problem: BAProblem, keyframes) -> None:
    """Copy optimized poses, grids and depths into the keyframes.

    Full-resolution inverse depth is the prior scaled by the grid, with the
    optimized values substituted at the sample pixels.
    """
    for kf in keyframes:
        kf.pose = problem.poses[kf.index]
        for cam in problem.rig.ids:
            view = kf.views[cam]
            key = (kf.index, cam)
            if problem.grids is not None:
                view.scale_grid = problem.grids[key].copy()
            dense = view.prior_inv_depth()
            px = sample_pixels(problem.rig.intrinsics(cam), problem.stride).astype(int)
            ok = view.valid[px[:, 1], px[:, 0]]
            dense[px[ok, 1], px[ok, 0]] = problem.inv_depths[key][ok]
            view.inv_depth = dense


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def problem_to_json(problem: BAProblem) -> dict:
    """Self-contained, lossless snapshot (floats written with repr precision)."""
    def arr(a):
        return np.asarray(a, dtype=float).tolist()
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "rig": problem.rig.to_json(),
        "stride": problem.stride,
        "huber_delta": problem.huber_delta,
        "depth_prior_weight": problem.depth_prior_weight,
        "bounds_margin": problem.bounds_margin,
        "fixed": sorted(int(k) for k in problem.fixed),
        "poses": {str(k): {"q": arr(p.q), "t": arr(p.t)} for k, p in sorted(problem.poses.items())},
        "inv_depths": [{"kf": int(k[0]), "cam": k[1], "values": arr(problem.inv_depths[k])}
                       for k in problem.depth_keys],
        "edges": [{"i": cs.edge.i, "cam_i": cs.edge.cam_i, "j": cs.edge.j, "cam_j": cs.edge.cam_j,
                   "kind": cs.edge.kind, "src_index": np.asarray(cs.src_index).astype(int).tolist(),
                   "pixels": arr(cs.pixels), "targets": arr(cs.targets), "weights": arr(cs.weights)}
                  for cs in problem.correspondences],
        "grids": None if problem.grids is None else [
            {"kf": int(k[0]), "cam": k[1], "values": arr(g.values), "width": int(g.width), "height": int(g.height)}
            for k, g in sorted(problem.grids.items())],
        "prior_depth": None if problem.prior_depth is None else [
            {"kf": int(k[0]), "cam": k[1], "values": arr(v)} for k, v in sorted(problem.prior_depth.items())],
    }


def problem_from_json(data: dict) -> BAProblem:
    from .jdsa import ScaleGrid
    from .synth import CorrespondenceSet, Edge

    if data.get("format") != SNAPSHOT_FORMAT:
        raise InvalidArgument("not a bundle-adjustment snapshot")
    if int(data.get("version", -1)) != SNAPSHOT_VERSION:
        raise InvalidArgument(f"unsupported snapshot version {data.get('version')}")
    rig = RigCalibration.from_json(data["rig"])
    poses = {int(k): SE3Pose(v["q"], v["t"]) for k, v in data["poses"].items()}
    inv = {(int(d["kf"]), d["cam"]): np.array(d["values"], dtype=float) for d in data["inv_depths"]}
    cors = []
    for e in data["edges"]:
        edge = Edge(int(e["i"]), e["cam_i"], int(e["j"]), e["cam_j"], e["kind"])
        cors.append(CorrespondenceSet(edge, np.array(e["src_index"], dtype=int),
                                      np.array(e["pixels"], dtype=float).reshape(-1, 2),
                                      np.array(e["targets"], dtype=float).reshape(-1, 2),
                                      np.array(e["weights"], dtype=float).reshape(-1, 2)))
    grids = prior = None
    if data.get("grids") is not None:
        grids = {(int(g["kf"]), g["cam"]): ScaleGrid(np.array(g["values"], dtype=float), int(g["width"]),
                                                     int(g["height"])) for g in data["grids"]}
    if data.get("prior_depth") is not None:
        prior = {(int(d["kf"]), d["cam"]): np.array(d["values"], dtype=float) for d in data["prior_depth"]}
    return BAProblem(rig, poses, inv, cors, set(data["fixed"]), int(data["stride"]),
                     data.get("huber_delta"), float(data.get("depth_prior_weight", 0.0)),
                     float(data.get("bounds_margin", 0.0)), grids, prior)


def save_problem(path: str | Path, problem: BAProblem) -> None:
    Path(path).write_text(json.dumps(problem_to_json(problem)))


def load_problem(path: str | Path) -> BAProblem:
    return problem_from_json(json.loads(Path(path).read_text()))
