"""Differentiable Gaussian splatting on the CPU.

Forward: project each Gaussian to a 2-D footprint, sort by (mean depth, id),
and alpha-composite color, ray-ellipsoid depth and normals front to back.
Backward: hand-derived gradients of the mapping loss with respect to every
Gaussian parameter, the camera pose and a per-keyframe affine exposure map.

Conventions: ``T_cw`` maps world to camera. Rendered depth is z-depth (the
ray-ellipsoid hit is taken along rays with unit z component). Normals live in
the camera frame and face the camera.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, OptimizationError
from .geometry import PinholeIntrinsics, RigCalibration, SE3Pose, hat, quat_mul, quat_normalize, \
    quat_to_rotmat, se3_exp, so3_exp_quat

log = logging.getLogger(__name__)

EPS_2D = 0.3
NEAR = 0.01
T_MIN = 1e-4
ALPHA_MAX = 0.99
CULL_SIGMA = 3.0
CUTOFF_SIGMA = 3.0
TILE = 16
GUARD = 0.15  # guard band around the image, as a fraction of its size, that projected means must fall in


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _vee_skew(X: np.ndarray) -> np.ndarray:
    """``(X12 - X21, X20 - X02, X01 - X10)`` over a leading axis."""
    return np.stack([X[..., 1, 2] - X[..., 2, 1], X[..., 2, 0] - X[..., 0, 2], X[..., 0, 1] - X[..., 1, 0]],
                    axis=-1)


@dataclass
class Projection:
    """Per visible Gaussian quantities, in front-to-back order."""

    rows: np.ndarray      # (n,) map row of each visible Gaussian
    ids: np.ndarray       # (n,) stable ids
    mu_c: np.ndarray      # (n, 3) camera-frame means
    R_g: np.ndarray       # (n, 3, 3) Gaussian rotations (world)
    cov_w: np.ndarray     # (n, 3, 3)
    cov_c: np.ndarray     # (n, 3, 3)
    prec_c: np.ndarray    # (n, 3, 3) inverse camera-frame covariance
    J: np.ndarray         # (n, 2, 3) perspective Jacobian at the mean
    mean2d: np.ndarray    # (n, 2)
    cov2d: np.ndarray     # (n, 2, 2) with the eps floor
    conic: np.ndarray     # (n, 2, 2) inverse of cov2d
    normal_c: np.ndarray  # (n, 3) unit normal facing the camera
    normal_sign: np.ndarray  # (n,) +-1 applied to the shortest axis
    axis: np.ndarray      # (n,) index of the shortest semi-axis
    prec_mu: np.ndarray = None      # (n, 3) prec_c @ mu_c
    mu_prec_mu: np.ndarray = None   # (n,) mu_c . prec_c @ mu_c

    def __post_init__(self):
        if self.prec_mu is None:
            self.prec_mu = np.einsum("nij,nj->ni", self.prec_c, self.mu_c)
            self.mu_prec_mu = np.einsum("ni,ni->n", self.mu_c, self.prec_mu)

    def __len__(self) -> int:
        return len(self.rows)


def _project_arrays(mean, scale, quat, T_cw: SE3Pose, intr: PinholeIntrinsics, eps2d=EPS_2D, near=NEAR,
                    cull_sigma=CULL_SIGMA, cull=True):
    """Footprints of the Gaussians that survive culling; ``rows`` indexes the inputs.

    With ``cull=False`` every input is returned and ``valid`` flags the survivors.
    """
    R, t = T_cw.R, T_cw.t
    mu_all = mean @ R.T + t
    z_all = mu_all[:, 2]
    zs_all = np.where(z_all > near, z_all, 1.0)
    u_all = intr.fx * mu_all[:, 0] / zs_all + intr.cx
    v_all = intr.fy * mu_all[:, 1] / zs_all + intr.cy
    gx, gy = GUARD * intr.width, GUARD * intr.height
    cand = ((z_all > near) & (u_all >= -0.5 - gx) & (u_all <= intr.width - 0.5 + gx)
            & (v_all >= -0.5 - gy) & (v_all <= intr.height - 0.5 + gy))
    rows = np.flatnonzero(cand) if cull else np.arange(len(mean))
    Rg = quat_to_rotmat(quat[rows])
    S2 = scale[rows] ** 2
    cov_w = (Rg * S2[:, None, :]) @ np.swapaxes(Rg, 1, 2)
    mu_c = mu_all[rows]
    cov_c = R @ cov_w @ R.T
    zs = zs_all[rows]
    J = np.zeros((len(rows), 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * mu_c[:, 0] / zs ** 2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * mu_c[:, 1] / zs ** 2
    cov2d = J @ cov_c @ np.swapaxes(J, 1, 2) + eps2d * np.eye(2)
    mean2d = np.stack([u_all[rows], v_all[rows]], axis=1)
    a, b, d = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam = 0.5 * (a + d) + np.sqrt(np.maximum(0.25 * (a - d) ** 2 + b * b, 0.0))
    r = cull_sigma * np.sqrt(lam)
    on = ((mean2d[:, 0] + r >= -0.5) & (mean2d[:, 0] - r <= intr.width - 0.5)
          & (mean2d[:, 1] + r >= -0.5) & (mean2d[:, 1] - r <= intr.height - 0.5)
          & np.isfinite(mean2d).all(axis=1))
    if not cull:
        return dict(rows=rows, Rg=Rg, cov_w=cov_w, mu_c=mu_c, cov_c=cov_c, J=J, cov2d=cov2d, mean2d=mean2d,
                    valid=on & cand)
    keep = np.flatnonzero(on)
    return dict(rows=rows[keep], Rg=Rg[keep], cov_w=cov_w[keep], mu_c=mu_c[keep], cov_c=cov_c[keep],
                J=J[keep], cov2d=cov2d[keep], mean2d=mean2d[keep])


def project_gaussian(g, T_cw: SE3Pose, intr: PinholeIntrinsics, eps2d: float = EPS_2D, near: float = NEAR):
    """Footprint of one Gaussian: ``(mean2d, cov2d, mean depth, valid)``."""
    p = _project_arrays(np.asarray(g.mean, float)[None], np.asarray(g.scale, float)[None],
                        np.asarray(g.quat, float)[None], T_cw, intr, eps2d, near, cull=False)
    return p["mean2d"][0], p["cov2d"][0], float(p["mu_c"][0, 2]), bool(p["valid"][0])


def project_map(gmap, T_cw: SE3Pose, intr: PinholeIntrinsics, eps2d: float = EPS_2D, near: float = NEAR,
                cull_sigma: float = CULL_SIGMA) -> Projection:
    p = _project_arrays(gmap.mean, gmap.scale, gmap.quat, T_cw, intr, eps2d, near, cull_sigma)
    order = np.lexsort((gmap.ids[p["rows"]], p["mu_c"][:, 2]))
    rows = p["rows"][order]
    sel = {k: v[order] for k, v in p.items() if k != "rows"}
    cov_c = sel["cov_c"]
    prec = np.linalg.inv(cov_c) if len(rows) else np.zeros((0, 3, 3))
    conic = np.linalg.inv(sel["cov2d"]) if len(rows) else np.zeros((0, 2, 2))
    axis = np.argmin(gmap.scale[rows], axis=1) if len(rows) else np.zeros(0, dtype=int)
    Rg = sel["Rg"]
    n_w = Rg[np.arange(len(rows)), :, axis]
    n_c = n_w @ T_cw.R.T
    sign = np.where(np.einsum("ni,ni->n", n_c, sel["mu_c"]) > 0, -1.0, 1.0)
    return Projection(rows, gmap.ids[rows].copy(), sel["mu_c"], Rg, sel["cov_w"], cov_c, prec, sel["J"],
                      sel["mean2d"], sel["cov2d"], conic, n_c * sign[:, None], sign, axis)


def ray_ellipsoid_depth(g, ray, origin=(0.0, 0.0, 0.0)) -> float | None:
    """Nearest positive ``t`` with ``origin + t * ray`` on the 1-sigma ellipsoid of ``g``.

    ``t`` is measured in units of ``ray``: a unit ray gives Euclidean
    distance, a ray with unit z component gives z-depth. ``None`` on a miss.
    """
    R = quat_to_rotmat(np.asarray(g.quat, float))
    P = R @ np.diag(1.0 / np.asarray(g.scale, float) ** 2) @ R.T
    r = np.asarray(ray, float)
    m = np.asarray(g.mean, float) - np.asarray(origin, float)
    a = r @ P @ r
    b = r @ P @ m
    c = m @ P @ m - 1.0
    disc = b * b - a * c
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    for t in ((b - sq) / a, (b + sq) / a):
        if t > 0:
            return float(t)
    return None


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class Pairs:
    """Kept (pixel, Gaussian) contributions, grouped by pixel in blend order."""

    pix: np.ndarray     # flat pixel index v * W + u
    g: np.ndarray       # index into the projection (front-to-back rank)
    delta: np.ndarray   # (m, 2) pixel minus footprint centre
    gauss: np.ndarray   # exp(-power)
    alpha: np.ndarray   # clamped per-pixel alpha
    clamped: np.ndarray
    T: np.ndarray       # transmittance before this contribution
    weight: np.ndarray  # alpha * T
    depth: np.ndarray   # z-depth of the contribution
    hit: np.ndarray     # ray met the ellipsoid
    ray: np.ndarray     # (m, 3) camera ray with unit z
    disc: np.ndarray    # discriminant (for diagnostics)

    def __len__(self) -> int:
        return len(self.pix)


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    coverage: np.ndarray
    normal_raw: np.ndarray
    pairs: Pairs
    proj: Projection
    T_cw: SE3Pose
    intr: PinholeIntrinsics

    def contributors(self, u: int, v: int) -> tuple[np.ndarray, np.ndarray]:
        """Ids and blend weights of one pixel, in blend order."""
        sel = self.pairs.pix == v * self.intr.width + u
        return self.proj.ids[self.pairs.g[sel]], self.pairs.weight[sel]


def _segment_starts(pix: np.ndarray) -> np.ndarray:
    start = np.ones(len(pix), dtype=bool)
    start[1:] = pix[1:] != pix[:-1]
    return start


def _segmented_exclusive_cumsum(x: np.ndarray, start: np.ndarray) -> np.ndarray:
    cs = np.cumsum(x)
    seg = np.cumsum(start) - 1
    base = (cs - x)[start]
    return cs - x - base[seg]


def _mat_ray(M: np.ndarray, g: np.ndarray, rx: np.ndarray, ry: np.ndarray) -> np.ndarray:
    """``M[g] @ (rx, ry, 1)`` for per-pair rays, without forming the gathered matrices."""
    Mg = M.reshape(-1, 9)[g]
    out = np.empty((len(g), 3))
    for i in range(3):
        out[:, i] = Mg[:, 3 * i] * rx + Mg[:, 3 * i + 1] * ry + Mg[:, 3 * i + 2]
    return out


def _tile_pairs(proj: Projection, opacity, intr, x0, x1, y0, y1, bbox, cutoff_sigma, t_min):
    """Contributions inside one tile ``[x0, x1) x [y0, y1)``."""
    bx0, bx1, by0, by1 = bbox
    gx0 = np.maximum(bx0, x0)
    gx1 = np.minimum(bx1, x1 - 1)
    gy0 = np.maximum(by0, y0)
    gy1 = np.minimum(by1, y1 - 1)
    ok = (gx0 <= gx1) & (gy0 <= gy1)
    gi = np.flatnonzero(ok)
    if len(gi) == 0:
        return None
    nx = gx1[gi] - gx0[gi] + 1
    ny = gy1[gi] - gy0[gi] + 1
    cnt = nx * ny
    g = np.repeat(gi, cnt)
    local = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    nxg = np.repeat(nx, cnt)
    u = np.repeat(gx0[gi], cnt) + local % nxg
    v = np.repeat(gy0[gi], cnt) + local // nxg
    m2 = proj.mean2d[g]
    dx, dy = u - m2[:, 0], v - m2[:, 1]
    Q = proj.conic.reshape(-1, 4)[g]
    power = 0.5 * (Q[:, 0] * dx * dx + 2 * Q[:, 1] * dx * dy + Q[:, 3] * dy * dy)
    keep = np.flatnonzero(power <= 0.5 * cutoff_sigma ** 2)
    g, u, v, power = g[keep], u[keep], v[keep], power[keep]
    delta = np.stack([dx[keep], dy[keep]], axis=1)
    pix = v * intr.width + u
    order = np.argsort(pix, kind="stable")
    g, u, v, delta, power, pix = g[order], u[order], v[order], delta[order], power[order], pix[order]
    gauss = np.exp(-power)
    raw = opacity[g] * gauss
    clamped = raw > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, raw)
    start = _segment_starts(pix)
    T = np.exp(_segmented_exclusive_cumsum(np.log1p(-alpha), start))
    keep = T >= t_min
    idx = np.flatnonzero(keep)
    g, u, v, delta, gauss, alpha, clamped, T, pix = (a[idx] for a in (g, u, v, delta, gauss, alpha, clamped, T, pix))
    rx, ry = (u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy
    ray = np.stack([rx, ry, np.ones(len(u))], axis=1)
    Pr = _mat_ray(proj.prec_c, g, rx, ry)
    qa = rx * Pr[:, 0] + ry * Pr[:, 1] + Pr[:, 2]
    Pmu = proj.prec_mu[g]
    qb = rx * Pmu[:, 0] + ry * Pmu[:, 1] + Pmu[:, 2]
    qc = proj.mu_prec_mu[g] - 1.0
    disc = qb * qb - qa * qc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (qb - sq) / qa
    t2 = (qb + sq) / qa
    hit = (disc >= 0) & (t2 > 0)
    t_hit = np.where(t1 > 0, t1, t2)
    depth = np.where(hit, t_hit, proj.mu_c[g, 2])
    return Pairs(pix, g, delta, gauss, alpha, clamped, T, alpha * T, depth, hit, ray, disc)


def _concat_pairs(parts: list) -> Pairs:
    parts = [p for p in parts if p is not None]
    if not parts:
        z = np.zeros(0)
        return Pairs(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 2)), z, z,
                     np.zeros(0, dtype=bool), z, z, z, np.zeros(0, dtype=bool), np.zeros((0, 3)), z)
    names = Pairs.__dataclass_fields__.keys()
    return Pairs(**{n: np.concatenate([getattr(p, n) for p in parts]) for n in names})


def render(gmap, T_cw: SE3Pose, intr: PinholeIntrinsics, eps2d: float = EPS_2D, near: float = NEAR,
           t_min: float = T_MIN, cutoff_sigma: float = CUTOFF_SIGMA, tile: int = TILE,
           threads: int = 1) -> RenderOutput:
    """Tile-parallel front-to-back compositing.

    Tiles are processed independently and their outputs written to disjoint
    pixels, so results do not depend on ``threads``.
    """
    proj = project_map(gmap, T_cw, intr, eps2d, near)
    opacity = gmap.opacity[proj.rows]
    ex = cutoff_sigma * np.sqrt(proj.cov2d[:, 0, 0])
    ey = cutoff_sigma * np.sqrt(proj.cov2d[:, 1, 1])
    W, H = intr.width, intr.height
    bbox = (np.clip(np.ceil(proj.mean2d[:, 0] - ex), 0, W).astype(np.int64),
            np.clip(np.floor(proj.mean2d[:, 0] + ex), -1, W - 1).astype(np.int64),
            np.clip(np.ceil(proj.mean2d[:, 1] - ey), 0, H).astype(np.int64),
            np.clip(np.floor(proj.mean2d[:, 1] + ey), -1, H - 1).astype(np.int64))
    tiles = [(x, min(x + tile, W), y, min(y + tile, H)) for y in range(0, H, tile) for x in range(0, W, tile)]

    def work(tb):
        return _tile_pairs(proj, opacity, intr, *tb, bbox, cutoff_sigma, t_min)

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex_:
            parts = list(ex_.map(work, tiles))
    else:
        parts = [work(tb) for tb in tiles]
    pairs = _concat_pairs(parts)
    npx = W * H
    w = pairs.weight
    color = np.stack([np.bincount(pairs.pix, w * gmap.color[proj.rows[pairs.g], c], minlength=npx)
                      for c in range(3)], axis=1)
    depth = np.bincount(pairs.pix, w * pairs.depth, minlength=npx)
    nraw = np.stack([np.bincount(pairs.pix, w * proj.normal_c[pairs.g, c], minlength=npx) for c in range(3)],
                    axis=1)
    cov = np.bincount(pairs.pix, w, minlength=npx)
    nn = np.linalg.norm(nraw, axis=1, keepdims=True)
    normal = np.where(nn > 1e-12, nraw / np.where(nn > 1e-12, nn, 1.0), 0.0)
    return RenderOutput(color.reshape(H, W, 3), depth.reshape(H, W), normal.reshape(H, W, 3),
                        cov.reshape(H, W), nraw.reshape(H, W, 3), pairs, proj, T_cw, intr)


def render_reference(gmap, T_cw: SE3Pose, intr: PinholeIntrinsics, eps2d: float = EPS_2D, near: float = NEAR,
                     t_min: float = T_MIN, cutoff_sigma: float = CUTOFF_SIGMA) -> dict:
    """Straightforward per-pixel renderer used as an oracle.

    Each Gaussian is projected on its own with :func:`project_gaussian`; each
    pixel then scans every Gaussian, sorts its contributors by (depth, id)
    and composites them one by one in plain Python floats.
    """
    W, H = intr.width, intr.height
    Tm = T_cw.matrix()
    items = []
    for k in range(len(gmap)):
        g = gmap.gaussian(int(gmap.ids[k]))
        m2, c2, z, valid = project_gaussian(g, T_cw, intr, eps2d, near)
        if not valid:
            continue
        det = c2[0, 0] * c2[1, 1] - c2[0, 1] * c2[1, 0]
        qa, qb, qd = c2[1, 1] / det, -c2[0, 1] / det, c2[0, 0] / det
        R = quat_to_rotmat(g.quat)
        n_w = R[:, int(np.argmin(g.scale))]
        n_c = Tm[:3, :3] @ n_w
        mu_c = Tm[:3, :3] @ g.mean + Tm[:3, 3]
        if float(n_c @ mu_c) > 0:
            n_c = -n_c
        cam_g = type(g)(mu_c, g.scale, quat_mul(T_cw.q, g.quat), g.opacity, g.color)
        items.append((z, int(g.id), float(m2[0]), float(m2[1]), qa, qb, qd, g.opacity, g.color.tolist(),
                      n_c.tolist(), cam_g))
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    nraw = np.zeros((H, W, 3))
    cov = np.zeros((H, W))
    lim = 0.5 * cutoff_sigma ** 2
    for v in range(H):
        for u in range(W):
            hits = []
            for it in items:
                dx, dy = u - it[2], v - it[3]
                power = 0.5 * (it[4] * dx * dx + 2 * it[5] * dx * dy + it[6] * dy * dy)
                if power <= lim:
                    hits.append((it[0], it[1], power, it))
            hits.sort(key=lambda h: (h[0], h[1]))
            T = 1.0
            for z, _, power, it in hits:
                if T < t_min:
                    break
                a = min(it[7] * math.exp(-power), ALPHA_MAX)
                w = a * T
                ray = ((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0)
                t = ray_ellipsoid_depth(it[10], ray)
                d = z if t is None else t
                for c in range(3):
                    color[v, u, c] += w * it[8][c]
                    nraw[v, u, c] += w * it[9][c]
                depth[v, u] += w * d
                cov[v, u] += w
                T *= 1.0 - a
    nn = np.linalg.norm(nraw, axis=2, keepdims=True)
    normal = np.where(nn > 1e-12, nraw / np.where(nn > 1e-12, nn, 1.0), 0.0)
    return {"color": color, "depth": depth, "normal": normal, "coverage": cov}


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@dataclass
class MapGrads:
    """Gradients for the visible rows of the map (indexed like ``rows``)."""

    rows: np.ndarray
    mean: np.ndarray       # (n, 3)
    scale: np.ndarray      # (n, 3) d/d semi-axis
    rotation: np.ndarray   # (n, 3) left tangent of the Gaussian rotation
    opacity: np.ndarray    # (n,)
    color: np.ndarray      # (n, 3)
    pose: np.ndarray       # (6,) left twist (v, omega) on T_cw

    def scatter(self, n_rows: int) -> dict:
        """Dense per-row arrays of length ``n_rows``."""
        out = {}
        for name, width in (("mean", 3), ("scale", 3), ("rotation", 3), ("opacity", 0), ("color", 3)):
            shape = (n_rows, width) if width else (n_rows,)
            arr = np.zeros(shape)
            np.add.at(arr, self.rows, getattr(self, name))
            out[name] = arr
        return out


def render_backward(out: RenderOutput, gmap, G_color: np.ndarray, G_depth: np.ndarray,
                    G_nraw: np.ndarray) -> MapGrads:
    """Chain image-space gradients back to Gaussian parameters and the pose."""
    pr, pp = out.proj, out.pairs
    n = len(pr)
    intr = out.intr
    if n == 0 or len(pp) == 0:
        z3 = np.zeros((n, 3))
        return MapGrads(pr.rows, z3, z3.copy(), z3.copy(), np.zeros(n), z3.copy(), np.zeros(6))
    gc = G_color.reshape(-1, 3)[pp.pix]
    gd = G_depth.reshape(-1)[pp.pix]
    gn = G_nraw.reshape(-1, 3)[pp.pix]
    col = gmap.color[pr.rows]
    g = pp.g
    cg, ng = col[g], pr.normal_c[g]
    f = (gc[:, 0] * cg[:, 0] + gc[:, 1] * cg[:, 1] + gc[:, 2] * cg[:, 2] + gd * pp.depth
         + gn[:, 0] * ng[:, 0] + gn[:, 1] * ng[:, 1] + gn[:, 2] * ng[:, 2])
    w = pp.weight

    def gsum(vals, width=0):
        if width == 0:
            return np.bincount(g, vals, minlength=n)
        return np.stack([np.bincount(g, vals[:, c], minlength=n) for c in range(width)], axis=1)

    G_col = gsum(w[:, None] * gc, 3)
    G_nc = gsum(w[:, None] * gn, 3)
    start = _segment_starts(pp.pix)
    wf = w * f
    incl = _segmented_exclusive_cumsum(wf, start) + wf
    seg = np.cumsum(start) - 1
    last = np.r_[np.flatnonzero(start)[1:] - 1, len(wf) - 1]
    total = incl[last][seg]
    suffix = total - incl
    dA = pp.T * f - suffix / (1.0 - pp.alpha)
    dA = np.where(pp.clamped, 0.0, dA)
    op = gmap.opacity[pr.rows]
    G_op = gsum(dA * pp.gauss)
    d_power = -dA * op[g] * pp.gauss
    Cn = pr.conic
    d0, d1 = pp.delta[:, 0], pp.delta[:, 1]
    Cg = Cn.reshape(-1, 4)[g]
    G_m2 = np.stack([np.bincount(g, -d_power * (Cg[:, 0] * d0 + Cg[:, 1] * d1), minlength=n),
                     np.bincount(g, -d_power * (Cg[:, 2] * d0 + Cg[:, 3] * d1), minlength=n)], axis=1)
    hp = 0.5 * d_power
    G_Q = np.empty((n, 2, 2))
    G_Q[:, 0, 0] = np.bincount(g, hp * d0 * d0, minlength=n)
    G_Q[:, 0, 1] = G_Q[:, 1, 0] = np.bincount(g, hp * d0 * d1, minlength=n)
    G_Q[:, 1, 1] = np.bincount(g, hp * d1 * d1, minlength=n)
    # depth through the ray-ellipsoid root (or the mean depth on a miss)
    dt = w * gd
    G_mu_c = np.zeros((n, 3))
    G_mu_c[:, 2] = np.bincount(g, np.where(pp.hit, 0.0, dt), minlength=n)
    G_cov_c = np.zeros((n, 3, 3))
    h = np.flatnonzero(pp.hit)
    if len(h):
        gh, rx, ry = g[h], pp.ray[h, 0], pp.ray[h, 1]
        Pe = pp.depth[h, None] * _mat_ray(pr.prec_c, gh, rx, ry) - pr.prec_mu[gh]
        rPe = rx * Pe[:, 0] + ry * Pe[:, 1] + Pe[:, 2]
        dth = dt[h]
        for a in range(3):
            G_mu_c[:, a] += np.bincount(gh, dth * Pe[:, a] / rPe, minlength=n)
        dS = dth / (2.0 * rPe)
        for a in range(3):
            for b in range(a, 3):
                G_cov_c[:, a, b] = np.bincount(gh, dS * Pe[:, a] * Pe[:, b], minlength=n)
                G_cov_c[:, b, a] = G_cov_c[:, a, b]
    # footprint covariance and centre
    C = pr.conic
    G_cov2d = -(C @ G_Q @ C)
    G_cov2d = 0.5 * (G_cov2d + np.swapaxes(G_cov2d, 1, 2))
    J = pr.J
    Jt = np.swapaxes(J, 1, 2)
    G_cov_c += Jt @ G_cov2d @ J
    G_J = 2.0 * (G_cov2d @ J @ pr.cov_c)
    G_mu_c += (Jt @ G_m2[:, :, None])[:, :, 0]
    x, y, z = pr.mu_c[:, 0], pr.mu_c[:, 1], pr.mu_c[:, 2]
    fx, fy = intr.fx, intr.fy
    G_mu_c[:, 0] += G_J[:, 0, 2] * (-fx / z ** 2)
    G_mu_c[:, 1] += G_J[:, 1, 2] * (-fy / z ** 2)
    G_mu_c[:, 2] += (G_J[:, 0, 0] * (-fx / z ** 2) + G_J[:, 0, 2] * (2 * fx * x / z ** 3)
                     + G_J[:, 1, 1] * (-fy / z ** 2) + G_J[:, 1, 2] * (2 * fy * y / z ** 3))
    G_cov_c = 0.5 * (G_cov_c + np.swapaxes(G_cov_c, 1, 2))
    # to world / Gaussian parameters
    R = out.T_cw.R
    G_mean = G_mu_c @ R
    G_cov_w = R.T @ G_cov_c @ R
    Rg = pr.R_g
    s = gmap.scale[pr.rows]
    G_scale = 2.0 * s * np.einsum("nji,nji->ni", Rg, G_cov_w @ Rg)
    X = pr.cov_w @ G_cov_w - G_cov_w @ pr.cov_w
    n_w = pr.normal_c @ R
    G_nw = G_nc @ R
    G_rot = _vee_skew(X) + np.cross(n_w, G_nw)
    Xc = pr.cov_c @ G_cov_c - G_cov_c @ pr.cov_c
    G_w = (np.cross(pr.mu_c, G_mu_c) + _vee_skew(Xc) + np.cross(pr.normal_c, G_nc)).sum(axis=0)
    G_pose = np.concatenate([G_mu_c.sum(axis=0), G_w])
    return MapGrads(pr.rows, G_mean, G_scale, G_rot, G_op, G_col, G_pose)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    color: float = 1.0
    depth: float = 0.1
    normal: float = 0.05
    scale: float = 0.01

    def __post_init__(self):
        for name in ("color", "depth", "normal", "scale"):
            if not getattr(self, name) >= 0:
                raise InvalidArgument(f"loss weight {name} must be non-negative")

    def to_json(self) -> dict:
        return {"color": self.color, "depth": self.depth, "normal": self.normal, "scale": self.scale}


@dataclass
class ViewTarget:
    image: np.ndarray
    depth: np.ndarray
    depth_valid: np.ndarray
    normal: np.ndarray
    normal_valid: np.ndarray

    @classmethod
    def from_keyframe(cls, kf, cam: str) -> "ViewTarget":
        view = kf.views[cam]
        depth = view.refined_depth()
        dvalid = view.valid & np.isfinite(depth)
        nvalid = view.valid & (np.linalg.norm(view.normal_prior, axis=2) > 0.5)
        return cls(view.image, np.where(dvalid, depth, 0.0), dvalid, view.normal_prior, nvalid)


@dataclass
class LossResult:
    total: float
    terms: dict
    G_color: np.ndarray
    G_depth: np.ndarray
    G_nraw: np.ndarray
    G_scale: np.ndarray      # (n_visible, 3)
    G_exposure: np.ndarray   # (3, 4)


def _norm_grad(r: np.ndarray) -> tuple[float, np.ndarray]:
    nrm = float(np.sqrt(np.sum(r * r)))
    return nrm, (r / nrm if nrm > 0 else np.zeros_like(r))


def identity_exposure() -> np.ndarray:
    return np.hstack([np.eye(3), np.zeros((3, 1))])


def apply_exposure(color: np.ndarray, A: np.ndarray | None) -> np.ndarray:
    if A is None:
        return color
    return color @ A[:, :3].T + A[:, 3]


def map_loss(out: RenderOutput, target, weights: LossWeights, scales: np.ndarray,
             exposure: np.ndarray | None = None) -> LossResult:
    """Weighted sum of L2 norms of the color, depth, normal and scale residuals.

    ``scales`` are the semi-axes of the Gaussians visible in this view
    (``gmap.scale[out.proj.rows]``); the scale term pulls each of them towards
    their common mean.
    """
    H, W = out.depth.shape
    C_hat = out.color
    C_exp = apply_exposure(C_hat, exposure)
    rc = C_exp - target.image
    lc, gc = _norm_grad(rc)
    G_cexp = weights.color * gc
    if exposure is None:
        G_color = G_cexp
        G_A = np.zeros((3, 4))
    else:
        G_color = G_cexp @ exposure[:, :3]
        G_A = np.hstack([np.einsum("hwi,hwj->ij", G_cexp, C_hat), G_cexp.sum(axis=(0, 1))[:, None]])
    dv = target.depth_valid
    rd = np.where(dv, out.depth - target.depth, 0.0)
    ld, gd = _norm_grad(rd)
    G_depth = weights.depth * gd
    nv = target.normal_valid
    cosang = np.einsum("hwi,hwi->hw", out.normal, np.where(nv[..., None], target.normal, 0.0))
    rn = np.where(nv, 1.0 - cosang, 0.0)
    ln, gn = _norm_grad(rn)
    G_nhat = -(weights.normal * gn)[..., None] * target.normal
    nn = np.linalg.norm(out.normal_raw, axis=2, keepdims=True)
    ok = nn > 1e-12
    proj_g = G_nhat - out.normal * np.einsum("hwi,hwi->hw", out.normal, G_nhat)[..., None]
    G_nraw = np.where(ok & nv[..., None], proj_g / np.where(ok, nn, 1.0), 0.0)
    s = np.asarray(scales, dtype=float).reshape(-1, 3)
    if len(s):
        rs = s - s.mean()
        ls, gs = _norm_grad(rs)
        G_s = weights.scale * (gs - gs.mean())
    else:
        ls, G_s = 0.0, np.zeros((0, 3))
    terms = {"color": lc, "depth": ld, "normal": ln, "scale": ls}
    total = weights.color * lc + weights.depth * ld + weights.normal * ln + weights.scale * ls
    return LossResult(float(total), terms, G_color, G_depth, G_nraw, G_s, G_A)


def view_loss_and_grads(gmap, kf, cam: str, rig: RigCalibration, weights: LossWeights,
                        exposure: np.ndarray | None = None, render_kw: dict | None = None):
    """Render one keyframe view and return ``(loss, MapGrads, body pose grad, exposure grad, output)``.

    The body-pose gradient is with respect to a left twist on the body pose
    (``T_wb <- exp(eta) T_wb``).
    """
    T_cw = rig.world_to_camera(kf.pose, cam)
    out = render(gmap, T_cw, rig.intrinsics(cam), **(render_kw or {}))
    target = ViewTarget.from_keyframe(kf, cam)
    res = map_loss(out, target, weights, gmap.scale[out.proj.rows], exposure)
    grads = render_backward(out, gmap, res.G_color, res.G_depth, res.G_nraw)
    grads.scale = grads.scale + res.G_scale
    g_body = -T_cw.adjoint().T @ grads.pose
    return res, grads, g_body, res.G_exposure, out


# ---------------------------------------------------------------------------
# first-order map optimization
# ---------------------------------------------------------------------------

@dataclass
class LearningRates:
    mean: float = 1.6e-4       # multiplied by the scene extent
    scale: float = 5e-3        # on log-scale
    rotation: float = 1e-3     # on the rotation tangent
    opacity: float = 5e-2      # on the opacity logit
    color: float = 2.5e-3
    pose: float = 1e-4
    exposure: float = 1e-3


class Adam:
    """Row-wise Adam whose moments follow rows through insertions and deletions."""

    def __init__(self, lr: float, width: int, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-15):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.width = width
        self.m = np.zeros((0, width))
        self.v = np.zeros((0, width))
        self.t = np.zeros(0, dtype=np.int64)

    def resize(self, keep_old: np.ndarray, n_new: int) -> None:
        self.m = np.concatenate([self.m[keep_old], np.zeros((n_new, self.width))])
        self.v = np.concatenate([self.v[keep_old], np.zeros((n_new, self.width))])
        self.t = np.concatenate([self.t[keep_old], np.zeros(n_new, dtype=np.int64)])

    def step(self, grad: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Update moments of ``rows`` (all when ``None``) and return their steps."""
        grad = np.asarray(grad, dtype=float).reshape(-1, self.width)
        rows = np.arange(len(self.m)) if rows is None else rows
        self.t[rows] += 1
        self.m[rows] = self.b1 * self.m[rows] + (1 - self.b1) * grad
        self.v[rows] = self.b2 * self.v[rows] + (1 - self.b2) * grad * grad
        t = self.t[rows][:, None].astype(float)
        mh = self.m[rows] / (1 - self.b1 ** t)
        vh = self.v[rows] / (1 - self.b2 ** t)
        return -self.lr * mh / (np.sqrt(vh) + self.eps)


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class MapOptimizer:
    """Adam over Gaussian parameters, optional body poses and exposures.

    Moments are keyed by Gaussian id, so they survive densification and
    pruning between calls.
    """

    def __init__(self, extent: float = 1.0, lr: LearningRates | None = None):
        self.lr = lr or LearningRates()
        self.extent = float(extent)
        self.ids = np.zeros(0, dtype=np.int64)
        self.groups = {
            "mean": Adam(self.lr.mean * self.extent, 3),
            "scale": Adam(self.lr.scale, 3),
            "rotation": Adam(self.lr.rotation, 3),
            "opacity": Adam(self.lr.opacity, 1),
            "color": Adam(self.lr.color, 3),
        }
        self.pose_states: dict = {}
        self.exposure_states: dict = {}

    def sync(self, gmap) -> None:
        keep = np.isin(self.ids, gmap.ids)
        new = ~np.isin(gmap.ids, self.ids)
        for adam in self.groups.values():
            adam.resize(keep, int(new.sum()))
        merged = np.concatenate([self.ids[keep], gmap.ids[new]])
        order = np.argsort(merged, kind="stable")
        for adam in self.groups.values():
            adam.m, adam.v, adam.t = adam.m[order], adam.v[order], adam.t[order]
        self.ids = merged[order]

    def step_map(self, gmap, grads: dict) -> None:
        self.sync(gmap)
        g = self.groups
        gmap.mean += g["mean"].step(grads["mean"])
        d = g["scale"].step(grads["scale"] * gmap.scale)
        gmap.scale = gmap.scale * np.exp(d)
        d = g["rotation"].step(grads["rotation"])
        gmap.quat = quat_normalize(quat_mul(so3_exp_quat(d), gmap.quat))
        d = g["opacity"].step((grads["opacity"] * gmap.opacity * (1 - gmap.opacity))[:, None])
        gmap.opacity = np.clip(_sigmoid(_logit(gmap.opacity) + d[:, 0]), 1e-6, 1 - 1e-6)
        gmap.color = np.clip(gmap.color + g["color"].step(grads["color"]), 0.0, 1.0)

    def step_pose(self, kf_id: int, pose: SE3Pose, grad: np.ndarray) -> SE3Pose:
        adam = self.pose_states.setdefault(kf_id, Adam(self.lr.pose, 6))
        if len(adam.m) == 0:
            adam.resize(np.zeros(0, dtype=bool), 1)
        d = adam.step(grad[None, :])[0]
        return se3_exp(d) @ pose

    def step_exposure(self, kf_id: int, A: np.ndarray, grad: np.ndarray) -> np.ndarray:
        adam = self.exposure_states.setdefault(kf_id, Adam(self.lr.exposure, 12))
        if len(adam.m) == 0:
            adam.resize(np.zeros(0, dtype=bool), 1)
        return A + adam.step(grad.reshape(1, 12))[0].reshape(3, 4)


@dataclass
class MapOptimizeResult:
    loss_trace: list = field(default_factory=list)
    added: int = 0
    removed: int = 0


def optimize_map(gmap, keyframes, rig: RigCalibration, iters: int, weights: LossWeights | None = None,
                 with_pose: bool = False, with_exposure: bool = False, optimizer: MapOptimizer | None = None,
                 exposures: dict | None = None, fixed_poses: set | None = None, cameras=None,
                 densify_every: int = 0, densify_kf=None, densify_stride: int = 2, prune_every: int = 0,
                 alpha_min: float = 0.02, render_kw: dict | None = None,
                 with_map: bool = True) -> MapOptimizeResult:
    """Joint first-order refinement over every view of ``keyframes``.

    Each iteration renders all views, sums their losses and takes one Adam
    step. Poses are updated in place on the keyframes (except ``fixed_poses``)
    and exposures in ``exposures`` when the respective flags are set; the
    Gaussians themselves stay frozen when ``with_map`` is false.
    Densification of ``densify_kf`` and pruning run every ``densify_every`` /
    ``prune_every`` iterations when those are positive.
    """
    from .gsmap import densify, prune

    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    weights = weights or LossWeights()
    opt = optimizer or MapOptimizer()
    exposures = exposures if exposures is not None else {}
    fixed_poses = fixed_poses or set()
    cams = list(cameras) if cameras is not None else rig.ids
    result = MapOptimizeResult()
    for it in range(1, iters + 1):
        total = 0.0
        acc = {name: np.zeros((len(gmap),) + ((3,) if name != "opacity" else ()))
               for name in ("mean", "scale", "rotation", "opacity", "color")}
        pose_g, exp_g = {}, {}
        for kf in keyframes:
            A = exposures.get(kf.index) if with_exposure else None
            if with_exposure and A is None:
                A = exposures[kf.index] = identity_exposure()
            for cam in cams:
                res, grads, g_body, g_A, _ = view_loss_and_grads(gmap, kf, cam, rig, weights, A, render_kw)
                total += res.total
                for name, arr in grads.scatter(len(gmap)).items():
                    acc[name] += arr
                pose_g[kf.index] = pose_g.get(kf.index, 0.0) + g_body
                exp_g[kf.index] = exp_g.get(kf.index, 0.0) + g_A
        if not np.isfinite(total):
            raise OptimizationError(f"non-finite map loss at iteration {it}",
                                    state={"iteration": it, "map": gmap.copy(), "trace": result.loss_trace})
        result.loss_trace.append(total)
        if with_map:
            opt.step_map(gmap, acc)
        if with_pose:
            for kf in keyframes:
                if kf.index not in fixed_poses:
                    kf.pose = opt.step_pose(kf.index, kf.pose, pose_g[kf.index])
        if with_exposure:
            for kf in keyframes:
                exposures[kf.index] = opt.step_exposure(kf.index, exposures[kf.index], exp_g[kf.index])
        if densify_every > 0 and densify_kf is not None and it % densify_every == 0:
            for cam in cams:
                out = render(gmap, rig.world_to_camera(densify_kf.pose, cam), rig.intrinsics(cam),
                             **(render_kw or {}))
                result.added += len(densify(gmap, densify_kf, cam, rig, out.coverage, densify_stride))
        if prune_every > 0 and it % prune_every == 0:
            result.removed += len(prune(gmap, alpha_min))
    return result
