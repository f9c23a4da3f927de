"""Random instance builders and finite-difference checkers shared by the test modules."""

import numpy as np
import scipy.sparse as sp

from mcgs import gsmap, jdsa, mcba
from mcgs import rasterizer as rz
from mcgs.geometry import (
    PinholeIntrinsics, RigCalibration, RigCamera, SE3Pose, pair_transform, quat_mul, quat_normalize,
    retract, se3_exp, so3_exp_quat,
)
from mcgs.synth import CorrespondenceSet, Edge

FD_STEP = 1e-6
ABS_FLOOR = 1e-7
RENDER_FD_STEP = 4e-6
GROUP_FLOOR = 1e-4


def rel_err(a, b, floor=ABS_FLOOR):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


# ---------------------------------------------------------------------------
# bundle adjustment
# ---------------------------------------------------------------------------

def random_rig(rng, n_cam=2, width=24, height=18, f=20.0):
    intr = PinholeIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)
    cams = [RigCamera("c0", intr, SE3Pose())]
    for k in range(1, n_cam):
        cams.append(RigCamera(f"c{k}", intr, se3_exp(np.r_[rng.normal(0, 0.2, 3), rng.normal(0, 0.15, 3)])))
    return RigCalibration(tuple(cams))


def random_ba_problem(rng, n_kf=2, n_cam=2, stride=4, n_samples=12, with_grids=False, noise=0.5,
                      bounds_margin=1e3):
    """Small problem with non-zero residuals on every temporal and cross-view edge."""
    rig = random_rig(rng, n_cam)
    poses = {k: se3_exp(np.r_[rng.normal(0, 0.1, 3), rng.normal(0, 0.05, 3)]) for k in range(n_kf)}
    intr = rig.intrinsics("c0")
    px_all = mcba.sample_pixels(intr, stride)
    inv = {(k, c): rng.uniform(0.2, 0.5, len(px_all)) for k in poses for c in rig.ids}
    edges = [Edge(i, c, j, c, "temporal") for i in poses for j in poses if i != j for c in rig.ids]
    edges += [Edge(k, ci, k, cj, "cross_view") for k in poses for ci in rig.ids for cj in rig.ids if ci != cj]
    corr = []
    for e in edges:
        idx = rng.choice(len(px_all), size=n_samples, replace=False)
        px = px_all[idx]
        T = pair_transform(e.kind, poses[e.i], poses[e.j], rig, e.cam_i, e.cam_j)
        X = intr.rays(px) / inv[(e.i, e.cam_i)][idx][:, None]
        Y = T.apply(X)
        tgt = np.stack([intr.fx * Y[:, 0] / Y[:, 2] + intr.cx, intr.fy * Y[:, 1] / Y[:, 2] + intr.cy], 1)
        tgt = tgt + rng.normal(0, noise, tgt.shape)
        corr.append(CorrespondenceSet(e, idx, px, tgt, rng.uniform(0.2, 1.5, (n_samples, 2))))
    grids = priors = None
    if with_grids:
        grids = {key: jdsa.ScaleGrid(rng.uniform(0.8, 1.2, (3, 4)), intr.width, intr.height) for key in inv}
        priors = {key: 1.0 / v * rng.uniform(0.9, 1.1, len(v)) for key, v in inv.items()}
    return mcba.BAProblem(rig, poses, inv, corr, {0}, stride, bounds_margin=bounds_margin,
                          grids=grids, prior_depth=priors)


def mcba_fd_error(problem, h=FD_STEP):
    """Worst relative error of every analytic edge Jacobian (pose and depth) against central differences."""
    worst = 0.0
    for cs in problem.correspondences:
        e = cs.edge
        t = mcba.edge_terms(problem, cs, jacobians=True)
        # source body pose; the target pose enters with the opposite sign
        for pose_id, sign in ((e.i, 1.0), (e.j, -1.0)):
            if e.kind != "temporal":
                break
            fd = np.zeros((len(cs), 2, 6))
            for a in range(6):
                dx = np.zeros(6)
                dx[a] = h
                rp = mcba.edge_terms(problem, cs, {**problem.poses, pose_id: retract(problem.poses[pose_id], dx)}).r
                rm = mcba.edge_terms(problem, cs, {**problem.poses, pose_id: retract(problem.poses[pose_id], -dx)}).r
                fd[:, :, a] = (rp - rm) / (2 * h)
            worst = max(worst, rel_err(sign * t.J_i, fd))
        key = (e.i, e.cam_i)
        d = problem.inv_depths[key]
        fd_d = np.zeros((len(cs), 2))
        for n, k in enumerate(cs.src_index):
            dp, dm = d.copy(), d.copy()
            dp[k] += h
            dm[k] -= h
            rp = mcba.edge_terms(problem, cs, inv_depths={**problem.inv_depths, key: dp}).r[n]
            rm = mcba.edge_terms(problem, cs, inv_depths={**problem.inv_depths, key: dm}).r[n]
            fd_d[n] = (rp - rm) / (2 * h)
        worst = max(worst, rel_err(t.J_d, fd_d))
    return worst


def jdsa_fd_error(problem, h=FD_STEP):
    """Worst relative error of the analytic alignment grid Jacobian."""
    worst = 0.0
    for key in problem.depth_keys:
        g = problem.grids[key]
        J = jdsa.alignment_grid_jacobian(problem, key, g)
        fd = np.zeros_like(J)
        for c in range(g.values.size):
            vp, vm = g.values.copy().ravel(), g.values.copy().ravel()
            vp[c] += h
            vm[c] -= h
            ap = jdsa.alignment_residuals(problem, {**problem.grids, key: jdsa.ScaleGrid(vp.reshape(g.shape), g.width, g.height)})[key]
            am = jdsa.alignment_residuals(problem, {**problem.grids, key: jdsa.ScaleGrid(vm.reshape(g.shape), g.width, g.height)})[key]
            fd[:, c] = (ap - am) / (2 * h)
        worst = max(worst, rel_err(J, fd))
    return worst


def random_normal_equations(rng, k_poses, n_depths, density=0.3, damping=1e-4):
    """Block system whose full matrix is SPD: ``B`` dominates ``E C^-1 E^T``."""
    k6 = 6 * k_poses
    E = sp.random(k6, n_depths, density=density, random_state=np.random.RandomState(rng.integers(2**31)),
                  data_rvs=lambda n: rng.normal(size=n), format="csr")
    C = rng.uniform(0.5, 5.0, n_depths)
    A = rng.normal(size=(k6, k6))
    B = (E.multiply(1.0 / C[None, :]) @ E.T).toarray() + A @ A.T + np.eye(k6)
    return mcba.NormalEquations(B, E, C, rng.normal(size=k6), rng.normal(size=n_depths), damping,
                                pose_ids=list(range(k_poses)))


# ---------------------------------------------------------------------------
# rasterizer
# ---------------------------------------------------------------------------

def random_map(rng, n, depth=(2.0, 5.0), spread=1.0, scale=(0.05, 0.4)):
    """Gaussians in front of an identity camera looking down +z."""
    m = gsmap.GaussianMap()
    m.add(gsmap.GaussianBatch(
        np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)],
        rng.uniform(*scale, (n, 3)),
        quat_normalize(rng.normal(size=(n, 4))),
        rng.uniform(0.05, 0.95, n),
        rng.uniform(0.0, 1.0, (n, 3)),
        np.zeros(n, dtype=np.int64)))
    m.register_anchor(0, SE3Pose.identity())
    return m


def square_intrinsics(size=64, f=50.0):
    c = (size - 1) / 2.0
    return PinholeIntrinsics(f, f, c, c, size, size)


def random_target(rng, H, W):
    n = rng.normal(size=(H, W, 3)) * [1, 1, 0.2] + [0, 0, -2]
    n /= np.linalg.norm(n, axis=2, keepdims=True)
    return rz.ViewTarget(rng.uniform(0, 1, (H, W, 3)), rng.uniform(2, 4, (H, W)), rng.random((H, W)) > 0.1,
                         n, rng.random((H, W)) > 0.1)


def render_fd_errors(rng, n=6, size=24, h=RENDER_FD_STEP, cutoff_sigma=8.0):
    """Worst relative error per parameter group of the mapping-loss gradient.

    A wide footprint cutoff keeps the loss smooth so central differences are meaningful.
    """
    m = random_map(rng, n, depth=(2.0, 4.0), spread=0.6, scale=(0.1, 0.4))
    intr = square_intrinsics(size, 20.0)
    tgt = random_target(rng, size, size)
    weights = rz.LossWeights(1.0, 0.7, 0.5, 0.3)
    A = rz.identity_exposure() + rng.normal(0, 0.05, (3, 4))
    T = se3_exp(rng.normal(0, 0.05, 6))
    kw = dict(cutoff_sigma=cutoff_sigma)

    def loss(mm, TT, AA):
        o = rz.render(mm, TT, intr, **kw)
        return rz.map_loss(o, tgt, weights, mm.scale[o.proj.rows], AA).total

    out = rz.render(m, T, intr, **kw)
    res = rz.map_loss(out, tgt, weights, m.scale[out.proj.rows], A)
    g = rz.render_backward(out, m, res.G_color, res.G_depth, res.G_nraw)
    g.scale = g.scale + res.G_scale
    G = g.scatter(len(m))

    def central(perturb, step):
        vals = []
        for sgn in (1.0, -1.0):
            mm = m.copy()
            TT, AA = perturb(mm, sgn * step)
            vals.append(loss(mm, TT, AA))
        return (vals[0] - vals[1]) / (2 * step)

    def fd(perturb):
        # Richardson extrapolation of two central differences; footprints close to
        # ray tangency have enough curvature that the plain O(h^2) error shows up
        return (4.0 * central(perturb, h / 2) - central(perturb, h)) / 3.0

    pairs = {k: ([], []) for k in ("mean", "scale", "rotation", "opacity", "color", "pose", "exposure")}

    def upd(name, analytic, numeric):
        pairs[name][0].append(analytic)
        pairs[name][1].append(numeric)

    for k in range(n):
        for c in range(3):
            def p_mean(mm, d, k=k, c=c):
                mm.mean[k, c] += d
                return T, A
            upd("mean", G["mean"][k, c], fd(p_mean))

            def p_scale(mm, d, k=k, c=c):
                mm.scale[k, c] += d
                return T, A
            upd("scale", G["scale"][k, c], fd(p_scale))

            def p_rot(mm, d, k=k, c=c):
                w = np.zeros(3)
                w[c] = d
                mm.quat[k] = quat_mul(so3_exp_quat(w), mm.quat[k])
                return T, A
            upd("rotation", G["rotation"][k, c], fd(p_rot))

            def p_color(mm, d, k=k, c=c):
                mm.color[k, c] += d
                return T, A
            upd("color", G["color"][k, c], fd(p_color))

        def p_op(mm, d, k=k):
            mm.opacity[k] += d
            return T, A
        upd("opacity", G["opacity"][k], fd(p_op))
    for c in range(6):
        def p_pose(mm, d, c=c):
            x = np.zeros(6)
            x[c] = d
            return se3_exp(x) @ T, A
        upd("pose", g.pose[c], fd(p_pose))
    for i in range(3):
        for j in range(4):
            def p_exp(mm, d, i=i, j=j):
                B = A.copy()
                B[i, j] += d
                return T, B
            upd("exposure", res.G_exposure[i, j], fd(p_exp))
    # the loss sums hundreds of pixels, so entries far below the group's scale only carry roundoff
    return {k: rel_err(a, b, max(ABS_FLOOR, GROUP_FLOOR * np.max(np.abs(b)))) for k, (a, b) in pairs.items()}


def render_outputs_close(out, ref):
    """L-infinity distance over colour, depth, normal and coverage."""
    return max(float(np.abs(out.color - ref["color"]).max()), float(np.abs(out.depth - ref["depth"]).max()),
               float(np.abs(out.normal - ref["normal"]).max()), float(np.abs(out.coverage - ref["coverage"]).max()))


def blend_weight_sums(out):
    """Per-pixel sum of retained blend weights."""
    H, W = out.depth.shape
    s = np.zeros(H * W)
    np.add.at(s, out.pairs.pix, out.pairs.weight)
    return s.reshape(H, W)
