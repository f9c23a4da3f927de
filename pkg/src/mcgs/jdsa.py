"""Joint depth-scale alignment with per-keyframe bilinear scale grids.

The grid value ``B(p, s)`` is the multiplicative bias of the depth prior, so the
corrected prior depth is ``d_prior / B``. The alignment term compares its
inverse ``B(p, s) / d_prior`` with the optimized inverse depth ``d(p)`` at every
sample pixel, and both terms of the objective share the bundle-adjustment
variable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InvalidArgument

log = logging.getLogger(__name__)

S_MIN, S_MAX = 0.1, 10.0


@dataclass
class ScaleGrid:
    """``m x n`` positive scale values spread uniformly over a ``width x height`` image.

    Cell ``(i, j)`` has its centre at pixel
    ``((j + 0.5) * width / n - 0.5, (i + 0.5) * height / m - 0.5)``.
    """

    values: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidArgument("scale grid values must be a 2-D array")
        if np.any(~(self.values > 0)):
            raise InvalidArgument("scale grid values must be positive")

    @classmethod
    def constant(cls, m: int, n: int, width: int, height: int, value: float = 1.0) -> "ScaleGrid":
        return cls(np.full((m, n), float(value)), width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy(self) -> "ScaleGrid":
        return ScaleGrid(self.values.copy(), self.width, self.height)

    def cell_centre(self, i: int, j: int) -> np.ndarray:
        m, n = self.shape
        return np.array([(j + 0.5) * self.width / n - 0.5, (i + 0.5) * self.height / m - 0.5])

    def weights(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear stencil for each pixel: flat cell indices ``(N, 4)`` and weights ``(N, 4)``."""
        px = np.asarray(pixels, dtype=float).reshape(-1, 2)
        u, v = px[:, 0], px[:, 1]
        if np.any((u < -0.5) | (u > self.width - 0.5) | (v < -0.5) | (v > self.height - 0.5)):
            raise InvalidArgument("pixel outside the image covered by the scale grid")
        m, n = self.shape
        gx = np.clip((u + 0.5) * n / self.width - 0.5, 0.0, n - 1)
        gy = np.clip((v + 0.5) * m / self.height - 0.5, 0.0, m - 1)
        x0 = np.minimum(np.floor(gx).astype(int), max(n - 2, 0))
        y0 = np.minimum(np.floor(gy).astype(int), max(m - 2, 0))
        x1 = np.minimum(x0 + 1, n - 1)
        y1 = np.minimum(y0 + 1, m - 1)
        fx = gx - x0
        fy = gy - y0
        idx = np.stack([y0 * n + x0, y0 * n + x1, y1 * n + x0, y1 * n + x1], axis=1)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
        return idx, w

    def interpolate(self, pixels: np.ndarray) -> np.ndarray:
        idx, w = self.weights(pixels)
        return (self.values.reshape(-1)[idx] * w).sum(axis=1)

    def raster(self) -> np.ndarray:
        v, u = np.mgrid[0:self.height, 0:self.width]
        px = np.stack([u.ravel(), v.ravel()], axis=1).astype(float)
        return self.interpolate(px).reshape(self.height, self.width)


def interp_scale(grid: ScaleGrid, pixel) -> float:
    """Per-pixel scale factor by bilinear interpolation of the grid."""
    return float(grid.interpolate(np.asarray(pixel, dtype=float).reshape(1, 2))[0])


# ---------------------------------------------------------------------------
# joint depth-scale alignment over a bundle-adjustment problem
# ---------------------------------------------------------------------------

def _sample_pixels(problem, key) -> np.ndarray:
    from .mcba import sample_pixels

    return sample_pixels(problem.rig.intrinsics(key[1]), problem.stride)


def _prior_inverse(problem, key) -> tuple[np.ndarray, np.ndarray]:
    prior = np.asarray(problem.prior_depth[key], dtype=float)
    valid = np.isfinite(prior) & (prior > 0)
    return np.where(valid, 1.0 / np.where(valid, prior, 1.0), 0.0), valid


def alignment_residuals(problem, grids: dict | None = None, inv_depths: dict | None = None) -> dict:
    """Per view: ``a = B(p, s) / d_prior - d`` at valid sample pixels (0 elsewhere)."""
    grids = problem.grids if grids is None else grids
    inv_depths = problem.inv_depths if inv_depths is None else inv_depths
    out = {}
    for key in problem.depth_keys:
        pinv, valid = _prior_inverse(problem, key)
        B = grids[key].interpolate(_sample_pixels(problem, key))
        out[key] = np.where(valid, pinv * B - inv_depths[key], 0.0)
    return out


def alignment_grid_jacobian(problem, key, grid: ScaleGrid | None = None) -> np.ndarray:
    """Dense Jacobian ``da / ds`` of one view's alignment residuals, shape ``(N, m * n)``."""
    grid = problem.grids[key] if grid is None else grid
    pinv, valid = _prior_inverse(problem, key)
    idx, w = grid.weights(_sample_pixels(problem, key))
    J = np.zeros((len(idx), grid.values.size))
    np.add.at(J, (np.repeat(np.arange(len(idx)), 4), idx.ravel()), (pinv[:, None] * w).ravel())
    return J


def jdsa_cost(problem, align_weight: float = 1.0, grids: dict | None = None,
              inv_depths: dict | None = None) -> float:
    """Reprojection cost plus the weighted inverse-depth alignment term."""
    from .mcba import reprojection_cost

    if problem.grids is None and grids is None:
        raise InvalidArgument("problem carries no scale grids")
    if problem.prior_depth is None:
        raise InvalidArgument("problem carries no depth priors")
    rep = reprojection_cost(problem, inv_depths=inv_depths)
    al = alignment_residuals(problem, grids, inv_depths)
    return rep + align_weight * float(sum(np.sum(a * a) for a in al.values()))


@dataclass
class JDSAResult:
    grids: dict
    inv_depths: dict
    cost_trace: list = field(default_factory=list)
    iterations: int = 0


def _depth_system(problem, grids, inv_depths, align_weight):
    """Diagonal depth block and depth gradient of the joint cost (poses fixed)."""
    from .mcba import linearize

    ne = linearize(problem, inv_depths=inv_depths)
    al = alignment_residuals(problem, grids, inv_depths)
    mask = problem.stack_depths({k: _prior_inverse(problem, k)[1].astype(float) for k in problem.depth_keys})
    C = ne.C + align_weight * mask
    w = ne.w + align_weight * problem.stack_depths(al)
    return problem.unstack_depths(C), problem.unstack_depths(w), al


def _grid_step(problem, grids, inv_depths, align_weight, lam):
    """Damped grid step with the depths profiled out.

    The diagonal depth block is eliminated before solving for the grid, so
    samples whose depth is constrained only by the alignment term do not pull
    the grid towards their current value. Only the grid update is applied.
    """
    C, wd, al = _depth_system(problem, grids, inv_depths, align_weight)
    new = {}
    pred = 0.0
    for key in problem.depth_keys:
        g = grids[key]
        J = alignment_grid_jacobian(problem, key, g)
        hdd = C[key] + lam
        H = align_weight * (J.T @ J) - (align_weight ** 2) * (J.T * (1.0 / hdd)) @ J
        rhs = -align_weight * (J.T @ al[key]) + align_weight * (J.T @ (wd[key] / hdd))
        H = 0.5 * (H + H.T)
        H[np.diag_indices_from(H)] += lam
        ds = np.linalg.solve(H, rhs)
        pred += 0.5 * float(ds @ rhs)
        vals = np.clip(g.values + ds.reshape(g.shape), S_MIN, S_MAX)
        new[key] = ScaleGrid(vals, g.width, g.height)
    return new, pred


def _depth_step(problem, grids, inv_depths, align_weight, lam):
    from .mcba import INV_DEPTH_MAX, INV_DEPTH_MIN

    C, w, _ = _depth_system(problem, grids, inv_depths, align_weight)
    Cf, wf = problem.stack_depths(C), problem.stack_depths(w)
    dd = wf / (Cf + lam)
    pred = 0.5 * float(dd @ wf)
    flat = np.clip(problem.stack_depths(inv_depths) + dd, INV_DEPTH_MIN, INV_DEPTH_MAX)
    return problem.unstack_depths(flat), pred


def jdsa_solve(problem, iters: int = 10, align_weight: float = 1.0, lam_init: float = 1e-4,
               lam_up: float = 10.0, lam_down: float = 0.5, max_retries: int = 10,
               rel_tol: float = 1e-12) -> JDSAResult:
    """Alternate one damped grid step and one depth step per outer iteration.

    Poses are read but never written. Each sub-step is accepted only when the
    joint cost does not grow; the problem's grids and inverse depths are
    updated in place.
    """
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    if problem.grids is None or problem.prior_depth is None:
        raise InvalidArgument("joint alignment needs scale grids and depth priors")
    grids = {k: g.copy() for k, g in problem.grids.items()}
    depths = {k: v.copy() for k, v in problem.inv_depths.items()}
    cost = jdsa_cost(problem, align_weight, grids, depths)
    trace = [cost]
    lam = {"grid": lam_init, "depth": lam_init}
    it = 0
    for it in range(1, iters + 1):
        moved = False
        for kind in ("grid", "depth"):
            retries = 0
            while True:
                if kind == "grid":
                    cand_g, pred = _grid_step(problem, grids, depths, align_weight, lam[kind])
                    cand_d = depths
                else:
                    cand_d, pred = _depth_step(problem, grids, depths, align_weight, lam[kind])
                    cand_g = grids
                if pred <= rel_tol * cost + 1e-300:
                    break
                new_cost = jdsa_cost(problem, align_weight, cand_g, cand_d)
                if np.isfinite(new_cost) and new_cost <= cost:
                    grids, depths, cost = cand_g, cand_d, new_cost
                    lam[kind] = max(lam[kind] * lam_down, 1e-12)
                    moved = True
                    break
                lam[kind] *= lam_up
                retries += 1
                if retries > max_retries:
                    raise ConvergenceError(f"joint alignment rejected {retries} consecutive {kind} steps",
                                           trace=trace, stage="jdsa")
        trace.append(cost)
        if not moved:
            break
    problem.grids = grids
    problem.inv_depths = depths
    return JDSAResult({k: g.copy() for k, g in grids.items()},
                      {k: v.copy() for k, v in depths.items()}, trace, it)
