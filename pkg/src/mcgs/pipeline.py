"""Online tracking/mapping loop and the offline refinement stage."""

from __future__ import annotations

import copy
import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConvergenceError, InvalidArgument, SolverError
from .geometry import RigCalibration, SE3Pose, rotation_about, se3_exp, se3_log
from .gsmap import GaussianMap, apply_pose_update, densify, prune
from .jdsa import jdsa_solve
from .mcba import mcba_optimize, problem_from_keyframes, reprojection_cost, write_back
from .rasterizer import LossWeights, MapOptimizer, ViewTarget, identity_exposure, map_loss, optimize_map, render
from .synth import (BiasField, Keyframe, KeyframeBuffer, NoisyMode, build_graph, keyframe_select,
                    make_keyframe, sample_correspondences)

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Every tunable of the online and offline stages."""

    seed: int = 0
    # keyframes
    keyframe_threshold_px: float = 4.0
    flow_stride: int = 8
    # priors
    prior_noise: float = 0.0
    prior_bias: dict = field(default_factory=dict)  # camera id -> constant or 6 polynomial coefficients
    grid_shape: tuple = (8, 8)
    # correspondences and bundle adjustment
    window: int = 4
    overlap_min: float = 0.05
    corr_stride: int = 4
    corr_sigma: float = 0.0
    outlier_rate: float = 0.0
    outlier_weight: float = 0.01
    huber_delta: float | None = None
    bounds_margin: float = 16.0
    mcba_iters: int = 8
    jdsa: bool = True
    jdsa_iters: int = 5
    jdsa_weight: float = 1.0
    # mapping
    init_stride: int = 2
    opacity_init: float = 0.5
    mapping_iters: int = 10
    map_window: int = 2
    densify_every: int = 5
    prune_every: int = 5
    alpha_min: float = 0.02
    coverage_min: float = 0.5
    loss_weights: dict = field(default_factory=lambda: asdict(LossWeights()))
    final_mapping_iters: int = 0
    # offline stage
    offline_ba: bool = True
    offline_ba_iters: int = 10
    offline_map: bool = True
    offline_epochs: int = 2
    offline_map_iters: int = 5
    # experiments
    inject_bias: dict | None = None  # {"keyframe": k, "rotation_deg": a, "translation": [x, y, z]}
    # execution
    threads: int = 1
    deterministic: bool = True

    COUNTS = ("keyframe_threshold_px", "flow_stride", "window", "corr_stride", "mcba_iters", "jdsa_iters",
              "init_stride", "mapping_iters", "map_window", "densify_every", "prune_every",
              "final_mapping_iters", "offline_ba_iters", "offline_epochs", "offline_map_iters", "threads")
    WEIGHTS = ("prior_noise", "overlap_min", "corr_sigma", "outlier_rate", "outlier_weight", "bounds_margin",
               "jdsa_weight", "alpha_min", "coverage_min")

    def __post_init__(self):
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        self.validate()

    def validate(self) -> None:
        for name in self.COUNTS:
            if getattr(self, name) < 0:
                raise InvalidArgument(f"config field {name!r} must be >= 0")
        for name in self.WEIGHTS:
            if getattr(self, name) < 0:
                raise InvalidArgument(f"config field {name!r} must be >= 0")
        if self.window < 1 or self.map_window < 1 or self.init_stride < 1 or self.corr_stride < 1 \
                or self.flow_stride < 1 or self.threads < 1:
            raise InvalidArgument("window, map_window, strides and threads must be >= 1")
        if len(self.grid_shape) != 2 or min(self.grid_shape) < 1:
            raise InvalidArgument("grid_shape must be two positive integers")
        if not 0.0 < self.opacity_init < 1.0:
            raise InvalidArgument("opacity_init must lie in (0, 1)")
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise InvalidArgument("huber_delta must be positive")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise InvalidArgument("outlier_rate must lie in [0, 1]")
        LossWeights(**self.loss_weights)
        for cam, b in self.prior_bias.items():
            if not (isinstance(b, (int, float)) or (isinstance(b, (list, tuple)) and len(b) == 6)):
                raise InvalidArgument(f"prior bias for {cam!r} must be a number or 6 coefficients")
        if self.inject_bias is not None and "keyframe" not in self.inject_bias:
            raise InvalidArgument("inject_bias needs a 'keyframe' entry")

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["grid_shape"] = list(self.grid_shape)
        return copy.deepcopy(d)

    @classmethod
    def from_json(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgument(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**copy.deepcopy(data))
        except TypeError as exc:
            raise InvalidArgument(str(exc)) from exc

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**self.loss_weights)

    def bias_fields(self) -> dict:
        out = {}
        for cam, b in self.prior_bias.items():
            out[cam] = float(b) if isinstance(b, (int, float)) else BiasField(tuple(float(c) for c in b))
        return out

    def corr_mode(self):
        if self.corr_sigma == 0 and self.outlier_rate == 0:
            return "exact"
        return NoisyMode(self.corr_sigma, self.outlier_rate, self.outlier_weight)


def trajectory_rows(keyframes) -> list:
    """``[timestamp, tx, ty, tz, qw, qx, qy, qz]`` per keyframe, in index order."""
    return [[float(k.timestamp), *map(float, k.pose.t), *map(float, k.pose.q)]
            for k in sorted(keyframes, key=lambda k: k.index)]


@dataclass
class RunReport:
    config: dict
    keyframes: list = field(default_factory=list)     # {index, frame_index, timestamp}
    mcba_traces: dict = field(default_factory=dict)   # keyframe -> cost trace
    jdsa_traces: dict = field(default_factory=dict)
    mapping_traces: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)
    map_stats: dict = field(default_factory=lambda: {"count": 0, "densified": 0, "pruned": 0})
    metrics: dict = field(default_factory=dict)
    offline: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)       # wall-clock, kept out of to_json

    def check(self) -> None:
        if len(self.trajectory) != len(self.keyframes):
            raise InvalidArgument("trajectory length differs from the keyframe count")

    def to_json(self) -> dict:
        """Deterministic content only; wall-clock timings are exported separately."""
        d = asdict(self)
        d.pop("timings")
        d["jdsa"] = bool(self.config.get("jdsa", True))
        return jsonable(d)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def jsonable(x):
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if not np.isfinite(x):
            return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
        return x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# tracking helpers
# ---------------------------------------------------------------------------

def predict_pose(keyframes: list, timestamp: float) -> SE3Pose:
    """Constant-velocity extrapolation from the last two keyframes."""
    if len(keyframes) == 1:
        return keyframes[-1].pose
    a, b = keyframes[-2], keyframes[-1]
    dt = b.timestamp - a.timestamp
    if dt <= 0:
        return b.pose
    xi = se3_log(a.pose.inverse() @ b.pose) * ((timestamp - b.timestamp) / dt)
    return b.pose @ se3_exp(xi)


class CorrespondenceCache:
    """Oracle correspondences per edge with a per-edge deterministic generator."""

    def __init__(self, scene, rig: RigCalibration, config: PipelineConfig):
        self.scene, self.rig, self.config = scene, rig, config
        self._items: dict = {}
        self._cam_index = {c: k for k, c in enumerate(rig.ids)}

    def get(self, edge, keyframes: dict):
        key = edge.key()
        if key not in self._items:
            kind = 0 if edge.kind == "temporal" else 1
            rng = np.random.default_rng([self.config.seed, edge.i, self._cam_index[edge.cam_i], edge.j,
                                         self._cam_index[edge.cam_j], kind])
            self._items[key] = sample_correspondences(edge, keyframes, self.rig, self.scene,
                                                      self.config.corr_mode(), self.config.corr_stride, rng)
        return self._items[key]

    def for_graph(self, graph, keyframes: dict) -> list:
        return [self.get(e, keyframes) for e in graph.edges]


def cross_view_pairs(kf: Keyframe, rig: RigCalibration, overlap_min: float, stride: int) -> dict:
    """Overlap decision per ordered camera pair, measured once on ``kf`` (the extrinsics are fixed)."""
    graph = build_graph([kf], 1, rig, overlap_min, stride)
    present = {(e.cam_i, e.cam_j) for e in graph.edges if e.kind == "cross_view"}
    return {(a, b): (a, b) in present for a in rig.ids for b in rig.ids if a != b}


def bias_delta(params: dict) -> SE3Pose:
    q = rotation_about(params.get("axis", [0.0, 1.0, 0.0]), np.deg2rad(float(params.get("rotation_deg", 0.0))))
    return SE3Pose(q, np.asarray(params.get("translation", [0.0, 0.0, 0.0]), dtype=float))


# ---------------------------------------------------------------------------
# mapping worker
# ---------------------------------------------------------------------------

@dataclass
class MapEvent:
    keyframe: int                 # newly promoted keyframe id
    window: list                  # keyframe snapshots to optimize over (includes the new one)
    pose_updates: dict            # keyframe id -> new pose for already-mapped keyframes


class Mapper:
    """Single writer of the Gaussian map; consumes events in FIFO order."""

    def __init__(self, rig: RigCalibration, config: PipelineConfig, extent: float = 1.0):
        self.rig, self.config = rig, config
        self.map = GaussianMap()
        self.optimizer = MapOptimizer(extent=extent)
        self.traces: dict = {}
        self.densified = 0
        self.pruned = 0
        self.timings: dict = {}

    def render_kw(self) -> dict:
        return {"threads": 1 if self.config.deterministic else self.config.threads}

    def transport(self, pose_updates: dict) -> None:
        for kf_id, new_pose in sorted(pose_updates.items()):
            old = self.map.anchor_poses.get(kf_id)
            if old is None:
                continue
            apply_pose_update(self.map, kf_id, new_pose @ old.inverse())
            self.map.anchor_poses[kf_id] = new_pose

    def densify_keyframe(self, kf: Keyframe) -> int:
        added = 0
        for cam in self.rig.ids:
            if len(self.map):
                cov = render(self.map, self.rig.world_to_camera(kf.pose, cam), self.rig.intrinsics(cam),
                             **self.render_kw()).coverage
            else:
                cov = np.zeros(self.rig.intrinsics(cam).shape)
            added += len(densify(self.map, kf, cam, self.rig, cov, self.config.init_stride,
                                 self.config.coverage_min, opacity_init=self.config.opacity_init))
        if kf.index not in self.map.anchor_poses:
            self.map.register_anchor(kf.index, kf.pose)
        return added

    def handle(self, ev: MapEvent) -> None:
        t0 = time.perf_counter()
        cfg = self.config
        self.transport(ev.pose_updates)
        new_kf = next(k for k in ev.window if k.index == ev.keyframe)
        self.densified += self.densify_keyframe(new_kf)
        if cfg.mapping_iters > 0 and len(self.map):
            res = optimize_map(self.map, ev.window, self.rig, cfg.mapping_iters, cfg.weights,
                               optimizer=self.optimizer, densify_every=cfg.densify_every, densify_kf=new_kf,
                               densify_stride=cfg.init_stride, prune_every=cfg.prune_every,
                               alpha_min=cfg.alpha_min, render_kw=self.render_kw())
            self.traces[ev.keyframe] = res.loss_trace
            self.densified += res.added
            self.pruned += res.removed
        self.timings[ev.keyframe] = time.perf_counter() - t0


# ---------------------------------------------------------------------------
# online stage
# ---------------------------------------------------------------------------

@dataclass
class OnlineResult:
    keyframes: list
    trajectory: list
    map: GaussianMap
    report: RunReport
    correspondences: CorrespondenceCache
    exposures: dict = field(default_factory=dict)


def _scene_extent(frames_seen: list) -> float:
    pos = np.array([f.pose.t for f in frames_seen])
    return float(max(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)), 1.0))


def _track_keyframe(kfs: list, new_kf: Keyframe, rig, cfg: PipelineConfig, cache: CorrespondenceCache,
                    cross: dict, report: RunReport) -> dict:
    """Window BA (then JDSA) after promoting ``new_kf``; returns the changed poses of older keyframes."""
    window = kfs[-cfg.window:] if len(kfs) > cfg.window else list(kfs)
    before = {k.index: k.pose for k in window}
    if len(window) < 2:
        return {}
    kf_map = {k.index: k for k in window}
    graph = build_graph(window, cfg.window, rig, cfg.overlap_min, cfg.flow_stride, cross_pairs=cross)
    corr = cache.for_graph(graph, kf_map)
    problem = problem_from_keyframes(window, corr, rig, fixed={window[0].index}, stride=cfg.corr_stride,
                                     huber_delta=cfg.huber_delta, with_grids=cfg.jdsa,
                                     bounds_margin=cfg.bounds_margin)
    try:
        res = mcba_optimize(problem, iters=cfg.mcba_iters)
        report.mcba_traces[new_kf.index] = res.cost_trace
        if cfg.jdsa and cfg.jdsa_iters > 0:
            jr = jdsa_solve(problem, iters=cfg.jdsa_iters, align_weight=cfg.jdsa_weight)
            report.jdsa_traces[new_kf.index] = jr.cost_trace
    except ConvergenceError as exc:
        raise ConvergenceError(str(exc), trace=exc.trace, stage=exc.stage, keyframe=new_kf.index) from exc
    except SolverError as exc:
        raise ConvergenceError(f"linear solve failed: {exc}", stage="mcba", keyframe=new_kf.index) from exc
    write_back(problem, window)
    return {i: kf_map[i].pose for i in before if i != new_kf.index and not kf_map[i].pose.allclose(before[i], 0.0)}


def online_track(frames, rig: RigCalibration, config: PipelineConfig, scene) -> OnlineResult:
    """Keyframe selection, window BA with optional JDSA, and incremental mapping.

    ``frames`` may be any iterable of :class:`Frame`. ``scene`` backs the
    oracle correspondence front end. In deterministic mode mapping runs
    inline after each keyframe; otherwise a mapping thread consumes the same
    events in FIFO order.
    """
    cfg = config
    cfg.validate()
    report = RunReport(config=cfg.to_json())
    cache = CorrespondenceCache(scene, rig, cfg)
    buffer = KeyframeBuffer()
    biases = cfg.bias_fields()
    kfs: list = []
    seen: list = []
    cross = None
    mapper = None
    events: queue.Queue = queue.Queue()
    worker = None
    failure: list = []
    t_track = {}
    injected = False
    t_start = time.perf_counter()

    def dispatch(ev):
        if worker is None:
            mapper.handle(ev)
        else:
            events.put(ev)

    def run_worker():
        while True:
            ev = events.get()
            if ev is None:
                return
            if failure:
                continue
            try:
                mapper.handle(ev)
            except Exception as exc:  # surfaced on the tracking side after join
                failure.append(exc)

    frame_iter = iter(frames)
    n_frames = 0
    try:
        for frame in frame_iter:
            n_frames += 1
            seen.append(frame)
            if kfs:
                promote, _ = keyframe_select(frame, kfs[-1], cfg.keyframe_threshold_px, rig, cfg.flow_stride)
                if not promote:
                    continue
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, len(kfs)])
            pose = frame.pose if not kfs else predict_pose(kfs, frame.timestamp)
            kf = make_keyframe(len(kfs), frame, rig, pose, cfg.prior_noise, biases, cfg.grid_shape, rng)
            kfs.append(kf)
            report.keyframes.append({"index": kf.index, "frame_index": frame.index,
                                     "timestamp": float(frame.timestamp)})
            if cross is None:
                cross = cross_view_pairs(kf, rig, cfg.overlap_min, cfg.flow_stride)
                mapper = Mapper(rig, cfg, extent=_scene_extent([frame]) * 5.0)
                if not cfg.deterministic and cfg.threads > 1:
                    worker = threading.Thread(target=run_worker, name="mapping", daemon=True)
                    worker.start()
            updates = _track_keyframe(kfs, kf, rig, cfg, cache, cross, report)
            if cfg.inject_bias is not None and not injected:
                k = int(cfg.inject_bias["keyframe"])
                window = kfs[-cfg.window:]
                if len(kfs) > k and window[0].index == k:
                    delta = bias_delta(cfg.inject_bias)
                    for w in window:
                        w.pose = delta @ w.pose
                        if w.index != kf.index:
                            updates[w.index] = w.pose
                    injected = True
            for w in kfs[-max(cfg.window, cfg.map_window):]:
                buffer.put(w)
            t_track[kf.index] = time.perf_counter() - t0
            if failure:
                raise failure[0]
            snap = [buffer.get(k.index) for k in kfs[-cfg.map_window:]]
            dispatch(MapEvent(kf.index, snap, dict(updates)))
    finally:
        if worker is not None:
            events.put(None)
            worker.join()
    if failure:
        raise failure[0]
    if n_frames < 2:
        raise InvalidArgument("online tracking needs at least two frames")
    if cfg.final_mapping_iters > 0 and len(mapper.map):
        res = optimize_map(mapper.map, kfs, rig, cfg.final_mapping_iters, cfg.weights, optimizer=mapper.optimizer,
                           prune_every=cfg.prune_every, alpha_min=cfg.alpha_min, render_kw=mapper.render_kw())
        mapper.traces["final"] = res.loss_trace
        mapper.pruned += res.removed
    mapper.map.check()
    report.mapping_traces = mapper.traces
    report.trajectory = trajectory_rows(kfs)
    report.map_stats = {"count": len(mapper.map), "densified": mapper.densified, "pruned": mapper.pruned}
    report.timings = {"total": time.perf_counter() - t_start, "tracking": t_track, "mapping": mapper.timings}
    report.check()
    return OnlineResult(kfs, report.trajectory, mapper.map, report, cache)


# ---------------------------------------------------------------------------
# offline stage
# ---------------------------------------------------------------------------

def map_objective(gmap, keyframes, rig, weights: LossWeights, exposures: dict | None = None,
                  render_kw: dict | None = None) -> float:
    """Mapping loss summed over every view of ``keyframes``."""
    total = 0.0
    for kf in keyframes:
        A = (exposures or {}).get(kf.index)
        for cam in rig.ids:
            out = render(gmap, rig.world_to_camera(kf.pose, cam), rig.intrinsics(cam), **(render_kw or {}))
            res = map_loss(out, ViewTarget.from_keyframe(kf, cam), weights, gmap.scale[out.proj.rows], A)
            total += res.total
    return total


def global_problem(keyframes, rig, config: PipelineConfig, cache: CorrespondenceCache, cross: dict):
    graph = build_graph(keyframes, config.window, rig, config.overlap_min, config.flow_stride, cross_pairs=cross)
    kf_map = {k.index: k for k in keyframes}
    corr = cache.for_graph(graph, kf_map)
    return problem_from_keyframes(keyframes, corr, rig, fixed={min(kf_map)}, stride=config.corr_stride,
                                  huber_delta=config.huber_delta, bounds_margin=config.bounds_margin)


@dataclass
class OfflineResult:
    keyframes: list
    trajectory: list
    map: GaussianMap
    exposures: dict
    report: dict


def offline_refine(keyframes, gmap: GaussianMap, rig: RigCalibration, config: PipelineConfig,
                   cache: CorrespondenceCache, exposures: dict | None = None) -> OfflineResult:
    """Global BA over all keyframes, then gated joint pose, map and exposure refinement.

    Works on copies; the inputs are left untouched.
    """
    cfg = config
    kfs = [k.copy() for k in sorted(keyframes, key=lambda k: k.index)]
    gmap = gmap.copy()
    exposures = {i: A.copy() for i, A in (exposures or {}).items()}
    for kf in kfs:
        exposures.setdefault(kf.index, identity_exposure())
    out = {"ba_trace": [], "map_trace": [], "epochs": []}
    render_kw = {"threads": 1 if cfg.deterministic else cfg.threads}
    cross = cross_view_pairs(kfs[0], rig, cfg.overlap_min, cfg.flow_stride) if len(kfs) >= 1 else {}
    if len(kfs) < 2:
        return OfflineResult(kfs, trajectory_rows(kfs), gmap, exposures, out)
    weights = cfg.weights

    if cfg.offline_ba and cfg.offline_ba_iters > 0:
        problem = global_problem(kfs, rig, cfg, cache, cross)
        before = {k.index: k.pose for k in kfs}
        try:
            res = mcba_optimize(problem, iters=cfg.offline_ba_iters)
        except ConvergenceError as exc:
            raise ConvergenceError(str(exc), trace=exc.trace, stage="offline-ba") from exc
        except SolverError as exc:
            raise ConvergenceError(f"linear solve failed: {exc}", stage="offline-ba") from exc
        out["ba_trace"] = res.cost_trace
        write_back(problem, kfs)
        for kf in kfs:
            if kf.index in gmap.anchor_poses and not kf.pose.allclose(before[kf.index], 0.0):
                old = gmap.anchor_poses[kf.index]
                apply_pose_update(gmap, kf.index, kf.pose @ old.inverse())
                gmap.anchor_poses[kf.index] = kf.pose

    if cfg.offline_map and cfg.offline_epochs > 0 and cfg.offline_map_iters > 0 and len(gmap):
        problem = global_problem(kfs, rig, cfg, cache, cross)
        fixed = {kfs[0].index}

        def ba_cost(poses_by_id):
            return reprojection_cost(problem, {**problem.poses, **poses_by_id})

        loss = map_objective(gmap, kfs, rig, weights, exposures, render_kw)
        cost = ba_cost({k.index: k.pose for k in kfs})
        out["map_trace"].append(loss)
        optimizer = MapOptimizer(extent=_scene_extent(kfs) * 5.0)
        for epoch in range(cfg.offline_epochs):
            cand_map = gmap.copy()
            cand_kfs = [k.copy() for k in kfs]
            cand_exp = {i: A.copy() for i, A in exposures.items()}
            cand_opt = copy.deepcopy(optimizer)
            optimize_map(cand_map, cand_kfs, rig, cfg.offline_map_iters, weights, with_pose=True,
                         with_exposure=True, optimizer=cand_opt, exposures=cand_exp, fixed_poses=fixed,
                         render_kw=render_kw)
            cand_loss = map_objective(cand_map, cand_kfs, rig, weights, cand_exp, render_kw)
            cand_cost = ba_cost({k.index: k.pose for k in cand_kfs})
            decision = "reverted"
            if np.isfinite(cand_loss) and cand_loss <= loss and cand_cost <= cost:
                decision = "accepted"
                gmap, exposures, optimizer, loss, cost = cand_map, cand_exp, cand_opt, cand_loss, cand_cost
                for kf, ck in zip(kfs, cand_kfs):
                    kf.pose = ck.pose
                    if kf.index in gmap.anchor_poses:
                        gmap.anchor_poses[kf.index] = kf.pose
            else:
                keep_loss = map_objective(cand_map, kfs, rig, weights, cand_exp, render_kw)
                if np.isfinite(keep_loss) and keep_loss <= loss:
                    decision = "map-only"
                    gmap, exposures, loss = cand_map, cand_exp, keep_loss
                    optimizer = cand_opt
                    optimizer.pose_states.clear()
            out["epochs"].append({"epoch": epoch, "decision": decision, "loss": loss, "ba_cost": cost})
            out["map_trace"].append(loss)
    return OfflineResult(kfs, trajectory_rows(kfs), gmap, exposures, out)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

VIEW_ARRAYS = ("image", "depth_prior", "normal_prior", "inv_depth", "valid")


def save_keyframes(directory, keyframes, exposures: dict | None = None) -> None:
    """One sub-directory per keyframe: ``state.json`` plus lossless ``.npy`` arrays per view."""
    from pathlib import Path

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for kf in sorted(keyframes, key=lambda k: k.index):
        d = root / f"{kf.index:04d}"
        d.mkdir(exist_ok=True)
        state = {"index": kf.index, "timestamp": kf.timestamp, "frame_index": kf.frame_index,
                 "pose": {"q": kf.pose.q.tolist(), "t": kf.pose.t.tolist()},
                 "grids": {c: {"values": v.scale_grid.values.tolist(), "width": v.scale_grid.width,
                               "height": v.scale_grid.height} for c, v in sorted(kf.views.items())}}
        if exposures and kf.index in exposures:
            state["exposure"] = np.asarray(exposures[kf.index]).tolist()
        (d / "state.json").write_text(json.dumps(state, indent=1, sort_keys=True))
        for cam, view in sorted(kf.views.items()):
            for name in VIEW_ARRAYS:
                np.save(d / f"{cam}.{name}.npy", np.asarray(getattr(view, name)), allow_pickle=False)


def load_keyframes(directory, frames: dict | None = None) -> tuple[list, dict]:
    """Inverse of :func:`save_keyframes`; ``frames`` maps frame index to its ground-truth frame."""
    from pathlib import Path

    from .jdsa import ScaleGrid
    from .synth import KeyframeView

    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"keyframe directory not found: {root}")
    kfs, exposures = [], {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        state = json.loads((d / "state.json").read_text())
        views = {}
        for cam, g in state["grids"].items():
            arrs = {name: np.load(d / f"{cam}.{name}.npy", allow_pickle=False) for name in VIEW_ARRAYS}
            grid = ScaleGrid(np.asarray(g["values"], dtype=float), int(g["width"]), int(g["height"]))
            views[cam] = KeyframeView(arrs["image"], arrs["depth_prior"], arrs["normal_prior"], arrs["inv_depth"],
                                      arrs["valid"].astype(bool), grid)
        pose = SE3Pose(state["pose"]["q"], state["pose"]["t"])
        frame = frames.get(state["frame_index"]) if frames is not None else None
        kfs.append(Keyframe(int(state["index"]), float(state["timestamp"]), pose, views,
                            int(state["frame_index"]), frame))
        if "exposure" in state:
            exposures[int(state["index"])] = np.asarray(state["exposure"], dtype=float)
    return kfs, exposures
