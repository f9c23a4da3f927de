"""Command-line entry points: ``synth``, ``track``, ``refine``, ``eval`` and ``render``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 an optimizer
failed to converge, 4 file-system or parse errors on inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit
from .errors import ConvergenceError, GenerationError, InvalidArgument, OptimizationError
from .geometry import load_rig, load_trajectory, save_rig, save_trajectory
from .gsmap import load_ply, save_ply
from .pipeline import (CorrespondenceCache, PipelineConfig, jsonable, load_keyframes, offline_refine,
                       online_track, save_keyframes)
from .rasterizer import apply_exposure, render
from .synth import (SceneConfig, Trajectory, TrajectoryConfig, build_scene, generate_sequence, make_rig,
                    write_png, write_raster)

log = logging.getLogger("mcgs")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4
DATASET_FORMAT = "mcgs-dataset"
RUN_FORMAT = "mcgs-run"


class ConfigError(Exception):
    """Bad configuration file or flag value (exit code 2)."""


class InputError(Exception):
    """Missing or unreadable input (exit code 4)."""


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    seed: int = 0
    n_frames: int = 20
    scene: dict = field(default_factory=dict)
    trajectory: dict = field(default_factory=dict)
    rig: dict = field(default_factory=dict)   # make_rig keyword arguments
    write_frames: bool = True

    @classmethod
    def from_json(cls, data: dict) -> "SynthConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        cfg = cls(**data)
        if cfg.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        return cfg

    def to_json(self) -> dict:
        return {"seed": self.seed, "n_frames": self.n_frames, "scene": self.scene, "trajectory": self.trajectory,
                "rig": self.rig, "write_frames": self.write_frames}


@dataclass
class Dataset:
    root: Path
    manifest: dict
    rig: object
    scene: object
    frames: list

    @property
    def name(self) -> str:
        return self.manifest.get("name", self.root.name)


def _scene_config(cfg: SynthConfig) -> SceneConfig:
    try:
        return SceneConfig.from_json({**cfg.scene, "seed": cfg.seed})
    except TypeError as exc:
        raise ConfigError(f"scene config: {exc}") from exc


def _trajectory_config(cfg: SynthConfig) -> TrajectoryConfig:
    try:
        return TrajectoryConfig.from_json(cfg.trajectory)
    except TypeError as exc:
        raise ConfigError(f"trajectory config: {exc}") from exc


def build_dataset(cfg: SynthConfig, out: Path) -> Dataset:
    """Generate a sequence and write ``manifest.json``, ``rig.json``, ``groundtruth.txt`` and frames."""
    try:
        rig = make_rig(**cfg.rig)
    except TypeError as exc:
        raise ConfigError(f"rig config: {exc}") from exc
    scene = build_scene(_scene_config(cfg))
    traj = Trajectory.from_config(_trajectory_config(cfg))
    frames = generate_sequence(scene, rig, traj, cfg.n_frames)
    out.mkdir(parents=True, exist_ok=True)
    save_rig(out / "rig.json", rig)
    save_trajectory(out / "groundtruth.txt", [f.timestamp for f in frames], [f.pose for f in frames])
    entries = []
    for f in frames:
        files = {}
        if cfg.write_frames:
            for cam in rig.ids:
                d = out / "frames" / cam
                d.mkdir(parents=True, exist_ok=True)
                stem = f"{f.index:06d}"
                view = f.views[cam]
                write_png(d / f"{stem}.png", view.image)
                write_raster(d / f"{stem}.depth", np.where(np.isfinite(view.depth), view.depth, 0.0))
                write_raster(d / f"{stem}.normal", view.normals)
                files[cam] = {k: f"frames/{cam}/{stem}.{k}" for k in ("png", "depth", "normal")}
        entries.append({"index": f.index, "timestamp": f.timestamp, "files": files})
    manifest = {"format": DATASET_FORMAT, "version": 1, "name": out.name, "config": cfg.to_json(),
                "n_frames": len(frames), "rig": "rig.json", "groundtruth": "groundtruth.txt", "frames": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Dataset(out, manifest, rig, scene, frames)


def _read_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise InputError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {what} {path}: {exc}") from exc


def load_dataset(root: str | Path) -> Dataset:
    """Open a dataset directory.

    Frames are re-rendered from the recorded scene and trajectory configs,
    which reproduces them bit for bit; the image files on disk are for
    inspection and other tools.
    """
    root = Path(root)
    manifest = _read_json(root / "manifest.json", "dataset manifest")
    if manifest.get("format") != DATASET_FORMAT:
        raise InputError(f"{root / 'manifest.json'}: not a dataset manifest")
    rig_path = root / manifest.get("rig", "rig.json")
    if not rig_path.is_file():
        raise InputError(f"rig file not found: {rig_path}")
    try:
        rig = load_rig(rig_path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read rig file {rig_path}: {exc}") from exc
    cfg = SynthConfig.from_json(manifest["config"])
    scene = build_scene(_scene_config(cfg))
    frames = generate_sequence(scene, rig, Trajectory.from_config(_trajectory_config(cfg)), cfg.n_frames)
    return Dataset(root, manifest, rig, scene, frames)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def view_metrics_for(keyframes, gmap, rig, exposures: dict | None = None) -> dict:
    def pairs():
        for kf in keyframes:
            A = (exposures or {}).get(kf.index)
            for cam in rig.ids:
                out = render(gmap, rig.world_to_camera(kf.pose, cam), rig.intrinsics(cam))
                yield cam, apply_exposure(out.color, A), kf.views[cam].image
    return evalkit.view_metrics(pairs())


def run_metrics(keyframes, gmap, rig, exposures: dict | None = None) -> dict:
    m = view_metrics_for(keyframes, gmap, rig, exposures)
    est = ([k.timestamp for k in keyframes], [k.pose for k in keyframes])
    gt = ([k.timestamp for k in keyframes], [k.gt_pose for k in keyframes])
    m["ate_rmse"] = evalkit.ate_rmse(est, gt) if len(keyframes) >= 3 else None
    return m


def write_run(out: Path, keyframes, gmap, report_json: dict, timings: dict, manifest: dict,
              exposures: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    kfs = sorted(keyframes, key=lambda k: k.index)
    save_trajectory(out / "trajectory.txt", [k.timestamp for k in kfs], [k.pose for k in kfs])
    save_ply(out / "map.ply", gmap)
    kdir = out / "keyframes"
    if kdir.exists():
        shutil.rmtree(kdir)
    save_keyframes(kdir, kfs, exposures)
    if manifest["config"].get("jdsa", True):
        grids = {str(k.index): {c: v.scale_grid.values.tolist() for c, v in sorted(k.views.items())} for k in kfs}
        (out / "grids.json").write_text(json.dumps(grids, indent=1, sort_keys=True))
    elif (out / "grids.json").exists():
        (out / "grids.json").unlink()
    (out / "report.json").write_text(json.dumps(report_json, indent=2, sort_keys=True))
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    manifest = dict(manifest)
    manifest["artifacts"] = {"trajectory": "trajectory.txt", "map": "map.ply", "keyframes": "keyframes",
                             "report": "report.json", "timings": "timings.json"}
    if manifest["config"].get("jdsa", True):
        manifest["artifacts"]["grids"] = "grids.json"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


@dataclass
class Run:
    root: Path
    manifest: dict
    config: PipelineConfig
    dataset: Dataset
    keyframes: list
    map: object
    exposures: dict
    report: dict


def load_run(root: str | Path) -> Run:
    root = Path(root)
    manifest = _read_json(root / "manifest.json", "run manifest")
    if manifest.get("format") != RUN_FORMAT:
        raise InputError(f"{root / 'manifest.json'}: not a run manifest")
    try:
        config = PipelineConfig.from_json(manifest["config"])
    except InvalidArgument as exc:
        raise ConfigError(f"run config: {exc}") from exc
    dataset = load_dataset(manifest["dataset"])
    frames = {f.index: f for f in dataset.frames}
    kdir = root / "keyframes"
    if not kdir.is_dir():
        raise InputError(f"keyframe directory not found: {kdir}")
    keyframes, exposures = load_keyframes(kdir, frames)
    ply = root / "map.ply"
    if not ply.is_file():
        raise InputError(f"map file not found: {ply}")
    gmap = load_ply(ply)
    for kf in keyframes:
        if np.any(gmap.anchor == kf.index) or kf.index in manifest.get("anchors", []):
            gmap.anchor_poses[kf.index] = kf.pose
    report = _read_json(root / "report.json", "run report")
    return Run(root, manifest, config, dataset, keyframes, gmap, exposures, report)


def _run_manifest(config: PipelineConfig, dataset: Dataset, extra: dict | None = None) -> dict:
    m = {"format": RUN_FORMAT, "version": 1, "config": config.to_json(), "seed": config.seed,
         "dataset": str(dataset.root.resolve())}
    m.update(extra or {})
    return m


def track(dataset: Dataset, config: PipelineConfig, out: Path) -> dict:
    res = online_track(dataset.frames, dataset.rig, config, dataset.scene)
    report = res.report
    report.metrics = run_metrics(res.keyframes, res.map, dataset.rig)
    anchors = sorted(int(k) for k in res.map.anchor_poses)
    write_run(out, res.keyframes, res.map, report.to_json(), report.timings,
              _run_manifest(config, dataset, {"stage": "online", "anchors": anchors}))
    return report.to_json()


def refine(run: Run, out: Path, config: PipelineConfig | None = None) -> dict:
    config = config or run.config
    rig = run.dataset.rig
    cache = CorrespondenceCache(run.dataset.scene, rig, config)
    res = offline_refine(run.keyframes, run.map, rig, config, cache, run.exposures)
    report = dict(run.report)
    report["offline"] = res.report
    report["online_metrics"] = run.report.get("metrics", {})
    report["metrics"] = run_metrics(res.keyframes, res.map, rig, res.exposures)
    report["trajectory"] = res.trajectory
    report = jsonable(report)
    anchors = sorted(int(k) for k in res.map.anchor_poses)
    write_run(out, res.keyframes, res.map, report, {}, _run_manifest(
        config, run.dataset, {"stage": "offline", "source": str(run.root.resolve()), "anchors": anchors}),
        res.exposures)
    return report


def evaluate(run: Run, gt_root: Path, out: Path) -> dict:
    """Metrics of ``run`` against ground truth from a dataset or another run directory."""
    gt_root = Path(gt_root)
    if (gt_root / "groundtruth.txt").is_file():
        gt_path = gt_root / "groundtruth.txt"
    elif (gt_root / "trajectory.txt").is_file():
        gt_path = gt_root / "trajectory.txt"
    else:
        raise InputError(f"no groundtruth.txt or trajectory.txt in {gt_root}")
    try:
        gt = load_trajectory(gt_path)
    except (OSError, InvalidArgument) as exc:
        raise InputError(f"cannot read trajectory {gt_path}: {exc}") from exc
    kfs = run.keyframes
    est = ([k.timestamp for k in kfs], [k.pose for k in kfs])
    metrics = view_metrics_for(kfs, run.map, run.dataset.rig, run.exposures)
    metrics["ate_rmse"] = evalkit.ate_rmse(est, gt)
    name = run.dataset.name
    report = evalkit.write_report(out, {name: jsonable(metrics)}, run.manifest["config"])
    evalkit.write_plot_data(out / "trajectory_plot.csv", evalkit.trajectory_plot_data(est, gt))
    return report


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _global_flags(suppress: bool = False) -> argparse.ArgumentParser:
    """Flags accepted before or after the sub-command.

    The sub-command copies use suppressed defaults so that they do not
    overwrite a value given before the sub-command name.
    """
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="JSON config file (flags override its values)")
    p.add_argument("--seed", type=int, default=d(None), help="seed for every stochastic component")
    p.add_argument("--threads", type=int, default=d(None), help="worker cap for mapping and tile rendering")
    p.add_argument("--deterministic", action="store_true", default=d(None),
                   help="serialize tracking and mapping for bitwise-reproducible output")
    p.add_argument("--out", type=Path, default=d(None), help="output directory (or file for render)")
    p.add_argument("--no-jdsa", dest="no_jdsa", action="store_true", default=d(False),
                   help="disable depth-scale alignment")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcgs", description=__doc__.splitlines()[0], parents=[_global_flags()])
    g = _global_flags(suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[g], help="generate a synthetic dataset")
    p = sub.add_parser("track", parents=[g], help="run the online stage on a dataset")
    p.add_argument("dataset", type=Path)
    p = sub.add_parser("refine", parents=[g], help="run the offline stage on a run directory")
    p.add_argument("run", type=Path)
    p = sub.add_parser("eval", parents=[g], help="metrics of a run against ground truth")
    p.add_argument("run", type=Path)
    p.add_argument("gt", type=Path, help="dataset directory or run directory used as reference")
    p = sub.add_parser("render", parents=[g], help="render one keyframe view of a run")
    p.add_argument("run", type=Path)
    p.add_argument("--keyframe", type=int, default=0)
    p.add_argument("--camera", default=None)
    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def pipeline_config(args, base: dict | None = None) -> PipelineConfig:
    data = dict(base or {})
    data.update(_load_config_file(args.config))
    if args.seed is not None:
        data["seed"] = args.seed
    if args.threads is not None:
        data["threads"] = args.threads
    if args.deterministic:
        data["deterministic"] = True
    if args.no_jdsa:
        data["jdsa"] = False
    try:
        return PipelineConfig.from_json(data)
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from exc


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required")
    return args.out


def cmd_synth(args) -> int:
    data = _load_config_file(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        cfg = SynthConfig.from_json(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    ds = build_dataset(cfg, _require_out(args))
    print(f"wrote {ds.manifest['n_frames']} frames x {len(ds.rig.ids)} cameras to {ds.root}")
    return EXIT_OK


def cmd_track(args) -> int:
    out = _require_out(args)
    cfg = pipeline_config(args)
    ds = load_dataset(args.dataset)
    report = track(ds, cfg, out)
    m = report["metrics"]
    print(f"{len(report['keyframes'])} keyframes; ATE {m.get('ate_rmse')}; PSNR {m.get('psnr_mean')}")
    return EXIT_OK


def cmd_refine(args) -> int:
    out = _require_out(args)
    run = load_run(args.run)
    cfg = pipeline_config(args, run.manifest["config"]) if (args.config or args.seed is not None or args.threads
                                                            or args.deterministic or args.no_jdsa) else None
    report = refine(run, out, cfg)
    m = report["metrics"]
    print(f"refined: ATE {m.get('ate_rmse')}; PSNR {m.get('psnr_mean')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _require_out(args)
    run = load_run(args.run)
    report = evaluate(run, args.gt, out)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    out = _require_out(args)
    run = load_run(args.run)
    rig = run.dataset.rig
    cam = args.camera or rig.ids[0]
    if cam not in rig.ids:
        raise ConfigError(f"unknown camera {cam!r}; rig has {list(rig.ids)}")
    kf = next((k for k in run.keyframes if k.index == args.keyframe), None)
    if kf is None:
        raise ConfigError(f"run has no keyframe {args.keyframe}")
    res = render(run.map, rig.world_to_camera(kf.pose, cam), rig.intrinsics(cam))
    color = apply_exposure(res.color, run.exposures.get(kf.index))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, np.clip(color, 0.0, 1.0))
    write_raster(out.with_suffix(".depth"), res.depth)
    write_raster(out.with_suffix(".normal"), res.normal)
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "track": cmd_track, "refine": cmd_refine, "eval": cmd_eval, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgument, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, OptimizationError) as exc:
        where = f" (stage {exc.stage})" if getattr(exc, "stage", None) else ""
        if getattr(exc, "keyframe", None) is not None:
            where += f" at keyframe {exc.keyframe}"
        print(f"error: optimization failed{where}: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
