"""Trajectory and image metrics plus report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidArgument
from .geometry import SE3Pose, sim3_align

TIMESTAMP_TOL = 1e-6
LUMA = np.array([0.299, 0.587, 0.114])


def _split(traj):
    """Accept ``(stamps, poses)`` or a bare pose list (matched by position)."""
    if isinstance(traj, tuple) and len(traj) == 2 and not isinstance(traj[0], SE3Pose):
        stamps, poses = traj
        return np.asarray(stamps, dtype=float), list(poses)
    poses = list(traj)
    return None, poses


def associate(est_stamps, ref_stamps, tol: float = TIMESTAMP_TOL) -> np.ndarray:
    """Index into the reference for each estimate stamp; raises when no match lies within ``tol``."""
    ref = np.asarray(ref_stamps, dtype=float)
    out = np.empty(len(est_stamps), dtype=int)
    for k, s in enumerate(est_stamps):
        j = int(np.argmin(np.abs(ref - s)))
        if abs(ref[j] - s) > tol:
            raise InvalidArgument(f"timestamp {s!r} has no reference within {tol}")
        out[k] = j
    return out


def aligned_positions(estimate, reference, tol: float = TIMESTAMP_TOL):
    """Sim3-aligned estimate positions and the matched reference positions."""
    es, ep = _split(estimate)
    rs, rp = _split(reference)
    if es is not None and rs is not None:
        rp = [rp[j] for j in associate(es, rs, tol)]
    elif len(ep) != len(rp):
        raise InvalidArgument("pose lists without timestamps must have equal length")
    if len(ep) < 3:
        raise InvalidArgument("ATE needs at least 3 matched poses")
    S = sim3_align(ep, rp)
    est = S.apply(np.array([p.t for p in ep]))
    return est, np.array([p.t for p in rp]), S


def ate_rmse(estimate, reference, tol: float = TIMESTAMP_TOL) -> float:
    """RMSE of translation residuals after Sim(3) alignment of the estimate."""
    est, ref, _ = aligned_positions(estimate, reference, tol)
    return float(np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``inf`` for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        return img @ LUMA
    return img


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    half = len(w) // 2
    y = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return y[half:x.shape[0] - half, half:x.shape[1] - half]


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
             data_range: float = 1.0) -> np.ndarray:
    a, b = _check_pair(to_gray(a), to_gray(b))
    if a.shape[0] < window or a.shape[1] < window:
        raise InvalidArgument(f"image {a.shape} is smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    s_aa = _filter_valid(a * a, w) - mu_a * mu_a
    s_bb = _filter_valid(b * b, w) - mu_b * mu_b
    s_ab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM of the luminance images with a Gaussian window (valid region only)."""
    return float(np.mean(ssim_map(a, b, window, sigma, k1, k2)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def json_number(x):
    """JSON-safe float; infinities become the strings ``"inf"`` / ``"-inf"``."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def view_metrics(pairs) -> dict:
    """``pairs`` yields ``(camera id, rendered, target)``; returns pooled and per-camera scores."""
    per_cam: dict = {}
    for cam, rendered, target in pairs:
        d = per_cam.setdefault(cam, {"psnr": [], "ssim": [], "sq": 0.0, "n": 0})
        d["psnr"].append(psnr(np.clip(rendered, 0, 1), target))
        d["ssim"].append(ssim(np.clip(rendered, 0, 1), target))
        d["sq"] += float(np.sum((np.clip(rendered, 0, 1) - target) ** 2))
        d["n"] += int(np.size(target))
    if not per_cam:
        return {"psnr_mean": None, "ssim_mean": None, "psnr_pooled": None, "per_camera": {}}
    all_psnr = [p for d in per_cam.values() for p in d["psnr"]]
    all_ssim = [s for d in per_cam.values() for s in d["ssim"]]
    sq = sum(d["sq"] for d in per_cam.values())
    n = sum(d["n"] for d in per_cam.values())
    pooled = math.inf if sq == 0 else 10 * math.log10(n / sq)
    return {
        "psnr_mean": json_number(np.mean(all_psnr)),
        "ssim_mean": float(np.mean(all_ssim)),
        "psnr_pooled": json_number(pooled),
        "per_camera": {c: {"psnr_mean": json_number(np.mean(d["psnr"])), "ssim_mean": float(np.mean(d["ssim"]))}
                       for c, d in sorted(per_cam.items())},
    }


CSV_METRICS = ("ATE", "PSNR", "SSIM")


def write_report(out_dir: str | Path, per_sequence: dict, config: dict, method: str = "mcgs") -> dict:
    """Write ``report.json`` and ``table.csv``.

    ``per_sequence`` maps a sequence name to ``{ate_rmse, psnr_mean, ssim_mean, ...}``.
    The CSV has columns ``Method, Metric, <sequence...>, Avg`` with one row per metric.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"per_sequence": per_sequence, "config_hash": config_hash(config)}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    names = sorted(per_sequence)
    keys = {"ATE": "ate_rmse", "PSNR": "psnr_mean", "SSIM": "ssim_mean"}
    with open(out / "table.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["Method", "Metric", *names, "Avg"])
        for metric in CSV_METRICS:
            vals = [per_sequence[n].get(keys[metric]) for n in names]
            nums = [float(v) for v in vals if v is not None]
            avg = float(np.mean(nums)) if nums else None
            wr.writerow([method, metric, *("" if v is None else repr(float(v)) for v in vals),
                         "" if avg is None else repr(avg)])
    return report


def trajectory_plot_data(estimate, reference, tol: float = TIMESTAMP_TOL) -> dict:
    """Per-axis traces of the aligned estimate and the reference, keyed for plotting."""
    est, ref, _ = aligned_positions(estimate, reference, tol)
    es, _ = _split(estimate)
    t = es if es is not None else np.arange(len(est), dtype=float)
    data = {"t": np.asarray(t, dtype=float).tolist()}
    for k, axis in enumerate("xyz"):
        data[f"est_{axis}"] = est[:, k].tolist()
        data[f"gt_{axis}"] = ref[:, k].tolist()
    return data


def write_plot_data(path: str | Path, data: dict) -> None:
    cols = list(data)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in zip(*(data[c] for c in cols)):
            wr.writerow([repr(float(v)) for v in row])
