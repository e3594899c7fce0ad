"""Trajectory, depth and smoothness evaluation protocols.

Pose accuracy follows the short-window convention: both trajectories are
re-based so the window's first pose is the identity, a least-squares scale
aligns the estimated translations to the ground truth (monocular scale is a
free gauge), and the window error is the RMSE of the residual position
norms. Windows of 5 poses slide with stride 1 over the sequence and the
report aggregates mean and (population) standard deviation.

Depth metrics use median scaling and an 80 m cap: Abs Rel, Sq Rel, RMSE and
RMSE of log depth over valid ground-truth pixels.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose6DoF, compose, invert
from .objective import motion_series


@dataclass
class AteReport:
    per_snippet: np.ndarray
    mean: float
    std: float
    count: int

    def format_line(self):
        return f"{self.mean:.3f}±{self.std:.3f}"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "ate"])
            for i, a in enumerate(self.per_snippet):
                w.writerow([i, f"{a:.9g}"])
            w.writerow(["mean", f"{self.mean:.9g}"])
            w.writerow(["std", f"{self.std:.9g}"])


@dataclass
class DepthReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    pixels: int
    cap: float

    def format_line(self):
        return (
            f"AbsRel {self.abs_rel:.3f}  SqRel {self.sq_rel:.3f}  "
            f"RMSE {self.rmse:.3f}  RMSElog {self.rmse_log:.3f}"
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["abs_rel", "sq_rel", "rmse", "rmse_log", "pixels", "cap"])
            w.writerow([self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.pixels, self.cap])


@dataclass
class SmoothnessReport:
    v: np.ndarray
    mean_abs_a: float
    mean_abs_j: float
    max_abs_j: float
    sawtooth_index: float  # mean |jerk| / mean speed (0 when jerk is 0)

    def format_line(self):
        return (
            f"mean|a| {self.mean_abs_a:.4f}  mean|j| {self.mean_abs_j:.4f}  "
            f"max|j| {self.max_abs_j:.4f}  saw-tooth {self.sawtooth_index:.4f}"
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "speed"])
            for i, s in enumerate(self.v):
                w.writerow([i, f"{s:.9g}"])


def _rebase_translations(poses):
    inv0 = invert(poses[0])
    return np.stack([compose(inv0, p).translation for p in poses])


def solve_scale(est_t, gt_t):
    """Least-squares s minimizing sum ||s * est - gt||^2 (0 when est is all zero)."""
    denom = float(np.sum(est_t * est_t))
    if denom == 0.0:
        return 0.0
    return float(np.sum(est_t * gt_t) / denom)


def ate_snippet(est, gt) -> float:
    """Scale-aligned RMSE of window position errors after re-basing to pose 0."""
    if len(est) != len(gt):
        raise ValueError(f"length mismatch: {len(est)} est vs {len(gt)} gt poses")
    if len(est) < 2:
        raise ValueError("need at least 2 poses")
    e = _rebase_translations(est)
    g = _rebase_translations(gt)
    s = solve_scale(e, g)
    err = s * e - g
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def ate_sequence(est, gt, snippet_len=5) -> AteReport:
    """Sliding-window ate_snippet over the whole sequence, stride 1."""
    if len(est) != len(gt):
        raise ValueError(f"length mismatch: {len(est)} est vs {len(gt)} gt poses")
    if len(est) < snippet_len:
        raise ValueError(f"need at least {snippet_len} poses, got {len(est)}")
    vals = []
    for i in range(len(est) - snippet_len + 1):
        vals.append(ate_snippet(est[i : i + snippet_len], gt[i : i + snippet_len]))
    arr = np.array(vals)
    return AteReport(per_snippet=arr, mean=float(arr.mean()), std=float(arr.std()), count=len(arr))


def depth_metrics(pred, gt, cap=80.0) -> DepthReport:
    """Median-scaled depth errors over valid ground truth (0 < gt <= cap)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = (gt > 0) & (gt <= cap)
    if not valid.any():
        raise ValueError("no valid ground-truth pixels (gt > 0 and gt <= cap)")
    p = pred[valid]
    g = gt[valid]
    med_p = np.median(p)
    if med_p <= 0:
        raise ValueError("non-positive median predicted depth; cannot median-scale")
    p = np.clip(p * (np.median(g) / med_p), 1e-3, cap)
    diff = p - g
    return DepthReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        pixels=int(valid.sum()),
        cap=float(cap),
    )


def smoothness(traj, chi=100.0) -> SmoothnessReport:
    """Velocity curve and acceleration/jerk statistics of a trajectory."""
    if len(traj) < 4:
        raise ValueError(f"need at least 4 poses, got {len(traj)}")
    ms = motion_series(traj, chi=chi)
    mean_v = float(np.mean(ms.v))
    mean_j = float(np.mean(np.abs(ms.j)))
    if mean_j == 0.0:
        idx = 0.0
    else:
        idx = mean_j / mean_v if mean_v > 0 else float("inf")
    return SmoothnessReport(
        v=ms.v,
        mean_abs_a=float(np.mean(np.abs(ms.a))),
        mean_abs_j=mean_j,
        max_abs_j=float(np.max(np.abs(ms.j))) if len(ms.j) else 0.0,
        sawtooth_index=idx,
    )


def path_length(poses) -> float:
    """Sum of consecutive position distances along a trajectory."""
    t = np.stack([p.translation for p in poses])
    return float(np.sum(np.linalg.norm(np.diff(t, axis=0), axis=1)))
