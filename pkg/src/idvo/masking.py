"""Border masking for fast ego-motion plus a per-pixel confidence field.

The hard-edge mask zeroes a border band whose width grows with the
per-frame translational speed; steering widens the side that scene content
exits from (turning left pans the view left, so pixels leave on the right).
The confidence ("explainability") field is a directly optimized logit grid
squashed through a logistic, combined with the hard mask by elementwise
product; a binary-cross-entropy pull toward 1 keeps it from collapsing.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics


def sigmoid(x):
    """Numerically stable logistic."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class DhemParams:
    """Width law for the speed-dependent border mask.

    width_top = width_bottom = round(k_v * v * H)
    width_left/right = round(k_v * v * W + k_s * max(0, -/+yaw_rate) * W)

    all clamped to w_max of the corresponding dimension. refresh is the
    optimizer interval (iterations) between mask rebuilds.
    """

    k_v: float = 0.02
    k_s: float = 0.5
    w_max: float = 0.25
    refresh: int = 25

    def __post_init__(self):
        if not (0.0 <= self.w_max <= 0.25):
            raise ValueError(f"w_max must lie in [0, 0.25], got {self.w_max}")
        if self.k_v < 0 or self.k_s < 0:
            raise ValueError("mask width coefficients must be non-negative")


@dataclass
class HardEdgeMask:
    """Binary grid, zero on a border band of per-side widths (top, bottom, left, right)."""

    grid: np.ndarray
    widths: tuple

    @classmethod
    def from_widths(cls, widths, height, width):
        top, bottom, left, right = widths
        grid = np.ones((height, width))
        if top:
            grid[:top, :] = 0.0
        if bottom:
            grid[height - bottom :, :] = 0.0
        if left:
            grid[:, :left] = 0.0
        if right:
            grid[:, width - right :] = 0.0
        return cls(grid=grid, widths=(top, bottom, left, right))


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def build_dhem(v, yaw_rate, k: CameraIntrinsics, params: DhemParams = None) -> HardEdgeMask:
    """Hard-edge mask for per-frame speed v and signed steering rate yaw_rate.

    Widths are monotonically non-decreasing in v; positive yaw_rate widens
    the right band, negative the left. v must be non-negative.
    """
    if v < 0:
        raise ValueError(f"speed must be non-negative, got {v}")
    p = params if params is not None else DhemParams()
    cap_tb = int(np.floor(p.w_max * k.height))
    cap_lr = int(np.floor(p.w_max * k.width))
    tb = min(max(_round_half_up(p.k_v * v * k.height), 0), cap_tb)
    left = min(max(_round_half_up((p.k_v * v + p.k_s * max(0.0, -yaw_rate)) * k.width), 0), cap_lr)
    right = min(max(_round_half_up((p.k_v * v + p.k_s * max(0.0, yaw_rate)) * k.width), 0), cap_lr)
    return HardEdgeMask.from_widths((tb, tb, left, right), k.height, k.width)


@dataclass
class ExplainabilityField:
    """Optimized per-pixel confidence: logits squashed to (0, 1) by a logistic."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if not np.isfinite(self.logits).all():
            raise ValueError("explainability logits must be finite")

    @classmethod
    def constant(cls, height, width, logit=3.0):
        return cls(logits=np.full((height, width), float(logit)))

    @property
    def values(self):
        return sigmoid(self.logits)


@dataclass
class CombinedMask:
    """Elementwise product of the hard band and the confidence values."""

    grid: np.ndarray
    hard: HardEdgeMask = field(default=None, repr=False)
    soft: ExplainabilityField = field(default=None, repr=False)


def combine(hard: HardEdgeMask, soft: ExplainabilityField) -> CombinedMask:
    """Hard band times confidence; gradients flow only into the soft logits."""
    if hard.grid.shape != soft.logits.shape:
        raise ValueError(
            f"mask dimension mismatch: hard {hard.grid.shape} vs soft {soft.logits.shape}"
        )
    return CombinedMask(grid=hard.grid * soft.values, hard=hard, soft=soft)


def mask_values_loss(values):
    """Cross-entropy of mask values against an all-ones reference.

    Returns (mean of -log(values), gradient w.r.t. values).
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    loss = float(np.mean(-np.log(values)))
    return loss, -1.0 / (values * n)


def mask_loss(soft: ExplainabilityField):
    """BCE pull toward 1, with the exact gradient for the logistic squashing.

    -log(sigmoid(l)) = softplus(-l), so d/dl = sigmoid(l) - 1.
    """
    l = soft.logits
    n = l.size
    loss = float(np.mean(np.logaddexp(0.0, -l)))
    grad = (sigmoid(l) - 1.0) / n
    return loss, grad


def mask_to_image(grid) -> np.ndarray:
    """8-bit preview of a mask grid in [0, 1] (hard masks render as 0/255)."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    return np.round(g * 255.0).astype(np.uint8)
