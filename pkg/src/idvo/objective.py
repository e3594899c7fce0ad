"""Loss terms and the weighted multi-scale total, each with exact gradients.

Terms:

* inertia        hinged penalties on trajectory acceleration and jerk
* reconstruction masked mean absolute photometric error against a warp
* ssim           masked structural-dissimilarity on 3x3 uniform windows
* alignment_3d   mean distance between transformed target points and points
                 backprojected from the source depth at the warped location
* mask           cross-entropy pull of the confidence field toward 1

Every term returns its value together with analytic gradients; grad_check
verifies each against central finite differences. total_loss evaluates the
spatial terms on box-averaged pyramids (the depth and confidence parameters
live at full resolution and are downsampled per scale) and the inertia term
once on the pose chain.

Acceleration at step t is a scalar combining translational and angular
speed changes: a_t = (v_t - v_{t-1}) + chi * (w_t - w_{t-1}) where v is the
per-frame translation norm and w the per-frame rotation-angle norm; jerk is
its discrete difference. Magnitudes below the typical values a_typ / j_typ
are free; above them the penalty is max(0, (|x| - x_typ) / |x|), bounded in
[0, 1). A config switch restores the signed denominator (|x| - x_typ) / x,
which exempts decelerations.
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import kernels
from .geometry import (
    CameraIntrinsics,
    Pose6DoF,
    chain_with_jacobian,
    euler_rotation_grads,
    wrap_angle,
)
from .masking import CombinedMask, HardEdgeMask, mask_values_loss, sigmoid
from .synthesis import (
    Frame,
    WarpCoords,
    WarpResult,
    normalized_grid,
    pose_grad_from_matrix_grads,
    sample_at_warp,
    synthesize_matrix,
    warp_backward,
    warp_matrix,
    pyramid,
)

if TYPE_CHECKING:  # pragma: no cover
    from .optimizer import SnippetState

SSIM_C1 = 1e-4  # (0.01)^2 for unit dynamic range
SSIM_C2 = 9e-4  # (0.03)^2


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class InertiaParams:
    """Weights and typical values for the acceleration / jerk penalties."""

    chi: float = 100.0
    a_typ: float = 2.0
    j_typ: float = 0.5
    symmetric: bool = True  # False restores the signed denominator

    def __post_init__(self):
        if self.chi <= 0 or self.a_typ <= 0 or self.j_typ <= 0:
            raise ValueError("chi, a_typ and j_typ must all be positive")


@dataclass
class LossWeights:
    """Per-term weights and the pyramid downsample factors to evaluate at."""

    w_inertia: float = 1.0
    w_rec: float = 1.0
    w_ssim: float = 0.2
    w_3d: float = 0.1
    w_mask: float = 0.15
    scales: tuple = (1, 2, 4, 8)

    def __post_init__(self):
        for name in ("w_inertia", "w_rec", "w_ssim", "w_3d", "w_mask"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        scales = tuple(int(s) for s in self.scales)
        if not scales or any(s not in (1, 2, 4, 8) for s in scales):
            raise ValueError(f"scales must be a non-empty subset of (1, 2, 4, 8), got {self.scales}")
        self.scales = scales


@dataclass
class MotionSeries:
    """Per-step speeds and their discrete derivatives along a trajectory."""

    v: np.ndarray  # translation norm per step, length N-1
    phi_rate: np.ndarray  # wrapped Euler-difference norm per step, length N-1
    a: np.ndarray  # combined acceleration, length N-2
    j: np.ndarray  # jerk, length N-3


@dataclass
class GradientSet:
    """Gradient buffers aligned to the snippet parameter blocks."""

    depth_logits: list
    poses: np.ndarray
    expl_logits: list


@dataclass
class LossBreakdown:
    """Per-term, per-scale values plus the weighted total and gradients."""

    inertia: float
    rec: dict
    ssim: dict
    align3d: dict
    mask: dict
    total: float
    gradients: Optional[GradientSet] = field(default=None, repr=False)
    notices: list = field(default_factory=list)

    def term_totals(self):
        return {
            "inertia": self.inertia,
            "rec": sum(self.rec.values()),
            "ssim": sum(self.ssim.values()),
            "align3d": sum(self.align3d.values()),
            "mask": sum(self.mask.values()),
        }


# ---------------------------------------------------------------------------
# motion series and inertia


def _motion_from_arrays(positions, eulers, chi):
    dp = np.diff(positions, axis=0)
    v = np.linalg.norm(dp, axis=1)
    de = wrap_angle(np.diff(eulers, axis=0))
    phi = np.linalg.norm(de, axis=1)
    a = np.diff(v) + chi * np.diff(phi)
    j = np.diff(a)
    return v, phi, a, j


def motion_series(poses, chi=100.0) -> MotionSeries:
    """Speed, angular rate, acceleration and jerk series of an absolute trajectory."""
    if len(poses) < 2:
        raise ValueError(f"need at least 2 poses, got {len(poses)}")
    positions = np.stack([p.translation for p in poses])
    eulers = np.stack([p.rotation for p in poses])
    v, phi, a, j = _motion_from_arrays(positions, eulers, chi)
    return MotionSeries(v=v, phi_rate=phi, a=a, j=j)


def _hinge(x, typ, symmetric):
    """max(0, (|x|-typ)/den) and its derivative; den = |x| or the signed x."""
    ax = abs(x)
    if ax == 0.0:
        return 0.0, 0.0
    den = ax if symmetric else x
    val = (ax - typ) / den
    if val <= 0.0:
        return 0.0, 0.0
    if symmetric:
        # d/dx (1 - typ/|x|) = typ * sign(x) / x^2
        return val, typ * np.sign(x) / (x * x)
    return val, typ / (x * x)


def _inertia_from_arrays(positions, eulers, p: InertiaParams):
    """Inertia loss and gradients w.r.t. positions (N,3) and Euler triples (N,3)."""
    n = positions.shape[0]
    dp = np.diff(positions, axis=0)
    v = np.linalg.norm(dp, axis=1)
    de = wrap_angle(np.diff(eulers, axis=0))
    phi = np.linalg.norm(de, axis=1)
    a = np.diff(v) + p.chi * np.diff(phi)
    j = np.diff(a)

    n_a = a.shape[0]
    loss = 0.0
    da = np.zeros(n_a)  # dL/da_i
    for i in range(n_a):
        la, ga = _hinge(a[i], p.a_typ, p.symmetric)
        lj, gj = (0.0, 0.0) if i == 0 else _hinge(j[i - 1], p.j_typ, p.symmetric)
        term = la + lj
        # the outer absolute value is a no-op for non-negative hinge sums,
        # but keep the subgradient correct for the signed-denominator mode
        s = 1.0 if term >= 0.0 else -1.0
        loss += abs(term)
        da[i] += s * ga
        if i > 0:
            # j_{i-1} = a_i - a_{i-1}
            da[i] += s * gj
            da[i - 1] -= s * gj

    # a_i = (v_{i+1} - v_i) + chi (phi_{i+1} - phi_i)
    dv = np.zeros_like(v)
    dphi = np.zeros_like(phi)
    for i in range(n_a):
        dv[i + 1] += da[i]
        dv[i] -= da[i]
        dphi[i + 1] += p.chi * da[i]
        dphi[i] -= p.chi * da[i]

    dpos = np.zeros_like(positions)
    deul = np.zeros_like(eulers)
    for i in range(n - 1):
        if v[i] > 0.0:
            unit = dp[i] / v[i]
            dpos[i + 1] += dv[i] * unit
            dpos[i] -= dv[i] * unit
        if phi[i] > 0.0:
            unit = de[i] / phi[i]
            deul[i + 1] += dphi[i] * unit
            deul[i] -= dphi[i] * unit
    return float(loss), dpos, deul


def inertia_loss(poses, p: InertiaParams = None):
    """Trajectory smoothness penalty over absolute poses.

    Returns (value, gradient) with the gradient shaped (N, 6) per pose as
    (translation, rotation). Needs at least 4 poses (the first jerk).
    """
    if len(poses) < 4:
        raise ValueError(f"inertia loss needs at least 4 poses, got {len(poses)}")
    p = p if p is not None else InertiaParams()
    positions = np.stack([q.translation for q in poses])
    eulers = np.stack([q.rotation for q in poses])
    loss, dpos, deul = _inertia_from_arrays(positions, eulers, p)
    return loss, np.concatenate([dpos, deul], axis=1)


# ---------------------------------------------------------------------------
# spatial terms (array-level internals)


def _as_image(x):
    return x.intensity if isinstance(x, Frame) else np.asarray(x, dtype=np.float64)


def _mask_grid(mask, shape):
    if mask is None:
        return np.ones(shape), None
    if isinstance(mask, CombinedMask):
        return mask.grid, mask
    return np.asarray(mask, dtype=np.float64), None


def _l1_term(target, warped_vals, validity, mask_grid):
    """Masked mean absolute error: value, d/dwarped, d/dmask."""
    n = target.size
    res = target - warped_vals
    w = mask_grid * validity
    val = float(np.sum(np.abs(res) * w) / n)
    d_warped = -np.sign(res) * w / n
    d_mask = np.abs(res) * validity / n
    return val, d_warped, d_mask


def _win9(a):
    """Sum over each pixel's 3x3 neighborhood with zero padding (self-adjoint)."""
    p = np.pad(a, 1)
    return (
        p[0:-2, 0:-2] + p[0:-2, 1:-1] + p[0:-2, 2:]
        + p[1:-1, 0:-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
        + p[2:, 0:-2] + p[2:, 1:-1] + p[2:, 2:]
    )


def _ssim_term(target, warped_vals, validity, mask_grid):
    """Masked structural dissimilarity: value, d/dwarped, d/dmask.

    SSIM uses 3x3 uniform windows; a window counts only when fully interior
    and every warped sample in it is valid. The loss is the mean over those
    windows of mask * (1 - SSIM)/2.
    """
    h, w = target.shape
    zeros = np.zeros_like(target)
    if h < 3 or w < 3:
        return 0.0, zeros, zeros.copy()

    win_ok = _win9(validity.astype(np.float64)) > 8.5
    win_ok[0, :] = win_ok[-1, :] = False
    win_ok[:, 0] = win_ok[:, -1] = False
    denom = float(np.count_nonzero(win_ok))
    if denom == 0.0:
        return 0.0, zeros, zeros.copy()

    mu_x = _win9(target) / 9.0
    mu_y = _win9(warped_vals) / 9.0
    sxx = _win9(target * target) / 9.0 - mu_x * mu_x
    syy = _win9(warped_vals * warped_vals) / 9.0 - mu_y * mu_y
    sxy = _win9(target * warped_vals) / 9.0 - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    ssim = (a1 * a2) / (b1 * b2)

    loss_p = 0.5 * (1.0 - ssim)
    wgt = np.where(win_ok, mask_grid, 0.0)
    val = float(np.sum(wgt * loss_p) / denom)
    d_mask = np.where(win_ok, loss_p, 0.0) / denom

    # d(weighted loss)/dSSIM at each window center
    p = -wgt / (2.0 * denom)
    ds_dmu_y = 2.0 * (mu_x * a2 * b1 - mu_y * a1 * a2) / (b1 * b1 * b2)
    ds_dsyy = -(a1 * a2) / (b1 * b2 * b2)
    ds_dsxy = 2.0 * a1 / (b1 * b2)
    gm = np.where(win_ok, p * ds_dmu_y, 0.0)
    gyy = np.where(win_ok, p * ds_dsyy, 0.0)
    gxy = np.where(win_ok, p * ds_dsxy, 0.0)

    d_warped = (
        _win9(gm)
        + 2.0 * (warped_vals * _win9(gyy) - _win9(gyy * mu_y))
        + (target * _win9(gxy) - _win9(gxy * mu_x))
    ) / 9.0
    return val, d_warped, d_mask


def _align3d_term(depth_src, wc: WarpCoords):
    """Point-cloud alignment against source depth sampled at the warp coords.

    Returns (value, d_coords (H,W,2), d_points (H,W,3), d_depth_src (H,W)).
    d_points is the gradient w.r.t. the transformed target points X'; the
    caller pushes d_coords and d_points through warp_backward.
    """
    k = wc.cache.k
    dtil, gx, gy, validity = sample_at_warp(depth_src, wc)
    # sampled depth must itself be positive to form a source-frame point
    validity = validity & (dtil > 0.0)
    n_valid = float(np.count_nonzero(validity))
    shape = wc.cache.depth.shape
    if n_valid == 0.0:
        return 0.0, np.zeros(shape + (2,)), np.zeros(shape + (3,)), np.zeros(shape)

    up = wc.coords[..., 0]
    vp = wc.coords[..., 1]
    xbar_s = (up - k.cx) / k.fx
    ybar_s = (vp - k.cy) / k.fy
    ps = np.stack([xbar_s * dtil, ybar_s * dtil, dtil], axis=-1)
    e = wc.cache.xp - ps
    nrm = np.linalg.norm(e, axis=-1)
    val = float(np.sum(np.where(validity, nrm, 0.0)) / n_valid)

    safe = np.where(nrm > 1e-12, nrm, 1.0)
    ehat = np.where((validity & (nrm > 1e-12))[..., None], e / safe[..., None], 0.0)
    d_points = ehat / n_valid
    d_ps = -d_points

    ray_s = np.stack([xbar_s, ybar_s, np.ones_like(xbar_s)], axis=-1)
    d_dtil = np.einsum("hwc,hwc->hw", d_ps, ray_s)
    d_coords = np.zeros(shape + (2,))
    d_coords[..., 0] = d_ps[..., 0] * dtil / k.fx + d_dtil * gx
    d_coords[..., 1] = d_ps[..., 1] * dtil / k.fy + d_dtil * gy

    scatter_w = np.where(validity, d_dtil, 0.0)
    d_depth_src = kernels.bilinear_scatter(
        depth_src.shape, np.where(validity, up, -1.0), np.where(validity, vp, -1.0), scatter_w
    )
    return val, d_coords, d_points, d_depth_src


# ---------------------------------------------------------------------------
# public per-term functions (value + gradients through the warp chain)


@dataclass
class TermGrads:
    """Gradients of one spatial term w.r.t. its upstream parameters."""

    d_depth: np.ndarray  # w.r.t. the target depth map that produced the warp
    d_pose: np.ndarray  # (6,) w.r.t. the warp transform's parameters
    d_expl_logits: Optional[np.ndarray] = None


def _require_pose_params(warped):
    if warped.cache.rotation_params is None:
        raise ValueError("warp was not built from a Pose6DoF; pose gradient unavailable")
    return warped.cache.rotation_params


def _expl_chain(mask, d_mask):
    if isinstance(mask, CombinedMask) and mask.soft is not None:
        hard = mask.hard.grid if mask.hard is not None else 1.0
        s = sigmoid(mask.soft.logits)
        return d_mask * hard * s * (1.0 - s)
    return None


def reconstruction_loss(target, warped: WarpResult, mask=None):
    """Masked mean absolute photometric error between target and warped view.

    Returns (value, TermGrads); the mean is over all pixels so the value is
    resolution independent.
    """
    tgt = _as_image(target)
    if tgt.shape != warped.synthesized.shape:
        raise ValueError(f"target shape {tgt.shape} vs warped {warped.synthesized.shape}")
    grid, cm = _mask_grid(mask, tgt.shape)
    val, d_warped, d_mask = _l1_term(tgt, warped.synthesized, warped.validity, grid)
    d_coords = np.stack([d_warped * warped.grad_u, d_warped * warped.grad_v], axis=-1)
    d_depth, d_rot, d_tr = warp_backward(warped.cache, d_coords=d_coords)
    d_pose = pose_grad_from_matrix_grads(_require_pose_params(warped), d_rot, d_tr)
    return val, TermGrads(d_depth, d_pose, _expl_chain(cm, d_mask))


def ssim_loss(target, warped: WarpResult, mask=None):
    """Masked structural-dissimilarity loss, (1 - SSIM)/2 on 3x3 windows."""
    tgt = _as_image(target)
    if tgt.shape != warped.synthesized.shape:
        raise ValueError(f"target shape {tgt.shape} vs warped {warped.synthesized.shape}")
    grid, cm = _mask_grid(mask, tgt.shape)
    val, d_warped, d_mask = _ssim_term(tgt, warped.synthesized, warped.validity, grid)
    d_coords = np.stack([d_warped * warped.grad_u, d_warped * warped.grad_v], axis=-1)
    d_depth, d_rot, d_tr = warp_backward(warped.cache, d_coords=d_coords)
    d_pose = pose_grad_from_matrix_grads(_require_pose_params(warped), d_rot, d_tr)
    return val, TermGrads(d_depth, d_pose, _expl_chain(cm, d_mask))


@dataclass
class Align3DGrads:
    d_depth_target: np.ndarray
    d_depth_source: np.ndarray
    d_pose: np.ndarray


def alignment_3d_loss(depth_t, depth_s, t: Pose6DoF, k: CameraIntrinsics, warp=None):
    """Mean 3D distance between transformed target points and source points.

    warp may be a WarpCoords/WarpResult previously computed from (depth_t, t,
    k); when omitted it is recomputed. Returns (value, Align3DGrads).
    """
    depth_t = np.asarray(depth_t, dtype=np.float64)
    depth_s = np.asarray(depth_s, dtype=np.float64)
    if depth_t.shape != depth_s.shape:
        raise ValueError(f"depth shapes differ: {depth_t.shape} vs {depth_s.shape}")
    if warp is None:
        wc = warp_matrix(depth_t, t.rotation_matrix(), t.translation, k, rotation_params=t.rotation)
    else:
        wc = warp if isinstance(warp, WarpCoords) else WarpCoords(warp.coords, warp.validity, warp.cache)
    val, d_coords, d_points, d_depth_s = _align3d_term(depth_s, wc)
    d_depth_t, d_rot, d_tr = warp_backward(wc.cache, d_coords=d_coords, d_points=d_points)
    d_pose = pose_grad_from_matrix_grads(_require_pose_params(wc if warp is None else warp), d_rot, d_tr)
    return val, Align3DGrads(d_depth_t, d_depth_s, d_pose)


# ---------------------------------------------------------------------------
# depth parameterization


def decode_depth(logits, d_min, d_max):
    """Bounded depth map: d_min + (d_max - d_min) * sigmoid(logits)."""
    return d_min + (d_max - d_min) * sigmoid(logits)


def decode_depth_grad(logits, d_min, d_max):
    s = sigmoid(logits)
    return (d_max - d_min) * s * (1.0 - s)


def depth_to_logits(depth, d_min, d_max):
    """Inverse of decode_depth for initialization; depth must lie inside the bounds."""
    frac = (np.asarray(depth, dtype=np.float64) - d_min) / (d_max - d_min)
    if np.any(frac <= 0.0) or np.any(frac >= 1.0):
        raise ValueError(f"depth outside the open interval ({d_min}, {d_max})")
    return np.log(frac / (1.0 - frac))


# ---------------------------------------------------------------------------
# snippet preparation and the multi-scale total


@dataclass
class PairSpec:
    """One ordered (target, source) frame combination within a snippet.

    rel indexes the relative pose between frames (rel, rel+1); src_is_prev
    selects whether the source is the earlier frame (transform = rel) or the
    later one (transform = rel inverse).
    """

    tgt: int
    src: int
    rel: int
    src_is_prev: bool


@dataclass
class PreparedSnippet:
    """Per-snippet immutable data shared across loss evaluations."""

    images: list
    k: CameraIntrinsics
    scales: tuple
    pyr: dict
    ks: dict
    grids: dict
    pairs: list
    n_frames: int


def make_pairs(n_frames, pair_mode="both"):
    pairs = []
    for i in range(n_frames - 1):
        if pair_mode in ("both", "prev"):
            pairs.append(PairSpec(tgt=i + 1, src=i, rel=i, src_is_prev=True))
        if pair_mode in ("both", "next"):
            pairs.append(PairSpec(tgt=i, src=i + 1, rel=i, src_is_prev=False))
    if not pairs:
        raise ValueError(f"unknown pair_mode {pair_mode!r}")
    return pairs


def prepare_snippet(frames, k: CameraIntrinsics, scales=(1, 2, 4, 8), pair_mode="both") -> PreparedSnippet:
    """Precompute image pyramids, per-scale intrinsics and ray grids."""
    images = [_as_image(f) for f in frames]
    if len(images) < 2:
        raise ValueError(f"snippet needs at least 2 frames, got {len(images)}")
    for img in images:
        if img.shape != (k.height, k.width):
            raise ValueError(f"frame shape {img.shape} does not match {k.height}x{k.width}")
    scales = tuple(int(s) for s in scales)
    pyr = {f: [kernels.box_down(img, f) if f > 1 else img for img in images] for f in scales}
    ks = {f: k.scaled(f) for f in scales}
    grids = {f: normalized_grid(ks[f]) for f in scales}
    return PreparedSnippet(
        images=images, k=k, scales=scales, pyr=pyr, ks=ks, grids=grids,
        pairs=make_pairs(len(images), pair_mode), n_frames=len(images),
    )


def total_loss(
    state: "SnippetState",
    prep: PreparedSnippet,
    weights: LossWeights = None,
    inertia: InertiaParams = None,
    hard_masks=None,
    with_gradients=True,
) -> LossBreakdown:
    """Weighted multi-scale objective over one snippet state.

    hard_masks is a list of HardEdgeMask aligned with prep.pairs (None means
    no hard masking). Zero-weight terms are skipped entirely and reported as
    0. The inertia term is scale independent and appears once.
    """
    weights = weights if weights is not None else LossWeights()
    inertia = inertia if inertia is not None else InertiaParams()
    n = prep.n_frames
    n_pairs = len(prep.pairs)
    notices = []

    depths = [decode_depth(l, state.d_min, state.d_max) for l in state.depth_logits]
    expl_values = [sigmoid(l) for l in state.expl_logits]
    hard_grids = [
        hard_masks[p].grid if hard_masks is not None else None for p in range(n_pairs)
    ]
    combined = [
        expl_values[p] if hard_grids[p] is None else hard_grids[p] * expl_values[p]
        for p in range(n_pairs)
    ]

    g_depth = [np.zeros_like(d) for d in depths]
    g_pose = np.zeros((n - 1, 6))
    g_comb = [np.zeros_like(v) for v in expl_values]  # d/d combined-mask value
    g_vals = [np.zeros_like(v) for v in expl_values]  # d/d confidence value (BCE)

    rel_mats = []
    for i in range(n - 1):
        r, dr = euler_rotation_grads(state.poses[i, 3:6])
        rel_mats.append((r, dr, state.poses[i, 0:3]))

    inertia_val = 0.0
    if weights.w_inertia > 0.0:
        if n >= 4:
            positions, eulers, jac_pos, jac_eul = chain_with_jacobian(state.poses)
            inertia_val, dpos, deul = _inertia_from_arrays(positions, eulers, inertia)
            if with_gradients:
                g_pose += weights.w_inertia * (
                    np.einsum("ti,tikp->kp", dpos, jac_pos)
                    + np.einsum("ti,tikp->kp", deul, jac_eul)
                )
        else:
            notices.append(f"inertia term skipped: needs >= 4 poses, snippet has {n}")

    rec_s = {f: 0.0 for f in prep.scales}
    ssim_s = {f: 0.0 for f in prep.scales}
    a3d_s = {f: 0.0 for f in prep.scales}
    mask_s = {f: 0.0 for f in prep.scales}
    spatial = weights.w_rec > 0 or weights.w_ssim > 0 or weights.w_3d > 0

    for f in prep.scales:
        kf = prep.ks[f]
        grids_f = prep.grids[f]
        depths_f = [kernels.box_down(d, f) if f > 1 else d for d in depths]
        for pi, pair in enumerate(prep.pairs):
            r_rel, dr_rel, t_rel = rel_mats[pair.rel]
            if pair.src_is_prev:
                r_t, tr_t = r_rel, t_rel
            else:
                r_t, tr_t = r_rel.T, -(r_rel.T @ t_rel)

            m_f = kernels.box_down(combined[pi], f) if f > 1 else combined[pi]
            d_mask_f = np.zeros_like(m_f)
            d_coords = None
            d_points = None
            warped = None

            if spatial:
                warped = synthesize_matrix(
                    prep.pyr[f][pair.src], depths_f[pair.tgt], r_t, tr_t, kf, grids=grids_f
                )
                d_warped = np.zeros_like(warped.synthesized)
                tgt_img = prep.pyr[f][pair.tgt]

                if weights.w_rec > 0:
                    val, dw, dm = _l1_term(tgt_img, warped.synthesized, warped.validity, m_f)
                    rec_s[f] += val
                    d_warped += weights.w_rec * dw
                    d_mask_f += weights.w_rec * dm
                if weights.w_ssim > 0:
                    val, dw, dm = _ssim_term(tgt_img, warped.synthesized, warped.validity, m_f)
                    ssim_s[f] += val
                    d_warped += weights.w_ssim * dw
                    d_mask_f += weights.w_ssim * dm

                d_coords = np.stack(
                    [d_warped * warped.grad_u, d_warped * warped.grad_v], axis=-1
                )
                if weights.w_3d > 0:
                    wc = WarpCoords(warped.coords, warped.validity, warped.cache)
                    val, dc3, dp3, dds = _align3d_term(depths_f[pair.src], wc)
                    a3d_s[f] += val
                    d_coords += weights.w_3d * dc3
                    d_points = weights.w_3d * dp3
                    if with_gradients:
                        g_depth[pair.src] += kernels.box_up_grad(weights.w_3d * dds, f)

            if weights.w_mask > 0:
                vals_f = kernels.box_down(expl_values[pi], f) if f > 1 else expl_values[pi]
                val, dv = mask_values_loss(vals_f)
                mask_s[f] += val
                if with_gradients:
                    g_vals[pi] += kernels.box_up_grad(weights.w_mask * dv, f)

            if with_gradients and warped is not None:
                dd, d_rot, d_tr = warp_backward(warped.cache, d_coords=d_coords, d_points=d_points)
                g_depth[pair.tgt] += kernels.box_up_grad(dd, f)
                g_comb[pi] += kernels.box_up_grad(d_mask_f, f)
                if pair.src_is_prev:
                    g_pose[pair.rel, 0:3] += d_tr
                    for jj in range(3):
                        g_pose[pair.rel, 3 + jj] += np.sum(d_rot * dr_rel[jj])
                else:
                    # R_T = R^T, tr_T = -R^T t: pull back to the pose's own params
                    d_r_rel = d_rot.T - np.outer(t_rel, d_tr)
                    g_pose[pair.rel, 0:3] += -(r_rel @ d_tr)
                    for jj in range(3):
                        g_pose[pair.rel, 3 + jj] += np.sum(d_r_rel * dr_rel[jj])

    total = weights.w_inertia * inertia_val
    for f in prep.scales:
        total += (
            weights.w_rec * rec_s[f]
            + weights.w_ssim * ssim_s[f]
            + weights.w_3d * a3d_s[f]
            + weights.w_mask * mask_s[f]
        )

    grads = None
    if with_gradients:
        g_expl = []
        for pi in range(n_pairs):
            s = expl_values[pi]
            dval = g_vals[pi]
            if hard_grids[pi] is None:
                dval = dval + g_comb[pi]
            else:
                dval = dval + g_comb[pi] * hard_grids[pi]
            g_expl.append(dval * s * (1.0 - s))
        g_logits = [
            g_depth[i] * decode_depth_grad(state.depth_logits[i], state.d_min, state.d_max)
            for i in range(n)
        ]
        grads = GradientSet(depth_logits=g_logits, poses=g_pose, expl_logits=g_expl)

    return LossBreakdown(
        inertia=inertia_val, rec=rec_s, ssim=ssim_s, align3d=a3d_s, mask=mask_s,
        total=float(total), gradients=grads, notices=notices,
    )


# ---------------------------------------------------------------------------
# finite-difference verification harness


@dataclass
class BlockReport:
    """Finite-difference agreement for one parameter block."""

    name: str
    checked: int
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    selector: str
    seed: int
    attempts: int
    blocks: list
    passed: bool

    def summary(self):
        lines = [f"[{'PASS' if self.passed else 'FAIL'}] {self.selector} (seed {self.seed})"]
        for b in self.blocks:
            lines.append(
                f"  {'PASS' if b.passed else 'FAIL'} {b.name}: "
                f"max rel err {b.max_rel_err:.3e} over {b.checked} params"
            )
        return "\n".join(lines)


GRAD_CHECK_SELECTORS = ("inertia", "reconstruction", "ssim", "alignment_3d", "mask", "total")

_FD_MARGIN = 0.05  # pixels away from sampling grid lines / hinge kinks


def _smooth_field(rng, h, w, base, amplitude, n_waves=4):
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    out = np.full((h, w), float(base))
    for _ in range(n_waves):
        fu = rng.uniform(0.15, 0.7) * rng.choice([-1.0, 1.0])
        fv = rng.uniform(0.15, 0.7) * rng.choice([-1.0, 1.0])
        ph = rng.uniform(0.0, 2.0 * np.pi)
        out += (amplitude / n_waves) * np.sin(fu * us + fv * vs + ph)
    return out


def _coord_margins_ok(wc: WarpCoords, margin=_FD_MARGIN):
    """Coordinates far enough from every line where sampling is non-smooth."""
    k = wc.cache.k
    zv = wc.cache.valid_z
    if not zv.any():
        return False
    u = wc.coords[..., 0][zv]
    v = wc.coords[..., 1][zv]
    inb = (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    if inb.any():
        fu = u[inb] % 1.0
        fv = v[inb] % 1.0
        d = min(
            np.minimum(fu, 1.0 - fu).min(),
            np.minimum(fv, 1.0 - fv).min(),
        )
        if d < margin:
            return False
    out = ~inb
    if out.any():
        du = np.minimum(np.abs(u[out]), np.abs(u[out] - (k.width - 1)))
        dv = np.minimum(np.abs(v[out]), np.abs(v[out] - (k.height - 1)))
        if min(du.min(), dv.min()) < margin:
            return False
    return True


def _hinge_margins_ok(a, j, p: InertiaParams, margin=_FD_MARGIN):
    if np.any(np.abs(np.abs(a) - p.a_typ) < margin):
        return False
    if np.any(np.abs(np.abs(j) - p.j_typ) < margin):
        return False
    return True


def _min_align_residual(depth_src, wc: WarpCoords):
    """Smallest valid 3D alignment residual norm (inf when nothing is valid)."""
    k = wc.cache.k
    dtil, _, _, validity = sample_at_warp(depth_src, wc)
    validity = validity & (dtil > 0.0)
    if not validity.any():
        return np.inf
    xbar_s = (wc.coords[..., 0] - k.cx) / k.fx
    ybar_s = (wc.coords[..., 1] - k.cy) / k.fy
    ps = np.stack([xbar_s * dtil, ybar_s * dtil, dtil], axis=-1)
    nrm = np.linalg.norm(wc.cache.xp - ps, axis=-1)
    return float(nrm[validity].min())


def _fd_block(eval_fn, arr, analytic, rng, step, tol, samples, corrupt):
    """Central finite differences on a sample of arr's entries vs analytic."""
    flat = arr.reshape(-1)
    g = analytic.reshape(-1).copy()
    if corrupt:
        g = g * 1.01
    n = flat.size
    idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
    max_err = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = eval_fn()
        flat[i] = orig - step
        fm = eval_fn()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("non-finite loss during finite-difference evaluation")
        fd = (fp - fm) / (2.0 * step)
        err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-8)
        if err > max_err:
            max_err = err
    return len(idx), float(max_err)


def _build_warp_scene(rng, h=12, w=24):
    """Random smooth scene whose warp keeps all samples away from grid lines."""
    k = CameraIntrinsics(fx=14.0, fy=14.0, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h)
    tgt = _smooth_field(rng, h, w, 0.5, 0.4)
    src = _smooth_field(rng, h, w, 0.5, 0.4)
    depth_t = _smooth_field(rng, h, w, 5.0, 0.6)
    depth_s = _smooth_field(rng, h, w, 5.4, 0.6)
    # lateral-dominant motion keeps the sampling offsets clustered mid-cell
    tr = np.array(
        [
            rng.choice([-1.0, 1.0]) * rng.uniform(0.14, 0.22),
            rng.choice([-1.0, 1.0]) * rng.uniform(0.10, 0.18),
            rng.uniform(-0.04, 0.04),
        ]
    )
    rot = rng.uniform(-0.008, 0.008, size=3)
    pose = Pose6DoF(translation=tr, rotation=rot)
    logits = rng.uniform(-1.5, 1.5, size=(h, w))
    return k, tgt, src, depth_t, depth_s, pose, logits


def grad_check(selector, seed=0, corrupt=False, step=1e-4, tol=1e-3, samples=200,
               max_attempts=60) -> GradCheckReport:
    """Verify a loss term's analytic gradients against central differences.

    States are drawn from the seed and re-drawn until every sampled warp
    coordinate sits at least 0.05 pixels from the bilinear grid lines and
    every hinge argument is safely away from its kink. corrupt=True scales
    the analytic gradients by 1.01, which a working harness must flag.
    """
    if selector not in GRAD_CHECK_SELECTORS:
        raise ValueError(f"unknown selector {selector!r}; choose from {GRAD_CHECK_SELECTORS}")
    from .masking import ExplainabilityField, combine, mask_loss

    attempt = 0
    cur_seed = seed
    while True:
        attempt += 1
        if attempt > max_attempts:
            raise RuntimeError(f"could not place a margin-safe state for {selector!r}")
        rng = np.random.default_rng(cur_seed)
        cur_seed += 1

        if selector == "mask":
            logits = rng.uniform(-2.0, 2.0, size=(12, 24))
            field = ExplainabilityField(logits=logits)
            val, g = mask_loss(field)

            def ev():
                return mask_loss(ExplainabilityField(logits=logits))[0]

            blocks_spec = [("explainability", logits, g, ev)]
            break

        if selector == "inertia":
            p = InertiaParams()
            n = 6
            steps = rng.uniform(0.2, 4.0, size=n - 1) * rng.choice([1.0, 1.0, 1.0, -1.0], size=n - 1)
            positions = np.zeros((n, 3))
            positions[1:, 0] = np.cumsum(steps)
            positions[:, 1] = rng.uniform(-0.3, 0.3, size=n)
            positions[:, 2] = rng.uniform(-0.3, 0.3, size=n)
            eulers = np.zeros((n, 3))
            params = np.concatenate([positions, eulers], axis=1)
            v, phi, a, j = _motion_from_arrays(positions, eulers, p.chi)
            if np.any(v < 0.05) or not _hinge_margins_ok(a, j, p):
                continue
            val, dpos, deul = _inertia_from_arrays(positions, eulers, p)
            if val <= 0.0:
                continue
            analytic = np.concatenate([dpos, deul], axis=1)

            def ev():
                return _inertia_from_arrays(params[:, 0:3], params[:, 3:6], p)[0]

            blocks_spec = [("poses", params, analytic, ev)]
            break

        if selector in ("reconstruction", "ssim", "alignment_3d"):
            k, tgt, src, depth_t, depth_s, pose, logits = _build_warp_scene(rng)
            pose_params = np.concatenate([pose.translation, pose.rotation])

            def make_warp():
                pp = Pose6DoF(translation=pose_params[0:3], rotation=pose_params[3:6])
                return synthesize_matrix(
                    src, depth_t, pp.rotation_matrix(), pp.translation, k,
                    rotation_params=pp.rotation,
                )

            warped = make_warp()
            wc = WarpCoords(warped.coords, warped.validity, warped.cache)
            if warped.validity.mean() < 0.6 or not _coord_margins_ok(wc):
                continue

            if selector == "alignment_3d":
                if _min_align_residual(depth_s, wc) < 1e-2:
                    continue

                def ev():
                    return alignment_3d_loss(
                        depth_t, depth_s,
                        Pose6DoF(translation=pose_params[0:3], rotation=pose_params[3:6]), k,
                    )[0]

                val, grads = alignment_3d_loss(depth_t, depth_s, pose, k, warp=warped)
                blocks_spec = [
                    ("depth_target", depth_t, grads.d_depth_target, ev),
                    ("depth_source", depth_s, grads.d_depth_source, ev),
                    ("pose", pose_params, grads.d_pose, ev),
                ]
                break

            res = np.abs(tgt - warped.synthesized)[warped.validity]
            if selector == "reconstruction" and res.min() < 1e-4:
                continue
            field = ExplainabilityField(logits=logits)
            hard = HardEdgeMask.from_widths((0, 0, 0, 0), k.height, k.width)
            term = reconstruction_loss if selector == "reconstruction" else ssim_loss

            def ev():
                m = combine(hard, ExplainabilityField(logits=logits))
                return term(tgt, make_warp(), m)[0]

            val, grads = term(tgt, warped, combine(hard, field))
            blocks_spec = [
                ("depth", depth_t, grads.d_depth, ev),
                ("pose", pose_params, grads.d_pose, ev),
                ("explainability", logits, grads.d_expl_logits, ev),
            ]
            break

        # selector == "total": a 4-frame snippet exercising every chain at once
        h, w = 12, 24
        k = CameraIntrinsics(fx=14.0, fy=14.0, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h)
        frames = [_smooth_field(rng, h, w, 0.5, 0.4) for _ in range(4)]
        d_min, d_max = 0.1, 100.0
        # one contiguous buffer per block; the state's lists are row views so
        # finite differences on the buffer are seen by the eval closure.
        # Staggered depth bases keep the 3D alignment residuals away from the
        # norm kink at zero.
        depth_stack = np.stack(
            [
                depth_to_logits(_smooth_field(rng, h, w, 4.4 + 0.4 * i, 0.05), d_min, d_max)
                for i in range(4)
            ]
        )
        depth_logits = [depth_stack[i] for i in range(4)]
        # lateral-dominant steps with varying magnitude: keeps sampling offsets
        # mid-cell while making the acceleration hinges active
        rel = np.zeros((3, 6))
        rel[:, 0] = rng.choice([-1.0, 1.0]) * rng.uniform(0.14, 0.30, size=3)
        rel[:, 1] = rng.choice([-1.0, 1.0]) * rng.uniform(0.10, 0.18, size=3)
        rel[:, 2] = rng.uniform(0.005, 0.04, size=3)
        rel[:, 3:6] = rng.uniform(-0.004, 0.004, size=(3, 3))
        prep = prepare_snippet(frames, k, scales=(1, 2), pair_mode="both")
        expl_stack = rng.uniform(-1.5, 1.5, size=(len(prep.pairs), h, w))
        expl_logits = [expl_stack[i] for i in range(len(prep.pairs))]
        # small typical values so the hinges are active at snippet-scale motion
        ip = InertiaParams(chi=5.0, a_typ=0.08, j_typ=0.04)
        lw = LossWeights(scales=(1, 2))

        class _State:
            pass

        st = _State()
        st.depth_logits = depth_logits
        st.poses = rel
        st.expl_logits = expl_logits
        st.d_min, st.d_max = d_min, d_max

        positions, eulers, _, _ = chain_with_jacobian(rel)
        v, phi, a, j = _motion_from_arrays(positions, eulers, ip.chi)
        if np.any(v < 0.05) or not _hinge_margins_ok(a, j, ip, margin=0.02):
            continue
        if _inertia_from_arrays(positions, eulers, ip)[0] <= 0.0:
            continue

        def ev():
            return total_loss(st, prep, lw, ip, with_gradients=False).total

        bd = total_loss(st, prep, lw, ip)
        ok = True
        res_min = np.inf
        for f in prep.scales:
            df = [kernels.box_down(decode_depth(l, d_min, d_max), f) if f > 1 else
                  decode_depth(l, d_min, d_max) for l in depth_logits]
            for pair in prep.pairs:
                rm = euler_rotation_grads(rel[pair.rel, 3:6])[0]
                tv = rel[pair.rel, 0:3]
                if pair.src_is_prev:
                    r_t, tr_t = rm, tv
                else:
                    r_t, tr_t = rm.T, -(rm.T @ tv)
                wr = synthesize_matrix(prep.pyr[f][pair.src], df[pair.tgt], r_t, tr_t,
                                       prep.ks[f], grids=prep.grids[f])
                wcp = WarpCoords(wr.coords, wr.validity, wr.cache)
                if wr.validity.mean() < 0.5 or not _coord_margins_ok(wcp):
                    ok = False
                    break
                if _min_align_residual(df[pair.src], wcp) < 1e-2:
                    ok = False
                    break
                rv = np.abs(prep.pyr[f][pair.tgt] - wr.synthesized)[wr.validity]
                if rv.size:
                    res_min = min(res_min, rv.min())
            if not ok:
                break
        if not ok or res_min < 1e-4:
            continue

        g = bd.gradients
        blocks_spec = [
            ("depth_logits", depth_stack, np.stack(g.depth_logits), ev),
            ("poses", rel, g.poses, ev),
            ("expl_logits", expl_stack, np.stack(g.expl_logits), ev),
        ]
        break

    if not np.isfinite(val if selector != "total" else bd.total):
        raise ValueError(f"non-finite loss for selector {selector!r}")

    rng_fd = np.random.default_rng(seed + 7919)
    blocks = []
    for name, arr, analytic, ev in blocks_spec:
        checked, err = _fd_block(ev, arr, analytic, rng_fd, step, tol, samples, corrupt)
        blocks.append(BlockReport(name=name, checked=checked, max_rel_err=err, passed=err <= tol))
    return GradCheckReport(
        selector=selector, seed=seed, attempts=attempt, blocks=blocks,
        passed=all(b.passed for b in blocks),
    )
