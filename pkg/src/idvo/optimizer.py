"""Direct per-snippet optimization with Adam.

One snippet is fit by gradient descent over three parameter blocks: per-frame
depth logits (decoded to bounded depth by a logistic), the relative pose
parameters between consecutive frames, and per-pair confidence logits. The
monocular scale gauge is fixed by renormalizing the first relative pose's
translation to delta0 after every step; evaluation re-solves the global
scale anyway. Hard edge masks are rebuilt every `refresh` iterations from
the current pose estimates and treated as constants in between.
"""

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, objective
from .geometry import Pose6DoF, chain_relative_poses, wrap_angle
from .masking import DhemParams, build_dhem
from .objective import InertiaParams, LossWeights
from .synthesis import Frame


@dataclass
class OptimizerConfig:
    """All tunables of a snippet optimization run."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    iters: int = 300
    snippet_len: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    inertia: InertiaParams = field(default_factory=InertiaParams)
    dhem: DhemParams = field(default_factory=DhemParams)
    tau_static: float = 0.01
    seed: int = 0
    pair_mode: str = "both"
    d_min: float = 0.1
    d_max: float = 100.0
    d_init: float = 10.0
    delta0: float = 0.05
    gauge_fix: bool = True
    use_dhem: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0) or not (0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.snippet_len < 2:
            raise ValueError(f"snippet_len must be >= 2, got {self.snippet_len}")
        if not (self.d_min < self.d_init < self.d_max):
            raise ValueError("need d_min < d_init < d_max")


@dataclass
class AdamMoments:
    """First/second moment buffers plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(params, grads, moments: AdamMoments, config: OptimizerConfig):
    """One bias-corrected Adam update, in place; returns params.

    Raises on non-finite gradients so the caller can abort the iteration
    with a diagnostic instead of corrupting the state.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"parameter/gradient shapes differ: {params.shape} vs {grads.shape}")
    if not np.isfinite(grads).all():
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise ValueError(f"non-finite gradient ({bad} entries)")
    moments.t += 1
    moments.m = config.beta1 * moments.m + (1.0 - config.beta1) * grads
    moments.v = config.beta2 * moments.v + (1.0 - config.beta2) * grads * grads
    m_hat = moments.m / (1.0 - config.beta1 ** moments.t)
    v_hat = moments.v / (1.0 - config.beta2 ** moments.t)
    params -= config.lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params


@dataclass
class SnippetState:
    """Optimizable parameters of one snippet."""

    depth_logits: list  # per frame (H, W)
    poses: np.ndarray  # (N-1, 6): relative pose of frame i+1 seen from frame i
    expl_logits: list  # per ordered pair (H, W)
    d_min: float
    d_max: float
    iteration: int = 0

    def depths(self):
        return [objective.decode_depth(l, self.d_min, self.d_max) for l in self.depth_logits]

    def relative_poses(self):
        return [Pose6DoF(translation=p[0:3], rotation=p[3:6]) for p in self.poses]

    def absolute_poses(self):
        return chain_relative_poses(self.relative_poses())


@dataclass
class OptTrace:
    """Per-iteration loss record of one optimization run."""

    iterations: list = field(default_factory=list)  # dicts of term totals + total
    wall_time: float = 0.0
    converged: bool = True
    aborted: bool = False
    abort_reason: str = ""

    def totals(self):
        return np.array([row["total"] for row in self.iterations])

    def write_csv(self, path):
        cols = ["iteration", "inertia", "rec", "ssim", "align3d", "mask", "total"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.iterations:
                w.writerow([row[c] for c in cols])


def static_filter(frames, tau_static=0.01):
    """Drop frames photometrically indistinguishable from the last kept one.

    The change proxy is the mean absolute intensity difference at 1/8 scale;
    the first frame is always kept. Returns (kept_frames, report) where the
    report lists kept indices and (index, score) for dropped frames.
    """
    if not frames:
        raise ValueError("need at least one frame")
    imgs = [f.intensity if isinstance(f, Frame) else np.asarray(f, dtype=np.float64) for f in frames]
    kept = [0]
    dropped = []
    ref = kernels.box_down(imgs[0], 8)
    for i in range(1, len(imgs)):
        cur = kernels.box_down(imgs[i], 8)
        score = float(np.mean(np.abs(cur - ref)))
        if score < tau_static:
            dropped.append((i, score))
        else:
            kept.append(i)
            ref = cur
    return [frames[i] for i in kept], {"kept": kept, "dropped": dropped}


def init_state(snippet, config: OptimizerConfig) -> SnippetState:
    """Deterministic initial state: flat depth, constant forward motion.

    Depths start at d_init everywhere, poses at (0, 0, delta0) with zero
    rotation, confidence logits at +3 (values near 0.95).
    """
    frames = snippet.frames if hasattr(snippet, "frames") else snippet
    n = len(frames)
    if n < 2:
        raise ValueError(f"snippet needs at least 2 frames, got {n}")
    img0 = frames[0].intensity if isinstance(frames[0], Frame) else np.asarray(frames[0])
    h, w = img0.shape
    logit0 = float(objective.depth_to_logits(np.array(config.d_init), config.d_min, config.d_max))
    depth_logits = [np.full((h, w), logit0) for _ in range(n)]
    poses = np.zeros((n - 1, 6))
    poses[:, 2] = config.delta0
    n_pairs = len(objective.make_pairs(n, config.pair_mode))
    expl_logits = [np.full((h, w), 3.0) for _ in range(n_pairs)]
    return SnippetState(
        depth_logits=depth_logits, poses=poses, expl_logits=expl_logits,
        d_min=config.d_min, d_max=config.d_max,
    )


def steering_rate(pose_params):
    """Leftward-positive heading rate of a relative pose (radians per frame).

    The heading axis is camera y (down), so a left turn is a negative
    rotation in the Euler pitch slot.
    """
    return -float(pose_params[4])


def build_hard_masks(state: SnippetState, prep, config: OptimizerConfig):
    """Per-pair hard edge masks from the current pose estimates.

    Speed is the relative translation norm. For pairs warping an earlier
    frame into a later target the steering sign flips: content that exits on
    one side of the earlier frame enters on the opposite side of the later.
    """
    if not config.use_dhem:
        return None
    masks = []
    for pair in prep.pairs:
        p = state.poses[pair.rel]
        v = float(np.linalg.norm(p[0:3]))
        steer = steering_rate(p)
        yaw_rate = steer if not pair.src_is_prev else -steer
        masks.append(build_dhem(v, yaw_rate, prep.k, config.dhem))
    return masks


def _flatten_grads(grads: objective.GradientSet):
    return np.concatenate(
        [np.concatenate([g.ravel() for g in grads.depth_logits]), grads.poses.ravel()]
        + [g.ravel() for g in grads.expl_logits]
    )


def _flatten_params(state: SnippetState):
    return np.concatenate(
        [np.concatenate([l.ravel() for l in state.depth_logits]), state.poses.ravel()]
        + [l.ravel() for l in state.expl_logits]
    )


def _project_gauge(state: SnippetState, config: OptimizerConfig):
    t = state.poses[0, 0:3]
    n = np.linalg.norm(t)
    if n < 1e-12:
        state.poses[0, 0:3] = (0.0, 0.0, config.delta0)
    else:
        state.poses[0, 0:3] = t * (config.delta0 / n)


def optimize_snippet(snippet, config: OptimizerConfig, prep=None, state=None):
    """Fit depth, poses and confidence of one snippet; returns (state, trace)."""
    frames = snippet.frames if hasattr(snippet, "frames") else snippet
    k = snippet.intrinsics if hasattr(snippet, "intrinsics") else None
    if prep is None:
        prep = objective.prepare_snippet(
            frames, k, scales=config.weights.scales, pair_mode=config.pair_mode
        )
    if state is None:
        state = init_state(snippet, config)

    # one flat Adam buffer; the state's blocks become views into it
    flat = _flatten_params(state)
    sizes_d = [l.size for l in state.depth_logits]
    h, w = state.depth_logits[0].shape
    off = 0
    state.depth_logits = [
        flat[off + i * h * w : off + (i + 1) * h * w].reshape(h, w) for i in range(len(sizes_d))
    ]
    off += sum(sizes_d)
    state.poses = flat[off : off + state.poses.size].reshape(-1, 6)
    off += state.poses.size
    n_pairs = len(state.expl_logits)
    state.expl_logits = [
        flat[off + i * h * w : off + (i + 1) * h * w].reshape(h, w) for i in range(n_pairs)
    ]

    moments = AdamMoments.zeros(flat.size)
    trace = OptTrace()
    hard_masks = None
    t0 = time.perf_counter()

    for it in range(config.iters):
        if config.use_dhem and it % config.dhem.refresh == 0:
            hard_masks = build_hard_masks(state, prep, config)
        bd = objective.total_loss(state, prep, config.weights, config.inertia, hard_masks)
        row = bd.term_totals()
        row["iteration"] = it
        row["total"] = bd.total
        trace.iterations.append(row)
        if not np.isfinite(bd.total):
            trace.aborted = True
            trace.abort_reason = f"non-finite loss at iteration {it}"
            break
        try:
            adam_step(flat, _flatten_grads(bd.gradients), moments, config)
        except ValueError as err:
            trace.aborted = True
            trace.abort_reason = f"iteration {it}: {err}"
            break
        if config.gauge_fix:
            _project_gauge(state, config)
        state.iteration = it + 1

    trace.wall_time = time.perf_counter() - t0
    if trace.iterations and not trace.aborted:
        trace.converged = trace.iterations[-1]["total"] <= trace.iterations[0]["total"]
    return state, trace


def _mean_angles(stack):
    """Componentwise circular-safe mean of Euler triples (rows)."""
    ref = stack[0]
    return wrap_angle(ref + np.mean(wrap_angle(stack - ref), axis=0))


def chain_snippets(states, overlap=1):
    """Assemble per-snippet relative poses into one absolute trajectory.

    Consecutive snippets share `overlap` frames, i.e. overlap-1 relative
    poses, which are averaged componentwise (translations arithmetically,
    angles with wrapping). overlap 0 or 1 concatenates. Returns
    camera-to-world Pose6DoF, starting at the identity.
    """
    if overlap < 0:
        raise ValueError(f"overlap must be non-negative, got {overlap}")
    if not states:
        return [Pose6DoF.identity()]
    shared = max(overlap - 1, 0)
    slots = []  # per global pair index: list of (6,) parameter rows
    start = 0
    for si, st in enumerate(states):
        n_rel = st.poses.shape[0]
        if si > 0 and shared > n_rel:
            raise ValueError(
                f"snippet {si} has {n_rel} relative poses, fewer than the {shared} shared ones"
            )
        for j in range(n_rel):
            idx = start + j
            if idx == len(slots):
                slots.append([])
            elif idx > len(slots):
                raise ValueError("inconsistent snippet lengths for the given overlap")
            slots[idx].append(st.poses[j])
        start += n_rel - shared

    rels = []
    for rows in slots:
        stack = np.stack(rows)
        rels.append(
            Pose6DoF(
                translation=np.mean(stack[:, 0:3], axis=0),
                rotation=_mean_angles(stack[:, 3:6]),
            )
        )
    return chain_relative_poses(rels)


def save_snippet_results(out_dir, index, state: SnippetState, trace: OptTrace, timestamps=None):
    """Write one snippet's poses (KITTI text), depths (PFM) and trace (CSV)."""
    from . import dataset_io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{index:04d}"
    dataset_io.write_kitti_poses(out / f"snippet_{tag}_poses.txt", state.absolute_poses())
    for fi, depth in enumerate(state.depths()):
        dataset_io.pfm_write(out / f"snippet_{tag}_depth_{fi:02d}.pfm", depth)
    trace.write_csv(out / f"snippet_{tag}_trace.csv")
