"""Direct photometric visual odometry with inertia and edge-mask regularization.

Per-snippet depth maps, relative 6-DoF poses and per-pixel confidence fields
are fit jointly by Adam against a multi-scale objective: masked photometric
reconstruction, SSIM, 3D point alignment, a confidence regularizer, and a
trajectory-smoothness (inertia) penalty on acceleration and jerk.
"""

from .geometry import CameraIntrinsics, PointCloud, Pose6DoF, compose, invert
from .masking import CombinedMask, DhemParams, ExplainabilityField, HardEdgeMask, build_dhem
from .objective import (
    InertiaParams,
    LossBreakdown,
    LossWeights,
    MotionSeries,
    grad_check,
    inertia_loss,
    motion_series,
    total_loss,
)
from .optimizer import OptimizerConfig, OptTrace, SnippetState, optimize_snippet
from .synthesis import Frame, WarpResult, bilinear_sample, synthesize_view, warp_coords
from .dataset_io import Sequence, Snippet, SynthConfig, load_sequence, synth_generate

__version__ = "0.1.0"
