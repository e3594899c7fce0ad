"""Differentiable view synthesis: inverse warping with bilinear sampling.

A warp is parameterized by the target frame's depth map and the relative
transform t mapping target-camera coordinates into source-camera
coordinates (X_src = R @ X_tgt + translation). For each target pixel the
chain is

    backproject with target depth -> rigid transform -> project -> sample

Out-of-bounds or behind-camera pixels are flagged invalid (value 0) rather
than raised; the losses consume validity as a hard mask. warp_backward
pushes upstream gradients through the chain back to the depth map and to
the transform at matrix level (dL/dR as a full 3x3, dL/dtranslation), which
callers contract against dR/dangles of whatever parameterization produced R.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import CameraIntrinsics, Pose6DoF, euler_rotation_grads

_Z_MIN = 1e-9


@dataclass
class Frame:
    """Single grayscale image with values in [0, 1]."""

    intensity: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.intensity.ndim == 3:
            self.intensity = self.intensity.mean(axis=2)
        if not np.isfinite(self.intensity).all():
            raise ValueError("frame contains non-finite values")
        if self.intensity.min() < 0.0 or self.intensity.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")


def pixel_grid(k: CameraIntrinsics):
    """(u, v) integer pixel coordinate grids as float64 arrays."""
    us, vs = np.meshgrid(
        np.arange(k.width, dtype=np.float64), np.arange(k.height, dtype=np.float64)
    )
    return us, vs


def normalized_grid(k: CameraIntrinsics):
    """((u-cx)/fx, (v-cy)/fy) ray slopes for every pixel."""
    us, vs = pixel_grid(k)
    return (us - k.cx) / k.fx, (vs - k.cy) / k.fy


@dataclass
class WarpCache:
    """Intermediates of the warp chain needed by warp_backward."""

    depth: np.ndarray
    k: CameraIntrinsics
    r: np.ndarray
    tr: np.ndarray
    xbar: np.ndarray
    ybar: np.ndarray
    xp: np.ndarray  # transformed points, (H, W, 3)
    zp: np.ndarray
    valid_z: np.ndarray
    rotation_params: np.ndarray = None  # Euler triple when the warp came from a Pose6DoF


@dataclass
class WarpCoords:
    """Continuous source coordinates for every target pixel."""

    coords: np.ndarray  # (H, W, 2) as (u', v')
    valid: np.ndarray  # in front of camera AND inside source bounds
    cache: WarpCache


@dataclass
class WarpResult:
    """Synthesized target view plus sampling metadata."""

    synthesized: np.ndarray
    validity: np.ndarray
    coords: np.ndarray
    cache: WarpCache
    grad_u: np.ndarray = field(repr=False, default=None)
    grad_v: np.ndarray = field(repr=False, default=None)


def warp_matrix(depth, r, tr, k: CameraIntrinsics, grids=None, rotation_params=None) -> WarpCoords:
    """warp_coords with the transform given as (rotation matrix, translation)."""
    depth = np.asarray(depth, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    tr = np.asarray(tr, dtype=np.float64)
    if depth.shape != (k.height, k.width):
        raise ValueError(f"depth shape {depth.shape} does not match {k.height}x{k.width}")
    if np.any(depth <= 0):
        raise ValueError("depth must be strictly positive")
    xbar, ybar = grids if grids is not None else normalized_grid(k)

    identity = not tr.any() and (r == np.eye(3)).all()
    if identity:
        us, vs = pixel_grid(k)
        xp = np.stack([xbar * depth, ybar * depth, depth], axis=-1)
        cache = WarpCache(
            depth, k, r, tr, xbar, ybar, xp, depth.copy(),
            np.ones_like(depth, dtype=bool), rotation_params,
        )
        coords = np.stack([us, vs], axis=-1)
        return WarpCoords(coords=coords, valid=np.ones_like(depth, dtype=bool), cache=cache)

    x = np.stack([xbar * depth, ybar * depth, depth], axis=-1)
    xp = x @ r.T + tr
    zp = xp[..., 2]
    valid_z = zp > _Z_MIN
    zsafe = np.where(valid_z, zp, 1.0)
    up = k.fx * xp[..., 0] / zsafe + k.cx
    vp = k.fy * xp[..., 1] / zsafe + k.cy
    inb = valid_z & (up >= 0.0) & (up <= k.width - 1.0) & (vp >= 0.0) & (vp <= k.height - 1.0)
    # park behind-camera pixels at an out-of-bounds coordinate so sampling skips them
    coords = np.stack([np.where(valid_z, up, -1.0), np.where(valid_z, vp, -1.0)], axis=-1)
    cache = WarpCache(depth, k, r, tr, xbar, ybar, xp, zp, valid_z, rotation_params)
    return WarpCoords(coords=coords, valid=inb, cache=cache)


def warp_coords(depth, t: Pose6DoF, k: CameraIntrinsics, grids=None) -> WarpCoords:
    """Source-pixel location of every target pixel under depth and transform t.

    t maps target-camera coordinates to source-camera coordinates. Pixels
    whose transformed point lies at or behind the source camera plane are
    flagged invalid. The identity transform returns the pixel grid exactly.
    """
    return warp_matrix(
        depth, t.rotation_matrix(), t.translation, k, grids=grids, rotation_params=t.rotation
    )


def bilinear_sample(img, u, v):
    """Bilinear interpolation of img at (u, v): (value, d/du, d/dv, valid).

    Scalars in, scalars out; arrays broadcast elementwise. Outside
    [0, W-1] x [0, H-1] the sample is invalid with value and gradient 0.
    """
    img = np.asarray(img, dtype=np.float64)
    scalar = np.isscalar(u) and np.isscalar(v)
    val, gx, gy, valid = kernels.bilinear_gather(img, u, v)
    if scalar:
        return float(val), float(gx), float(gy), bool(valid)
    return val, gx, gy, valid


def sample_at_warp(img, wc: WarpCoords):
    """Bilinear-sample img at warp coordinates; invalid pixels contribute 0."""
    val, gx, gy, inb = kernels.bilinear_gather(img, wc.coords[..., 0], wc.coords[..., 1])
    validity = wc.valid & inb
    return (
        np.where(validity, val, 0.0),
        np.where(validity, gx, 0.0),
        np.where(validity, gy, 0.0),
        validity,
    )


def synthesize_matrix(img, depth, r, tr, k, grids=None, rotation_params=None) -> WarpResult:
    if img.shape != (k.height, k.width):
        raise ValueError(f"source shape {img.shape} does not match {k.height}x{k.width}")
    wc = warp_matrix(depth, r, tr, k, grids=grids, rotation_params=rotation_params)
    val, gx, gy, validity = sample_at_warp(img, wc)
    return WarpResult(
        synthesized=val, validity=validity, coords=wc.coords, cache=wc.cache,
        grad_u=gx, grad_v=gy,
    )


def synthesize_view(src, depth, t: Pose6DoF, k: CameraIntrinsics, grids=None) -> WarpResult:
    """Warp the source image into the target view (inverse warping).

    src may be a Frame or a raw array; its shape must match the intrinsics.
    """
    img = src.intensity if isinstance(src, Frame) else np.asarray(src, dtype=np.float64)
    return synthesize_matrix(
        img, depth, t.rotation_matrix(), t.translation, k,
        grids=grids, rotation_params=t.rotation,
    )


def warp_backward(cache: WarpCache, d_coords=None, d_points=None):
    """Pull gradients through the warp chain.

    d_coords: (H, W, 2) upstream dL/d(u', v'); d_points: (H, W, 3) upstream
    dL/dX' for losses that consume the transformed 3D points directly. Either
    may be None. Returns

        d_depth (H, W), d_rot (3, 3) = dL/dR, d_tr (3,) = dL/dtranslation.

    Contributions from invalid (behind-camera) pixels are zeroed.
    """
    k = cache.k
    zp = np.where(cache.valid_z, cache.zp, 1.0)
    dxp = np.zeros(cache.xp.shape)
    if d_coords is not None:
        du = np.where(cache.valid_z, d_coords[..., 0], 0.0)
        dv = np.where(cache.valid_z, d_coords[..., 1], 0.0)
        dxp[..., 0] += du * (k.fx / zp)
        dxp[..., 1] += dv * (k.fy / zp)
        dxp[..., 2] -= (du * k.fx * cache.xp[..., 0] + dv * k.fy * cache.xp[..., 1]) / (zp * zp)
    if d_points is not None:
        dxp += np.where(cache.valid_z[..., None], d_points, 0.0)

    d_tr = dxp.sum(axis=(0, 1))
    x = np.stack([cache.xbar * cache.depth, cache.ybar * cache.depth, cache.depth], axis=-1)
    d_rot = np.einsum("hwr,hwc->rc", dxp, x)
    # dX/ddepth = (xbar, ybar, 1), so dX'/ddepth = R @ that
    ray = np.stack([cache.xbar, cache.ybar, np.ones_like(cache.xbar)], axis=-1)
    d_depth = np.einsum("hwr,rc,hwc->hw", dxp, cache.r, ray)
    return d_depth, d_rot, d_tr


def pose_grad_from_matrix_grads(rotation_params, d_rot, d_tr):
    """Contract matrix-level warp gradients into a pose's own 6 parameters."""
    _, dr = euler_rotation_grads(rotation_params)
    g = np.empty(6)
    g[0:3] = d_tr
    for j in range(3):
        g[3 + j] = np.sum(d_rot * dr[j])
    return g


def downsample(img, factor: int):
    """Non-overlapping box average; factor must be 1, 2, 4 or 8 and divide dims."""
    img = np.asarray(img, dtype=np.float64)
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"factor must be one of 1, 2, 4, 8, got {factor}")
    h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"dimensions {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return img.copy()
    return kernels.box_down(img, factor)


def pyramid(img, factors):
    """Box-averaged image pyramid keyed by downsample factor."""
    return {f: downsample(img, f) for f in factors}
