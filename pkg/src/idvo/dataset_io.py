"""Dataset ingestion, file-format codecs and the synthetic oracle generator.

On-disk layout (KITTI odometry style, used for real and synthetic data):

    <dir>/image_2/000000.png ...   8- or 16-bit grayscale or RGB PNG
    <dir>/times.txt                one ascending timestamp per frame
    <dir>/calib.txt                'P2:' projection line (12 numbers)
    <dir>/poses.txt                optional camera-to-world ground truth,
                                   12 numbers per line (row-major 3x4 [R|t])
    <dir>/depth/000000.pfm ...     optional ground-truth depth maps

PFM files are single channel, little endian (header scale -1.0), bottom-up
row order. Parsers reject malformed input with a diagnostic naming the file
and line; nothing is silently defaulted.
"""

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .geometry import CameraIntrinsics, Pose6DoF, euler_to_rotation, rotation_to_euler
from .synthesis import Frame


class ParseError(ValueError):
    """Malformed file content."""


class LoadError(ValueError):
    """Missing or inconsistent dataset pieces."""


# ---------------------------------------------------------------------------
# KITTI pose text


def parse_kitti_pose_line(line, line_no=0) -> Pose6DoF:
    """One 'r11 r12 r13 tx r21 ... tz' line to a camera-to-world pose.

    A rotation block with more than 1e-6 orthonormality drift is projected
    to the nearest rotation; reflections and singular blocks are rejected.
    """
    tokens = line.split()
    if len(tokens) != 12:
        raise ParseError(f"line {line_no}: expected 12 values, got {len(tokens)}")
    try:
        vals = np.array([float(t) for t in tokens])
    except ValueError as err:
        raise ParseError(f"line {line_no}: {err}") from None
    if not np.isfinite(vals).all():
        raise ParseError(f"line {line_no}: non-finite value")
    m = vals.reshape(3, 4)
    r = m[:, :3]
    if np.linalg.det(r) <= 0:
        raise ParseError(f"line {line_no}: rotation block is singular or a reflection")
    drift = np.abs(r.T @ r - np.eye(3)).max()
    if drift > 1e-6:
        u, _, vt = np.linalg.svd(r)
        d = np.sign(np.linalg.det(u @ vt))
        r = u @ np.diag([1.0, 1.0, d]) @ vt
        if np.linalg.det(r) <= 0:
            raise ParseError(f"line {line_no}: rotation block cannot be orthonormalized")
    return Pose6DoF(translation=m[:, 3], rotation=rotation_to_euler(r))


def serialize_kitti_pose(pose: Pose6DoF) -> str:
    r = euler_to_rotation(pose.rotation)
    m = np.hstack([r, pose.translation.reshape(3, 1)])
    return " ".join(f"{x:.17g}" for x in m.reshape(-1))


def read_kitti_poses(path):
    path = Path(path)
    poses = []
    try:
        text = path.read_text()
    except OSError as err:
        raise LoadError(f"{path}: {err}") from None
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            poses.append(parse_kitti_pose_line(line, line_no=i + 1))
        except ParseError as err:
            raise ParseError(f"{path}: {err}") from None
    if not poses:
        raise ParseError(f"{path}: no pose lines found")
    return poses


def write_kitti_poses(path, poses):
    Path(path).write_text("".join(serialize_kitti_pose(p) + "\n" for p in poses))


# ---------------------------------------------------------------------------
# KITTI calibration


def parse_kitti_calib(text, image_size, resize=None) -> CameraIntrinsics:
    """Intrinsics from a calib.txt 'P2:' projection line.

    image_size is the native (width, height); resize, when given as target
    (width, height), rescales focal lengths and principal point by the plain
    axis ratios.
    """
    width, height = image_size
    for line in text.splitlines():
        if line.startswith("P2:"):
            tokens = line.split()[1:]
            if len(tokens) != 12:
                raise ParseError(f"P2 line has {len(tokens)} values, expected 12")
            try:
                p = np.array([float(t) for t in tokens]).reshape(3, 4)
            except ValueError as err:
                raise ParseError(f"P2 line: {err}") from None
            fx, fy, cx, cy = p[0, 0], p[1, 1], p[0, 2], p[1, 2]
            if resize is not None:
                tw, th = resize
                fx *= tw / width
                cx *= tw / width
                fy *= th / height
                cy *= th / height
                width, height = tw, th
            return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
    raise ParseError("no P2: line found")


def read_kitti_calib(path, image_size, resize=None) -> CameraIntrinsics:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise LoadError(f"{path}: {err}") from None
    try:
        return parse_kitti_calib(text, image_size, resize=resize)
    except ParseError as err:
        raise ParseError(f"{path}: {err}") from None


# ---------------------------------------------------------------------------
# images


def _to_gray_unit(img) -> np.ndarray:
    """Any loaded image to float64 grayscale in [0, 1] (channels averaged)."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise LoadError(f"{path}: cannot read image")
    return _to_gray_unit(img)


def write_image_png(path, img, bits=16):
    """Store a [0, 1] float image as 8- or 16-bit grayscale PNG."""
    g = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        data = np.round(g * 65535.0).astype(np.uint16)
    else:
        data = np.round(g * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), data):
        raise LoadError(f"{path}: cannot write image")


def resize_box(img, width, height):
    """Area-averaging resize (box filter for integer downscale factors)."""
    return cv2.resize(img, (width, height), interpolation=cv2.INTER_AREA)


# ---------------------------------------------------------------------------
# PFM depth maps


def pfm_write(path, data):
    """Single-channel little-endian PFM, bottom-up rows, scale -1.0."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("depth map contains non-finite values")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(arr[::-1].astype("<f4").tobytes())


def pfm_read(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            raise ParseError(f"{path}: color PFM unsupported (expected single channel 'Pf')")
        if magic != b"Pf":
            raise ParseError(f"{path}: bad magic {magic!r}, expected b'Pf'")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ParseError(f"{path}: malformed dimensions line")
        try:
            w, h = int(dims[0]), int(dims[1])
        except ValueError:
            raise ParseError(f"{path}: malformed dimensions line") from None
        if w <= 0 or h <= 0:
            raise ParseError(f"{path}: non-positive dimensions {w}x{h}")
        try:
            scale = float(fh.readline())
        except ValueError:
            raise ParseError(f"{path}: malformed scale line") from None
        if scale >= 0:
            raise ParseError(f"{path}: big-endian PFM (scale {scale}) unsupported")
        payload = fh.read(w * h * 4)
        if len(payload) != w * h * 4:
            raise ParseError(f"{path}: truncated payload ({len(payload)} bytes)")
        arr = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return arr[::-1].copy()


# ---------------------------------------------------------------------------
# sequences and snippets


@dataclass
class Sequence:
    """Ordered frames with shared intrinsics and optional ground truth."""

    frames: list
    intrinsics: CameraIntrinsics
    timestamps: np.ndarray
    gt_poses: list = None
    gt_depths: list = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.frames):
            raise LoadError(
                f"{len(self.frames)} frames but {len(self.timestamps)} timestamps"
            )
        if np.any(np.diff(self.timestamps) <= 0):
            raise LoadError("timestamps must be strictly increasing")
        if self.gt_poses is not None and len(self.gt_poses) != len(self.frames):
            raise LoadError(
                f"{len(self.frames)} frames but {len(self.gt_poses)} ground-truth poses"
            )


@dataclass
class Snippet:
    """A short frame window: the optimization unit."""

    frames: list
    intrinsics: CameraIntrinsics
    timestamps: np.ndarray
    start: int = 0


def load_sequence(directory, resize=None) -> Sequence:
    """Load a KITTI-layout directory; resize is an optional (width, height)."""
    d = Path(directory)
    if not d.is_dir():
        raise LoadError(f"{d}: not a directory")
    img_dir = None
    for cand in ("image_2", "image_0"):
        if (d / cand).is_dir():
            img_dir = d / cand
            break
    if img_dir is None:
        raise LoadError(f"{d}: no image_2/ or image_0/ subdirectory")
    paths = sorted(img_dir.glob("*.png"))
    if not paths:
        raise LoadError(f"{img_dir}: no PNG images")

    times_path = d / "times.txt"
    if not times_path.is_file():
        raise LoadError(f"{times_path}: missing times file")
    times = np.array([float(t) for t in times_path.read_text().split()])
    if len(times) != len(paths):
        raise LoadError(
            f"{d}: {len(paths)} images but {len(times)} timestamps in times.txt"
        )

    first = read_image(paths[0])
    native = (first.shape[1], first.shape[0])
    calib_path = d / "calib.txt"
    if not calib_path.is_file():
        raise LoadError(f"{calib_path}: missing calib file")
    k = read_kitti_calib(calib_path, native, resize=resize)

    frames = []
    for p, t in zip(paths, times):
        img = read_image(p)
        if (img.shape[1], img.shape[0]) != native:
            raise LoadError(f"{p}: size {img.shape[1]}x{img.shape[0]} differs from {native}")
        if resize is not None:
            img = resize_box(img, resize[0], resize[1])
        frames.append(Frame(intensity=np.clip(img, 0.0, 1.0), timestamp=float(t)))

    gt_poses = None
    poses_path = d / "poses.txt"
    if poses_path.is_file():
        gt_poses = read_kitti_poses(poses_path)
        if len(gt_poses) != len(frames):
            raise LoadError(
                f"{poses_path}: {len(gt_poses)} poses but {len(frames)} images"
            )

    gt_depths = None
    depth_dir = d / "depth"
    if depth_dir.is_dir():
        dpaths = sorted(depth_dir.glob("*.pfm"))
        if dpaths:
            if len(dpaths) != len(frames):
                raise LoadError(
                    f"{depth_dir}: {len(dpaths)} depth maps but {len(frames)} images"
                )
            gt_depths = [pfm_read(p).astype(np.float64) for p in dpaths]

    return Sequence(
        frames=frames, intrinsics=k, timestamps=times, gt_poses=gt_poses, gt_depths=gt_depths
    )


def make_snippets(seq: Sequence, length, stride):
    """Overlapping windows [i, i+length) for i = 0, stride, 2*stride, ..."""
    if length < 2:
        raise ValueError(f"snippet length must be >= 2, got {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = []
    n = len(seq.frames)
    for start in range(0, n - length + 1, stride):
        out.append(
            Snippet(
                frames=seq.frames[start : start + length],
                intrinsics=seq.intrinsics,
                timestamps=seq.timestamps[start : start + length],
                start=start,
            )
        )
    return out


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    """Procedural scene + trajectory with exact ground truth.

    The scene is a tilted textured plane; every frame is rendered by
    intersecting pixel rays with the plane and evaluating a band-limited
    sinusoid texture at the hit point, so rendered images, depth maps and
    poses are mutually consistent by construction. The trajectory holds
    per-frame speed (optionally a profile) along a heading that turns at a
    constant yaw_rate; drift_angle slides the motion direction away from the
    optical axis for stronger lateral parallax. Jitter adds zero-mean
    Gaussian noise to positions/orientations before rendering, so the
    jittered trajectory is the ground truth.
    """

    width: int = 64
    height: int = 32
    n_frames: int = 20
    seed: int = 0
    fx: float = None  # defaults to 0.9 * width
    base_depth: float = 12.0
    plane_tilt: float = 0.15
    texture_waves: int = 6
    texture_min_wavelength_px: float = 10.0
    texture_amplitude: float = 0.45
    speed: float = 0.3
    speed_profile: list = None  # optional per-step speeds, length n_frames - 1
    yaw_rate: float = 0.0
    drift_angle: float = 0.0
    jitter_trans: float = 0.0
    jitter_rot: float = 0.0
    dt: float = 0.1

    def __post_init__(self):
        if self.width % 8 or self.height % 8:
            raise ValueError(
                f"resolution {self.width}x{self.height} must be divisible by 8"
            )
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if self.speed_profile is not None and len(self.speed_profile) != self.n_frames - 1:
            raise ValueError(
                f"speed_profile needs {self.n_frames - 1} entries, got {len(self.speed_profile)}"
            )


def _texture(rng, cfg, fx):
    """Band-limited world-space texture: base level plus random sinusoids."""
    n = cfg.texture_waves
    amps = rng.uniform(0.5, 1.0, n)
    amps *= cfg.texture_amplitude / amps.sum()
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    wl_px = rng.uniform(cfg.texture_min_wavelength_px, 4.0 * cfg.texture_min_wavelength_px, n)
    freqs = 2.0 * np.pi / (wl_px * cfg.base_depth / fx)  # world-space angular frequency
    phases = rng.uniform(0.0, 2.0 * np.pi, n)

    def tex(points):
        val = np.full(points.shape[:-1], 0.5)
        for i in range(n):
            val += amps[i] * np.sin(freqs[i] * (points @ dirs[i]) + phases[i])
        return val

    return tex


def synth_generate(cfg: SynthConfig) -> Sequence:
    """Render a synthetic sequence with exact poses and depth maps."""
    rng = np.random.default_rng(cfg.seed)
    fx = cfg.fx if cfg.fx is not None else 0.9 * cfg.width
    k = CameraIntrinsics(
        fx=fx, fy=fx, cx=(cfg.width - 1) / 2.0, cy=(cfg.height - 1) / 2.0,
        width=cfg.width, height=cfg.height,
    )

    normal = np.array(
        [rng.uniform(-cfg.plane_tilt, cfg.plane_tilt), rng.uniform(-cfg.plane_tilt, cfg.plane_tilt), 1.0]
    )
    normal /= np.linalg.norm(normal)
    plane_d = cfg.base_depth
    tex = _texture(rng, cfg, fx)

    speeds = (
        np.asarray(cfg.speed_profile, dtype=np.float64)
        if cfg.speed_profile is not None
        else np.full(cfg.n_frames - 1, cfg.speed)
    )
    positions = np.zeros((cfg.n_frames, 3))
    eulers = np.zeros((cfg.n_frames, 3))
    heading = 0.0
    for t in range(1, cfg.n_frames):
        heading += cfg.yaw_rate
        move = heading + cfg.drift_angle
        step = np.array([np.sin(move), 0.0, np.cos(move)]) * speeds[t - 1]
        positions[t] = positions[t - 1] + step
        eulers[t] = (0.0, heading, 0.0)
    if cfg.jitter_trans > 0.0:
        positions[1:] += rng.normal(0.0, cfg.jitter_trans, size=(cfg.n_frames - 1, 3))
    if cfg.jitter_rot > 0.0:
        eulers[1:] += rng.normal(0.0, cfg.jitter_rot, size=(cfg.n_frames - 1, 3))

    us, vs = np.meshgrid(np.arange(cfg.width, dtype=np.float64), np.arange(cfg.height, dtype=np.float64))
    ray = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=-1)

    frames = []
    depths = []
    poses = []
    for t in range(cfg.n_frames):
        r = euler_to_rotation(eulers[t])
        p = positions[t]
        dirs = ray @ r.T
        denom = dirs @ normal
        if np.any(denom <= 1e-9):
            raise ValueError("trajectory looks away from the scene plane")
        z = (plane_d - normal @ p) / denom
        if np.any(z <= 0.1):
            raise ValueError("camera too close to (or beyond) the scene plane")
        hits = p + dirs * z[..., None]
        img = tex(hits)
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("texture escapes [0, 1]; lower texture_amplitude")
        frames.append(Frame(intensity=img, timestamp=t * cfg.dt))
        depths.append(z)
        poses.append(Pose6DoF(translation=p, rotation=eulers[t]))

    return Sequence(
        frames=frames,
        intrinsics=k,
        timestamps=np.arange(cfg.n_frames) * cfg.dt,
        gt_poses=poses,
        gt_depths=depths,
    )


def config_hash(cfg) -> str:
    """Stable hash of a dataclass-like config for manifests."""
    items = {k: (list(v) if isinstance(v, (tuple, np.ndarray)) else v) for k, v in vars(cfg).items()}
    blob = json.dumps(items, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_sequence(seq: Sequence, out_dir, cfg: SynthConfig = None):
    """Write a Sequence in the KITTI layout (16-bit PNGs keep the texture exact)."""
    out = Path(out_dir)
    (out / "image_2").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        write_image_png(out / "image_2" / f"{i:06d}.png", f.intensity, bits=16)
    np.savetxt(out / "times.txt", seq.timestamps, fmt="%.6f")
    k = seq.intrinsics
    p2 = f"P2: {k.fx:.9g} 0 {k.cx:.9g} 0 0 {k.fy:.9g} {k.cy:.9g} 0 0 0 1 0\n"
    (out / "calib.txt").write_text(p2)
    if seq.gt_poses is not None:
        write_kitti_poses(out / "poses.txt", seq.gt_poses)
    if seq.gt_depths is not None:
        (out / "depth").mkdir(exist_ok=True)
        for i, d in enumerate(seq.gt_depths):
            pfm_write(out / "depth" / f"{i:06d}.pfm", d)
    if cfg is not None:
        manifest = {
            "seed": cfg.seed,
            "config_hash": config_hash(cfg),
            "n_frames": cfg.n_frames,
            "resolution": [cfg.width, cfg.height],
            "jitter_trans": cfg.jitter_trans,
            "jitter_rot": cfg.jitter_rot,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
