"""SE(3) pose algebra, Euler conventions, camera model, point projection.

Conventions (used consistently everywhere in this package):

* Camera frame: x right, y down, z forward (optical axis).
* Euler angles (roll, pitch, yaw) rotate about the camera (x, y, z) axes;
  the rotation matrix is the intrinsic Z-Y-X product R = Rz(yaw) @ Ry(pitch)
  @ Rx(roll). In a driving scene y is the vertical axis, so the steering
  (heading) rate lives in the *pitch* slot of this triple.
* Angles are normalized into (-pi, pi] on construction.
* A Pose6DoF is the rigid map X_ref = R @ X_own + t: for absolute poses the
  reference frame is the world (camera-to-world); for relative frame pairs
  it maps the later frame's coordinates into the earlier frame, so its
  translation is the later camera's position seen from the earlier one.
* Matrix-to-Euler extraction at |pitch| = pi/2 (gimbal lock) resolves the
  roll/yaw ambiguity by setting roll = 0.
"""

from dataclasses import dataclass, field

import numpy as np

_TWO_PI = 2.0 * np.pi


def wrap_angle(x):
    """Wrap angles (scalar or array) into (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=np.float64) + np.pi, _TWO_PI) - np.pi
    y = np.where(y == -np.pi, np.pi, y)
    if np.isscalar(x):
        return float(y)
    return y


def euler_to_rotation(angles):
    """Rotation matrix for (roll, pitch, yaw): R = Rz(yaw) Ry(pitch) Rx(roll)."""
    a, b, c = float(angles[0]), float(angles[1]), float(angles[2])
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    return np.array(
        [
            [cc * cb, -sc * ca + cc * sb * sa, sc * sa + cc * sb * ca],
            [sc * cb, cc * ca + sc * sb * sa, -cc * sa + sc * sb * ca],
            [-sb, cb * sa, cb * ca],
        ]
    )


def euler_rotation_grads(angles):
    """R plus its three partial derivatives dR/droll, dR/dpitch, dR/dyaw.

    Returns (R, dR) with dR shaped (3, 3, 3); dR[i] corresponds to angle i.
    """
    a, b, c = float(angles[0]), float(angles[1]), float(angles[2])
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    r = np.array(
        [
            [cc * cb, -sc * ca + cc * sb * sa, sc * sa + cc * sb * ca],
            [sc * cb, cc * ca + sc * sb * sa, -cc * sa + sc * sb * ca],
            [-sb, cb * sa, cb * ca],
        ]
    )
    d_roll = np.array(
        [
            [0.0, sc * sa + cc * sb * ca, sc * ca - cc * sb * sa],
            [0.0, -cc * sa + sc * sb * ca, -cc * ca - sc * sb * sa],
            [0.0, cb * ca, -cb * sa],
        ]
    )
    d_pitch = np.array(
        [
            [-cc * sb, cc * cb * sa, cc * cb * ca],
            [-sc * sb, sc * cb * sa, sc * cb * ca],
            [-cb, -sb * sa, -sb * ca],
        ]
    )
    d_yaw = np.array(
        [
            [-sc * cb, -cc * ca - sc * sb * sa, cc * sa - sc * sb * ca],
            [cc * cb, -sc * ca + cc * sb * sa, sc * sa + cc * sb * ca],
            [0.0, 0.0, 0.0],
        ]
    )
    return r, np.stack([d_roll, d_pitch, d_yaw])


_GIMBAL_EPS = 1.0 - 1e-12


def rotation_to_euler(r):
    """Extract (roll, pitch, yaw) from a rotation matrix; roll = 0 at gimbal lock."""
    s = -r[2, 0]
    if s >= _GIMBAL_EPS or s <= -_GIMBAL_EPS:
        pitch = np.pi / 2.0 if s > 0 else -np.pi / 2.0
        roll = 0.0
        yaw = np.arctan2(-r[0, 1], r[1, 1])
    else:
        pitch = np.arcsin(s)
        roll = np.arctan2(r[2, 1], r[2, 2])
        yaw = np.arctan2(r[1, 0], r[0, 0])
    return np.array([roll, pitch, yaw])


def rotation_to_euler_grads(r):
    """Euler extraction plus d(angles)/dR, shaped (3, 3, 3); dR[i] = d angle_i / dR.

    Undefined (returns zero derivatives) at exact gimbal lock.
    """
    angles = rotation_to_euler(r)
    grads = np.zeros((3, 3, 3))
    s = -r[2, 0]
    if abs(s) < _GIMBAL_EPS:
        den_r = r[2, 1] ** 2 + r[2, 2] ** 2
        grads[0, 2, 1] = r[2, 2] / den_r
        grads[0, 2, 2] = -r[2, 1] / den_r
        grads[1, 2, 0] = -1.0 / np.sqrt(1.0 - s * s)
        den_y = r[1, 0] ** 2 + r[0, 0] ** 2
        grads[2, 1, 0] = r[0, 0] / den_y
        grads[2, 0, 0] = -r[1, 0] / den_y
    return angles, grads


@dataclass
class Pose6DoF:
    """Rigid transform as translation (meters) + Euler angles (radians)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        self.rotation = wrap_angle(np.asarray(self.rotation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(translation=m[:3, 3], rotation=rotation_to_euler(m[:3, :3]))

    def rotation_matrix(self):
        return euler_to_rotation(self.rotation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def is_identity(self):
        return not self.translation.any() and not self.rotation.any()


def compose(a: Pose6DoF, b: Pose6DoF) -> Pose6DoF:
    """Pose whose matrix is matrix(a) @ matrix(b)."""
    ra = a.rotation_matrix()
    rb = b.rotation_matrix()
    return Pose6DoF(
        translation=ra @ b.translation + a.translation,
        rotation=rotation_to_euler(ra @ rb),
    )


def invert(p: Pose6DoF) -> Pose6DoF:
    """Inverse rigid transform: compose(p, invert(p)) is the identity."""
    r = p.rotation_matrix()
    return Pose6DoF(translation=-(r.T @ p.translation), rotation=rotation_to_euler(r.T))


def relative_pose(a: Pose6DoF, b: Pose6DoF) -> Pose6DoF:
    """Pose of b expressed in a's frame: matrix(a)^-1 @ matrix(b)."""
    return compose(invert(a), b)


@dataclass
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics for the box-downsampled pyramid level.

        Coarse pixel p corresponds to fine coordinate factor*p + (factor-1)/2
        (the block center), so the principal point shifts by that half-block.
        """
        if factor == 1:
            return self
        off = (factor - 1) / 2.0
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx - off) / factor,
            cy=(self.cy - off) / factor,
            width=self.width // factor,
            height=self.height // factor,
        )


def backproject(u, v, depth, k: CameraIntrinsics):
    """Pixel (u, v) at the given depth to a camera-frame 3D point."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])


def project(point, k: CameraIntrinsics):
    """Camera-frame 3D point to continuous pixel coordinates (may fall outside)."""
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    if z <= 0:
        raise ValueError(f"point behind camera: z={z}")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy)


@dataclass
class PointCloud:
    """Camera-frame 3D points tagged with the source pixel each came from."""

    points: np.ndarray  # (N, 3)
    pixel_origin: np.ndarray  # (N, 2) source (u, v)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.pixel_origin = np.asarray(self.pixel_origin, dtype=np.float64).reshape(-1, 2)
        if len(self.points) and np.any(self.points[:, 2] <= 0):
            raise ValueError("point cloud contains points behind the camera")


def cloud_from_depth(depth, k: CameraIntrinsics) -> PointCloud:
    """Backproject a full depth map into a point cloud."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    xbar = (us - k.cx) / k.fx
    ybar = (vs - k.cy) / k.fy
    pts = np.stack([xbar * depth, ybar * depth, depth], axis=-1).reshape(-1, 3)
    org = np.stack([us, vs], axis=-1).reshape(-1, 2)
    return PointCloud(points=pts, pixel_origin=org)


def transform_cloud(c: PointCloud, t: Pose6DoF) -> PointCloud:
    """Apply R @ p + translation to every point; pixel origins are preserved."""
    r = t.rotation_matrix()
    pts = c.points @ r.T + t.translation
    return PointCloud(points=pts, pixel_origin=c.pixel_origin.copy())


def chain_relative_poses(rels) -> list:
    """Compose relative frame-pair poses into absolute camera-to-world poses.

    The first absolute pose is the identity; abs[i+1] = abs[i] * rel[i].
    """
    out = [Pose6DoF.identity()]
    for rel in rels:
        out.append(compose(out[-1], rel))
    return out


def chain_with_jacobian(rel_params):
    """Differentiable chaining of relative poses given as an (N-1, 6) array.

    Each row is (tx, ty, tz, roll, pitch, yaw). Returns

        positions  (N, 3)   absolute camera positions (world = first frame)
        eulers     (N, 3)   absolute orientations as Euler triples
        jac_pos    (N, 3, N-1, 6)   d position / d relative parameter
        jac_eul    (N, 3, N-1, 6)   d orientation / d relative parameter

    Orientation derivatives go through the matrix-to-Euler extraction and are
    therefore unreliable within ~1e-6 of gimbal lock (|pitch| = pi/2); snippet
    poses in practice stay far from it.
    """
    rel_params = np.asarray(rel_params, dtype=np.float64)
    n_rel = rel_params.shape[0]
    n = n_rel + 1

    positions = np.zeros((n, 3))
    eulers = np.zeros((n, 3))
    jac_pos = np.zeros((n, 3, n_rel, 6))
    jac_eul = np.zeros((n, 3, n_rel, 6))

    r_abs = np.eye(3)
    # running derivative of the absolute rotation w.r.t. every angle parameter
    dr_abs = np.zeros((n_rel, 3, 3, 3))

    rels_r = []
    rels_dr = []
    for k in range(n_rel):
        rk, drk = euler_rotation_grads(rel_params[k, 3:6])
        rels_r.append(rk)
        rels_dr.append(drk)

    for t in range(1, n):
        k = t - 1
        trel = rel_params[k, 0:3]

        # position update: P_t = P_{t-1} + R_abs_{t-1} @ trel
        positions[t] = positions[t - 1] + r_abs @ trel
        jac_pos[t] = jac_pos[t - 1].copy()
        jac_pos[t, :, k, 0:3] += r_abs
        for m in range(k):
            for j in range(3):
                jac_pos[t, :, m, 3 + j] += dr_abs[m, j] @ trel

        # rotation update: R_abs_t = R_abs_{t-1} @ R_rel_k
        new_dr = np.empty_like(dr_abs)
        for m in range(n_rel):
            for j in range(3):
                new_dr[m, j] = dr_abs[m, j] @ rels_r[k]
        for j in range(3):
            new_dr[k, j] += r_abs @ rels_dr[k][j]
        r_abs = r_abs @ rels_r[k]
        dr_abs = new_dr

        ang, dang = rotation_to_euler_grads(r_abs)
        eulers[t] = ang
        for m in range(t):
            for j in range(3):
                for i in range(3):
                    jac_eul[t, i, m, 3 + j] = np.sum(dang[i] * dr_abs[m, j])

    return positions, eulers, jac_pos, jac_eul
