"""Camera geometry: rigid poses, pinhole projection, pose noise, patches.

Conventions
-----------
A :class:`Pose` maps world coordinates into the camera frame,
``p_cam = R @ p_world + t``.  The camera looks down its +z axis, +x is image
right and +y is image down.  Pixel ``(u, v)`` has ``u`` along the image width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "BehindCamera",
    "CenterOutsideImage",
    "MismatchedLengths",
    "Pose",
    "CameraIntrinsics",
    "PixelCoord",
    "look_at",
    "project_point",
    "project_points",
    "perturb_pose",
    "projection_error_study",
    "register_frames",
    "select_bag_of_frames",
    "select_bags",
    "filter_void_points",
    "pixel_index",
    "extract_patch",
    "extract_patches",
]

MIN_DEPTH = 1e-9


class BehindCamera(ValueError):
    pass


class CenterOutsideImage(ValueError):
    pass


class MismatchedLengths(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    __hash__ = None


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float
    depth: float


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """Pose of a camera at ``center`` whose optical axis points at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center)


def project_points(points, pose, intr):
    """Vectorised pinhole projection.

    Returns ``(u, v, depth)`` arrays.  Entries with ``depth <= 1e-9`` get
    ``nan`` pixel coordinates; callers decide how to treat them.
    """
    cam = pose.apply(np.atleast_2d(points))
    z = cam[:, 2]
    front = z > MIN_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, intr.fx * cam[:, 0] / z + intr.cx, np.nan)
        v = np.where(front, intr.fy * cam[:, 1] / z + intr.cy, np.nan)
    return u, v, z


def project_point(point, pose, intr):
    # K [R|t] [x y z 1]^T, then divide by the third row
    cam = pose.rotation @ np.asarray(point, dtype=np.float64) + pose.translation
    if cam[2] <= MIN_DEPTH:
        raise BehindCamera(f"camera-frame depth {cam[2]:.3g} is not in front of the camera")
    h = intr.K @ cam
    return PixelCoord(h[0] / h[2], h[1] / h[2], float(cam[2]))


def perturb_pose(pose, sigma_rot, sigma_trans, seed):
    """Calibration-style pose noise.

    Three Euler angles (extrinsic x-y-z, degrees) and a world-frame shift of
    the camera centre are drawn i.i.d. Gaussian.  The noise rotation is
    applied on the left of the original rotation, about the camera centre.
    """
    if sigma_rot < 0 or sigma_trans < 0:
        raise ValueError("noise sigmas must be non-negative")
    if sigma_rot == 0 and sigma_trans == 0:
        return Pose(pose.rotation.copy(), pose.translation.copy())
    rng = np.random.default_rng(seed)
    angles = rng.normal(0.0, sigma_rot, size=3)
    shift = rng.normal(0.0, sigma_trans, size=3)
    R_noise = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    R = R_noise @ pose.rotation
    # snap back onto SO(3); the product drifts by ~1e-16 per call
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    center = pose.center + shift
    return Pose(R, -R @ center)


def projection_error_study(distances, sigma_rot, sigma_trans, intr, trials=10_000, seed=0, lateral=1.0):
    """Pixel displacement caused by pose noise, per test-point distance.

    The clean camera sits at the origin looking down +z.  For each distance
    ``z`` the test point is ``(lateral, 0, z)``.  The same ``trials`` noisy
    poses are reused for every distance so rows are directly comparable.

    Returns a list of ``(distance, mean_error_px, p95_error_px)`` tuples.
    """
    if trials < 100:
        raise ValueError("trials must be at least 100")
    clean = Pose.identity()
    children = np.random.SeedSequence(seed).spawn(trials)
    noisy = [perturb_pose(clean, sigma_rot, sigma_trans, c) for c in children]
    Rs = np.stack([p.rotation for p in noisy])
    ts = np.stack([p.translation for p in noisy])
    rows = []
    for z in distances:
        p = np.array([lateral, 0.0, float(z)])
        ref = project_point(p, clean, intr)
        cam = Rs @ p + ts
        if np.any(cam[:, 2] <= MIN_DEPTH):
            raise BehindCamera(f"noisy pose puts the {z} m test point behind the camera")
        u = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
        v = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
        errs = np.hypot(u - ref.u, v - ref.v)
        rows.append((float(z), float(errs.mean()), float(np.percentile(errs, 95))))
    return rows


def register_frames(frames, odometry):
    """Move every frame's points into the common world frame.

    ``odometry[i]`` maps frame ``i`` coordinates to world coordinates.
    Returns ``(points, frame_tags)``.
    """
    if len(frames) != len(odometry):
        raise MismatchedLengths(f"{len(frames)} frames but {len(odometry)} odometry poses")
    out, tags = [], []
    for i, (pts, pose) in enumerate(zip(frames, odometry)):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        out.append(pose.apply(pts))
        tags.append(np.full(len(pts), i, dtype=np.int64))
    if not out:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(out), np.concatenate(tags)


def pixel_index(x):
    """Round half up to an integer pixel index."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def _in_image(u, v, intr):
    ok = np.isfinite(u) & np.isfinite(v)
    iu = pixel_index(np.where(ok, u, -1.0))
    iv = pixel_index(np.where(ok, v, -1.0))
    return ok & (iu >= 0) & (iu < intr.width) & (iv >= 0) & (iv < intr.height)


def _intr_list(intrs, count):
    if isinstance(intrs, CameraIntrinsics):
        return [intrs] * count
    if len(intrs) != count:
        raise MismatchedLengths(f"{count} poses but {len(intrs)} intrinsics")
    return list(intrs)


def select_bags(points, camera_poses, intrs, n):
    """Bag-of-frames for many points at once.

    Returns an ``(P, n)`` int array of frame indices ordered by distance to
    the camera centre (ascending, ties by frame index), padded with ``-1``
    where fewer than ``n`` frames see the point inside the image.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    P, F = len(points), len(camera_poses)
    out = np.full((P, n), -1, dtype=np.int64)
    if F == 0 or P == 0:
        return out
    intr_list = _intr_list(intrs, F)
    dist = np.empty((P, F))
    valid = np.empty((P, F), dtype=bool)
    for f, (pose, intr) in enumerate(zip(camera_poses, intr_list)):
        u, v, _ = project_points(points, pose, intr)
        valid[:, f] = _in_image(u, v, intr)
        dist[:, f] = np.linalg.norm(points - pose.center, axis=1)
    dist = np.where(valid, dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :n]
    ok = np.take_along_axis(valid, order, axis=1)
    out[:, : order.shape[1]] = np.where(ok, order, -1)
    return out


def select_bag_of_frames(point, camera_poses, intrs, n):
    bag = select_bags(np.asarray(point).reshape(1, 3), camera_poses, intrs, n)[0]
    return [int(f) for f in bag if f >= 0]


def filter_void_points(points, camera_poses, intrs, n):
    """Indices of points that get a full bag of ``n`` in-image observations."""
    bags = select_bags(points, camera_poses, intrs, n)
    return np.flatnonzero((bags >= 0).all(axis=1))


def extract_patches(feature_map, us, vs, k):
    """Gather ``k x k`` patches centred at rounded ``(u, v)`` positions.

    Cells outside the map repeat the nearest edge pixel.  Works for feature
    maps of shape ``(H, W)`` or ``(H, W, d)``; output is ``(P, k, k, ...)``.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError("patch side k must be a positive odd integer")
    H, W = feature_map.shape[:2]
    if H == 0 or W == 0:
        raise ValueError("feature map is empty")
    iu = pixel_index(us)
    iv = pixel_index(vs)
    bad = (iu < 0) | (iu >= W) | (iv < 0) | (iv >= H)
    if np.any(bad):
        raise CenterOutsideImage("patch centre falls outside the image")
    r = k // 2
    off = np.arange(-r, r + 1)
    rows = np.clip(iv[:, None] + off[None, :], 0, H - 1)
    cols = np.clip(iu[:, None] + off[None, :], 0, W - 1)
    return feature_map[rows[:, :, None], cols[:, None, :]]


def extract_patch(feature_map, center, k):
    feature_map = np.asarray(feature_map)
    return extract_patches(feature_map, np.array([center.u]), np.array([center.v]), k)[0]
