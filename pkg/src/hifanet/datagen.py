"""Synthetic multi-view scenes and the observation tensors built from them.

The world is a straight track along +x.  Each class owns one slot of the
track, holding one of three shapes: a flat ground strip, a row of thin
vertical poles, or a box.  Cameras ride along the track at the origin
height and look sideways (+y) at the slots.

Every frame is rendered with the true camera pose.  Points are z-buffered
into the image, and every pixel takes the class of the nearest occupied
pixel.  The feature map is the class prototype plus Gaussian noise.  The
label map is the class, flipped to a random other class with the configured
probability (a stand-in for 2D segmentation errors).  Pose noise is only
applied afterwards, when points are projected to fetch their patches.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .attention import ObservationTensor
from .geometry import (
    CameraIntrinsics,
    Pose,
    extract_patches,
    perturb_pose,
    pixel_index,
    project_points,
    select_bags,
)

__all__ = [
    "ConfigInvalid",
    "CorruptFile",
    "VersionMismatch",
    "SceneConfig",
    "SceneDataset",
    "SHAPE_KINDS",
    "generate_scene",
    "noisy_camera_poses",
    "split_points",
    "group_points",
    "build_observation_tensors",
    "coverage_fraction",
    "export_dataset",
    "import_dataset",
    "FORMAT_VERSION",
]

SHAPE_KINDS = ("ground", "pole", "box")
GROUND_Z = -1.5
FORMAT_VERSION = 1
_MAGIC = b"HIFA"


class ConfigInvalid(ValueError):
    pass


class CorruptFile(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    class_count: int = 13
    points_per_class: int = 400
    world_extent: float = 65.0
    class_gap: float = 3.0
    camera_count: int = 33
    camera_spacing: float = 2.0
    feature_dim: int = 32
    feature_noise_sigma: float = 0.0
    label_corruption_rate: float = 0.0
    pose_noise: tuple = (0.0, 0.0)
    seed: int = 0
    image_width: int = 256
    image_height: int = 128
    focal: float = 128.0
    depth_near: float = 6.0
    depth_far: float = 8.0

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigInvalid("need at least two classes")
        for name in ("points_per_class", "camera_count", "feature_dim", "image_width", "image_height"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be positive")
        if self.world_extent <= 0 or self.camera_spacing <= 0 or self.focal <= 0:
            raise ConfigInvalid("lengths must be positive")
        if not 0 <= self.class_gap < self.world_extent / self.class_count:
            raise ConfigInvalid("class_gap must leave room for every class slot")
        if not 0 < self.depth_near < self.depth_far:
            raise ConfigInvalid("need 0 < depth_near < depth_far")
        if self.feature_noise_sigma < 0:
            raise ConfigInvalid("feature_noise_sigma must be non-negative")
        if not 0 <= self.label_corruption_rate <= 1:
            raise ConfigInvalid("label_corruption_rate must lie in [0, 1]")
        rot, trans = self.pose_noise
        if rot < 0 or trans < 0:
            raise ConfigInvalid("pose noise sigmas must be non-negative")
        object.__setattr__(self, "pose_noise", (float(rot), float(trans)))

    def intrinsics(self):
        return CameraIntrinsics(
            self.focal, self.focal, self.image_width / 2, self.image_height / 2,
            self.image_width, self.image_height,
        )

    def to_dict(self):
        out = asdict(self)
        out["pose_noise"] = list(self.pose_noise)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        data = {k: v for k, v in data.items() if k in known}
        if "pose_noise" in data:
            data["pose_noise"] = tuple(data["pose_noise"])
        return cls(**data)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(eq=False)
class SceneDataset:
    config: SceneConfig
    points: np.ndarray  # (P, 3)
    labels: np.ndarray  # (P,) uint16
    poses: list  # true world->camera poses
    intrinsics: CameraIntrinsics
    feature_maps: np.ndarray  # (F, H, W, d) float32
    label_maps: np.ndarray  # (F, H, W) uint16, possibly corrupted
    true_label_maps: np.ndarray  # (F, H, W) uint16
    prototypes: np.ndarray  # (C, d) float32
    class_kinds: tuple  # shape kind per class

    @property
    def seed(self):
        return self.config.seed


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

# world +x -> image right, world +z (up) -> image up, world +y -> optical axis
_SIDE_LOOKING = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


def _camera_poses(cfg):
    span = (cfg.camera_count - 1) * cfg.camera_spacing
    xs = cfg.world_extent / 2 - span / 2 + cfg.camera_spacing * np.arange(cfg.camera_count)
    return [Pose(_SIDE_LOOKING, -_SIDE_LOOKING @ np.array([x, 0.0, 0.0])) for x in xs]


def _sample_class(rng, kind, x0, width, cfg, count):
    near, far = cfg.depth_near, cfg.depth_far
    if kind == "ground":
        return np.column_stack([
            rng.uniform(x0, x0 + width, count),
            rng.uniform(near, far, count),
            GROUND_Z + rng.normal(0.0, 0.02, count),
        ])
    if kind == "pole":
        poles = max(1, int(width // 0.7))
        px = x0 + width * (np.arange(poles) + 0.5) / poles
        py = rng.uniform(near + 0.2, far - 0.2, poles)
        which = rng.integers(0, poles, count)
        ang = rng.uniform(0, 2 * np.pi, count)
        return np.column_stack([
            px[which] + 0.12 * np.cos(ang),
            py[which] + 0.12 * np.sin(ang),
            rng.uniform(GROUND_Z, 2.5, count),
        ])
    # box: points on the surface, faces chosen in proportion to their area
    lo = np.array([x0, near, GROUND_Z])
    hi = np.array([x0 + width, far, GROUND_Z + rng.uniform(1.5, 2.5)])
    size = hi - lo
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]]).repeat(2)
    face = rng.choice(6, size=count, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(count, 3)) * size
    axis = face // 2
    side = face % 2
    pts[np.arange(count), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts


def _render_labels(points, labels, pose, intr):
    """Nearest-occupied-pixel fill of a z-buffer of the points."""
    H, W = intr.height, intr.width
    u, v, z = project_points(points, pose, intr)
    ok = np.isfinite(u)
    iu = pixel_index(np.where(ok, u, -1.0))
    iv = pixel_index(np.where(ok, v, -1.0))
    ok &= (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H)
    out = np.zeros((H, W), dtype=np.uint16)
    if not ok.any():
        return out
    flat = iv[ok] * W + iu[ok]
    depth = z[ok]
    lab = labels[ok]
    order = np.lexsort((depth, flat))
    flat, lab = flat[order], lab[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    zbuf = np.full(H * W, -1, dtype=np.int64)
    zbuf[flat[first]] = lab[first]
    zbuf = zbuf.reshape(H, W)
    empty = zbuf < 0
    if empty.any():
        rows, cols = ndimage.distance_transform_edt(empty, return_distances=False, return_indices=True)
        zbuf = zbuf[rows, cols]
    return zbuf.astype(np.uint16)


def generate_scene(cfg):
    """Labelled points, a camera track and rendered per-frame maps."""
    if not isinstance(cfg, SceneConfig):
        raise ConfigInvalid("generate_scene expects a SceneConfig")
    C = cfg.class_count
    ss = np.random.SeedSequence(cfg.seed)
    layout_rng, point_rng, proto_rng, feat_rng, label_rng = (np.random.default_rng(s) for s in ss.spawn(5))

    slot_of_class = layout_rng.permutation(C)
    kinds = tuple(SHAPE_KINDS[c % len(SHAPE_KINDS)] for c in range(C))
    pitch = cfg.world_extent / C
    width = pitch - cfg.class_gap
    pts, labs = [], []
    for c in range(C):
        x0 = slot_of_class[c] * pitch + cfg.class_gap / 2
        pts.append(_sample_class(point_rng, kinds[c], x0, width, cfg, cfg.points_per_class))
        labs.append(np.full(cfg.points_per_class, c, dtype=np.uint16))
    points = np.concatenate(pts)
    labels = np.concatenate(labs)

    protos = proto_rng.normal(size=(C, cfg.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    protos = protos.astype(np.float32)

    intr = cfg.intrinsics()
    poses = _camera_poses(cfg)
    F, H, W, d = len(poses), intr.height, intr.width, cfg.feature_dim
    true_maps = np.empty((F, H, W), dtype=np.uint16)
    label_maps = np.empty((F, H, W), dtype=np.uint16)
    feature_maps = np.empty((F, H, W, d), dtype=np.float32)
    for f, pose in enumerate(poses):
        true_maps[f] = _render_labels(points, labels, pose, intr)
        feat = protos[true_maps[f]]
        if cfg.feature_noise_sigma > 0:
            feat = feat + feat_rng.normal(0.0, cfg.feature_noise_sigma, size=feat.shape).astype(np.float32)
        feature_maps[f] = feat
        flip = label_rng.random((H, W)) < cfg.label_corruption_rate
        # uniform over the C-1 wrong classes
        shift = label_rng.integers(1, C, size=(H, W))
        label_maps[f] = np.where(flip, (true_maps[f] + shift) % C, true_maps[f])
    return SceneDataset(cfg, points, labels, poses, intr, feature_maps, label_maps, true_maps, protos, kinds)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

def noisy_camera_poses(scene, sigma_rot, sigma_trans):
    """Perturb each camera once (a fixed calibration error for the sequence).

    The draws are keyed by the scene seed and camera index only, so a sweep
    over noise levels scales one fixed set of error directions.
    """
    out = []
    for j, pose in enumerate(scene.poses):
        seed = np.random.SeedSequence([scene.seed, 0x5EED, j])
        out.append(perturb_pose(pose, sigma_rot, sigma_trans, seed))
    return out


def split_points(scene, test_fraction=0.3, seed=0):
    """Random train/test partition of the scene's point indices."""
    rng = np.random.default_rng([scene.seed, seed])
    P = len(scene.points)
    perm = rng.permutation(P)
    n_test = int(round(test_fraction * P))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def group_points(coords, m, mode="spatial", order_key=None):
    """Partition points into groups of ``m`` (leftovers are dropped).

    ``spatial`` builds greedy nearest-neighbour chains: start at the lowest
    unused index and keep appending the unused point closest to the last one
    added.  ``temporal`` sorts by ``order_key`` (e.g. the nearest frame) and
    cuts consecutive runs.
    """
    coords = np.asarray(coords, dtype=np.float64)
    P = len(coords)
    if mode == "temporal":
        key = np.arange(P) if order_key is None else np.asarray(order_key)
        order = np.argsort(key, kind="stable")
        usable = (P // m) * m
        return [order[i : i + m] for i in range(0, usable, m)]
    if mode != "spatial":
        raise ValueError(f"unknown grouping mode {mode!r}")
    unused = np.ones(P, dtype=bool)
    groups = []
    while unused.sum() >= m:
        start = int(np.flatnonzero(unused)[0])
        chain = [start]
        unused[start] = False
        for _ in range(m - 1):
            d2 = ((coords - coords[chain[-1]]) ** 2).sum(axis=1)
            d2[~unused] = np.inf
            nxt = int(np.argmin(d2))
            chain.append(nxt)
            unused[nxt] = False
        groups.append(np.array(chain))
    return groups


def _retained(scene, cfg, poses, idx):
    bags = select_bags(scene.points[idx], poses, scene.intrinsics, cfg.n)
    keep = (bags >= 0).all(axis=1)
    return idx[keep], bags[keep]


def coverage_fraction(scene, config, pose_noise=None, point_ids=None):
    """Share of points that find a full bag of N in-image observations."""
    rot, trans = scene.config.pose_noise if pose_noise is None else pose_noise
    poses = noisy_camera_poses(scene, rot, trans)
    idx = np.arange(len(scene.points)) if point_ids is None else np.asarray(point_ids)
    kept, _ = _retained(scene, config, poses, idx)
    return len(kept) / len(idx) if len(idx) else 0.0


def build_observation_tensors(scene, config, pose_noise=None, point_ids=None, grouping="spatial"):
    """Project retained points into their bag-of-frames and cut patches.

    ``pose_noise`` is ``(sigma_rot_deg, sigma_trans_m)``; ``None`` uses the
    scene config's value.  Only points with a full bag of ``config.n``
    frames survive, and they are grouped into ``config.m``-point sequences.
    """
    rot, trans = scene.config.pose_noise if pose_noise is None else pose_noise
    poses = noisy_camera_poses(scene, rot, trans)
    idx = np.arange(len(scene.points)) if point_ids is None else np.asarray(point_ids)
    kept, bags = _retained(scene, config, poses, idx)
    P, N, k = len(kept), config.n, config.k
    d = scene.feature_maps.shape[-1]
    feats = np.empty((P, N, k, k, d), dtype=np.float32)
    plabels = np.empty((P, N, k, k), dtype=np.uint16)
    pts = scene.points[kept]
    for f in np.unique(bags) if P else []:
        rows, slots = np.nonzero(bags == f)
        u, v, _ = project_points(pts[rows], poses[f], scene.intrinsics)
        feats[rows, slots] = extract_patches(scene.feature_maps[f], u, v, k)
        plabels[rows, slots] = extract_patches(scene.label_maps[f], u, v, k)
    groups = group_points(pts, config.m, grouping, order_key=bags[:, 0] if P else None)
    out = []
    for g in groups:
        out.append(ObservationTensor(
            features=feats[g],
            coords=pts[g].astype(np.float64),
            labels=scene.labels[kept[g]].astype(np.uint16),
            frame_ids=bags[g].astype(np.uint32),
            patch_labels=plabels[g],
        ))
    return out


# ---------------------------------------------------------------------------
# binary dataset file
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sI6I")


def export_dataset(tensors, path, class_count):
    """Write groups in the little-endian ``HIFA`` layout (see README)."""
    if tensors:
        M, N, k, d = tensors[0].m, tensors[0].n, tensors[0].k, tensors[0].d
    else:
        M = N = k = d = 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, FORMAT_VERSION, len(tensors), M, N, k, d, class_count))
        for t in tensors:
            if (t.m, t.n, t.k, t.d) != (M, N, k, d):
                raise ValueError("all groups in a file must share M, N, k, d")
            fh.write(np.ascontiguousarray(t.coords, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(t.labels, dtype="<u2").tobytes())
            fh.write(np.ascontiguousarray(t.frame_ids, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(t.features, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(t.patch_labels, dtype="<u2").tobytes())


def import_dataset(path):
    """Read a ``HIFA`` file.  Returns ``(tensors, class_count)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFile(f"{path}: shorter than the header")
    magic, version, G, M, N, k, d, C = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    layout = [
        ("coords", "<f8", (M, 3)),
        ("labels", "<u2", (M,)),
        ("frame_ids", "<u4", (M, N)),
        ("features", "<f4", (M, N, k, k, d)),
        ("patch_labels", "<u2", (M, N, k, k)),
    ]
    group_bytes = sum(np.dtype(dt).itemsize * int(np.prod(shape)) for _, dt, shape in layout)
    expected = _HEADER.size + G * group_bytes
    if len(raw) != expected:
        raise CorruptFile(f"{path}: {len(raw)} bytes, layout needs {expected}")
    out, off = [], _HEADER.size
    native = {"<f8": np.float64, "<u2": np.uint16, "<u4": np.uint32, "<f4": np.float32}
    for _ in range(G):
        arrays = {}
        for name, dt, shape in layout:
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape)
            arrays[name] = arr.astype(native[dt])
            off += arr.nbytes
        if arrays["labels"].size and arrays["labels"].max() >= C:
            raise CorruptFile(f"{path}: point label outside [0, {C})")
        out.append(ObservationTensor(**arrays))
    return out, C
