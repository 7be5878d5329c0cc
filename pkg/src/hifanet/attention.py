"""The three hierarchical attention blocks and the classification head.

All blocks take arbitrary leading batch dimensions.  Parameters live in a
flat :class:`~hifanet.numerics.ParamStore` under dotted names, e.g.
``patch.q.w`` or ``head.fc2.b``.  Weights are stored ``(in, out)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .numerics import (
    ParamStore,
    ShapeMismatch,
    Tensor,
    as_tensor,
    linear,
    matmul,
    mean_over_axis,
    relu,
    reshape,
    scale,
    softmax,
    swapaxes,
    take,
)

__all__ = [
    "HiFANetConfig",
    "PatchObservation",
    "ObservationTensor",
    "stack_observations",
    "init_params",
    "init_block",
    "patch_attention",
    "instance_attention",
    "structural_prior",
    "interpoint_attention",
    "classify",
    "hifanet_forward",
    "count_parameters",
    "parameter_breakdown",
]


@dataclass(frozen=True)
class HiFANetConfig:
    m: int = 10
    n: int = 5
    k: int = 5
    d: int = 256
    d1: int = 64
    heads: int = 4
    d2: int = 64
    class_count: int = 14
    ffn_width: int = 256
    prior_hidden: int = 128
    head_width: int = 512

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.k % 2 == 0:
            raise ValueError("patch side k must be odd")
        if self.heads * self.d1 > self.d or self.heads * self.d2 > self.d:
            raise ValueError("heads * key width must not exceed d")
        if self.d % self.heads:
            raise ValueError("d must split evenly across heads")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class PatchObservation:
    """One k x k patch: per-pixel features and the 2D segmenter's labels."""

    features: np.ndarray  # (k, k, d)
    labels: np.ndarray  # (k, k)

    def __post_init__(self):
        if self.features.shape[:2] != self.labels.shape:
            raise ShapeMismatch("patch features and labels disagree on k")


@dataclass
class ObservationTensor:
    """A group of M points with N patch observations each.

    Leading batch dimensions are allowed (see :func:`stack_observations`),
    in which case every field gains the same leading shape.
    """

    features: np.ndarray  # (M, N, k, k, d) float32
    coords: np.ndarray  # (M, 3) float64, metres
    labels: np.ndarray  # (M,) ground-truth point classes
    frame_ids: np.ndarray  # (M, N)
    patch_labels: np.ndarray  # (M, N, k, k) 2D-predicted classes

    def __post_init__(self):
        lead = self.coords.shape[:-1]
        M = lead[-1] if lead else 0
        if (
            self.features.ndim < 5
            or self.features.shape[:-4] != lead
            or self.labels.shape != lead
            or self.frame_ids.shape[:-1] != lead
            or self.patch_labels.shape != self.features.shape[:-1]
            or self.features.shape[-3] != self.features.shape[-2]
        ):
            raise ShapeMismatch(f"inconsistent observation tensor for M={M}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point coordinates must be finite")

    @property
    def m(self):
        return self.coords.shape[-2]

    @property
    def n(self):
        return self.features.shape[-4]

    @property
    def k(self):
        return self.features.shape[-2]

    @property
    def d(self):
        return self.features.shape[-1]

    def __eq__(self, other):
        if not isinstance(other, ObservationTensor):
            return NotImplemented
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self):
        return (self.features, self.coords, self.labels, self.frame_ids, self.patch_labels)


def stack_observations(groups):
    """Stack single-group tensors along a new leading batch axis."""
    return ObservationTensor(
        features=np.stack([g.features for g in groups]),
        coords=np.stack([g.coords for g in groups]),
        labels=np.stack([g.labels for g in groups]),
        frame_ids=np.stack([g.frame_ids for g in groups]),
        patch_labels=np.stack([g.patch_labels for g in groups]),
    )


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def add_linear(params, rng, name, fan_in, fan_out):
    params[f"{name}.w"] = _glorot(rng, fan_in, fan_out)
    params[f"{name}.b"] = np.zeros(fan_out)


def init_block(params, rng, prefix, cfg, key_width):
    """Key/query/value projections plus the two-layer feed-forward net."""
    hk = cfg.heads * key_width
    add_linear(params, rng, f"{prefix}.k", cfg.d, hk)
    add_linear(params, rng, f"{prefix}.q", cfg.d, hk)
    add_linear(params, rng, f"{prefix}.v", cfg.d, cfg.d)
    add_linear(params, rng, f"{prefix}.ffn1", cfg.d, cfg.ffn_width)
    add_linear(params, rng, f"{prefix}.ffn2", cfg.ffn_width, cfg.d)


def init_params(cfg, seed=0, patch=True, prior=True):
    """Glorot-uniform weights, zero biases, in a fixed name order."""
    rng = np.random.default_rng(seed)
    params = ParamStore()
    if patch:
        init_block(params, rng, "patch", cfg, cfg.d1)
    init_block(params, rng, "instance", cfg, cfg.d1)
    init_block(params, rng, "interpoint", cfg, cfg.d2)
    if prior:
        add_linear(params, rng, "prior.fc1", 3, cfg.prior_hidden)
        add_linear(params, rng, "prior.fc2", cfg.prior_hidden, cfg.heads * cfg.d2)
    add_linear(params, rng, "head.fc1", cfg.d, cfg.head_width)
    add_linear(params, rng, "head.fc2", cfg.head_width, cfg.head_width)
    add_linear(params, rng, "head.fc3", cfg.head_width, cfg.class_count)
    return params


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _lin(params, name, x):
    return linear(x, params[f"{name}.w"], params[f"{name}.b"])


def _ffn(params, prefix, x):
    return _lin(params, f"{prefix}.ffn2", relu(_lin(params, f"{prefix}.ffn1", x)))


def _split_heads(x, heads):
    # (..., L, heads*w) -> (..., heads, L, w)
    lead = x.shape[:-1]
    x = reshape(x, lead + (heads, x.shape[-1] // heads))
    return swapaxes(x, -2, -3)


def _merge_heads(x):
    # (..., heads, L, w) -> (..., L, heads*w)
    x = swapaxes(x, -2, -3)
    return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _attend(q, k, v, heads, key_width):
    """Scaled dot-product attention, ``q`` (..., Lq, h*w), ``k`` (..., L, h*w)."""
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    logits = scale(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(key_width))
    w = softmax(logits, axis=-1)
    return _merge_heads(matmul(w, vh)), w


def _check_width(x, cfg, what):
    if x.shape[-1] != cfg.d:
        raise ShapeMismatch(f"{what}: expected feature width {cfg.d}, got {x.shape[-1]}")


def patch_attention(patch_features, params, cfg, return_weights=False):
    """Collapse ``(..., k, k, d)`` patches to ``(..., d)`` instance features.

    The centre pixel supplies the query; each head weighs the k*k pixel
    values, heads are concatenated, passed through the feed-forward net,
    and the raw centre feature is added back as a shortcut.
    """
    x = as_tensor(patch_features)
    _check_width(x, cfg, "patch_attention")
    k = x.shape[-2]
    if x.ndim < 3 or x.shape[-3] != k:
        raise ShapeMismatch(f"patch_attention: expected (..., k, k, d), got {x.shape}")
    c = k // 2
    h, d1, dv = cfg.heads, cfg.d1, cfg.d // cfg.heads
    pix = reshape(x, x.shape[:-3] + (k * k, cfg.d))
    f_p = take(pix, c * k + c, axis=-2)
    q_p = _lin(params, "patch.q", f_p)
    q_p = reshape(q_p, q_p.shape[:-1] + (h, 1, d1))
    # Only the centre query is needed, so fold the key projection into it:
    # q.(W x_j + b) = (W^T q).x_j + q.b.  Likewise sum_j w_j (V x_j + b) =
    # V (sum_j w_j x_j) + b because the weights sum to one.  This keeps the
    # work per patch instead of per pixel.
    wk = swapaxes(reshape(params["patch.k.w"], (cfg.d, h, d1)), 0, 1)  # (h, d, d1)
    bk = reshape(params["patch.k.b"], (h, d1, 1))
    lead = q_p.shape[:-3]
    r = reshape(matmul(q_p, swapaxes(wk, -1, -2)), lead + (h, cfg.d))
    qb = reshape(matmul(q_p, bk), lead + (h, 1))
    logits = matmul(r, swapaxes(pix, -1, -2)) + qb  # (..., h, k*k)
    w = softmax(scale(logits, 1.0 / math.sqrt(d1)), axis=-1)
    pooled = reshape(matmul(w, pix), lead + (h, 1, cfg.d))
    wv = swapaxes(reshape(params["patch.v.w"], (cfg.d, h, dv)), 0, 1)  # (h, d, dv)
    att = matmul(pooled, wv)  # (..., h, 1, dv)
    att = reshape(att, att.shape[:-3] + (cfg.d,)) + params["patch.v.b"]
    out = _ffn(params, "patch", att) + f_p
    return (out, w) if return_weights else out


def instance_attention(instance_features, params, cfg, return_weights=False):
    """Self-attention over the N instances of each point, then mean-pool N."""
    x = as_tensor(instance_features)
    _check_width(x, cfg, "instance_attention")
    keys = _lin(params, "instance.k", x)
    queries = _lin(params, "instance.q", x)
    vals = _lin(params, "instance.v", x)
    att, w = _attend(queries, keys, vals, cfg.heads, cfg.d1)
    out = mean_over_axis(_ffn(params, "instance", att), axis=-2)
    return (out, w) if return_weights else out


def pairwise_differences(coords):
    coords = np.asarray(coords, dtype=np.float64)
    return coords[..., :, None, :] - coords[..., None, :, :]


def structural_prior(coords, params, cfg):
    """Encode every ``p_i - p_j`` with a two-layer MLP and average over j.

    Returns ``(..., M, heads*d2)``, the same shape as the inter-point keys.
    """
    diff = pairwise_differences(coords)
    hidden = relu(_lin(params, "prior.fc1", diff))
    enc = _lin(params, "prior.fc2", hidden)
    return mean_over_axis(enc, axis=-2)


def interpoint_attention(features, coords, params, cfg, use_prior=True, return_weights=False):
    x = as_tensor(features)
    _check_width(x, cfg, "interpoint_attention")
    if np.shape(coords)[:-1] != x.shape[:-1]:
        raise ShapeMismatch("interpoint_attention: coords and features disagree on M")
    keys = _lin(params, "interpoint.k", x)
    if use_prior:
        keys = keys + structural_prior(coords, params, cfg)
    queries = _lin(params, "interpoint.q", x)
    vals = _lin(params, "interpoint.v", x)
    att, w = _attend(queries, keys, vals, cfg.heads, cfg.d2)
    out = _ffn(params, "interpoint", att)
    return (out, w) if return_weights else out


def classify(features, params, cfg=None):
    x = as_tensor(features)
    h = relu(_lin(params, "head.fc1", x))
    h = relu(_lin(params, "head.fc2", h))
    return _lin(params, "head.fc3", h)


def hifanet_forward(obs, params, cfg, use_patch=True, use_prior=True):
    """Patch -> instance -> inter-point attention -> classifier logits.

    With ``use_patch=False`` only the centre pixel of each patch is used
    (the patch block is skipped).  With ``use_prior=False`` the keys of the
    inter-point block get no structural prior.
    """
    feats = np.asarray(obs.features, dtype=np.float64)
    if feats.shape[-1] != cfg.d or feats.shape[-2] != feats.shape[-3]:
        raise ShapeMismatch(f"observation features {feats.shape} do not match d={cfg.d}")
    if use_patch:
        inst = patch_attention(feats, params, cfg)
    else:
        c = feats.shape[-2] // 2
        inst = Tensor(feats[..., c, c, :])
    pts = instance_attention(inst, params, cfg)
    mixed = interpoint_attention(pts, obs.coords, params, cfg, use_prior=use_prior)
    return classify(mixed, params, cfg)


def count_parameters(params):
    return int(sum(t.data.size for t in params.values()))


def parameter_breakdown(params):
    """Element counts per top-level module (``patch``, ``instance``, ...)."""
    out = {}
    for name, t in params.items():
        top = name.split(".", 1)[0]
        out[top] = out.get(top, 0) + t.data.size
    return out
