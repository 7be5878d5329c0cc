"""Comparison points: label voting, AvgPool_FC, and the HiFANet ablations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import HiFANetConfig, add_linear, hifanet_forward, init_params
from .numerics import ParamStore, ShapeMismatch, Tensor, linear, mean_over_axis, relu

__all__ = [
    "UnknownVariant",
    "VARIANTS",
    "majority_vote",
    "init_avgpool_params",
    "avgpool_fc_forward",
    "Model",
    "VoteModel",
    "build_variant",
]

VARIANTS = ("hifanet", "hifanet_noPA", "hifanet_noSP", "avgpool_fc")


class UnknownVariant(ValueError):
    pass


def majority_vote(votes, patch_size, bof, class_count=None):
    """Most frequent 2D label per point; ties go to the smallest label id.

    ``votes`` is ``(M, N, k, k)``.  Only the central ``patch_size`` window of
    the first ``bof`` frames takes part.
    """
    votes = np.asarray(votes)
    M, N, k = votes.shape[0], votes.shape[1], votes.shape[2]
    if patch_size > k or patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd and at most {k}")
    if bof > N or bof < 1:
        raise ValueError(f"bof must be in [1, {N}]")
    lo = k // 2 - patch_size // 2
    window = votes[:, :bof, lo : lo + patch_size, lo : lo + patch_size].reshape(M, -1)
    C = int(window.max()) + 1 if class_count is None else class_count
    offsets = np.arange(M)[:, None] * C
    counts = np.bincount((window + offsets).ravel(), minlength=M * C).reshape(M, C)
    return counts.argmax(axis=1)


def init_avgpool_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    params = ParamStore()
    add_linear(params, rng, "avgfc.fc1", cfg.d, 256)
    add_linear(params, rng, "avgfc.fc2", 256, 128)
    add_linear(params, rng, "avgfc.fc3", 128, cfg.class_count)
    return params


def avgpool_fc_forward(obs, params, cfg=None):
    feats = np.asarray(obs.features, dtype=np.float64)
    w = params["avgfc.fc1.w"]
    if feats.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"avgpool_fc: feature width {feats.shape[-1]} vs {w.shape[0]}")
    pooled = mean_over_axis(Tensor(feats), axis=(-4, -3, -2))
    h = relu(linear(pooled, params["avgfc.fc1.w"], params["avgfc.fc1.b"]))
    h = relu(linear(h, params["avgfc.fc2.w"], params["avgfc.fc2.b"]))
    return linear(h, params["avgfc.fc3.w"], params["avgfc.fc3.b"])


@dataclass
class Model:
    """A learned variant: its name, config and trainable parameters.

    ``params`` holds only trainable tensors, so a frozen component (the
    structural-prior encoder of ``hifanet_noSP``) is simply absent.
    """

    variant: str
    config: HiFANetConfig
    params: ParamStore

    def forward(self, obs):
        if self.variant == "avgpool_fc":
            return avgpool_fc_forward(obs, self.params, self.config)
        return hifanet_forward(
            obs,
            self.params,
            self.config,
            use_patch=self.variant != "hifanet_noPA",
            use_prior=self.variant != "hifanet_noSP",
        )

    def predict(self, obs):
        return self.forward(obs).data.argmax(axis=-1)


@dataclass
class VoteModel:
    """Deterministic image-aggregation baseline wrapped as a model."""

    patch_size: int
    bof: int
    class_count: int

    variant = "majority_vote"

    def predict(self, obs):
        pl = np.asarray(obs.patch_labels)
        flat = pl.reshape((-1,) + pl.shape[-3:])
        labels = majority_vote(flat, self.patch_size, self.bof, self.class_count)
        return labels.reshape(pl.shape[:-3])


def build_variant(name, config, seed=0):
    if name not in VARIANTS:
        raise UnknownVariant(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    if name == "avgpool_fc":
        return Model(name, config, init_avgpool_params(config, seed))
    if name == "hifanet_noPA":
        config = config.with_(k=1)
        return Model(name, config, init_params(config, seed, patch=False))
    if name == "hifanet_noSP":
        return Model(name, config, init_params(config, seed, prior=False))
    return Model(name, config, init_params(config, seed))
