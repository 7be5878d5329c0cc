"""The scaled-down comparison benchmark and the pose-noise sweep.

Both are plain functions returning rows of numbers so that the CLI, the
acceptance tests and the demo scripts share one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import HiFANetConfig
from .baselines import VoteModel, build_variant
from .datagen import SceneConfig, build_observation_tensors, generate_scene, split_points
from .training import TrainConfig, evaluate, train

__all__ = [
    "BENCHMARK_SCENE",
    "BENCHMARK_MODEL",
    "BENCHMARK_TRAIN",
    "BENCHMARK_POSE_NOISE",
    "ROT_PER_TRANS",
    "ResultRow",
    "sweep_pose_noise",
    "benchmark_split",
    "run_benchmark",
    "noise_sweep",
    "sweep_sigmas",
]

# 13 classes x 385 points = 5005 points on a compact, cluttered track so
# that occlusion and pose noise matter.
BENCHMARK_SCENE = SceneConfig(
    class_count=13,
    points_per_class=385,
    world_extent=13.0,
    class_gap=0.0,
    camera_count=15,
    camera_spacing=2.0,
    feature_dim=32,
    feature_noise_sigma=0.0,
    label_corruption_rate=0.15,
    image_width=128,
    image_height=64,
    focal=64.0,
)
BENCHMARK_MODEL = HiFANetConfig(
    m=10, n=5, k=5, d=32, d1=8, heads=4, d2=8, class_count=13,
    ffn_width=32, prior_hidden=16, head_width=64,
)
BENCHMARK_TRAIN = TrainConfig(lr0=0.03, epochs=40, batch_size=16)
BENCHMARK_POSE_NOISE = (0.5, 0.05)

# A sweep level sigma means sigma metres of translation noise and
# ROT_PER_TRANS * sigma degrees of rotation noise (0.05 m <-> 0.5 deg).
ROT_PER_TRANS = 10.0


@dataclass(frozen=True)
class ResultRow:
    seed: int
    method: str
    miou: float
    avg_accuracy: float
    sigma: float = 0.0


def sweep_pose_noise(sigma):
    return (ROT_PER_TRANS * sigma, sigma)


def sweep_sigmas(noise_max, steps):
    if steps < 2 or noise_max < 0:
        raise ValueError("need noise_max >= 0 and at least two steps")
    return np.linspace(0.0, noise_max, steps)


def benchmark_split(scene, model_cfg, pose_noise, test_fraction=0.3, seed=None):
    """Train/test observation groups over disjoint point sets."""
    seed = scene.seed if seed is None else seed
    tr, te = split_points(scene, test_fraction, seed)
    return (
        build_observation_tensors(scene, model_cfg, pose_noise, tr),
        build_observation_tensors(scene, model_cfg, pose_noise, te),
    )


def _train_variant(name, model_cfg, train_cfg, train_set, seed):
    model = build_variant(name, model_cfg, seed)
    train(model, train_set, replace(train_cfg, seed=seed))
    return model


def run_benchmark(
    seeds,
    variants=("hifanet", "hifanet_noSP", "avgpool_fc"),
    scene_cfg=BENCHMARK_SCENE,
    model_cfg=BENCHMARK_MODEL,
    train_cfg=BENCHMARK_TRAIN,
    pose_noise=BENCHMARK_POSE_NOISE,
    vote_patch=5,
    log=None,
):
    """Test-set metrics per seed for the learned variants and the vote."""
    rows = []
    for seed in seeds:
        scene = generate_scene(scene_cfg.with_(seed=seed))
        train_set, test_set = benchmark_split(scene, model_cfg, pose_noise)
        patch = min(vote_patch, model_cfg.k)
        vote = VoteModel(patch, model_cfg.n, model_cfg.class_count)
        rep = evaluate(vote, test_set)
        rows.append(ResultRow(seed, f"majority_vote_k{patch}", rep.miou, rep.avg_accuracy))
        for name in variants:
            model = _train_variant(name, model_cfg, train_cfg, train_set, seed)
            rep = evaluate(model, test_set)
            rows.append(ResultRow(seed, name, rep.miou, rep.avg_accuracy))
            if log is not None:
                log(rows[-1])
    return rows


def noise_sweep(
    seed,
    noise_max=0.3,
    steps=4,
    scene_cfg=BENCHMARK_SCENE,
    model_cfg=BENCHMARK_MODEL,
    train_cfg=BENCHMARK_TRAIN,
    variant="hifanet",
    log=None,
):
    """Train once without pose noise, then test at each noise level.

    The learned model is frozen after training; the test points are fixed
    and only their projections change with the noise level.  The two vote
    baselines use patch size 1 and 5 (or k, if smaller) over all N frames.
    """
    scene = generate_scene(scene_cfg.with_(seed=seed))
    tr, te = split_points(scene, 0.3, seed)
    train_set = build_observation_tensors(scene, model_cfg, (0.0, 0.0), tr)
    model = _train_variant(variant, model_cfg, train_cfg, train_set, seed)
    wide = min(5, model_cfg.k)
    methods = [
        (variant, model),
        ("majority_vote_k1", VoteModel(1, model_cfg.n, model_cfg.class_count)),
        (f"majority_vote_k{wide}", VoteModel(wide, model_cfg.n, model_cfg.class_count)),
    ]
    rows = []
    for sigma in sweep_sigmas(noise_max, steps):
        test_set = build_observation_tensors(scene, model_cfg, sweep_pose_noise(sigma), te)
        for name, m in methods:
            rep = evaluate(m, test_set, model_cfg.class_count)
            rows.append(ResultRow(seed, name, rep.miou, rep.avg_accuracy, float(sigma)))
            if log is not None:
                log(rows[-1])
    return rows
