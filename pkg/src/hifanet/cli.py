"""Command-line entry point.

Subcommands::

    projection-study   Monte-Carlo pixel error of a pose-perturbed camera
    generate           synthetic scene -> train/test dataset files
    train              fit a variant on a dataset file
    evaluate           score a checkpoint or the vote baseline
    noise-sweep        train once, test over increasing pose noise
    benchmark          the scaled-down comparison table

Settings resolve as: command-line flag, then ``--config`` JSON, then the
built-in default.  Every output is a plain file in ``--out``; nothing
depends on the clock, so identical flags give identical bytes.

Exit codes: 0 success, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .attention import HiFANetConfig, ObservationTensor
from .baselines import VARIANTS, Model, UnknownVariant, VoteModel, build_variant
from .datagen import (
    ConfigInvalid,
    CorruptFile,
    SceneConfig,
    VersionMismatch,
    build_observation_tensors,
    coverage_fraction,
    export_dataset,
    generate_scene,
    import_dataset,
    split_points,
)
from .geometry import CameraIntrinsics, projection_error_study
from .numerics import ShapeMismatch, load_params, save_params
from .training import EmptyDataset, LabelOutOfRange, TrainConfig, evaluate, train, write_history_csv

__all__ = ["main", "UsageError", "DataError", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA"]

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------

def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_json(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _setting(args, cfg, name, default):
    """Flag beats JSON beats default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


# flag name -> (section, field)
_SCENE_FLAGS = {
    "classes": "class_count",
    "points_per_class": "points_per_class",
    "world_extent": "world_extent",
    "class_gap": "class_gap",
    "cameras": "camera_count",
    "camera_spacing": "camera_spacing",
    "feature_noise": "feature_noise_sigma",
    "corruption": "label_corruption_rate",
}
_MODEL_FLAGS = {"m": "m", "n": "n", "k": "k", "d": "d", "d1": "d1", "d2": "d2", "heads": "heads",
                "ffn_width": "ffn_width", "head_width": "head_width", "prior_hidden": "prior_hidden"}
_TRAIN_FLAGS = {"epochs": "epochs", "lr0": "lr0", "batch_size": "batch_size",
                "decay_every": "decay_every", "decay_factor": "decay_factor"}


def _section(args, cfg, key, flags, base):
    values = dict(cfg.get(key, {}))
    for flag, field in flags.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    known = {f.name for f in fields(base)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {key} setting(s): {', '.join(sorted(unknown))}")
    try:
        return replace(base, **values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid {key} settings: {exc}") from None


def _scene_config(args, cfg, seed):
    base = ex.BENCHMARK_SCENE
    scene = _section(args, cfg, "scene", _SCENE_FLAGS, base)
    scene = scene.with_(seed=seed, feature_dim=_model_config(args, cfg).d)
    return scene


def _model_config(args, cfg, class_count=None):
    model = _section(args, cfg, "model", _MODEL_FLAGS, ex.BENCHMARK_MODEL)
    if class_count is not None:
        model = model.with_(class_count=class_count)
    elif getattr(args, "classes", None) is not None or "class_count" in cfg.get("scene", {}):
        cc = args.classes if getattr(args, "classes", None) is not None else cfg["scene"]["class_count"]
        model = model.with_(class_count=cc)
    return model


def _train_config(args, cfg, seed):
    t = _section(args, cfg, "train", _TRAIN_FLAGS, ex.BENCHMARK_TRAIN)
    return replace(t, seed=seed)


def _pose_noise(args, cfg, default=(0.0, 0.0)):
    rot = _setting(args, cfg, "sigma_rot", None)
    trans = _setting(args, cfg, "sigma_trans", None)
    rot = default[0] if rot is None else rot
    trans = default[1] if trans is None else trans
    if rot < 0 or trans < 0:
        raise UsageError("pose noise sigmas must be non-negative")
    return float(rot), float(trans)


def _out_dir(args, cfg):
    out = Path(_setting(args, cfg, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _read_dataset(path):
    try:
        return import_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_projection_study(args, cfg):
    distances = _setting(args, cfg, "distances", [5.0, 10.0, 20.0, 30.0, 40.0, 50.0])
    rots = _setting(args, cfg, "sigma_rot", [1.0])
    transes = _setting(args, cfg, "sigma_trans", [0.05, 0.1])
    rots = rots if isinstance(rots, list) else [rots]
    transes = transes if isinstance(transes, list) else [transes]
    trials = int(_setting(args, cfg, "trials", 10_000))
    width = int(_setting(args, cfg, "width", 1024))
    height = int(_setting(args, cfg, "height", 512))
    focal = float(_setting(args, cfg, "focal", 500.0))
    seed = int(_setting(args, cfg, "seed", 0))
    if not distances or min(distances) <= 0:
        raise UsageError("--distances must list positive depths")
    if min(rots + transes) < 0 or trials < 100:
        raise UsageError("sigmas must be non-negative and --trials at least 100")
    intr = CameraIntrinsics(focal, focal, width / 2, height / 2, width, height)
    rows = []
    for rot in rots:
        for trans in transes:
            for z, mean, p95 in projection_error_study(distances, rot, trans, intr, trials, seed):
                rows.append((float(z), float(rot), float(trans), float(mean), float(p95)))
    path = _out_dir(args, cfg) / "projection_study.csv"
    _write_csv(path, ["distance_m", "sigma_rot_deg", "sigma_trans_m", "mean_err_px", "p95_err_px"], rows)
    return path


def cmd_generate(args, cfg):
    seed = int(_setting(args, cfg, "seed", 0))
    model_cfg = _model_config(args, cfg)
    scene_cfg = _scene_config(args, cfg, seed)
    pose_noise = _pose_noise(args, cfg, ex.BENCHMARK_POSE_NOISE)
    test_fraction = float(_setting(args, cfg, "test_fraction", 0.3))
    grouping = _setting(args, cfg, "grouping", "spatial")
    if not 0 <= test_fraction < 1:
        raise UsageError("--test-fraction must lie in [0, 1)")
    try:
        scene = generate_scene(scene_cfg)
    except ConfigInvalid as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args, cfg)
    tr, te = split_points(scene, test_fraction, seed)
    written = {}
    for name, ids in (("train", tr), ("test", te)):
        groups = build_observation_tensors(scene, model_cfg, pose_noise, ids, grouping)
        export_dataset(groups, out / f"{name}.hifa", scene_cfg.class_count)
        written[name] = len(groups)
    summary = {
        "scene": scene_cfg.to_dict(),
        "model": json.loads(model_cfg.to_json()),
        "pose_noise": list(pose_noise),
        "grouping": grouping,
        "test_fraction": test_fraction,
        "groups": written,
        "coverage": coverage_fraction(scene, model_cfg, pose_noise),
    }
    (out / "scene.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out / "train.hifa"


def _model_meta_path(checkpoint):
    return Path(checkpoint).with_suffix(".json")


def cmd_train(args, cfg):
    seed = int(_setting(args, cfg, "seed", 0))
    data = _setting(args, cfg, "data", None)
    if data is None:
        raise UsageError("train needs --data")
    groups, class_count = _read_dataset(data)
    if not groups:
        raise DataError(f"{data}: no groups to train on")
    g = groups[0]
    model_cfg = _model_config(args, cfg, class_count).with_(m=g.m, n=g.n, k=g.k, d=g.d)
    variant = _setting(args, cfg, "variant", "hifanet")
    if variant == "hifanet_noPA":
        groups = [_centre_only(x) for x in groups]
    train_cfg = _train_config(args, cfg, seed)
    try:
        model = build_variant(variant, model_cfg, seed)
    except UnknownVariant as exc:
        raise UsageError(str(exc)) from None
    result = train(model, groups, train_cfg)
    out = _out_dir(args, cfg)
    ckpt = out / "model.hfck"
    save_params(result.params, ckpt)
    meta = {"variant": variant, "model": json.loads(model.config.to_json())}
    _model_meta_path(ckpt).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_history_csv(result.history, out / "history.csv")
    return ckpt


def _centre_only(obs):
    """Keep only the centre pixel of every patch (input for hifanet_noPA)."""
    c = obs.k // 2
    sl = (Ellipsis, slice(c, c + 1), slice(c, c + 1))
    return ObservationTensor(
        features=obs.features[sl + (slice(None),)],
        coords=obs.coords,
        labels=obs.labels,
        frame_ids=obs.frame_ids,
        patch_labels=obs.patch_labels[sl],
    )


def cmd_evaluate(args, cfg):
    data = _setting(args, cfg, "data", None)
    if data is None:
        raise UsageError("evaluate needs --data")
    groups, class_count = _read_dataset(data)
    variant = _setting(args, cfg, "variant", "hifanet")
    if variant == "majority_vote":
        patch = int(_setting(args, cfg, "patch_size", groups[0].k if groups else 1))
        bof = int(_setting(args, cfg, "bof", groups[0].n if groups else 1))
        model = VoteModel(patch, bof, class_count)
        if groups and (patch > groups[0].k or bof > groups[0].n or patch % 2 == 0):
            raise UsageError("--patch-size must be odd and <= k, --bof <= N")
    else:
        ckpt = _setting(args, cfg, "checkpoint", None)
        if ckpt is None:
            raise UsageError("evaluate needs --checkpoint for a learned variant")
        try:
            meta = json.loads(_model_meta_path(ckpt).read_text())
            params = load_params(ckpt)
        except FileNotFoundError as exc:
            raise DataError(f"checkpoint not found: {exc.filename}") from None
        except ValueError as exc:
            raise DataError(f"bad checkpoint: {exc}") from None
        if meta["variant"] != variant and getattr(args, "variant", None) is not None:
            raise UsageError(f"checkpoint holds {meta['variant']!r}, not {variant!r}")
        variant = meta["variant"]
        model = Model(variant, HiFANetConfig.from_dict(meta["model"]), params)
        if variant == "hifanet_noPA":
            groups = [_centre_only(x) for x in groups]
    rep = evaluate(model, groups, class_count)
    out = _out_dir(args, cfg)
    _write_csv(out / "metrics.csv", ["variant", "miou", "avg_accuracy", "overall_accuracy"],
               [(variant, rep.miou, rep.avg_accuracy, rep.overall_accuracy)])
    _write_csv(out / "per_class_iou.csv", ["class", "iou"],
               [(c, float(v)) for c, v in enumerate(rep.per_class_iou)])
    return out / "metrics.csv"


def cmd_noise_sweep(args, cfg):
    seed = int(_setting(args, cfg, "seed", 0))
    noise_max = float(_setting(args, cfg, "noise_max", 0.3))
    steps = int(_setting(args, cfg, "noise_steps", 4))
    if noise_max < 0 or steps < 2:
        raise UsageError("--noise-max must be >= 0 and --noise-steps >= 2")
    variant = _setting(args, cfg, "variant", "hifanet")
    if variant not in ("hifanet", "hifanet_noSP", "avgpool_fc"):
        raise UsageError(f"noise-sweep cannot train variant {variant!r}")
    model_cfg = _model_config(args, cfg)
    rows = ex.noise_sweep(
        seed, noise_max, steps,
        scene_cfg=_scene_config(args, cfg, seed),
        model_cfg=model_cfg,
        train_cfg=_train_config(args, cfg, seed),
        variant=variant,
    )
    path = _out_dir(args, cfg) / "noise_sweep.csv"
    _write_csv(path, ["sigma", "method", "miou", "avg_accuracy"],
               [(r.sigma, r.method, r.miou, r.avg_accuracy) for r in rows])
    return path


def cmd_benchmark(args, cfg):
    seeds = [int(s) for s in _setting(args, cfg, "seeds", [1.0, 2.0, 3.0, 4.0, 5.0])]
    model_cfg = _model_config(args, cfg)
    rows = []
    for seed in seeds:
        rows += ex.run_benchmark(
            [seed],
            scene_cfg=_scene_config(args, cfg, seed),
            model_cfg=model_cfg,
            train_cfg=_train_config(args, cfg, seed),
            pose_noise=_pose_noise(args, cfg, ex.BENCHMARK_POSE_NOISE),
        )
    path = _out_dir(args, cfg) / "benchmark.csv"
    _write_csv(path, ["seed", "method", "miou", "avg_accuracy"],
               [(r.seed, r.method, r.miou, r.avg_accuracy) for r in rows])
    return path


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (created if missing)")


def _scene_args(p):
    g = p.add_argument_group("scene")
    g.add_argument("--classes", type=int)
    g.add_argument("--points-per-class", type=int)
    g.add_argument("--world-extent", type=float)
    g.add_argument("--class-gap", type=float)
    g.add_argument("--cameras", type=int)
    g.add_argument("--camera-spacing", type=float)
    g.add_argument("--feature-noise", type=float)
    g.add_argument("--corruption", type=float)


def _model_args(p):
    g = p.add_argument_group("model")
    for name in ("m", "n", "k", "d", "d1", "d2", "heads", "ffn-width", "head-width", "prior-hidden"):
        g.add_argument(f"--{name}", type=int)


def _train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr0", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--decay-every", type=int)
    g.add_argument("--decay-factor", type=float)


def build_parser():
    parser = _Parser(prog="hifanet", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("projection-study", help="pixel error under pose noise")
    _common(p)
    p.add_argument("--distances", type=_floats)
    p.add_argument("--sigma-rot", type=_floats, help="degrees, comma-separated")
    p.add_argument("--sigma-trans", type=_floats, help="metres, comma-separated")
    p.add_argument("--trials", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--focal", type=float)

    p = sub.add_parser("generate", help="synthetic scene to dataset files")
    _common(p)
    _scene_args(p)
    _model_args(p)
    p.add_argument("--sigma-rot", type=float)
    p.add_argument("--sigma-trans", type=float)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--grouping", choices=("spatial", "temporal"))

    p = sub.add_parser("train", help="train a variant on a dataset file")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--variant", choices=VARIANTS)
    _model_args(p)
    _train_args(p)

    p = sub.add_parser("evaluate", help="score a checkpoint or the vote")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--variant", choices=VARIANTS + ("majority_vote",))
    p.add_argument("--patch-size", type=int)
    p.add_argument("--bof", type=int)

    p = sub.add_parser("noise-sweep", help="accuracy versus pose noise")
    _common(p)
    _scene_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--variant", choices=("hifanet", "hifanet_noSP", "avgpool_fc"))
    p.add_argument("--noise-max", type=float)
    p.add_argument("--noise-steps", type=int)

    p = sub.add_parser("benchmark", help="scaled-down comparison table")
    _common(p)
    _scene_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--seeds", type=_floats, help="comma-separated scene seeds")
    p.add_argument("--sigma-rot", type=float)
    p.add_argument("--sigma-trans", type=float)
    return parser


_COMMANDS = {
    "projection-study": cmd_projection_study,
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "noise-sweep": cmd_noise_sweep,
    "benchmark": cmd_benchmark,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_json(args.config)
        path = _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorruptFile, VersionMismatch, EmptyDataset, ShapeMismatch, LabelOutOfRange) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
