"""``rtx`` command line: simulate | train | segment | baseline | eval."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, FingerprintError, NumericError
from .inference import NetworkMaskModel, classic_region_grow, segment
from .metrics import evaluate
from .ply import PLYError, load_ply, save_ply
from .pointcloud import FeatureCloud, featurize
from .simulate import (
    load_dataset,
    save_dataset,
    simulate_growth_example,
    example_rng,
    generate_scene,
)
from .train import ExampleSlot, load_network, make_slots, train

log = logging.getLogger("region_transformer")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FINGERPRINT, EXIT_NUMERIC = 0, 2, 3, 4, 5


class InputError(ValueError):
    """Input files are readable but inconsistent with each other."""


# -- shared helpers ------------------------------------------------------------


def build_scene(cfg: RunConfig, scene_seed: int) -> FeatureCloud:
    raw = generate_scene(cfg.scenes.spec(scene_seed), np.random.default_rng(scene_seed))
    return featurize(raw, k_normal=cfg.growth.k_normal)


def _scene_examples(args):
    cfg, i, scene_seed = args
    cloud = build_scene(cfg, scene_seed)
    slots = make_slots([cloud], cfg.growth.examples_per_scene, cfg.growth.max_step, example_rng(cfg.scenes.seed, i))
    exs = []
    for j, slot in enumerate(slots):
        rng = example_rng(cfg.scenes.seed, i, j)
        exs.append(
            simulate_growth_example(
                cloud, slot.seed, slot.step, cfg.growth.theta_max, cfg.growth.r_grow, rng, scene=i
            )
        )
    return cloud, exs


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_json(path, payload) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _report(cfg: RunConfig, command: str, **body) -> dict:
    return {"version": __version__, "command": command, "config": cfg.to_dict(), **body}


def _load_cloud(path, labels_path=None) -> FeatureCloud:
    return featurize(load_ply(path, labels_path))


# -- commands ----------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out_dir, jobs: int = 1) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.scenes.scene_seeds()
    results = _map(_scene_examples, [(cfg, i, s) for i, s in enumerate(seeds)], jobs)
    examples = []
    names = []
    for i, (cloud, exs) in enumerate(results):
        name = f"scene_{i:04d}.ply"
        save_ply(cloud.raw, cloud.labels, out / name, keep_colors=True)
        names.append(name)
        examples.extend(exs)
    manifest = _report(cfg, "simulate", scene_seeds=seeds, scenes=names, examples=len(examples))
    save_dataset(out / "dataset.bin", examples, {"scene_seeds": seeds, "version": __version__})
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_train(cfg: RunConfig, dataset, out_checkpoint, log_path=None, resume: bool = False) -> dict:
    examples, header = load_dataset(dataset)
    seeds = header["scene_seeds"]
    clouds = [build_scene(cfg, s) for s in seeds]
    slots = [ExampleSlot(ex.scene, ex.seed, ex.step) for ex in examples]
    tcfg = cfg.train_config()
    t0 = time.perf_counter()
    train(tcfg, clouds, slots, out_checkpoint, log_path, resume=resume)
    return _report(cfg, "train", examples=len(slots), seconds=round(time.perf_counter() - t0, 3))


def cmd_segment(
    cfg: RunConfig, checkpoint, in_ply, out_ply, report_json=None, do_eval=False, labels_path=None, check_network=True
) -> dict:
    """Without ``check_network`` the architecture recorded in the checkpoint is used as is."""
    net, meta, _ = load_network(checkpoint, cfg.network if check_network else None)
    cloud = _load_cloud(in_ply, labels_path)
    model = NetworkMaskModel(net, chunked=cfg.segment.chunked)
    result = segment(model, cloud, cfg.segment_params())
    save_ply(cloud.raw, result.labels, out_ply)
    report = _report(cfg, "segment", input=str(in_ply), output=str(out_ply), **result.report())
    if do_eval:
        if cloud.labels is None:
            raise InputError(f"{in_ply} carries no ground-truth labels for --eval")
        report["metrics"] = evaluate(result.labels, cloud.labels, cfg.eval.iou_thresh)
    if report_json is not None:
        _write_json(report_json, report)
    return report


def cmd_baseline(cfg: RunConfig, in_ply, out_ply, report_json=None, labels_path=None) -> dict:
    cloud = _load_cloud(in_ply, labels_path)
    b = cfg.baseline
    result = classic_region_grow(cloud, b.angle_thresh, b.curv_thresh, cfg.growth.r_grow, cfg.segment.min_size)
    save_ply(cloud.raw, result.labels, out_ply)
    report = _report(cfg, "baseline", input=str(in_ply), output=str(out_ply), **result.report())
    if report_json is not None:
        _write_json(report_json, report)
    return report


def _eval_pair(args):
    pred_path, true_path, iou_thresh = args
    t0 = time.perf_counter()
    pred = load_ply(pred_path)
    true = load_ply(true_path)
    if len(pred) != len(true):
        raise InputError(f"{pred_path} has {len(pred)} points but {true_path} has {len(true)}")
    if not np.array_equal(pred.positions, true.positions):
        raise InputError(f"{pred_path} and {true_path} differ in point coordinates or order")
    if pred.labels is None or true.labels is None:
        raise InputError("both files need a per-point label property")
    scores = evaluate(pred.labels, true.labels, iou_thresh)
    seconds = time.perf_counter() - t0
    report = Path(pred_path).with_suffix(".json")
    if report.exists():
        seconds = json.loads(report.read_text()).get("total_seconds", seconds)
    return {"scene": Path(true_path).stem, **scores, "seconds": seconds}


def cmd_eval(cfg: RunConfig, pairs, out_csv, jobs: int = 1) -> list[dict]:
    rows = _map(_eval_pair, [(p, t, cfg.eval.iou_thresh) for p, t in pairs], jobs)
    cols = ["scene", "ari", "ami", "nmi", "precision", "recall", "miou", "seconds"]
    tmp = f"{os.fspath(out_csv)}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["scene"]] + [f"{r[c]:.6f}" for c in cols[1:]])
    os.replace(tmp, out_csv)
    return rows


# -- argument parsing ------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtx", description="Class-agnostic point-cloud instance segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--jobs", type=int, default=1, help="worker processes across scenes")
    common.add_argument("--r-grow", type=float, help="growth radius in metres")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate labelled scenes and training examples")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--scenes", type=int)
    s.add_argument("--examples-per-scene", type=int)
    s.add_argument("--seed", type=int)

    t = sub.add_parser("train", parents=[common], help="train the region network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="CSV metrics log")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--epochs", type=int)
    t.add_argument("--set-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)

    g = sub.add_parser("segment", parents=[common], help="segment a PLY with a trained network")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--output", required=True)
    g.add_argument("--report")
    g.add_argument("--labels", help="label sidecar file (one id per line)")
    g.add_argument("--eval", action="store_true", help="score against the input's labels")
    g.add_argument("--seed", type=int)

    b = sub.add_parser("baseline", parents=[common], help="classic normal/curvature region growing")
    b.add_argument("--input", required=True)
    b.add_argument("--output", required=True)
    b.add_argument("--report")
    b.add_argument("--labels")
    b.add_argument("--angle", type=float, help="normal angle threshold in degrees")
    b.add_argument("--curvature", type=float, help="curvature threshold for seed admission")

    e = sub.add_parser("eval", parents=[common], help="score predicted against ground-truth PLYs")
    e.add_argument("--pred", required=True, nargs="+")
    e.add_argument("--true", required=True, nargs="+")
    e.add_argument("--out", required=True)
    return p


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    pick = lambda **kv: {k: v for k, v in kv.items() if v is not None}  # noqa: E731
    seed = get("seed")
    return {
        "scenes": pick(count=get("scenes"), seed=seed if args.command == "simulate" else None),
        "growth": pick(r_grow=get("r_grow"), examples_per_scene=get("examples_per_scene")),
        "network": pick(set_size=get("set_size")),
        "train": pick(epochs=get("epochs"), lr=get("lr"), seed=seed if args.command == "train" else None),
        "segment": pick(seed=seed if args.command == "segment" else None),
        "baseline": pick(angle_thresh=get("angle"), curv_thresh=get("curvature")),
    }


def _run(args) -> None:
    cfg = load_config(args.config, _overrides(args))
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    if args.command == "simulate":
        cmd_simulate(cfg, args.out, args.jobs)
    elif args.command == "train":
        cmd_train(cfg, args.dataset, args.out, args.log, args.resume)
    elif args.command == "segment":
        cmd_segment(
            cfg, args.checkpoint, args.input, args.output, args.report, args.eval, args.labels,
            check_network=args.config is not None,
        )
    elif args.command == "baseline":
        cmd_baseline(cfg, args.input, args.output, args.report, args.labels)
    elif args.command == "eval":
        if len(args.pred) != len(args.true):
            raise ConfigError("--pred and --true need the same number of files")
        cmd_eval(cfg, list(zip(args.pred, args.true)), args.out, args.jobs)


# checked in order: the specific errors subclass ValueError
_FAILURES = [
    (ConfigError, EXIT_CONFIG, "config"),
    (FingerprintError, EXIT_FINGERPRINT, "fingerprint"),
    (NumericError, EXIT_NUMERIC, "numeric"),
    ((OSError, PLYError, InputError), EXIT_IO, "io"),
    (ValueError, EXIT_IO, "input"),  # malformed input data
]


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _run(args)
    except (ConfigError, FingerprintError, NumericError, OSError, ValueError) as exc:
        code, kind = next((c, k) for types, c, k in _FAILURES if isinstance(exc, types))
        msg = " ".join(str(exc).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
