"""Command-line entry point: data generation, training, evaluation, viz.

Exit codes: 0 success, 1 usage/config error, 2 data error (missing or
corrupt dataset/checkpoint), 3 numeric abort. Every command is deterministic
given its flags; SLASHLAB_OUT_ROOT (if set) prefixes relative output paths.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import data as dt
from . import metrics as mt
from . import model as md
from . import training as tr
from . import viz
from .errors import (CheckpointError, ConfigError, DataError, GenerationError,
                     NumericError, UsageError)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract here is 1."""

    def error(self, message):
        raise UsageError(message)


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get("SLASHLAB_OUT_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def parse_seed_range(text: str) -> list:
    """"a..b" (inclusive) or a single integer."""
    lo, sep, hi = text.partition("..")
    try:
        if not sep:
            return [int(lo)]
        a, b = int(lo), int(hi)
    except ValueError:
        raise UsageError(f"cannot parse seed range {text!r}; want N or A..B") from None
    if a > b:
        raise UsageError(f"empty seed range {text!r}")
    return list(range(a, b + 1))


# ------------------------------------------------------------ generate-data

def cmd_generate_data(args) -> int:
    if args.size <= 0:
        raise UsageError(f"--size must be positive, got {args.size}")
    if args.num_samples <= 0:
        raise UsageError(f"--num-samples must be positive, got {args.num_samples}")
    policy = dt.AnnotationPolicy(image_fraction=args.image_fraction,
                                 object_fraction=args.object_fraction,
                                 seed=args.annotation_seed)
    ds = dt.build_dataset(num_samples=args.num_samples, seed=args.seed,
                          difficulty=args.difficulty, H=args.size, W=args.size,
                          policy=policy)
    out = _out_path(args.out)
    dt.save_dataset(ds, out)
    annotated = sum(1 for s in ds.samples if s.annotated)
    print(f"wrote {len(ds.samples)} samples ({annotated} annotated) to {out}")
    return 0


# ------------------------------------------------------------------- train

def _split(samples: list, val_count: int) -> tuple:
    if val_count <= 0 or val_count >= len(samples):
        raise ConfigError(
            f"val_samples {val_count} must split {len(samples)} loaded samples")
    return samples[:-val_count], samples[-val_count:]


def _materialize_data(exp: cf.ExperimentConfig) -> tuple:
    d = exp.data
    if d.dataset_dir:
        samples = dt.load_dataset(_out_path(d.dataset_dir)).samples
        return _split(samples, d.val_samples)
    policy = dt.AnnotationPolicy(image_fraction=d.image_fraction,
                                 object_fraction=d.object_fraction,
                                 seed=d.annotation_seed)
    train = dt.build_dataset(num_samples=d.num_samples, seed=d.seed,
                             difficulty=d.difficulty, H=exp.model.H,
                             W=exp.model.W, policy=policy).samples
    # disjoint seed stream, no annotations: evaluation never needs them
    val = dt.build_dataset(num_samples=d.val_samples, seed=d.seed + 1,
                           difficulty=d.difficulty, H=exp.model.H,
                           W=exp.model.W).samples
    return train, val


def _progress_logger(seed):
    def fn(line):
        if line.startswith("step="):
            step = int(line.split()[0].split("=")[1])
            if step % 200 != 0:
                return
        print(f"[seed {seed}] {line}", flush=True)
    return fn


def _train_one(payload) -> dict:
    exp, train_samples, val_samples, seed, run_dir = payload
    manifest = tr.train_run(
        exp.model, exp.loss, exp.optimizer, train_samples, val_samples,
        seed=seed, out_dir=run_dir, steps=exp.run.steps,
        batch_size=exp.run.batch_size, eval_every=exp.run.eval_every,
        checkpoint_every=exp.run.checkpoint_every,
        eval_samples=exp.run.eval_samples,
        log_fn=_progress_logger(seed))
    record = {"seed": seed}
    record.update(manifest.final_metrics)
    return record


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.steps is not None:
        overrides.append(f"run.steps={args.steps}")
    if args.dataset is not None:
        overrides.append(f"data.dataset_dir={args.dataset}")
    exp = cf.load_config(args.config, overrides)
    seeds = parse_seed_range(args.seeds)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.ini").write_text(cf.to_ini(exp))

    train_samples, val_samples = _materialize_data(exp)
    payloads = [(exp, train_samples, val_samples, seed, out / f"seed-{seed}")
                for seed in seeds]
    workers = args.workers or min(len(seeds), os.cpu_count() or 1)
    if workers > 1 and len(seeds) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=min(workers, len(seeds))) as pool:
            records = pool.map(_train_one, payloads)
    else:
        records = [_train_one(p) for p in payloads]

    report = mt.aggregate_seeds(records)
    (out / "aggregate.csv").write_text(report.to_csv())
    (out / "aggregate.txt").write_text(report.to_text())
    print(report.to_text())
    return 0


# -------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    state = tr.load_checkpoint(_out_path(args.checkpoint))
    samples = dt.load_dataset(_out_path(args.dataset)).samples
    scores = tr.evaluate(state["params"], state["config"], samples,
                         max_samples=args.max_samples)
    line = (f"ari={scores['ari']!r} fg_ari={scores['fg_ari']!r} "
            f"miou={scores['miou']!r} n={scores['num_samples']}")
    print(line)
    if args.out:
        out = _out_path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(scores, indent=2))
    return 0


# --------------------------------------------------------------------- viz

def cmd_viz(args) -> int:
    state = tr.load_checkpoint(_out_path(args.checkpoint))
    samples = dt.load_dataset(_out_path(args.dataset)).samples
    config = state["config"]
    try:
        ids = [int(v) for v in args.sample_ids.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"cannot parse --sample-ids {args.sample_ids!r}") from None
    if not ids:
        raise UsageError("--sample-ids selected nothing")
    out = _out_path(args.out)
    for i in ids:
        if not 0 <= i < len(samples):
            raise UsageError(f"sample id {i} outside dataset of {len(samples)}")
        noise = np.random.default_rng((args.noise_seed, i)).standard_normal(
            (config.K, config.D_slot))
        viz.export_sample(samples[i].image, state["params"], config, noise,
                          out_dir=out, tag=f"{i:04d}", scale=args.scale)
    print(f"wrote visualizations for {len(ids)} sample(s) to {out}")
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> _Parser:
    parser = _Parser(prog="slashlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render a sprite dataset to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--num-samples", type=int, default=512)
    g.add_argument("--difficulty", choices=dt.DIFFICULTIES, default="stripes")
    g.add_argument("--image-fraction", type=float, default=0.10)
    g.add_argument("--object-fraction", type=float, default=0.75)
    g.add_argument("--annotation-seed", type=int, default=0)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run training for one or more seeds")
    t.add_argument("--config", default=None, help="INI experiment config")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    t.add_argument("--seeds", default="0..0", help="N or A..B inclusive")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--dataset", default=None,
                   help="load this dataset directory instead of generating")
    t.add_argument("--workers", type=int, default=0,
                   help="parallel seed runs (0 = one per seed up to cpu count)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--max-samples", type=int, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="export attention/segmentation images")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--dataset", required=True)
    v.add_argument("--sample-ids", default="0", help="comma-separated indices")
    v.add_argument("--out", required=True)
    v.add_argument("--scale", type=int, default=4)
    v.add_argument("--noise-seed", type=int, default=9000)
    v.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, GenerationError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
