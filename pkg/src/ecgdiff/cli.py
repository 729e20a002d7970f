"""``ecgdiff`` command line.

Exit codes: 0 success, 2 data or configuration error, 3 checkpoint error,
4 training fault. ``ECGDIFF_OUT`` sets the output directory when ``--out``
is not given.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, DataError, DegenerateInputError, FormatError, TrainingFault

OUT_ENV = "ECGDIFF_OUT"
EXIT_OK, EXIT_DATA, EXIT_CHECKPOINT, EXIT_TRAINING = 0, 2, 3, 4


def _out_dir(args, default):
    return Path(args.out or os.environ.get(OUT_ENV) or default)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _parse_shots(text):
    try:
        shots = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --shots value {text!r}") from exc
    if not shots or any(s < 1 for s in shots):
        raise ConfigError(f"--shots needs positive integers, got {text!r}")
    return shots


def _load_split(path):
    from .dataset import DatasetSplit, load_manifest, prepare

    p = Path(path)
    if p.is_dir():
        return DatasetSplit.load(p)
    if not p.exists():
        raise ConfigError(f"dataset {p} does not exist")
    return prepare(load_manifest(p))


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    from .dataset import write_synthetic_corpus

    out = _out_dir(args, "synthetic")
    path = write_synthetic_corpus(out, n_records=args.records, seconds=args.seconds, seed=args.seed,
                                  n_test=args.test, band_level=args.band_level)
    print(path)
    return EXIT_OK


def cmd_prepare(args):
    from .dataset import load_manifest, prepare

    manifest = load_manifest(args.manifest)
    split = prepare(manifest, seed=args.seed)
    out = _out_dir(args, "dataset")
    split.save(out)
    summary = split.summary()
    (out / "split_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: (v if k == "seed" else v["patches"]) for k, v in summary.items()}))
    return EXIT_OK


def cmd_train(args):
    from .training import TrainConfig, train

    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    split = _load_split(args.data)
    out = _out_dir(args, "run")

    def progress(row):
        _log(f"epoch {row['epoch']:4d}  train {row['train_loss']:.4f}  val {row['val_loss']:.4f}  "
             f"lr {row['lr']:.1e}")

    result = train(config, split, out, progress=None if args.quiet else progress)
    print(json.dumps({"checkpoint": str(result.checkpoint_path), "best_epoch": result.best_epoch,
                      "best_val_loss": result.best_val_loss}))
    return EXIT_OK


def cmd_denoise(args):
    from .checkpoint import load_checkpoint
    from .dataset import load_record, save_record
    from .diffusion import reverse_sample, shot_generator
    from .metrics import SignalRecord

    ck = load_checkpoint(args.checkpoint)
    rec = load_record(args.input)
    shots = int(args.shots)
    if shots < 1:
        raise ConfigError("--shots must be >= 1")
    ck.model.eval()
    cond = torch.tensor(rec.samples)
    total = np.zeros(len(rec))
    timings = []
    for m in range(shots):
        t0 = time.perf_counter()
        total += reverse_sample(cond, ck.schedule, ck.model, shot_generator(args.seed, m)).double().numpy()
        timings.append(time.perf_counter() - t0)
    out_rec = SignalRecord(f"{rec.id}_denoised", total / shots, rec.sample_rate_hz, "ecgdiff-denoise")

    out = _out_dir(args, "denoised")
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        path = out / f"{out_rec.id}.csv"
        lines = ["sample_index,value"] + [f"{i},{v!r}" for i, v in enumerate(out_rec.samples.tolist())]
        path.write_text("\n".join(lines) + "\n")
    else:
        path = save_record(out_rec, out / f"{out_rec.id}.json")
    # wall times live in their own file so the signal output stays reproducible
    (out / "timing.json").write_text(json.dumps({
        "shots": shots, "n_samples": len(rec), "per_shot_s": timings,
        "cumulative_s": np.cumsum(timings).tolist()}, indent=2) + "\n")
    print(path)
    return EXIT_OK


def cmd_evaluate(args):
    from .dataset import load_record
    from .metrics import evaluate_batch

    clean = load_record(args.clean)
    est = load_record(args.denoised)
    report = evaluate_batch([(clean.samples, est.samples, args.noise_factor)], [clean.id], [0])
    text = report.to_csv() if args.format == "csv" else report.to_json() + "\n"
    sys.stdout.write(text)
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args, ".")
        out.mkdir(parents=True, exist_ok=True)
        (out / f"metrics.{args.format}").write_text(text)
    return EXIT_OK


def cmd_benchmark(args):
    from .report import BenchmarkConfig, rows_to_csv, run_benchmark, TABLE_COLUMNS, write_bundle

    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{args.config}: cannot read config ({exc})") from exc
    for key, val in (("dataset", args.data), ("checkpoint", args.checkpoint), ("seed", args.seed),
                     ("max_patches", args.max_patches)):
        if val is not None:
            base[key] = val
    if args.shots is not None:
        base["shots"] = _parse_shots(args.shots)
    if args.no_plots:
        base["plots"] = False
    if "dataset" not in base:
        raise ConfigError("benchmark needs --data or a config with 'dataset'")
    out = _out_dir(args, base.get("out", "benchmark"))
    base["out"] = str(out)
    config = BenchmarkConfig.from_dict(base)
    result = run_benchmark(config, progress=None if args.quiet else _log)
    write_bundle(result, out)
    if args.format == "csv":
        sys.stdout.write(rows_to_csv(result.tables, TABLE_COLUMNS))
    else:
        sys.stdout.write(json.dumps(result.tables, indent=2) + "\n")
    return EXIT_OK


def cmd_trace(args):
    from .checkpoint import load_checkpoint
    from .dataset import load_record
    from .plotting import plot_trace
    from .report import trace_snapshots

    ck = load_checkpoint(args.checkpoint)
    rec = load_record(args.input)
    steps = _parse_steps(args.steps)
    snaps = trace_snapshots(ck.model, ck.schedule, rec.samples, args.seed, steps)
    out = _out_dir(args, "trace")
    out.mkdir(parents=True, exist_ok=True)
    cols = list(snaps)
    lines = ["sample_index," + ",".join(f"t{t}" for t in cols)]
    stacked = np.stack([snaps[t] for t in cols], axis=1)
    lines += [f"{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(stacked)]
    (out / "trace.csv").write_text("\n".join(lines) + "\n")
    reference = load_record(args.clean).samples if args.clean else rec.samples
    plot_trace(snaps, reference, rec.samples, rec.sample_rate_hz, out / "trace.png")
    print(out / "trace.csv")
    return EXIT_OK


def _parse_steps(text):
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --steps value {text!r}") from exc


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="ecgdiff", description="Conditional diffusion ECG denoiser.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--out", help=f"output directory (default from ${OUT_ENV})")
        sp.add_argument("--seed", type=int, default=seed_default)

    sp = sub.add_parser("synth", help="write a synthetic corpus and manifest")
    common(sp)
    sp.add_argument("--records", type=int, default=10)
    sp.add_argument("--seconds", type=float, default=60.0)
    sp.add_argument("--test", type=int, default=2, help="records held out for testing")
    sp.add_argument("--band-level", type=float, default=0.5)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("prepare", help="patch, mix and split a manifest")
    sp.add_argument("manifest")
    common(sp, seed_default=None)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train a denoiser")
    sp.add_argument("--data", required=True, help="prepared dataset directory or manifest")
    sp.add_argument("--config", help="training config (JSON)")
    sp.add_argument("--quiet", action="store_true")
    common(sp, seed_default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("denoise", help="denoise one record")
    sp.add_argument("checkpoint")
    sp.add_argument("input")
    sp.add_argument("--shots", type=int, default=1)
    sp.add_argument("--format", choices=("csv", "json"), default="json")
    common(sp)
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("evaluate", help="score a denoised record against its clean reference")
    sp.add_argument("clean")
    sp.add_argument("denoised")
    sp.add_argument("--noise-factor", type=float)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("benchmark", help="run all methods on the test split")
    sp.add_argument("--config", help="benchmark config (JSON)")
    sp.add_argument("--data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--shots", help="comma separated, e.g. 1,3,5,10")
    sp.add_argument("--max-patches", type=int)
    sp.add_argument("--no-plots", action="store_true")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--quiet", action="store_true")
    common(sp, seed_default=None)
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("trace", help="dump reverse-process snapshots")
    sp.add_argument("checkpoint")
    sp.add_argument("input")
    sp.add_argument("--clean", help="clean reference for the plot")
    sp.add_argument("--steps", help="comma separated step indices (default T, 3T/4, T/2, T/4, 0)")
    common(sp)
    sp.set_defaults(func=cmd_trace)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        _log(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except TrainingFault as exc:
        _log(f"training fault: {exc}")
        if exc.last_good_path:
            _log(f"last good checkpoint: {exc.last_good_path}")
        return EXIT_TRAINING
    except (ConfigError, DataError, FormatError, DegenerateInputError, FileNotFoundError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
