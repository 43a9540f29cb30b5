"""Command-line surface: `lsrs <subcommand> --config <path> --workdir <path>`.

Stages are idempotent: re-running one whose inputs are unchanged is a no-op.
LSRS_THREADS (or --threads) bounds intra-stage parallelism; single-threaded
runs are the determinism reference and produce identical artifacts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, default_config, load_config
from .pipeline import MissingArtifact, StaleArtifact
from .utils import resolve_threads


def _add_common(p):
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config; omitted = documented defaults")
    p.add_argument("--workdir", type=Path, required=True,
                   help="working directory for artifacts")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: LSRS_THREADS or logical cores)")
    p.add_argument("--force", action="store_true",
                   help="re-run even if inputs are unchanged")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lsrs",
        description="Next-scale generation with latent-scale rejection sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("gen-data", "generate the synthetic corpus and calibrate validity thresholds"),
        ("fit-codebook", "fit the shared multi-scale codebook"),
        ("train-prior", "train the next-scale autoregressive prior"),
        ("build-score-dataset", "build the real-vs-generated scoring dataset"),
        ("train-scorer", "train the token-map scoring model"),
        ("pipeline", "run all five training stages in order"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("sample", help="generate one sample with optional LSRS overrides")
    _add_common(p)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--st", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--select", choices=["greedy", "topk"], default=None)
    p.add_argument("--ksel", type=int, default=None)

    p = sub.add_parser("ablate-scale", help="scale-replacement structural ablation")
    _add_common(p)

    p = sub.add_parser("sweep", help="run a parameter sweep")
    _add_common(p)
    p.add_argument("--axis", required=True,
                   choices=["M", "ST", "topk", "loss", "first-scale-exclusion"])
    p.add_argument("--samples", type=int, default=None,
                   help="samples per row (default: eval.sweep_samples)")

    p = sub.add_parser("replay-row", help="recompute one sweep row from its manifest")
    _add_common(p)
    p.add_argument("--axis", required=True,
                   choices=["M", "ST", "topk", "loss", "first-scale-exclusion"])
    p.add_argument("--value", required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("report", help="metrics report for baseline vs configured LSRS")
    _add_common(p)

    p = sub.add_parser("export-pgm", help="dump grayscale renders for inspection")
    _add_common(p)
    p.add_argument("--split", choices=["train", "val", "eval"], default="train")
    p.add_argument("--per-class", type=int, default=4)

    return parser


def _parse_axis_value(axis, raw):
    if axis in ("M", "ST", "topk"):
        return int(raw)
    if axis == "first-scale-exclusion":
        return raw.lower() in ("1", "true", "yes")
    return raw


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    threads = resolve_threads(args.threads)
    workdir = args.workdir
    pipeline.write_config_echo(cfg, workdir)
    force = getattr(args, "force", False)

    try:
        if args.command == "gen-data":
            res = pipeline.run_gen_data(cfg, workdir, threads, force)
        elif args.command == "fit-codebook":
            res = pipeline.run_fit_codebook(cfg, workdir, threads, force)
        elif args.command == "train-prior":
            res = pipeline.run_train_prior(cfg, workdir, threads, force)
        elif args.command == "build-score-dataset":
            res = pipeline.run_build_score_dataset(cfg, workdir, threads, force)
        elif args.command == "train-scorer":
            res = pipeline.run_train_scorer(cfg, workdir, threads, force)
        elif args.command == "pipeline":
            for res in pipeline.run_pipeline(cfg, workdir, threads, force):
                print(f"{res['stage']}: {'up to date' if res.get('skipped') else 'done'}")
            return 0
        elif args.command == "sample":
            manifest = pipeline.run_sample(cfg, workdir, args.class_id, args.seed,
                                           args.st, args.m, args.select, args.ksel,
                                           threads)
            print(f"sample written; valid={manifest['valid']} "
                  f"violation={manifest['violation']:.4f}")
            return 0
        elif args.command == "ablate-scale":
            deltas = pipeline.run_ablate_scale(cfg, workdir, threads)
            for k, d in enumerate(deltas, start=1):
                print(f"scale {k}: mean violation delta {d:+.4f}")
            return 0
        elif args.command == "sweep":
            rows, summary = pipeline.run_sweep_stage(cfg, workdir, args.axis, threads,
                                                     n_samples=args.samples)
            for s in summary:
                print(f"{args.axis}={s['axis_value']}: fid {s['fid_mean']:.4f} "
                      f"validity {s['validity_mean']:.3f} "
                      f"diversity {s['diversity_mean']:.4f}")
            return 0
        elif args.command == "replay-row":
            line = pipeline.replay_sweep_row(cfg, workdir, args.axis,
                                             _parse_axis_value(args.axis, args.value),
                                             args.seed, threads)
            print(line)
            return 0
        elif args.command == "report":
            report = pipeline.run_report(cfg, workdir, threads)
            print(f"baseline: fid {report['baseline']['fid']['mean']:.4f} "
                  f"validity {report['baseline']['validity']['mean']:.3f}")
            print(f"lsrs:     fid {report['lsrs']['fid']['mean']:.4f} "
                  f"validity {report['lsrs']['validity']['mean']:.3f}")
            return 0
        elif args.command == "export-pgm":
            written = pipeline.run_export_pgm(cfg, workdir, args.split, args.per_class)
            print(f"wrote {len(written)} PGM files")
            return 0
        else:  # pragma: no cover
            raise AssertionError(args.command)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except StaleArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return 3

    if args.command in ("gen-data", "fit-codebook", "train-prior",
                        "build-score-dataset", "train-scorer"):
        print(f"{res['stage']}: {'up to date' if res.get('skipped') else 'done'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
