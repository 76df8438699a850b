"""Command-line entry point.

Subcommands::

    bayesal run CONFIG [--jobs N]
    bayesal select PREDS --strategy S --budget B [--eta E] [--seed N] [--out FILE]
    bayesal gen-data CONFIG --out FILE [--test-out FILE]
    bayesal report --in DIR

``BAYESAL_SEED`` and ``BAYESAL_OUTDIR`` override ``seed.master`` and
``output.dir`` of any config.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import acquisition, al_loop
from .config import RESOLVED_NAME, ConfigError, emit_config, parse_config
from .data import DatasetError, SyntheticSpec, generate_synthetic, save_dataset
from .model import ContractError, TrainingDiverged

log = logging.getLogger("bayesal")

_EXPECTED = (ConfigError, DatasetError, ContractError, TrainingDiverged, acquisition.SelectionError, OSError, ValueError)


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / RESOLVED_NAME).write_text(emit_config(cfg), encoding="utf-8")
    task = al_loop.build_task(cfg)

    trials_path = outdir / al_loop.TRIALS_FILE
    with open(trials_path, "w", encoding="utf-8") as fh:
        fh.write("strategy,trial,stage,labeled_count,test_mse\n")

    def flush(strategy, trial, rec):
        with open(trials_path, "a", encoding="utf-8") as fh:
            fh.write(al_loop.format_trial_row((strategy, trial, rec.stage, rec.labeled_count, rec.test_mse)))

    report = al_loop.run_experiment(cfg, task, jobs=args.jobs, on_record=flush)
    trials, summary = al_loop.write_report(report, outdir)
    for s in report.strategies:
        mean, std = report.final(s)
        print(f"{s:12s} final mse {mean:.6g} +/- {std:.3g}")
    print(f"wrote {trials} and {summary}")
    return 0


def cmd_select(args) -> int:
    labeled, pool = acquisition.load_pool_predictions(args.preds)
    result = acquisition.select(
        args.strategy, labeled, pool, args.budget,
        eta=args.eta, line6=args.line6, rng=np.random.default_rng(args.seed),
    )
    text = "".join(f"{i}\n" for i in result.chosen)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config)
    spec = SyntheticSpec(
        n=cfg.data_n, D=cfg.data_D, K=cfg.data_K,
        noise_profile=cfg.data_noise_profile, noise_sd=cfg.data_noise_sd,
        target_fn_seed=cfg.data_target_fn_seed, feature_dist=cfg.data_feature_dist,
    )
    save_dataset(generate_synthetic(spec, al_loop.derive_seed(cfg.seed_master, 0xDA7A, 0)).dataset, args.out)
    if args.test_out:
        test_spec = SyntheticSpec(**{**spec.__dict__, "n": cfg.data_n_test})
        test = generate_synthetic(test_spec, al_loop.derive_seed(cfg.seed_master, 0xDA7A, 1)).dataset
        save_dataset(test, args.test_out)
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    indir = Path(args.indir)
    rows = al_loop.read_trials(indir / al_loop.TRIALS_FILE)
    summary = al_loop.summarize_rows(rows)
    out = indir / al_loop.SUMMARY_FILE
    al_loop.write_summary(summary, out)
    for s, stage, mean, std in summary:
        print(f"{s},{stage},{mean:.6g},{std:.3g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesal", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an active-learning experiment")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1, help="parallel trial workers (output is identical)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("select", help="run one selector on a predictions file")
    p.add_argument("preds")
    p.add_argument("--strategy", required=True, choices=acquisition.STRATEGIES)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--eta", type=float, default=0.3)
    p.add_argument("--line6", choices=acquisition.LINE6_READINGS, default="lb_center")
    p.add_argument("--seed", type=int, default=0, help="seed for the random strategy")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("gen-data", help="export a synthetic dataset")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--test-out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("report", help="re-aggregate trials.csv into summary.csv")
    p.add_argument("--in", dest="indir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _EXPECTED as exc:
        msg = str(exc) or exc.__class__.__name__
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.strerror}: {exc.filename}"
        print(f"bayesal: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
