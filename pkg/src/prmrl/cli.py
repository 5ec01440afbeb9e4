"""Command line entry point: ``prmrl validate|train|oracle|plot|heatmap``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .core import PrmError
from .dsl import PrmSyntaxError, parse_prm, validate_prm

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def cmd_validate(args) -> int:
    status = EXIT_OK
    for path in args.files:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            print(f"{path}: cannot read: {exc}", file=sys.stderr)
            status = EXIT_CONFIG
            continue
        try:
            prm = parse_prm(text)
        except PrmSyntaxError as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            status = EXIT_CONFIG
            continue
        issues = validate_prm(prm)
        for d in issues:
            print(f"{path}: {d}")
        if issues:
            status = EXIT_CONFIG
        else:
            print(f"{path}: ok ({prm.n_modes} modes, psi dimension {prm.psi_dim})")
    return status


def _config(args):
    overrides = {}
    if getattr(args, "trials", None) is not None:
        overrides["trials"] = args.trials
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        overrides["max_training_steps"] = args.steps
    return harness.load_config(args.config, **overrides)


def cmd_train(args) -> int:
    config = _config(args)
    series = harness.run_experiment(config, jobs=args.jobs)
    done = len(series.completed)
    print(f"{done}/{len(series.trials)} trials completed; outputs in {config.output_dir}")
    print(f"final median average reward per step: {series.median[-1]:.6g}")
    return EXIT_OK if done == len(series.trials) else EXIT_RUNTIME


def cmd_oracle(args) -> int:
    config = _config(args)
    summary = harness.oracle_summary(config)
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    return EXIT_OK


def cmd_plot(args) -> int:
    steps, p25, med, p75 = harness.read_aggregate(args.metrics)
    Path(args.output).write_text(harness.render_curve_svg(steps, p25, med, p75, title=args.title or Path(args.metrics).stem))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    run = Path(args.run)
    meta_path = run / "run.json"
    if not meta_path.is_file():
        raise harness.ConfigurationError(f"{run} has no run.json")
    meta = json.loads(meta_path.read_text())
    cfg = dict(meta["config"])
    config = harness.config_from_dict(cfg)
    if config.learner != "tabular":
        raise harness.ConfigurationError("heatmaps are available for tabular runs only")
    qpath = run / f"qtable_trial{args.trial}.npz"
    if not qpath.is_file():
        raise harness.ConfigurationError(f"{qpath} does not exist")
    q = np.load(qpath)["q"]
    setup = harness.build(config)
    grid = harness.export_heatmap(q, setup.env, setup.joint, setup.prms, args.mode)
    out = Path(args.output) if args.output else run / f"heatmap_{args.mode}_trial{args.trial}.csv"
    harness.write_heatmap_csv(grid, out)
    if args.svg:
        out.with_suffix(".svg").write_text(harness.render_heatmap_svg(grid))
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prmrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="parse and check machine files")
    v.add_argument("files", nargs="+")
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("train", help="run seeded trials from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--jobs", type=int, default=1, help="worker processes")
    t.add_argument("--trials", type=int, help="override the trial count")
    t.add_argument("--steps", type=int, help="override max_training_steps")
    t.add_argument("--out", help="override the output directory")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle", help="exact value iteration on the office product")
    o.add_argument("--config", required=True)
    o.add_argument("-o", "--output", help="also write the summary as JSON")
    o.set_defaults(func=cmd_oracle)

    pl = sub.add_parser("plot", help="render a metrics CSV as SVG")
    pl.add_argument("metrics")
    pl.add_argument("-o", "--output", required=True)
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)

    h = sub.add_parser("heatmap", help="max-Q grid of a tabular run")
    h.add_argument("--run", required=True, help="run directory written by train")
    h.add_argument("--mode", required=True, help="mode name of the first machine")
    h.add_argument("--trial", type=int, default=0)
    h.add_argument("-o", "--output", help="CSV path (default inside the run directory)")
    h.add_argument("--svg", action="store_true", help="also write an SVG next to the CSV")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PrmError, PrmSyntaxError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
