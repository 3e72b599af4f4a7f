"""Command-line harness: verify / train / simulate / report.

Exit codes: 0 success, 1 a check failed, 2 configuration or usage error.
Output directory resolution: the GMKIT_OUT environment variable overrides
--out, which overrides the config's `out` key, which defaults to
`gmkit_out/`.  All CSV output is byte-stable for a fixed config and seed
except the wall-time column of records.csv.

CSV schemas
-----------
records.csv    experiment,metric,value,std_error,tolerance,pass,wall_time_s
detail.csv     experiment,t,metric,value          (tidy long format)
loss_trace.csv step,loss,std_error
counts.csv     state,count                        (CTMC terminal counts)
samples.csv    index,x0                           (flow terminal samples)
Floats are written with 17 significant digits.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, EmptyResults, GmkitError, ModelFileCorrupt
from .records import write_records_csv, write_summary_json, write_tidy_csv
from .report import generate_report
from .runs import run_simulate, run_train
from .suites import SUITE_NAMES, run_suite


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmkit",
        description="Generator-matching desk kit: theorem verification, training, simulation.",
        epilog=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="experiment config file")
        p.add_argument("--out", type=Path, default=None, help="output directory (GMKIT_OUT overrides)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers for sample fan-out")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_verify = sub.add_parser("verify", help="run a theorem-verification suite")
    p_verify.add_argument("suite", help=f"one of: {', '.join(SUITE_NAMES)}")
    common(p_verify)

    p_train = sub.add_parser("train", help="train a model from a config")
    common(p_train)

    p_sim = sub.add_parser("simulate", help="simulate a trained model")
    p_sim.add_argument("model_file", type=Path, help="model parameter file from `gmkit train`")
    common(p_sim)

    p_rep = sub.add_parser("report", help="aggregate results into markdown, tidy CSVs, figures")
    p_rep.add_argument("results_dir", type=Path, help="directory with suite/run outputs")
    common(p_rep)
    return parser


def _resolve_out(args, cfg: dict) -> Path:
    env = os.environ.get("GMKIT_OUT")
    if env:
        return Path(env)
    if args.out is not None:
        return Path(args.out)
    if "out" in cfg:
        return Path(str(cfg["out"]))
    return Path("gmkit_out")


def _load_cfg(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def cmd_verify(args) -> int:
    cfg = _load_cfg(args)
    seed = int(cfg.get("seed", 0))
    records, tidy = run_suite(args.suite, seed, cfg)
    out = _resolve_out(args, cfg) / args.suite
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / "records.csv", records)
    write_summary_json(out / "summary.json", args.suite, records, extra={"seed": seed})
    if tidy:
        write_tidy_csv(out / "detail.csv", tidy)
    n_failed = sum(not r.passed for r in records)
    if not args.quiet:
        for r in records:
            mark = "PASS" if r.passed else "FAIL"
            tol = "" if r.tolerance is None else f" (tol {r.tolerance:g})"
            print(f"[{mark}] {r.experiment} {r.metric} = {r.value:.6g}{tol}")
        print(f"{args.suite}: {len(records) - n_failed}/{len(records)} checks passed -> {out}")
    return 1 if n_failed else 0


def cmd_train(args) -> int:
    if args.config is None:
        raise ConfigError("train needs --config")
    cfg = _load_cfg(args)
    exp = ExperimentConfig.from_dict(cfg)
    out = _resolve_out(args, cfg)
    run_train(exp, out, jobs=args.jobs, quiet=args.quiet)
    return 0


def cmd_simulate(args) -> int:
    if args.config is None:
        raise ConfigError("simulate needs --config")
    if not args.model_file.is_file():
        raise ConfigError(f"model file not found: {args.model_file}")
    cfg = _load_cfg(args)
    exp = ExperimentConfig.from_dict(cfg)
    out = _resolve_out(args, cfg)
    run_simulate(exp, args.model_file, out, quiet=args.quiet)
    return 0


def cmd_report(args) -> int:
    out = None
    if os.environ.get("GMKIT_OUT"):
        out = Path(os.environ["GMKIT_OUT"])
    elif args.out is not None:
        out = args.out
    return generate_report(args.results_dir, out, quiet=args.quiet)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    handlers = {
        "verify": cmd_verify,
        "train": cmd_train,
        "simulate": cmd_simulate,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, EmptyResults, ModelFileCorrupt) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GmkitError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
