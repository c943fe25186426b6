"""Command line entry point: ``tsbackdoor <subcommand> [--config ...] [--out ...]``.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .config import DEFAULTS, VARIANTS, complete, load_config, override_seed
from .data import WindowSpec, load_csv, save_csv, synth_generate
from .errors import ConfigError, InsufficientDataError, InsufficientVarianceError, NumericError, ParseError
from .pipeline import run_ablation, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("tsbackdoor")


def _config(args):
    cfg = load_config(args.config) if args.config else complete()
    for item in args.seed_override or []:
        cfg = override_seed(cfg, item)
    if getattr(args, "variant", None):
        cfg = complete({**cfg, "variant": args.variant})
    return cfg


def _out(args):
    return Path(args.out) if args.out else Path("runs") / "default"


def cmd_synth(args):
    cfg = _config(args)
    s = cfg["dataset"]["synth"]
    ds = synth_generate(seed=cfg["seeds"]["data"], spec=WindowSpec(**cfg["window"]), **s)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(ds.values, ds.names, out / "data.csv")
    print(f"wrote {out / 'data.csv'} ({ds.T} x {ds.N})")


def cmd_ingest(args):
    cfg = _config(args)
    path = args.csv or cfg["dataset"]["csv"]
    if not path:
        raise ConfigError("ingest needs --csv or dataset.csv in the config")
    ds = load_csv(path, WindowSpec(**cfg["window"]))
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    stats = {"path": str(path), "T": ds.T, "N": ds.N, "names": list(ds.names), "train_end": ds.train_end,
             "val_end": ds.val_end, "mean": ds.mean.tolist(), "std": ds.std.tolist()}
    with (out / "ingest.json").open("w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    print(f"{path}: {ds.T} rows x {ds.N} variables, splits at {ds.train_end}/{ds.val_end}")


def _stage_cmd(until):
    def run(args):
        exp = run_pipeline(_config(args), _out(args), until=until, jobs=args.jobs)
        if until == "eval":
            _print_report(exp.report_dict)
        else:
            print(f"stage {until!r} done; artifacts in {_out(args)}")
    return run


def cmd_ablate(args):
    if not args.variant:
        raise ConfigError("ablate needs --variant A1 or A2")
    exp = run_ablation(_config(args), args.variant, _out(args), jobs=args.jobs)
    _print_report(exp.report_dict)


def cmd_report(args):
    path = Path(args.report) if args.report else _out(args) / "report.json"
    _print_report(ev.load_report(path))


def _print_report(rep):
    print(f"{'method':<10} {'model':<8} {'M_c':>8} {'M_p_c':>8} {'M_p_a':>8} {'peak<=1':>8}")
    for r in rep["results"]:
        cells = [f"{r[k]:8.4f}" if k in r else f"{'-':>8}" for k in ("M_c", "M_p_c", "M_p_a", "peak_within_1")]
        print(f"{r['method']:<10} {r['model']:<8} " + " ".join(cells))
    for m, a in sorted(rep.get("stealth", {}).items()):
        print(f"stealth AUC {m}: {a:.4f}")


def build_parser():
    p = argparse.ArgumentParser(prog="tsbackdoor", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); omitted fields take defaults")
    common.add_argument("--out", help="output directory (default runs/default)")
    common.add_argument("--seed-override", action="append", metavar="STAGE=INT",
                        help="replace one stage seed; repeatable")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for victim training cells")
    common.add_argument("--variant", choices=VARIANTS, help="ablation variant")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write the synthetic dataset").set_defaults(fn=cmd_synth)
    s = sub.add_parser("ingest", parents=[common], help="validate a CSV and record its split statistics")
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_ingest)
    for name, until, text in [("attack", "plan", "select timestamps and write the attack plan"),
                              ("optimize", "optimize", "optimize trigger generators and write poisoned sets"),
                              ("train", "train", "train victim models on every poisoned set"),
                              ("eval", "eval", "full evaluation and report"),
                              ("run", "eval", "the whole pipeline")]:
        sub.add_parser(name, parents=[common], help=text).set_defaults(fn=_stage_cmd(until))
    sub.add_parser("ablate", parents=[common], help="run an ablation variant").set_defaults(fn=cmd_ablate)
    s = sub.add_parser("report", parents=[common], help="print a stored report")
    s.add_argument("report", nargs="?", help="report.json (default <out>/report.json)")
    s.set_defaults(fn=cmd_report)
    s = sub.add_parser("defaults", help="print the default config")
    s.set_defaults(fn=lambda a: print(json.dumps(DEFAULTS, indent=2, sort_keys=True)), verbose=False)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("config error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        stage = getattr(exc, "stage", None)
        print(f"numeric failure{f' in stage {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, InsufficientDataError, InsufficientVarianceError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
