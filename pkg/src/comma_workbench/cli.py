"""Command-line front end: gen-data, train, eval, sweep, analyze, report."""

from __future__ import annotations

import argparse
import configparser
import csv
import glob
import json
import os
import sys

from .errors import ConfigError, UsageError, WorkbenchError
from .harness.data import gen_synth_dataset, write_examples
from .harness.records import load_record, save_record
from .harness.training import TrainConfig, cross_dataset_eval, evaluate, model_from_record, train_run
from .workbench import SweepSpec, analyze, emit_report, parse_values, run_sweep

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def load_config(path) -> TrainConfig:
    """Read a flat ``key = value`` file (``#`` comments allowed)."""
    if path is None:
        return TrainConfig()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_string("[config]\n" + fh.read(), source=path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    return TrainConfig.from_mapping(dict(parser["config"]))


def _records(pattern):
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise UsageError(f"no records match {pattern!r}")
    return [load_record(p) for p in paths]


def _with_seed(cfg, seed):
    return cfg if seed is None else cfg.replace(seed=seed)


def cmd_gen_data(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(dataset_seed=args.seed)
    ds = gen_synth_dataset(cfg.dataset_spec(), cfg.model_config())
    os.makedirs(args.out, exist_ok=True)
    for split in ("train", "test"):
        path = os.path.join(args.out, f"{split}.jsonl")
        write_examples(getattr(ds, split), path)
        print(path)
    return EXIT_OK


def cmd_train(args):
    record = train_run(_with_seed(load_config(args.config), args.seed))
    print(save_record(record, args.out))
    if record.status != "ok":
        print(f"run {record.status}: {record.error}", file=sys.stderr)
        return EXIT_RUNTIME
    acc = record.accuracy
    print(f"base {acc['base']:.2f}  novel {acc['novel']:.2f}  hm {acc['hm']:.2f}")
    return EXIT_OK


def cmd_eval(args):
    records = _records(args.records)
    target = load_config(args.config).dataset_spec() if args.config else None
    rows = []
    for rec in records:
        model = model_from_record(rec)
        if target is None:
            base, novel, hm = evaluate(model)
            rows.append({"record": rec.filename(), "target": "source", "base": base, "novel": novel, "hm": hm})
        else:
            (acc,) = cross_dataset_eval(model, [target])
            rows.append({"record": rec.filename(), "target": f"dataset_seed={target.seed}", "accuracy": acc})
    keys = list(rows[0])
    writer = csv.DictWriter(sys.stdout, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


def cmd_sweep(args):
    if not args.param or not args.values:
        raise UsageError("sweep needs --param and --values")
    base = _with_seed(load_config(args.config), args.seed)
    spec = SweepSpec(args.param, parse_values(args.param, args.values), base, args.seeds_per_cell)
    result = run_sweep(spec, out_dir=args.out)
    print(result.summary_path)
    if result.best is not None:
        print(f"best {spec.param} = {result.cells[result.best].value}")
    failed = sum(r["failed"] for r in result.rows())
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_analyze(args):
    records = _records(args.records)
    rows, table = analyze(records)
    if not rows:
        raise UsageError("no prompted runs among the records")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "correlation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "points", "pearson", "spearman"])
        w.writeheader()
        w.writerows(table)
    paths = emit_report(records, args.out, analysis=rows)
    print(path)
    print(paths["fig3"])
    return EXIT_OK


def cmd_report(args):
    paths = emit_report(_records(args.records), args.out)
    print(json.dumps(paths, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comma-workbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, *flags):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        for flag in flags:
            if flag == "config":
                p.add_argument("--config", metavar="PATH")
            elif flag == "seed":
                p.add_argument("--seed", type=int)
            elif flag == "records":
                p.add_argument("--records", metavar="GLOB", required=True)
            elif flag == "out":
                p.add_argument("--out", metavar="DIR", default="runs")
        return p

    add("gen-data", cmd_gen_data, "config", "seed", "out")
    add("train", cmd_train, "config", "seed", "out")
    add("eval", cmd_eval, "config", "records", "out")
    sweep = add("sweep", cmd_sweep, "config", "seed", "out")
    sweep.add_argument("--param", choices=["S", "lambda", "λ", "J", "M_p", "strategy"])
    sweep.add_argument("--values", metavar="LIST")
    sweep.add_argument("--seeds-per-cell", type=int, default=1)
    add("analyze", cmd_analyze, "records", "out")
    add("report", cmd_report, "records", "out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (WorkbenchError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


cli_dispatch = main
