"""Command line: ``gravos <synth|run|sweep|stats>``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from .config import ConfigError, load_config, output_dir, parse_seed
from .selector import read_selection
from .trainer import (SWEEP_AXES, DatasetError, balance_report, parse_axis_values, run_pipeline, sweep,
                      write_balance, write_dataset)
from .voxelizer import VoxelLabel

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("gravos")


class UsageError(Exception):
    pass


def _fail(command, exc, code):
    payload = {"status": "error", "command": command, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def _config(args):
    if not args.config:
        raise UsageError("--config is required")
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(parse_seed(args.seed, "--seed"))
    return config


def _out(args):
    out = output_dir(args.out)
    if not out:
        raise UsageError("an output directory is required (--out or GRAVOS_OUT)")
    return out


def _check_dataset(config):
    if config.dataset.source == "files" and not os.path.isdir(config.dataset.path):
        raise DatasetError(f"dataset path not found: {config.dataset.path}")


def cmd_synth(args):
    config = _config(args)
    out = _out(args)
    rows = write_dataset(config, out)
    print(f"wrote {len(rows)} scenes to {out}")


def cmd_run(args):
    config = _config(args)
    out = _out(args)
    _check_dataset(config)
    report = run_pipeline(config, out)
    print(f"mAP 3D selected={report.mean_ap('selected')} control={report.mean_ap('control')}; report in {out}")


def cmd_sweep(args):
    config = _config(args)
    out = _out(args)
    if not args.axis or args.values is None:
        raise UsageError("sweep needs --axis and --values")
    try:
        values = parse_axis_values(args.axis, args.values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _check_dataset(config)
    entries = sweep(config, args.axis, values, out)
    failed = [e for e in entries if not e.ok]
    print(f"{len(entries) - len(failed)}/{len(entries)} runs succeeded; combined CSV in {os.path.join(out, 'sweep.csv')}")
    if failed:
        raise RuntimeError("sweep runs failed: " + "; ".join(f"{e.value}: {e.error}" for e in failed))


def _read_labels(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["i", "j", "k", "label"]:
            raise DatasetError(f"{path}: expected header i,j,k,label")
        return [VoxelLabel((int(r[0]), int(r[1]), int(r[2])), r[3]) for r in reader]


def _csv_stems(directory):
    if not os.path.isdir(directory):
        raise DatasetError(f"directory not found: {directory}")
    return {f[:-4] for f in os.listdir(directory) if f.endswith(".csv")}


def cmd_stats(args):
    if not args.selection or not args.labels:
        raise UsageError("stats needs --selection and --labels")
    sel_ids = _csv_stems(args.selection)
    lab_ids = _csv_stems(args.labels)
    if sel_ids != lab_ids:
        diff = sorted(sel_ids.symmetric_difference(lab_ids))
        raise DatasetError(f"selection and label scene sets differ: {', '.join(diff)}")
    scene_ids = sorted(sel_ids)
    try:
        selections = [read_selection(os.path.join(args.selection, f"{s}.csv")) for s in scene_ids]
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc
    labels = [_read_labels(os.path.join(args.labels, f"{s}.csv")) for s in scene_ids]
    nu_vs = _config(args).selection.nu_vs if args.config else None
    table = balance_report(selections, labels, nu_vs)
    out = output_dir(args.out)
    if out:
        os.makedirs(out, exist_ok=True)
        write_balance(table, os.path.join(out, "balance.csv"))
    else:
        write_balance(table, sys.stdout)


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "sweep": cmd_sweep, "stats": cmd_stats}


def build_parser():
    parser = argparse.ArgumentParser(prog="gravos", description="Gradient-based voxel selection lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--out", help="output directory (default: $GRAVOS_OUT)")
        p.add_argument("--seed", help="root seed, unsigned 64-bit (overrides $GRAVOS_SEED)")
        if name == "sweep":
            p.add_argument("--axis", help=f"one of {', '.join(SWEEP_AXES)}")
            p.add_argument("--values", help="comma-separated values; 'grid' for the mechanism grid")
        if name == "stats":
            p.add_argument("--selection", help="directory of per-scene selection CSVs")
            p.add_argument("--labels", help="directory of per-scene voxel label CSVs")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError, DatasetError) as exc:
        return _fail(args.command, exc, EXIT_USAGE)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        return _fail(args.command, exc, EXIT_FAILURE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
