"""Command-line entry point: ``petcm <command> [flags]``.

Configuration is a flat JSON object (see ``pipeline.DEFAULTS``); values from
``--config`` are overridden by ``--set KEY=JSON`` and then by dedicated flags.
Exit codes: 0 success, 1 usage or IO error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings

from . import pipeline
from .errors import NonFiniteGradient, PetCMError

COMMANDS = {
    "generate-data": pipeline.cmd_generate_data,
    "train": pipeline.cmd_train,
    "sample": pipeline.cmd_sample,
    "evaluate": pipeline.cmd_evaluate,
    "report": pipeline.cmd_report,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="petcm", description="Consistency-model low-dose PET synthesis toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON file with a flat key set")
        s.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="override any config key, value parsed as JSON")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--fraction", type=float, help="dose fraction to use")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "generate-data":
            s.add_argument("--n", type=int, help="pairs per dose fraction")
            s.add_argument("--fractions", type=float, nargs="+")
        if name in ("train", "sample", "evaluate"):
            s.add_argument("--data", help="dataset directory from generate-data")
        if name == "train":
            s.add_argument("--epochs", type=int)
            s.add_argument("--lr", type=float)
            s.add_argument("--batch", type=int)
        if name == "sample":
            s.add_argument("--checkpoint", help="train output dir or checkpoint stem")
            s.add_argument("--plan", action="append", dest="plans",
                           help="preset name or comma-separated indices; repeatable")
            s.add_argument("--mc", type=int)
            s.add_argument("--low", help="condition image directory (overrides --data/--fraction)")
            s.add_argument("--student", dest="use_ema", action="store_false", default=None,
                           help="sample with the student instead of the EMA teacher")
        if name == "evaluate":
            s.add_argument("--pred", action="append", help="prediction directory; repeatable")
            s.add_argument("--ref", help="reference directory (default <data>/full)")
            s.add_argument("--low", help="low-dose baseline directory")
            s.add_argument("--roi", help="lesion mask directory")
        if name == "report":
            s.add_argument("--eval", help="evaluate output directory (default --out)")
            s.add_argument("--n-montage", type=int, dest="n_montage")
    return p


def effective_config(args) -> dict:
    cfg = dict(pipeline.DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update(loaded)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=JSON, got {item!r}")
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    skip = {"command", "config", "set", "out", "verbose"}
    for key, value in vars(args).items():
        if key not in skip and value is not None:
            cfg[key] = value
    unknown = sorted(set(cfg) - set(pipeline.DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    return cfg


def _threads():
    raw = os.environ.get("PETCM_THREADS")
    if raw:
        import torch
        torch.set_num_threads(max(1, int(raw)))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = effective_config(args)
        _threads()
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            COMMANDS[args.command](cfg, args.out)
        return 0
    except UsageError as exc:
        print(f"petcm: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"petcm: error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteGradient, FloatingPointError) as exc:
        print(f"petcm: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (PetCMError, ValueError, KeyError) as exc:
        print(f"petcm: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"petcm: warning: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
