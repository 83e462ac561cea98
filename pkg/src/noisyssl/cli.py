"""Command line entry point: ``noisyssl {pretrain,train,plot,report}``.

Failures exit nonzero with one line ``error: <category>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, UnknownChoiceError, load_config
from .data import DatasetError
from .experiment import ResultsStore, render_report, run_pretrain, run_train
from .model import CheckpointError
from .plots import FIGURES, make_plot

log = logging.getLogger("noisyssl")

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "io": 6, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisyssl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, with_run_flags=True):
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--out", type=Path, help="results directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if with_run_flags:
            p.add_argument("--seed", type=int, help="master seed")
            p.add_argument("--trials", type=int, help="trials per noise rate")
            p.add_argument("--paper-scale", action="store_true", help="full-size epoch budgets")

    common(sub.add_parser("pretrain", help="run the pretext task and save checkpoint(s)"))
    common(sub.add_parser("train", help="noisy-label training over noise rates and trials"))
    plot = sub.add_parser("plot", help="render figures from summary.csv")
    common(plot, with_run_flags=False)
    plot.add_argument("--figure", choices=(*FIGURES, "all"), default="all")
    common(sub.add_parser("report", help="print the summary table"), with_run_flags=False)
    return parser


def _load(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        overrides["trials"] = args.trials
    if getattr(args, "paper_scale", False):
        overrides["paper_scale"] = True
    if args.out is not None:
        overrides["out"] = str(args.out)
    return load_config(args.config, **overrides)


def _results_dir(args) -> ResultsStore:
    if args.out is not None:
        return ResultsStore(args.out)
    return ResultsStore(_load(args).out)


def dispatch(args) -> None:
    if args.verb in ("pretrain", "train"):
        cfg = _load(args)
        store = ResultsStore(cfg.out)
        store.echo_config(cfg, args.verb)
        log.info("config hash %s, results in %s", cfg.config_hash(), store.root)
        if args.verb == "pretrain":
            for path in run_pretrain(cfg, store):
                print(path)
        else:
            run_train(cfg, store)
            print(store.summary_csv)
    elif args.verb == "plot":
        store = _results_dir(args)
        if not store.summary_csv.exists():
            raise CliError("io", f"{store.summary_csv} not found; run 'train' first")
        figures = FIGURES if args.figure == "all" else (args.figure,)
        for fig in figures:
            try:
                result = make_plot(store.summary_csv, fig, store.plots)
            except ValueError as exc:
                if args.figure == "all":
                    log.warning("skipping %s: %s", fig, exc)
                    continue
                raise CliError("data", str(exc)) from exc
            outputs = [*result.images, result.sidecar]
            store.register(outputs, store.manifest().get("summary.csv", "unknown"))
            for path in outputs:
                print(path)
    else:
        store = _results_dir(args)
        try:
            text = render_report(store)
        except FileNotFoundError as exc:
            raise CliError("io", str(exc)) from exc
        (store.root / "report.md").write_text(text)
        print(text, end="")


def _categorize(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, UnknownChoiceError):
        return CliError("usage", str(exc))
    if isinstance(exc, ConfigError):
        return CliError("config", str(exc))
    if isinstance(exc, CheckpointError):
        return CliError("checkpoint", str(exc))
    if isinstance(exc, DatasetError):
        return CliError("data", str(exc))
    if isinstance(exc, OSError):
        return CliError("io", str(exc))
    return CliError("internal", f"{type(exc).__name__}: {exc}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_CODES["usage"]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        dispatch(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one categorized line
        err = _categorize(exc)
        log.debug("failure details", exc_info=True)
        message = " ".join(str(err).split())
        print(f"error: {err.category}: {message}", file=sys.stderr)
        return EXIT_CODES[err.category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
