"""Command line front end.

Usage::

    tracecollapse {evolve,sample,collapse,master,scan,plotdata} --config PATH
                  [--seed INT] [--out-dir PATH] [--threads INT|auto]

Exit codes: 0 success, 2 bad config / usage / missing artifacts,
3 inconclusive run, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import EXPERIMENTS, ConfigError, parse_config
from .plotdata import PLOT_MANIFEST, MissingArtifactError, emit_plotdata
from .runner import EXIT_CONFIG, EXIT_OK, run, write_manifest, _now

log = logging.getLogger("tracecollapse")


def _threads(v: str):
    if v == "auto":
        return v
    try:
        n = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError("threads must be a positive integer or 'auto'")
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return n


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tracecollapse", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in EXPERIMENTS + ("plotdata",):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="run configuration (JSON)")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out-dir", default=None, help="override output_dir")
        s.add_argument("--threads", type=_threads, default=None, help="worker threads or 'auto'")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        cfg = cfg.replace(seed=args.seed, output_dir=args.out_dir, threads=args.threads)
        if args.command == "plotdata":
            started = _now()
            writer = emit_plotdata(cfg.output_dir)
            # plot tables get their own manifest so the run manifest stays intact
            write_manifest(writer, cfg, started, name=PLOT_MANIFEST)
            return EXIT_OK
        if args.command != cfg.experiment:
            raise ConfigError([f"experiment: config is for {cfg.experiment!r}, not {args.command!r}"])
        return run(cfg)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
