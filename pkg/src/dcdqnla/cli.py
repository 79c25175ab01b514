"""Command-line entry point: ``run``, ``sweep`` and ``gen-trace``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .channel import TRACE_KINDS, TraceParams, generate_trace
from .harness import ConfigError, load_config, run_experiment, run_sweep


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcdqnla", description="TTI-level link adaptation simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", help="INI configuration file")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. sim.d_ack=0 (repeatable)")
    r.add_argument("--out", help="output root (default: experiment.out_dir)")

    s = sub.add_parser("sweep", help="run one experiment per parameter value")
    s.add_argument("--config", help="INI configuration file")
    s.add_argument("--param", help="parameter to sweep, e.g. sim.d_ack")
    s.add_argument("--values", help="comma-separated values")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", help="output root (default: experiment.out_dir)")

    g = sub.add_parser("gen-trace", help="write a synthetic SNR trace CSV")
    g.add_argument("--kind", required=True, choices=TRACE_KINDS)
    g.add_argument("--len", dest="length", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help=f"generator parameter ({', '.join(TraceParams.field_names())})")
    return p


def _trace_params(items) -> TraceParams:
    kw = {}
    names = TraceParams.field_names()
    for item in items:
        k, _, v = item.partition("=")
        k = k.removeprefix("trace.")
        if k not in names:
            raise ConfigError(f"trace.{k}", "unknown trace parameter")
        kw[k] = int(v) if k == "switch_tti" else float(v)
    return TraceParams(**kw)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "gen-trace":
            trace = generate_trace(args.kind, args.length, args.seed, _trace_params(args.set))
            trace.to_csv(args.out)
            print(args.out)
            return 0
        cfg = load_config(args.config, args.set)
        if args.cmd == "run":
            res = run_experiment(cfg, args.out)
            print(json.dumps({"run_dir": str(res.run_dir), **res.summary}, indent=2, default=str))
            return 0
        values = args.values.split(",") if args.values else None
        rows = run_sweep(cfg, args.param, values, args.out)
        for row in rows:
            print(json.dumps(row, default=str))
        return 0 if all(r["status"] == "ok" for r in rows) else 1
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
