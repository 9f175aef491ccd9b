"""Command-line entry point.

    fedcompress partition --config run.yaml [--out DIR] [--seed N]
    fedcompress run       --config run.yaml [--negative-control-no-clip] [--convex-instance]
    fedcompress compare   --config run.yaml
    fedcompress verify    --config run.yaml [--negative-control-no-clip]
    fedcompress default-config

Exit codes: 0 success, 1 runtime error, 2 config or usage error, 3 bound violation.
``FEDCOMPRESS_OUT_ROOT`` prefixes relative output directories.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiment
from .config import ConfigError, default_config, load

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_BOUND = 0, 1, 2, 3
OUT_ROOT_ENV = "FEDCOMPRESS_OUT_ROOT"

log = logging.getLogger("fedcompress")


def _config(args):
    cfg = load(args.config) if args.config else default_config()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        over["federation"] = {"workers": args.workers}
    if over:
        cfg = cfg.with_overrides(**over)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def cmd_partition(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    shards = experiment.write_partition(cfg, out)
    print(open(out / "label_histogram.tsv", encoding="utf-8").read(), end="")
    log.info("wrote %d shard manifests to %s", len(shards), out)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    outcome = experiment.run(cfg, out, no_clip=args.negative_control_no_clip,
                             convex=True if args.convex_instance else None)
    last = outcome.result.records[-1]
    tag = " [negative-control]" if outcome.negative_control else ""
    print(f"run complete{tag}: rounds={last.round} stopped={outcome.result.stopped_round} "
          f"eval_loss={last.eval.loss:.4f} eval_acc={last.eval.accuracy:.4f} "
          f"bound_violations={outcome.violations} -> {out}")
    return EXIT_BOUND if outcome.violations else EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    experiment.compare(cfg, out)
    print((out / "compare.md").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _config(args)
    v = cfg.verify
    if not (v.client_counts and v.rounds and v.local_steps):
        print("error: verify grid is empty (verify.client_counts, verify.rounds, verify.local_steps)",
              file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args, cfg)
    runs, text = experiment.verify(cfg, out, no_clip=args.negative_control_no_clip)
    print(text, end="")
    bad = sum(not c.passed for r in runs for c in r.checks) + sum(not c.passed for r in runs for c in r.lemma)
    return EXIT_BOUND if bad else EXIT_OK


def cmd_default_config(args) -> int:
    print(default_config().dump(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcompress", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML run config (defaults to the built-in toy config)")
        sp.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        return sp

    common(sub.add_parser("partition", help="write Dirichlet shard manifests")).set_defaults(fn=cmd_partition)
    r = common(sub.add_parser("run", help="one federated run with bound checks"))
    r.add_argument("--negative-control-no-clip", action="store_true",
                   help="disable clipping and declare D=0.01 (checks should fail)")
    r.add_argument("--convex-instance", action="store_true", help="also check the excess-risk bound")
    r.add_argument("--workers", type=int, help="client worker threads")
    r.set_defaults(fn=cmd_run)
    c = common(sub.add_parser("compare", help="compare adapter methods across client counts"))
    c.add_argument("--workers", type=int)
    c.set_defaults(fn=cmd_compare)
    v = common(sub.add_parser("verify", help="sweep the excess-risk bound over (N, S, t_agg)"))
    v.add_argument("--negative-control-no-clip", action="store_true")
    v.set_defaults(fn=cmd_verify)
    sub.add_parser("default-config", help="print the default config").set_defaults(fn=cmd_default_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - report phase and exit nonzero
        print(f"error during {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
