"""Command-line scenario runner.

Exit codes: 0 when every check passes, 2 on a safety violation, 3 when the
liveness detector fires.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .harness import ScenarioConfig, merge_metrics, run_seed, trace_excerpt, write_artifacts

EXIT_OK, EXIT_SAFETY, EXIT_LIVENESS = 0, 2, 3

# flag name -> config key
_OVERRIDES = {
    "mode": "mode",
    "leaders": "leaders_per_round",
    "propose_rate": "propose_rate",
    "rbc": "rbc",
    "gst": "gst",
    "delta": "delta",
    "rounds": "rounds",
    "check": "check",
    "out": "out",
    "dot": "dot",
    "n": "n",
    "delay_model": "delay_model",
    "max_time": "max_time",
    "tx_bytes": "tx_bytes",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="angelfish", description="Run Angelfish simulation scenarios.")
    p.add_argument("--config", type=Path, help="JSON scenario document")
    p.add_argument("--seed", type=int, action="append", dest="seeds", help="repeatable")
    p.add_argument("--mode", choices=("single", "multi"))
    p.add_argument("--leaders", type=int, help="leaders per round in multi mode")
    p.add_argument("--propose-rate", type=float)
    p.add_argument("--rbc", choices=("bracha", "two_step", "fast_path"))
    p.add_argument("--gst", type=int)
    p.add_argument("--delta", type=int, help="post-GST delay bound in delay units")
    p.add_argument("--rounds", type=int, help="stop once any node reaches this round")
    p.add_argument("--faults", type=Path, help="JSON fault script")
    p.add_argument("--out", help="directory for metrics, traces and DOT files")
    p.add_argument("--check", choices=("safety", "liveness", "all", "none"))
    p.add_argument("--dot", metavar="NODE:RANGE", help="export a node's DAG, e.g. 0:1-10")
    p.add_argument("-n", type=int, help="number of parties")
    p.add_argument("--delay-model", choices=("fixed", "jitter", "adversarial"))
    p.add_argument("--max-time", type=int)
    p.add_argument("--tx-bytes", type=int)
    p.add_argument("--trace", action="store_true", help="record a JSONL trace per seed")
    p.add_argument("--bytes", action="store_true", help="account message bytes")
    return p


def load_config(args: argparse.Namespace) -> ScenarioConfig:
    data: dict = json.loads(args.config.read_text()) if args.config else {}
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag)
        if value is not None:
            data[key] = value
    if args.seeds:
        data["seeds"] = args.seeds
    if args.faults:
        data["faults"] = json.loads(args.faults.read_text())
    if args.trace:
        data["trace"] = True
    if args.bytes:
        data["count_bytes"] = True
    return ScenarioConfig.from_dict(data)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    results = [run_seed(cfg, seed) for seed in cfg.seeds]
    if cfg.out:
        write_artifacts(cfg, results, Path(cfg.out))
    summary = merge_metrics([r.metrics for r in results])
    print(json.dumps(summary, sort_keys=True))
    for r in results:
        if not r.safe:
            failed = r.report.failures()[0]
            print(f"SAFETY VIOLATION seed={r.seed} {failed.name}: {failed.detail}", file=sys.stderr)
            for rec in trace_excerpt(cfg, r.seed):
                print(json.dumps(rec, sort_keys=True), file=sys.stderr)
            return EXIT_SAFETY
    for r in results:
        if not r.live:
            print(f"LIVENESS FLAG seed={r.seed}: {r.sim.liveness_flag}", file=sys.stderr)
            return EXIT_LIVENESS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
