"""``bench run|verify``: drive the index through oscillating workload phases."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from ..storage import AhaError
from .runner import RunConfig, execute
from .workload import WorkloadSpec, parse_hotspots, parse_phases


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description=__doc__)
    p.add_argument("command", choices=["run", "verify"])
    p.add_argument("--mode", choices=["aha", "pure-lsm", "pure-btree"], default="aha")
    p.add_argument("--dist", choices=["uniform", "zipf"], default="uniform")
    p.add_argument("--theta", type=float, default=0.99)
    p.add_argument("--keys", type=int, default=2_000_000)
    p.add_argument("--key-len", type=int, default=20)
    p.add_argument("--val-len", type=int, default=128)
    p.add_argument("--hotspot", help="LO:FRAC[,LO:FRAC...] as keyspace fractions")
    p.add_argument("--selectivity", type=float)
    p.add_argument("--phases", default="load:2000000,read:200000,write:200000,read:200000")
    p.add_argument("--root-levels", type=int, default=3)
    p.add_argument("--node-levels", type=int, default=2)
    p.add_argument("--leaf-split", choices=["down", "side"], default="down")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help="metrics CSV path (a .summary.json is written next to it)")
    p.add_argument("--data-dir", help="empty directory for engine files (default: temporary)")
    p.add_argument("--hot-writes", action="store_true", help="restrict updates to the hotspot")
    p.add_argument("--delete-frac", type=float, default=0.0, help="fraction of updates that delete")
    p.add_argument("--drift-hotspot", help="hotspot used from the second read phase on")
    p.add_argument("--memtable-kb", type=int)
    p.add_argument("--pool-pages", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        spec = WorkloadSpec(
            distribution=args.dist, theta=args.theta, key_count=args.keys, key_len=args.key_len,
            value_len=args.val_len, hotspots=parse_hotspots(args.hotspot) if args.hotspot else [],
            selectivity=args.selectivity, phases=parse_phases(args.phases), seed=args.seed,
            hot_writes=args.hot_writes, delete_frac=args.delete_frac,
        )
        cfg = RunConfig(
            mode=args.mode, threads=args.threads, root_levels=args.root_levels,
            node_levels=args.node_levels, leaf_split=args.leaf_split, data_dir=args.data_dir,
            out=args.out, drift=parse_hotspots(args.drift_hotspot) if args.drift_hotspot else None,
            memtable_budget=args.memtable_kb * 1024 if args.memtable_kb else None,
            pool_pages=args.pool_pages,
        )
        metrics = execute(spec, cfg, verify=args.command == "verify")
    except AhaError as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        if exc.__cause__ is not None:
            print(f"  caused by: {exc.__cause__!r}", file=sys.stderr)
        return 2
    for ph in metrics.phases:
        line = (f"{ph.kind:<6} ops={ph.ops:<9} wall={ph.wall_s:8.2f}s tput={ph.tput:10.0f}/s "
                f"steady={ph.steady_tput:10.0f}/s")
        if ph.kind == "read":
            line += f" probes={ph.nodelsm_probes} adapt_ops={ph.adapt_ops}"
        print(line)
    print(f"write_amplification={metrics.io.get('write_amplification', 0):.2f} "
          f"result_hash={metrics.result_hash}")
    if args.command == "verify":
        if metrics.divergence:
            print(f"FAIL {metrics.divergence}")
            return 1
        print("PASS")
    return 0


if __name__ == "__main__":
    sys.exit(main())
