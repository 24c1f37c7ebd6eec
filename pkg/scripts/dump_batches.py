"""
Dump the batches of an experiment's data stream to CSV, or check a dump.

Usage:
    python scripts/dump_batches.py --config configs/n2_tradeoff.cfg --out batches.csv --iterations 10
    python scripts/dump_batches.py --config configs/n2_tradeoff.cfg --check batches.csv
"""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import argparse
from pathlib import Path

import numpy as np
from loguru import logger
from config.experiment import build_run_config, load_config
from services.data_stream import draw_batch, read_batches_csv, write_batches_csv


def dump(config_path: Path, out_path: Path, iterations: int) -> int:
    stream = build_run_config(load_config(config_path)).stream
    rows = write_batches_csv(out_path, stream, range(stream.num_agents), range(iterations))
    logger.info(f"✅ Wrote {rows} samples ({stream.num_agents} agents x {iterations} iterations) to {out_path}")
    return 0


def check(config_path: Path, dump_path: Path) -> int:
    """Compare a dump against freshly drawn batches, bit for bit."""
    stream = build_run_config(load_config(config_path)).stream
    batches = read_batches_csv(dump_path)
    mismatches = 0
    for (agent, iteration), batch in sorted(batches.items()):
        fresh = draw_batch(stream, agent, iteration)
        if not (np.array_equal(fresh.features, batch.features) and np.array_equal(fresh.labels, batch.labels)):
            logger.error(f"❌ Batch agent={agent} iteration={iteration} differs")
            mismatches += 1
    if mismatches:
        return 1
    logger.info(f"✅ All {len(batches)} batches match")
    return 0


def main():
    parser = argparse.ArgumentParser(description="Golden batch CSV dump/check")
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--out", type=Path, help="write a dump here")
    parser.add_argument("--iterations", type=int, default=10)
    parser.add_argument("--check", type=Path, help="verify an existing dump")
    args = parser.parse_args()

    if args.check:
        return check(args.config, args.check)
    if args.out:
        return dump(args.config, args.out, args.iterations)
    parser.error("one of --out or --check is required")


if __name__ == "__main__":
    sys.exit(main())
