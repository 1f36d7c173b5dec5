#!/usr/bin/env python3
"""Backbone x input-length grid (cosine loss), then the aggregated report.

Resumable: completed cells are skipped on re-run.
Usage: python scripts/run_table1_grid.py [--out DIR]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from futuredistill import cli  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default=str(ROOT / "configs" / "table1_grid.ini"))
    parser.add_argument("--out", default="runs/table1")
    args = parser.parse_args()
    code = cli.main(["ablate", "--config", args.config, "--out", args.out])
    if code not in (cli.EXIT_OK, cli.EXIT_PARTIAL):
        return code
    report = cli.main(
        ["report", "--metrics", str(Path(args.out) / "metrics.csv"), "--out", str(Path(args.out) / "report")]
    )
    return code or report


if __name__ == "__main__":
    sys.exit(main())
