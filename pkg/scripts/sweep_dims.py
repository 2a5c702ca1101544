#!/usr/bin/env python3
"""Embedding-dimension sweep (MSE vs n) with the limited-regime preset;
writes the table and an MSE-vs-n plot.

Usage: python scripts/sweep_dims.py [output_dir] [dims]
"""

import sys

from kpiembed.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/sweep"
    dims = sys.argv[2] if len(sys.argv) > 2 else "2,4,8,16,32"
    sys.exit(main(["sweep-dim", "--preset", "limited", "--dims", dims, "--out", out]))
