#!/usr/bin/env python3
"""Full-regime benchmark (80% train) on the default synthetic dataset.

Usage: python scripts/run_full_regime.py [output_dir]
"""

import sys

from kpiembed.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/full"
    sys.exit(main(["benchmark", "--preset", "full", "--out", out]))
