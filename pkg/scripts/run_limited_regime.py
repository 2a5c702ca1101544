#!/usr/bin/env python3
"""Limited-regime benchmark (5% train, 5 epochs everywhere) on the default
synthetic dataset; writes the EvalReport and a rendered table.

Usage: python scripts/run_limited_regime.py [output_dir]
"""

import sys

from kpiembed.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/limited"
    sys.exit(main(["benchmark", "--preset", "limited", "--out", out]))
