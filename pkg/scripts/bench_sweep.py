#!/usr/bin/env python3
"""Sparsity sweep benchmark at a configurable matmul size.

Profiles the kernels if no table exists yet, then runs the CLI bench
subcommand across row-sparsity ratios and writes a CSV.
"""

import argparse
import os
import sys

from pittile.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=1024)
    ap.add_argument("--ratios", default="0.5,0.9,0.95,0.99")
    ap.add_argument("--profile", default="profile.txt")
    ap.add_argument("--csv", default="bench.csv")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not os.path.exists(args.profile):
        rc = cli_main(["profile", "--reps", "5", "-o", args.profile])
        if rc != 0:
            return rc
    s = args.size
    return cli_main(
        [
            "bench",
            "--expr", "C[m,n] += A[m,k] * B[k,n]",
            "--shape", f"m={s},k={s},n={s}",
            "--random", f"1x{s}",
            "--ratios", args.ratios,
            "--profile", args.profile,
            "--csv", args.csv,
            "--workers", str(args.workers),
            "--seed", str(args.seed),
        ]
    )


if __name__ == "__main__":
    sys.exit(main())
