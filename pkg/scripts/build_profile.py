#!/usr/bin/env python3
"""Profile the built-in tile kernels on this machine and save the lookup
table (point PIT_PROFILE at the output to make it the default)."""

import argparse

from pittile import profile, register_builtin_kernels, save_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-o", "--out", default="profile.txt")
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--warmup", type=int, default=3)
    ap.add_argument("--reps-inner", type=int, default=300)
    args = ap.parse_args()

    registry = register_builtin_kernels()
    table = profile(registry, reps=args.reps, warmup=args.warmup, reps_inner=args.reps_inner)
    save_profile(table, args.out)
    print(f"wrote {args.out}")
    for desc in sorted(table.costs, key=lambda d: (d.op_kind, d.impl_id)):
        print(f"  {desc}: {table.costs[desc]:.3e} s/launch")


if __name__ == "__main__":
    main()
