"""Print the scan-vs-attention scaling table and the trend checks.

    python3 scripts/bench_scan.py [--lengths 256 512 1024 2048] [--width 16]
"""

import argparse

from longdiff.bench import bench_scaling, trend_summary


def run(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", type=int, nargs="+", default=[256, 512, 1024, 2048])
    ap.add_argument("--width", type=int, default=16, help="channels M and state size N")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    rows = bench_scaling(tuple(args.lengths), M=args.width, N=args.width, repeats=args.repeats)
    print(f"{'mode':<18}{'L':>6}{'wall ms':>12}{'peak MiB':>12}")
    for r in rows:
        print(f"{r.mode:<18}{r.L:>6}{r.wall_ms:>12.2f}{r.peak_bytes / 2 ** 20:>12.2f}")
    print()
    for mode, t in trend_summary(rows).items():
        print(f"{mode:<18} t({t['lengths'][-1]})/t({t['lengths'][-2]}) = {t['time_ratio']:.2f}   "
              f"memory log-log slope {t['mem_slope']:.2f} (R2 {t['mem_r2']:.3f})")


if __name__ == "__main__":
    run()
