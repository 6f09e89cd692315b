"""Print the analytic embedding checks and the error-vs-range/scale tables.

Usage: python scripts/embedding_errors.py [--grid 101]
"""

import argparse

from distattn import embeddings as E


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--grid", type=int, default=101)
    args = parser.parse_args()

    for c in E.identity_checks():
        op = "<=" if c.sense == "max" else ">="
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<48} {c.value:.3e} {op} {c.tolerance:.1e}")

    ranges = [0.025, 0.05, 0.1, 0.2, 0.4, 0.8]
    print("\nsup error vs x_range")
    print(f"{'x_range':>8} " + " ".join(f"{k:>10}" for k in ("trig", "lin", "quad")))
    for r in ranges:
        print(f"{r:>8.3f} " + " ".join(f"{E.approx_error(k, r, args.grid):>10.3e}" for k in ("trig", "lin", "quad")))
    slope = E.loglog_slope(ranges, [E.approx_error("lin", r, args.grid) for r in ranges])
    print(f"lin log-log slope: {slope:.3f}")

    print("\nlin sup error over [-1, 1] after rescaling by c")
    prev = None
    for c, err in E.rescale_sweep("lin", [1, 2, 4, 8, 16, 32], 1.0, args.grid):
        ratio = f"  ratio {prev / err:.3f}" if prev else ""
        print(f"c={c:>4g}  {err:.3e}{ratio}")
        prev = err


if __name__ == "__main__":
    main()
