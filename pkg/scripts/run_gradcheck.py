"""Gradient checks for every module over several seeds; prints the worst error per module.

    python3 scripts/run_gradcheck.py --seeds 10
"""

import argparse
import sys

from drk import gradcheck as G


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--instances", type=int, default=G.N_INSTANCES)
    args = ap.parse_args()

    ok = True
    for name in G.SUITES:
        report = None
        for seed in range(args.seeds):
            r = G.run_suite(name, seed, args.instances)
            report = r if report is None else report.merge(r)
        ok &= report.passed
        print(f"{G.format_report(name, report)} max_abs_err={report.max_abs_err:.3e} n={report.n_checked}")
    sys.exit(0 if ok else 2)


if __name__ == "__main__":
    main()
