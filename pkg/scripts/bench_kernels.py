"""Median wall time of standard vs deformable 3x3 convolution across sizes.

    python3 scripts/bench_kernels.py --sizes 16 32 64 --iters 20
"""

import argparse

from drk import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--channels", type=int, default=16)
    args = ap.parse_args()
    for size in args.sizes:
        for op in ("conv", "deform"):
            cli.main(["bench", "--op", op, "--size", str(size), "--iters", str(args.iters),
                      "--channels", str(args.channels)])


if __name__ == "__main__":
    main()
