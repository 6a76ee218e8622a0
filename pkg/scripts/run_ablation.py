"""Four-variant toy ablation: generate the default toy set, train, print the table.

    python3 scripts/run_ablation.py --seeds 3 --out results/ablation.csv
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

from drk import toydata
from drk import train as T


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    samples = toydata.generate(toydata.DatasetSpec(n_samples=args.n))
    cfg = T.TrainConfig()
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    t0 = time.perf_counter()
    rows = T.ablate(samples, cfg, seeds=tuple(range(args.seeds)),
                    progress=lambda v, s, r: print(f"{v:22s} seed={s} miou={r.miou:.4f}", flush=True))
    table = T.ablation_csv(rows)
    print(table, end="")
    print(f"elapsed {time.perf_counter() - t0:.0f}s")
    for r in rows:
        print(f"{r.variant:22s} per-seed mIoU " + " ".join(f"{v:.4f}" for v in r.per_seed_miou))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)


if __name__ == "__main__":
    main()
