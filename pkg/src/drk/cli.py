"""Command-line entry point.

Exit codes: 0 success, 1 misuse or invalid input, 2 numeric or check failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import enhance as E
from . import gradcheck, metrics, toydata
from . import layers as L
from . import model as M
from . import train as T
from .errors import DrkError, FormatError, NumericError, ValidationError
from .tensor import Rng

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
WARMUP_CALLS = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _existing(path: str, kind: str = "path") -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{kind} not found: {p}")
    return p


def cmd_gradcheck(args) -> int:
    names = sorted(gradcheck.SUITES) if args.module == "all" else [args.module]
    if args.module != "all" and args.module not in gradcheck.SUITES:
        raise ValidationError(f"unknown module {args.module!r}; choose from all, {', '.join(sorted(gradcheck.SUITES))}")
    ok = True
    for name in names:
        report = gradcheck.run_suite(name, args.seed, args.instances)
        print(gradcheck.format_report(name, report), flush=True)
        ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_make_data(args) -> int:
    spec = toydata.DatasetSpec(n_samples=args.n, size=args.size, seed=args.seed)
    spec.validate()
    samples = toydata.generate(spec)
    toydata.save(samples, args.out)
    fractions = [toydata.foreground_fraction(s) for s in samples]
    print(f"wrote {len(samples)} samples to {args.out} (mean foreground {np.mean(fractions):.4f})")
    return EXIT_OK


def _load_config(path):
    if path is None:
        return T.TrainConfig()
    return T.parse_config(_existing(path, "config file").read_text())


def cmd_train(args) -> int:
    data = _existing(args.data, "data directory")
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    samples = toydata.load(data)
    out = Path(args.out)

    def show(r):
        print(f"epoch={r.epoch} lr={r.lr:.1e} loss={r.loss_total:.5f} val_miou={r.val_miou:.4f}", flush=True)

    T.train(samples, cfg, out_dir=out, progress=show)
    print(f"wrote {out / 'model.dckp'} and {out / 'history.csv'}")
    return EXIT_OK


def _prediction_masks(args, samples):
    if args.pred is not None:
        pred_dir = _existing(args.pred, "prediction directory")
        return [toydata.read_pgm(pred_dir / f"{s.sample_id}.mask.pgm") for s in samples]
    model = M.load_checkpoint(_existing(args.ckpt, "checkpoint"))
    images, attrs, _ = T.stack(samples)
    prob = M.predict(model, images, attrs)
    return [metrics.binarize(prob[i, 0], args.threshold) for i in range(len(samples))]


def cmd_eval(args) -> int:
    if (args.ckpt is None) == (args.pred is None):
        raise ValidationError("eval needs exactly one of --ckpt or --pred")
    if args.ckpt is not None:
        _existing(args.ckpt, "checkpoint")
    samples = toydata.load(_existing(args.data, "data directory"))
    if args.split == "val":
        _, samples = T.split(samples)
    preds = _prediction_masks(args, samples)
    pairs = [metrics.MaskPair(p, s.mask, s.sample_id) for p, s in zip(preds, samples)]
    report = metrics.evaluate(pairs)
    if args.out is not None:
        out = Path(args.out)
    elif args.ckpt is not None:
        out = Path(args.ckpt).parent / "metrics.csv"
    else:
        out = Path(args.pred) / "metrics.csv"
    report.write_csv(out)
    summary = " ".join(f"prec@{k}={report.prec_at[k]:.4f}" for k in metrics.THRESHOLDS)
    print(f"miou={report.miou:.4f} {summary}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    samples = toydata.load(_existing(args.data, "data directory"))
    cfg = _load_config(args.config)
    if args.seeds < 1:
        raise ValidationError("--seeds must be at least 1")

    def show(name, seed, report):
        print(f"variant={name} seed={seed} miou={report.miou:.4f}", flush=True)

    rows = T.ablate(samples, cfg, seeds=tuple(range(args.seeds)), progress=show)
    table = T.ablation_csv(rows)
    out = Path(args.out) if args.out else Path(args.data) / "ablation.csv"
    out.write_text(table)
    print(table, end="")
    print(f"wrote {out}")
    return EXIT_OK


def _bench_call(op, size, channels, batch):
    rng = Rng(0)
    x = rng.gen.standard_normal((batch, channels, size, size)).astype(np.float32)
    if op == "conv":
        p = L.init_conv(rng, channels, channels, 3, dtype=np.float32)
        return lambda: L.conv2d_fwd(x, p)
    p = E.init_deform(rng, channels, channels, 3, dtype=np.float32)
    p.offset_branch.weight[...] = 0.01 * rng.gen.standard_normal(p.offset_branch.weight.shape)
    p.offset_branch.bias[...] = 0.3
    return lambda: E.deform_conv_fwd(x, p)


def cmd_bench(args) -> int:
    if args.size < 3 or args.iters < 1 or args.channels < 1 or args.batch < 1:
        raise ValidationError("bench needs --size >= 3 and positive --iters, --channels, --batch")
    call = _bench_call(args.op, args.size, args.channels, args.batch)
    for _ in range(WARMUP_CALLS):
        call()
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        call()
        times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    print(f"op={args.op} size={args.size} channels={args.channels} batch={args.batch} "
          f"iters={args.iters} median_ms={1e3 * median:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drk", description="Deformable referring-segmentation kit")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS threads (falls back to DRK_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    p.add_argument("--module", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=gradcheck.N_INSTANCES)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train the micro model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for model.dckp and history.csv")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write per-sample IoU and summary metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--pred", default=None, help="directory of predicted <id>.mask.pgm files")
    p.add_argument("--out", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--split", choices=("all", "val"), default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the four ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="median wall time of a kernel")
    p.add_argument("--op", choices=("conv", "deform"), required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return parser


def _thread_limit(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DRK_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"DRK_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        threads = _thread_limit(args)
        if threads is not None and threads < 1:
            raise ValidationError("--threads must be at least 1")
        if threads is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DrkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
