#!/usr/bin/env python3
"""Rate-distortion sweep on procedurally posed toy bodies.

Trains one model per lambda on a small synthetic dataset, then encodes a
handful of held-out clouds with each model (letting the codec fit prior
parameters from scratch, as a real client would) and reports bpp, D1 PSNR
and the share of the stream spent on prior parameters.

Outputs, under --out:
    model_lambda_*.pgw      per-lambda weight checkpoints
    train_lambda_*.csv      per-step training logs
    rd_sweep.csv            one row per (held-out cloud, lambda)
    composition.txt         aggregate stream composition per lambda
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from pgpc.codec import CodecConfig, bitstream_report, decode, encode
from pgpc.metrics import symmetric_psnr
from pgpc.template import build_toy_template
from pgpc.training import TrainConfig, make_toy_dataset, make_toy_sample, train


def evaluate(runs, template, held_out, precision, seed):
    """Encode/decode every held-out cloud with every model.

    Returns (rows, totals) where rows are per-cloud RD entries and totals
    aggregates bits over the whole held-out set per lambda.
    """
    rows = []
    totals = {}
    for lam, run in sorted(runs.items()):
        agg = {"bits": 0, "param_bits": 0, "feature_bits": 0, "points": 0}
        for i, sample in enumerate(held_out):
            cfg = CodecConfig(seed=seed + i)
            blob = encode(sample.cloud, template, run.weights, cfg)
            recon = decode(blob, template, run.weights)
            rep = bitstream_report(blob)
            n = len(np.asarray(sample.cloud.points))
            bpp = 8.0 * len(blob) / n
            d1 = symmetric_psnr(recon, sample.cloud, precision)
            rows.append((f"toy{1000 + i}", lam, bpp, d1))
            agg["bits"] += 8 * len(blob)
            agg["param_bits"] += rep.params_bits
            agg["feature_bits"] += rep.features_bits
            agg["points"] += n
        totals[lam] = agg
    return rows, totals


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="sweep_out")
    ap.add_argument("--count", type=int, default=64, help="training clouds")
    ap.add_argument("--held-out", type=int, default=5)
    ap.add_argument("--precision", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.time()
    template = build_toy_template()
    dataset = make_toy_dataset(
        template, count=args.count, precision=args.precision, seed=args.seed
    )
    held_out = [
        make_toy_sample(template, args.precision, seed=1000 + i)
        for i in range(args.held_out)
    ]
    print(f"dataset: {args.count} train + {len(held_out)} held-out "
          f"({args.precision}-bit), {time.time() - t0:.0f}s", flush=True)

    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)

    def ticker(step, info):
        if step == -1:
            print(f"  lambda {info.lam:g}: final loss {info.final_loss:.4f}"
                  + (" (diverged)" if info.diverged else ""), flush=True)

    runs = train(dataset, cfg, out_dir=args.out, progress=ticker)
    print(f"training done at {time.time() - t0:.0f}s", flush=True)

    rows, totals = evaluate(runs, template, held_out, args.precision,
                            seed=args.seed + 7000)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "rd_sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "lambda", "bpp", "d1_psnr", "d2_psnr"])
        for seq, lam, bpp, d1 in rows:
            w.writerow([seq, lam, f"{bpp:.6f}", f"{d1:.4f}", ""])

    lines = ["lambda  bpp      D1(dB)  param%  feature%"]
    for lam in sorted(totals):
        agg = totals[lam]
        bpp = agg["bits"] / agg["points"]
        d1s = [r[3] for r in rows if r[1] == lam]
        par = 100.0 * agg["param_bits"] / agg["bits"]
        fea = 100.0 * agg["feature_bits"] / agg["bits"]
        lines.append(f"{lam:<7g} {bpp:<8.4f} {np.mean(d1s):<7.2f} "
                     f"{par:<7.3f} {fea:.3f}")
    report = "\n".join(lines)
    with open(os.path.join(args.out, "composition.txt"), "w") as fh:
        fh.write(report + "\n")
    print(report, flush=True)
    print(f"total {time.time() - t0:.0f}s", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
