#!/usr/bin/env python3
"""Generate the small binary assets the CLI examples expect.

Writes, under --out:
    toy_body.pgt        the built-in articulated toy body template
    init.pgw            freshly initialized (untrained) network weights
    demo_body.ply       a posed body voxelized at --precision bits
    demo_body.params    the ground-truth prior parameters of that body

The demo pair exercises the whole pipeline without training first:

    pgpc encode demo_body.ply demo.bin --model init.pgw --params demo_body.params
    pgpc decode demo.bin back.ply --model init.pgw
    pgpc report demo.bin
"""

import argparse
import os
import sys

from pgpc.geometry import write_ply
from pgpc.network import init_weights, save_weights
from pgpc.prior import write_params_text
from pgpc.template import build_toy_template, save_template
from pgpc.training import make_toy_sample


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="assets")
    ap.add_argument("--precision", type=int, default=6)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--surface-points", type=int, default=4000)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    template = build_toy_template()
    save_template(template, os.path.join(args.out, "toy_body.pgt"))

    save_weights(init_weights(seed=args.seed),
                 os.path.join(args.out, "init.pgw"))

    sample = make_toy_sample(template, args.precision, seed=args.seed,
                             surface_points=args.surface_points)
    write_ply(sample.cloud, os.path.join(args.out, "demo_body.ply"))
    write_params_text(sample.params, os.path.join(args.out, "demo_body.params"))

    n = len(sample.cloud)
    print(f"{args.out}/: template, init weights, {n}-point "
          f"{args.precision}-bit demo body + params")
    return 0


if __name__ == "__main__":
    sys.exit(main())
