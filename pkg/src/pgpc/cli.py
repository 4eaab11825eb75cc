"""Command line front end.

Exit codes: 0 success, 1 usage error, 2 data error.  Diagnostics go to
stderr; files are written atomically (temp + rename) so a failing run
never leaves partial output behind.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import codec, metrics, training
from .errors import PgpcError
from .fitting import FitConfig, fit_params
from .geometry import PointCloud, read_ply, sample_surface_poisson, sample_surface_uniform, voxelize, write_ply
from .network import load_weights
from .prior import read_params_text, write_params_text
from .template import build_toy_template, load_template

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def _atomic_write(path, data):
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".pgpc-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_call(path, writer):
    """Run writer(tmp_path), then move the result into place."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".pgpc-tmp-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_template_arg(path):
    if path is None:
        return build_toy_template()
    return load_template(path)


def _read_cloud(path, precision=None):
    data = read_ply(path)
    pts = getattr(data, "points", None)
    if pts is None:
        pts = data.vertices
    cloud = PointCloud(pts)
    if precision is not None:
        return voxelize(cloud, precision)
    p = np.asarray(cloud.points)
    if np.all(p == np.floor(p)) and p.min() >= 0:
        span = int(p.max())
        prec = max(1, int(np.ceil(np.log2(span + 1))) if span else 1)
        return PointCloud(p.astype(np.int64), prec)
    raise PgpcError(
        f"{path} holds non-integer coordinates; pass --precision to voxelize"
    )


# --- subcommands ------------------------------------------------------------------


def _cmd_encode(args):
    template = _load_template_arg(args.template)
    weights = load_weights(args.model)
    cloud = _read_cloud(args.input, args.precision)
    params = read_params_text(args.params) if args.params else None
    cfg = codec.CodecConfig(
        use_prior=not args.no_prior,
        sampling_ratio=args.ratio,
        seed=args.seed,
        fit=FitConfig(max_steps=args.fit_steps, seed=args.seed & 0x7FFFFFFF),
    )
    blob = codec.encode(cloud, template, weights, cfg, params=params)
    _atomic_write(args.output, blob)
    print(f"{args.input}: {len(cloud)} points -> {len(blob)} bytes "
          f"({8 * len(blob) / len(cloud):.3f} bpp)", file=sys.stderr)
    return EXIT_OK


def _cmd_decode(args):
    template = _load_template_arg(args.template)
    weights = load_weights(args.model)
    with open(args.input, "rb") as fh:
        blob = fh.read()
    cloud = codec.decode(blob, template, weights)
    _atomic_call(args.output, lambda tmp: write_ply(cloud, tmp, binary=not args.ascii))
    print(f"{args.input}: decoded {len(cloud)} points", file=sys.stderr)
    return EXIT_OK


def _eval_one(pair, template, weights, mode):
    ref_path, stream_path = pair
    ref = _read_cloud(ref_path)
    with open(stream_path, "rb") as fh:
        blob = fh.read()
    header, _ = codec.parse_header(blob)
    decoded = codec.decode(blob, template, weights)
    bpp = 8.0 * len(blob) / header.counts[0]
    d1 = metrics.symmetric_psnr(decoded.points, ref.points, header.precision,
                                metric="d1", mode=mode)
    d2 = metrics.symmetric_psnr(decoded.points, ref.points, header.precision,
                                metric="d2", mode=mode)
    return bpp, d1, d2


def _cmd_eval(args):
    template = _load_template_arg(args.template)
    weights = load_weights(args.model)
    pairs = []
    for raw in args.pair:
        if "=" not in raw:
            raise UsageError(f"pair {raw!r} must look like reference.ply=stream.bin")
        pairs.append(tuple(raw.split("=", 1)))
    workers = int(os.environ.get("PGPC_THREADS", "0") or 0)
    if workers <= 0:
        workers = min(len(pairs), os.cpu_count() or 1)
    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda q: _eval_one(q, template, weights, args.symmetric_mode), pairs))
    else:
        results = [_eval_one(q, template, weights, args.symmetric_mode) for q in pairs]
    rows = []
    for (ref_path, _), (bpp, d1, d2) in zip(pairs, results):
        seq = args.sequence or os.path.splitext(os.path.basename(ref_path))[0]
        rows.append((seq, args.lam, f"{bpp:.6f}", f"{d1:.4f}", f"{d2:.4f}"))
        print(f"{ref_path}: bpp={bpp:.4f} d1={d1:.3f}dB d2={d2:.3f}dB", file=sys.stderr)
    if args.csv:
        header_needed = not os.path.exists(args.csv)
        with open(args.csv, "a", newline="") as fh:
            if header_needed:
                fh.write("sequence, lambda, bpp, d1_psnr, d2_psnr\n")
            for row in rows:
                fh.write(", ".join(str(c) for c in row) + "\n")
    return EXIT_OK


def _cmd_train(args):
    with open(args.config) as fh:
        raw = json.load(fh)
    dataset_keys = {"count", "precision", "surface_points", "dataset_seed"}
    ds_args = {k: raw.pop(k) for k in list(raw) if k in dataset_keys}
    if "lambdas" in raw:
        raw["lambdas"] = tuple(raw["lambdas"])
    cfg = training.TrainConfig(**raw)
    template = _load_template_arg(args.template)
    dataset = training.make_toy_dataset(
        template,
        count=ds_args.get("count", 64),
        precision=ds_args.get("precision", 6),
        seed=ds_args.get("dataset_seed", 0),
        surface_points=ds_args.get("surface_points", 4000),
    )
    print(f"dataset: {len(dataset)} clouds at {ds_args.get('precision', 6)} bits", file=sys.stderr)

    def ticker(step, info):
        if step < 0:
            print(f"lambda {info.lam:g}: final total {info.final_loss:.4f}"
                  + (" [diverged]" if info.diverged else ""), file=sys.stderr)
        elif step % 25 == 0:
            print(f"  step {step}: R={info.rate:.3f} D={info.distortion:.3f}", file=sys.stderr)

    runs = training.train(dataset, cfg, out_dir=args.out, progress=ticker)
    bad = [f"{lam:g}" for lam, run in runs.items() if run.diverged]
    if bad:
        print(f"diverged at lambda: {', '.join(bad)}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _cmd_fit(args):
    template = _load_template_arg(args.template)
    cloud = _read_cloud(args.input, args.precision)
    cfg = FitConfig(max_steps=args.steps, seed=args.seed)
    params = fit_params(cloud, template, cfg)
    _atomic_call(args.output, lambda tmp: write_params_text(params, tmp))
    print(f"fit {args.input}: scale {params.scale:.4f}", file=sys.stderr)
    return EXIT_OK


def _cmd_sample(args):
    mesh = read_ply(args.input)
    if not hasattr(mesh, "faces"):
        raise PgpcError(f"{args.input} has no faces; sampling needs a mesh")
    sampler = sample_surface_poisson if args.poisson else sample_surface_uniform
    cloud = sampler(mesh, args.count, seed=args.seed)
    if args.precision is not None:
        cloud = voxelize(cloud, args.precision)
    _atomic_call(args.output, lambda tmp: write_ply(cloud, tmp, binary=not args.ascii))
    print(f"sampled {len(cloud)} points from {args.input}", file=sys.stderr)
    return EXIT_OK


def _cmd_report(args):
    with open(args.input, "rb") as fh:
        blob = fh.read()
    rep = codec.bitstream_report(blob)
    header, _ = codec.parse_header(blob)
    n0 = header.counts[0]
    print(f"file            {rep.total_bits} bits ({rep.total_bits / 8:.0f} bytes), "
          f"{rep.total_bits / n0:.4f} bpp over {n0} points")
    print(f"  parameters    {rep.params_bits:8d} bits  {rep.params_pct:6.2f}%")
    print(f"  coordinates   {rep.coords_bits:8d} bits  {rep.coords_pct:6.2f}%")
    print(f"  features      {rep.features_bits:8d} bits  {rep.features_pct:6.2f}%")
    print(f"  framing       {rep.framing_bits:8d} bits")
    return EXIT_OK


# --- wiring -----------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="pgpc", description="Prior-guided point cloud geometry codec")
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="compress a voxelized cloud (.ply -> .bin)")
    enc.add_argument("input")
    enc.add_argument("output")
    enc.add_argument("--model", required=True, help="weights file (.pgw)")
    enc.add_argument("--template", help="body template (.pgt); built-in toy body if omitted")
    enc.add_argument("--params", help="skip fitting, use this parameter text file")
    enc.add_argument("--precision", type=int, help="voxelize the input at this bit depth")
    enc.add_argument("--no-prior", action="store_true", help="code features directly")
    enc.add_argument("--seed", type=int, default=0)
    enc.add_argument("--ratio", type=float, default=1.0, help="prior sampling ratio")
    enc.add_argument("--fit-steps", type=int, default=60)
    enc.set_defaults(fn=_cmd_encode)

    dec = sub.add_parser("decode", help="decompress (.bin -> .ply)")
    dec.add_argument("input")
    dec.add_argument("output")
    dec.add_argument("--model", required=True)
    dec.add_argument("--template")
    dec.add_argument("--ascii", action="store_true")
    dec.set_defaults(fn=_cmd_decode)

    ev = sub.add_parser("eval", help="decode + D1/D2/bpp, appending CSV rows")
    ev.add_argument("pair", nargs="+", help="reference.ply=stream.bin")
    ev.add_argument("--model", required=True)
    ev.add_argument("--template")
    ev.add_argument("--csv", help="append results here")
    ev.add_argument("--symmetric-mode", choices=("max-error", "max-psnr"), default="max-error")
    ev.add_argument("--lambda", dest="lam", type=float, default=float("nan"))
    ev.add_argument("--sequence", help="sequence label for the CSV")
    ev.set_defaults(fn=_cmd_eval)

    trn = sub.add_parser("train", help="run the toy training sweep from a JSON config")
    trn.add_argument("config", help="JSON with TrainConfig plus dataset fields")
    trn.add_argument("--out", required=True, help="checkpoint / log directory")
    trn.add_argument("--template")
    trn.set_defaults(fn=_cmd_train)

    fit = sub.add_parser("fit", help="fit prior parameters to a cloud")
    fit.add_argument("input")
    fit.add_argument("output", help="parameter text file")
    fit.add_argument("--template")
    fit.add_argument("--precision", type=int)
    fit.add_argument("--steps", type=int, default=60)
    fit.add_argument("--seed", type=int, default=0)
    fit.set_defaults(fn=_cmd_fit)

    smp = sub.add_parser("sample", help="sample a mesh surface into a cloud")
    smp.add_argument("input")
    smp.add_argument("output")
    smp.add_argument("--count", type=int, default=4096)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--poisson", action="store_true", help="blue-noise instead of uniform")
    smp.add_argument("--precision", type=int, help="voxelize the samples")
    smp.add_argument("--ascii", action="store_true")
    smp.set_defaults(fn=_cmd_sample)

    rep = sub.add_parser("report", help="print bitstream composition")
    rep.add_argument("input")
    rep.set_defaults(fn=_cmd_report)

    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"pgpc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PgpcError, OSError, json.JSONDecodeError) as exc:
        print(f"pgpc: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    raise SystemExit(run())


if __name__ == "__main__":
    main()
