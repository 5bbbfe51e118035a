"""Command-line entry points.

Exit codes: 0 on success, 1 when a verification subcommand finds a failure,
2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

VARIANT_BY_FLAG = {"c": "correlation_only", "r": "regular_attention",
                   "full": "full", "star": "star"}
SOURCE_BY_FLAG = {"next": "next_frame", "tdiff": "temporal_difference",
                  "msm": "motion_saliency"}


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--k", type=int, default=3, help="local region size")
    p.add_argument("--sampling", choices=("regular", "deformable"), default=None,
                   help="defaults to deformable for full/star, regular otherwise")
    p.add_argument("--offset-source", choices=tuple(SOURCE_BY_FLAG), default="msm")
    p.add_argument("--norm", choices=("raw", "softmax"), default="softmax")
    p.add_argument("--variant", choices=tuple(VARIANT_BY_FLAG), default="full")


def _sifa_config(args):
    from .blocks import SifaConfig
    variant = VARIANT_BY_FLAG[args.variant]
    sampling = args.sampling
    if sampling is None:
        sampling = "deformable" if variant in ("full", "star") else "regular"
    return SifaConfig(k=args.k, sampling=sampling,
                      offset_source=SOURCE_BY_FLAG[args.offset_source],
                      norm=args.norm, variant=variant)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sifa",
        description="Inter-frame attention block: data generation, training, "
                    "verification and attention export.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic-motion dataset")
    _common_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("train", help="train the demo classifier")
    _common_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--epochs", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.04)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--no-walltime", action="store_true",
                   help="log wall_ms as 0 for byte-reproducible metrics")

    p = sub.add_parser("eval", help="accuracy of saved parameters on a dataset")
    _common_flags(p)
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common_flags(p)
    p.add_argument("--max-coords", type=int, default=96)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--csv", default=None, help="also write the report as CSV")

    p = sub.add_parser("oracle", help="optimized forward vs brute-force oracle")
    _common_flags(p)
    p.add_argument("--fixtures", type=int, default=50)

    p = sub.add_parser("flops", help="analytic multiply-accumulate count")
    _common_flags(p)
    p.add_argument("--C", type=int, default=16)
    p.add_argument("--L", type=int, default=8)
    p.add_argument("--H", type=int, default=16)
    p.add_argument("--W", type=int, default=16)

    p = sub.add_parser("export-attn", help="attention/saliency maps for a query")
    _common_flags(p)
    p.add_argument("--params", default=None,
                   help="trained parameter directory; a fresh net is used if omitted")
    p.add_argument("--clip", default=None,
                   help="clip tensor file; a demo clip is synthesized if omitted")
    p.add_argument("--direction", type=int, default=3,
                   help="direction of the synthesized demo clip")
    p.add_argument("--speed", type=float, default=2.0)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--x", type=int, required=True)
    p.add_argument("--y", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    return ap


def _cmd_gen_data(args) -> int:
    from .dataset import DatasetSpec, gen_dataset
    spec = DatasetSpec(grid=args.grid, frames=args.frames, speed=args.speed,
                       deformation=args.jitter, noise=args.noise)
    train_dir, test_dir = gen_dataset(spec, args.n_train, args.n_test,
                                      args.seed, args.out)
    print(f"wrote {args.n_train} train clips to {train_dir}")
    print(f"wrote {args.n_test} test clips to {test_dir}")
    return 0


def _net_config(args):
    from .blocks import DemoNetConfig
    return DemoNetConfig(channels=args.channels, num_blocks=args.blocks,
                         sifa=_sifa_config(args))


def _cmd_train(args) -> int:
    from .training import TrainConfig, train
    cfg = TrainConfig(lr=args.lr, momentum=args.momentum,
                      weight_decay=args.weight_decay, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed,
                      record_walltime=not args.no_walltime)
    result = train(_net_config(args), cfg, args.data, out_dir=args.out)
    print(result.metrics_text, end="")
    print(f"final test accuracy: {result.final_test_acc:.4f}")
    print(f"artifacts in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .blocks import load_net
    from .dataset import load_split
    from .training import evaluate
    net = load_net(args.params)
    clips, labels = load_split(os.path.join(args.data, args.split))
    acc = evaluate(net, clips, labels)
    print(f"{args.split} accuracy: {acc:.4f} ({len(labels)} clips)")
    return 0


def _cmd_gradcheck(args) -> int:
    from .autodiff import render_report_table, write_report_csv
    from .verification import demo_gradcheck, primitive_gradchecks
    if args.precision != "f64":
        print("note: gradient checking runs in double precision", file=sys.stderr)
    reports = primitive_gradchecks(seed=args.seed, tol=args.tol)
    reports += demo_gradcheck(seed=args.seed, tol=args.tol,
                              max_coords=args.max_coords,
                              k=args.k, variant=VARIANT_BY_FLAG[args.variant],
                              offset_source=SOURCE_BY_FLAG[args.offset_source],
                              norm=args.norm)
    print(render_report_table(reports))
    if args.csv:
        write_report_csv(reports, args.csv)
    bad = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(bad)}/{len(reports)} gradient checks passed")
    return 1 if bad else 0


def _cmd_oracle(args) -> int:
    from .verification import run_oracle_check
    results = run_oracle_check(n=args.fixtures, seed=2024 + args.seed)
    bad = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.label:44s} max|diff|={r.max_abs_diff:.3e} "
              f"(tol {r.tol:.0e})")
        bad += 0 if r.passed else 1
    print(f"{len(results) - bad}/{len(results)} fixtures matched the oracle")
    return 1 if bad else 0


def _cmd_flops(args) -> int:
    from .blocks import flop_count
    cfg = _sifa_config(args)
    macs = flop_count(cfg, args.C, args.L, args.H, args.W)
    print(f"variant={cfg.variant} sampling={cfg.sampling} k={cfg.k} "
          f"C={args.C} L={args.L} H={args.H} W={args.W}")
    print(f"multiply-accumulates per block: {macs}")
    return 0


def _cmd_export_attn(args) -> int:
    from .blocks import init_demo_net, load_net
    from .dataset import SyntheticClipSpec, sample_clip
    from .export import export_attention
    from .tensor import Tensor, load_tensor

    if args.params:
        net = load_net(args.params)
    else:
        net = init_demo_net(_net_config(args), seed=args.seed)
    if args.clip:
        clip = load_tensor(args.clip)
    else:
        spec = SyntheticClipSpec(grid=16, frames=args.frames,
                                 direction=args.direction, speed=args.speed,
                                 deformation=0.0, noise=0.0)
        data, _ = sample_clip(spec, np.random.default_rng(args.seed))
        clip = Tensor(data)
    paths = export_attention(net, clip, args.t, args.x, args.y, args.out,
                             figures=not args.no_figures)
    for p in paths:
        print(p)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "oracle": _cmd_oracle,
    "flops": _cmd_flops,
    "export-attn": _cmd_export_attn,
}


def main(argv=None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        # argparse prints usage to stderr and exits 2 on bad flags already
        return int(e.code) if e.code is not None else 2
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
