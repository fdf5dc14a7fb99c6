"""Command line interface.

    graphrl train --config <path> --seed <n> --out <dir>
    graphrl bench-flops --problem <p> --k-sweep 2,4,8,16 [--out <dir>]
    graphrl compare --runs <dir> [<dir> ...] [--optimal <J>] [--out <dir>]
    graphrl oracle-d2d --k <n> --instances <n> [--out <dir>]

Every command that writes a CSV also renders a PNG figure next to it
(disable with --no-figures).
"""

import argparse
import os
import sys

from . import env_d2d, harness


def _add_common(p):
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--no-figures", action="store_true",
                   help="skip rendering PNG figures")


def cmd_train(args):
    config = harness.load_experiment(args.config)
    seed = args.seed if args.seed is not None else config.seeds[0]
    out = args.out or f"runs/{config.problem}-{config.agent}-s{seed}"
    metrics, _ = harness.run(config, seed, out_dir=out, render=not args.no_figures)
    print(f"run complete: {out}")
    print(f"  steps={metrics.steps} episodes={len(metrics.episode_returns)}")
    print(f"  final smoothed return: {metrics.final_smoothed!r}")
    print(f"  convergence step (self 10% band): {metrics.convergence_step}")
    print(f"  parameters: {metrics.param_count}  wall time: {metrics.wall_time_s:.1f}s")
    return 0


def cmd_bench_flops(args):
    ks = [int(v) for v in args.k_sweep.split(",")]
    if args.problem == "video":
        layers, width, edge_dim, m = args.layers or 3, args.width or 32, 3, args.m
    else:
        layers, width, edge_dim, m = args.layers or 6, args.width or 8, 1, None
    gnn_counts, fnn_counts = [], []
    for k in ks:
        mm = m if m is not None else k
        gnn_counts.append(harness.flop_count("gnn", k, mm, layers, width, edge_dim))
        fnn_counts.append(harness.flop_count("fnn", k, mm, layers, width, edge_dim))
    print("k,gnn_mults,fnn_mults")
    for k, g, f in zip(ks, gnn_counts, fnn_counts):
        print(f"{k},{g},{f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "flops.csv")
        with open(path, "w") as fh:
            fh.write("k,gnn_mults,fnn_mults\n")
            for k, g, f in zip(ks, gnn_counts, fnn_counts):
                fh.write(f"{k},{g},{f}\n")
        if not args.no_figures:
            from .report import render_flop_scaling

            render_flop_scaling(ks, gnn_counts, fnn_counts,
                                os.path.join(args.out, "flops.png"))
        print(f"wrote {path}")
    return 0


def cmd_compare(args):
    result = harness.compare(args.runs, optimal_energy=args.optimal,
                             window=args.window)
    print(harness.format_compare_table(result))
    if args.out:
        path = harness.write_compare(result, args.out, render=not args.no_figures)
        print(f"wrote {path}")
    return 0


def cmd_oracle_d2d(args):
    cfg = env_d2d.D2DConfig(area_side=args.area) if args.area else env_d2d.D2DConfig()
    rows = harness.oracle_d2d_table(args.k, args.instances, cfg)

    def fmt(row):
        learned = "" if row["learned"] is None else repr(row["learned"])
        return (f"{row['seed']},{row['k']},{row['oracle']!r},{learned},"
                f"{row['all_active']!r},{row['random_mean']!r}")

    print("seed,k,oracle,learned,all_active,random_mean")
    for r in rows:
        print(fmt(r))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "oracle.csv")
        with open(path, "w") as fh:
            fh.write("seed,k,oracle,learned,all_active,random_mean\n")
            for r in rows:
                fh.write(fmt(r) + "\n")
        if not args.no_figures:
            from .report import render_oracle_table

            render_oracle_table(rows, os.path.join(args.out, "oracle.png"))
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="graphrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one seeded training experiment")
    p.add_argument("--config", required=True, help="experiment JSON path")
    p.add_argument("--seed", type=int, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench-flops", help="inference multiplication counts")
    p.add_argument("--problem", choices=["video", "d2d"], required=True)
    p.add_argument("--k-sweep", default="2,4,8,16")
    p.add_argument("--m", type=int, default=5, help="transmitter count (video)")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_bench_flops)

    p = sub.add_parser("compare", help="summarize several finished runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--optimal", type=float, default=None,
                   help="optimal energy for the 10%% performance-loss threshold")
    p.add_argument("--window", type=int, default=10)
    _add_common(p)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("oracle-d2d", help="exhaustive-search benchmark table")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--area", type=float, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_oracle_d2d)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
