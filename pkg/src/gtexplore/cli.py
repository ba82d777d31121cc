"""Command-line entry point: train, eval, rollout, gradcheck, mapgen."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import bench, learn, world


def _cmd_train(args) -> int:
    cfg = learn.load_config(args.config)
    trainer = learn.train(cfg, args.out, resume=args.resume)
    last = trainer.metrics[-1] if trainer.metrics else None
    print(f"trained to episode {trainer.episode} ({trainer.train_steps} gradient steps)")
    if last:
        print(f"last episode: reward {last['reward']:.3f}, distance {last['distance']:.2f} m")
    return 0


def _eval_config(path) -> learn.TrainConfig:
    return learn.load_config(path) if path else learn.TrainConfig()


def _cmd_eval(args) -> int:
    planner = args.planner
    if args.smooth:
        if planner not in ("grate-raw", "grate-smoothed"):
            raise SystemExit("--smooth applies to grate planners only")
        planner = "grate-smoothed"
    cfg = _eval_config(args.config)
    seeds = bench.read_seeds(args.seeds)
    report = bench.run_eval(seeds, planner, cfg, checkpoint=args.checkpoint, workers=args.workers)
    report.to_csv(args.out)
    print(f"{planner}: {report.summary()}")
    return 0


def _cmd_rollout(args) -> int:
    cfg = _eval_config(args.config)
    policy = None
    if args.planner.startswith("grate"):
        if not args.checkpoint:
            raise SystemExit(f"{args.planner} needs --checkpoint")
        policy = learn.load_policy(args.checkpoint, cfg)
    w = learn.make_world(cfg, args.seed)
    w.max_steps = bench.eval_cap(cfg)
    row, traces = bench.run_episode(w, args.planner, cfg.graph_config(), policy, args.seed, trace=True, sigma_a=cfg.sigma_a)
    with open(args.trace, "w") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")
        fh.write(json.dumps({"summary": row.__dict__}) + "\n")
    print(f"{row.steps} steps, {row.distance:.2f} m, completed={row.completed}")
    return 0


def run_gradcheck(seed: int = 0, verbose: bool = True) -> dict[str, float]:
    """Finite-difference suite over every differentiable op and the full policy net."""
    from . import _gradsuite

    results = _gradsuite.run_all(seed)
    if verbose:
        for name, err in results.items():
            print(f"{name:<24s} max rel err {err:.3e}")
    return results


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed)
    worst = max(results.values())
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def _cmd_mapgen(args) -> int:
    params = world.DungeonParams(width=args.width, height=args.height, cell_size=args.cell_size)
    truth = world.generate_dungeon(args.seed, params)
    world.save_map(truth, args.out)
    print(f"wrote {truth.width}x{truth.height} map to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtexplore", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a planner on a seed suite")
    e.add_argument("--planner", required=True, choices=bench.PLANNERS)
    e.add_argument("--seeds", required=True, help="file with one integer seed per line")
    e.add_argument("--out", required=True, help="CSV report path")
    e.add_argument("--checkpoint")
    e.add_argument("--smooth", action="store_true")
    e.add_argument("--config", help="key=value environment/network config")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("rollout", help="run one episode and dump a trace")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--planner", required=True, choices=bench.PLANNERS)
    r.add_argument("--trace", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--config")
    r.set_defaults(func=_cmd_rollout)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=_cmd_gradcheck)

    m = sub.add_parser("mapgen", help="generate a dungeon map file")
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--width", type=int, default=64)
    m.add_argument("--height", type=int, default=64)
    m.add_argument("--cell-size", type=float, default=0.4)
    m.set_defaults(func=_cmd_mapgen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except learn.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
