"""Command line entry point: ``gpssm-al run|landscape|simulate|check``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import (emit_csv, emit_mi_landscape, emit_steps_csv, landscape_session, load_config,
                      run_experiment, write_csv)
from .systems import SYSTEM_NAMES, make_system, rollout


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.trials is not None:
        over["trials"] = args.trials
    if args.steps is not None:
        over["N"] = args.steps
    if args.workers is not None:
        over["workers"] = args.workers
    cfg = replace(cfg, **over) if over else cfg
    out = _out_dir(args)
    result = run_experiment(cfg)
    emit_csv(result.aggregate, out / "aggregate.csv", out / "aggregate_timing.csv")
    emit_steps_csv(result, out / "steps.csv", out / "steps_timing.csv")
    agg = result.aggregate
    for crit in agg.criteria:
        final = agg.mean_rmse[crit][-1] if agg.steps else float("nan")
        print(f"{crit.value:>7}: final mean RMSE {final:.4f}")
    failed = [t for t in result.trials if t.failed]
    for t in failed:
        print(f"trial {t.trial} incomplete: {t.error}", file=sys.stderr)
    print(f"wrote results to {out}")
    return 0 if not failed else 1


def cmd_landscape(args) -> int:
    points = tuple(int(p) for p in args.points.split(","))
    grid, snaps, result = landscape_session(args.system, points, seed=args.seed or 0,
                                            points_per_dim=args.grid)
    out = _out_dir(args)
    emit_mi_landscape(None, None, grid, out / "landscape.csv", snapshots=snaps)
    print(f"wrote {len(snaps)} landscape snapshots to {out / 'landscape.csv'}")
    return 0 if result.complete else 1


def cmd_simulate(args) -> int:
    system = make_system(args.system)
    rng = np.random.default_rng(args.seed or 0)
    N = args.steps if args.steps is not None else 50
    controls = np.array([system.box.sample(rng) for _ in range(N)]).reshape(N, system.d_c)
    x, y = rollout(system, controls, rng)
    out = _out_dir(args)
    path = out / f"rollout_{system.name}.csv"
    head = (["t"] + [f"x_{i}" for i in range(system.d_x)] + [f"c_{i}" for i in range(system.d_c)]
            + [f"y_{i}" for i in range(system.d_y)])
    rows = []
    for t in range(N + 1):
        c = controls[t] if t < N else np.full(system.d_c, np.nan)
        yy = y[t - 1] if t > 0 else np.full(system.d_y, np.nan)
        rows.append([t] + [repr(float(v)) for v in np.concatenate([x[t], c, yy])])
    write_csv(path, head, rows)
    print(f"wrote {path}")
    return 0


def cmd_check(args) -> int:
    from .selfcheck import run_checks

    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpssm-al", description="Active learning for GP state-space models")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, steps=True):
        sp.add_argument("--seed", type=int, default=None, help="master seed")
        sp.add_argument("--out-dir", default="results", help="output directory")
        sp.add_argument("--trials", type=int, default=None, help="number of paired trials")
        if steps:
            sp.add_argument("--steps", type=int, default=None, help="exploration steps per session")

    r = sub.add_parser("run", help="run a multi-trial experiment from a key=value config file")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=None, help="trial worker threads")
    common(r)
    r.set_defaults(func=cmd_run)

    lnd = sub.add_parser("landscape", help="totMI landscape snapshots during one session")
    lnd.add_argument("--system", default="kink", choices=SYSTEM_NAMES)
    lnd.add_argument("--points", default="9,18,27,36", help="data sizes at which to snapshot")
    lnd.add_argument("--grid", type=int, default=50, help="grid points per control dimension")
    common(lnd, steps=False)
    lnd.set_defaults(func=cmd_landscape)

    sim = sub.add_parser("simulate", help="roll out a system under uniform random controls")
    sim.add_argument("system", choices=SYSTEM_NAMES)
    common(sim)
    sim.set_defaults(func=cmd_simulate)

    chk = sub.add_parser("check", help="quick invariant self-test")
    chk.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
