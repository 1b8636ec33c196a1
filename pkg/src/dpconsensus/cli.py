"""Command-line entry point: train, calibrate, graphgen, sweep, attack."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .accountant import DEFAULT_ORDERS, calibrate_sigma, epsilon_for
from .errors import DPConsensusError
from .graphs import fiedler_value, generate_graph, write_edge_list

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET_EXCEEDED = 3


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_train(args) -> int:
    from .experiment import load_config, run_experiment

    cfg = load_config(args.config)
    if args.output_dir:
        cfg = dataclasses.replace(cfg, output_dir=args.output_dir)
    trace = run_experiment(cfg)
    last = trace.records[-1] if trace.records else None
    if last is not None:
        print(f"rounds={last.round} loss={last.loss:.6g} consensus={last.consensus:.6g} "
              f"accuracy={last.accuracy:.4f} epsilon={last.epsilon:.4g}")
    if trace.truncated:
        print("BUDGET_EXCEEDED: epsilon cap reached, run truncated", file=sys.stderr)
        return EXIT_BUDGET_EXCEEDED
    return EXIT_OK


def cmd_calibrate(args) -> int:
    orders = _floats(args.orders) if args.orders else DEFAULT_ORDERS
    sigma = calibrate_sigma(args.q, args.steps, args.target_eps, args.delta, orders)
    spend = epsilon_for(args.q, sigma, args.steps, args.delta, orders)
    print(f"sigma={sigma:.6g} eps={spend.epsilon:.6g} delta={spend.delta:g} order={spend.best_order:g}")
    return EXIT_OK


def cmd_graphgen(args) -> int:
    g = generate_graph(args.agents, args.target_fiedler, args.tolerance, args.seed)
    if args.out:
        write_edge_list(g, args.out)
    else:
        sys.stdout.write(f"agents {g.n_agents}\n" + "".join(f"{i} {j}\n" for i, j in sorted(g.edges)))
    fv = fiedler_value(g)
    print(f"fiedler={fv.fiedler:.6g} normalized={fv.normalized:.6g} edges={len(g.edges)}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import (
        load_config, run_connectivity_sweep, run_sigma_sweep, run_split_sweep, write_sweep_csv,
    )

    cfg = load_config(args.config)
    values = _floats(args.values)
    out = Path(args.output_dir or cfg.output_dir or ".")
    algorithms = args.algorithms.split(",") if args.algorithms else None
    if args.kind == "sigma":
        report = run_sigma_sweep(cfg, values, repetitions=args.repetitions)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sigma_sweep.csv", "w") as fh:
            fh.write("sigma,mean_error,errors\n")
            for s, e, reps in zip(report.sigmas, report.errors, report.per_repetition):
                fh.write(f"{s!r},{e!r},{';'.join(repr(r) for r in reps)}\n")
        print(f"slope={report.slope:.4f} r_squared={report.r_squared:.4f}")
        return EXIT_OK
    if args.kind == "fiedler":
        rows = run_connectivity_sweep(cfg, values, algorithms, trials=args.trials)
    else:
        rows = run_split_sweep(cfg, values, algorithms, trials=args.trials)
    write_sweep_csv(rows, out / f"{args.kind}_sweep.csv")
    for r in rows:
        print(f"{r.algorithm} {args.kind}={r.value:g} accuracy={r.mean:.4f}±{r.std:.4f} spread={r.spread:.4f}")
    return EXIT_OK


def cmd_attack(args) -> int:
    from .attack import AttackConfig, audit
    from .experiment import SEED_ENV

    raw = json.loads(Path(args.config).read_text())
    if os.environ.get(SEED_ENV):
        raw["seed"] = int(os.environ[SEED_ENV])
    if args.output_dir:
        raw["output_dir"] = args.output_dir
    print(audit(AttackConfig.from_dict(raw)).summary())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpconsensus", description="Differentially private decentralized learning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="noise multiplier for a target epsilon")
    c.add_argument("--q", type=float, required=True)
    c.add_argument("--steps", type=int, required=True)
    c.add_argument("--target-eps", type=float, required=True)
    c.add_argument("--delta", type=float, default=1e-5)
    c.add_argument("--orders", help="comma-separated RDP orders")
    c.set_defaults(func=cmd_calibrate)

    g = sub.add_parser("graphgen", help="random connected graph near a normalized Fiedler value")
    g.add_argument("--agents", type=int, required=True)
    g.add_argument("--target-fiedler", type=float, required=True)
    g.add_argument("--tolerance", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_graphgen)

    s = sub.add_parser("sweep", help="sigma, connectivity or data-split sweep")
    s.add_argument("--kind", choices=("sigma", "fiedler", "split"), required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--algorithms", help="comma-separated algorithms (default: the config's)")
    s.add_argument("--trials", type=int, default=1)
    s.add_argument("--repetitions", type=int, default=5)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("attack", help="membership-inference audit")
    a.add_argument("--config", required=True)
    a.add_argument("--output-dir")
    a.set_defaults(func=cmd_attack)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DPConsensusError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
