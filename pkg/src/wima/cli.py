"""Command line entry point: ``wima run|sweep|audit-identity|partition-report``.

Exit codes: 0 success, 1 usage error, 2 numeric divergence (or a failed
identity audit), 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import total_variation_from_uniform
from .errors import NumericDivergenceError, UsageError
from .harness import (
    AXES,
    DEFAULT_REPLICATES,
    build_federated_dataset,
    build_simulation,
    iter_rounds,
    load_config,
    run_experiment,
    sweep,
)
from .server import WimaConfig

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
IDENTITY_RTOL = 1e-9

log = logging.getLogger("wima")


def _parse_value(s: str):
    s = s.strip()
    try:
        return int(s)
    except ValueError:
        return float(s)


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "rounds", None) is not None:
        cfg = cfg.with_server(rounds=args.rounds)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = args.output_dir or cfg.output_dir or "runs/run"
    _, summary = run_experiment(cfg, out)
    print(json.dumps(summary.to_dict(), indent=2))
    print(f"wrote {out}/rounds.csv, {out}/summary.json", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
    out = args.output_dir or cfg.output_dir or f"runs/sweep-{args.axis}"
    cells, means = sweep(cfg, args.axis, values, args.replicates, out, args.workers)
    print(f"{'value':>10} {'rep':>4} {'fedavg':>8} {'wima':>8} {'swa':>8}")
    for c in cells:
        s = c.summary
        print(f"{c.axis_value!s:>10} {c.replicate:>4} {s.final_score_fedavg:8.4f} "
              f"{_fmt(s.final_score_wima)} {_fmt(s.final_score_swa)}")
    for value, row in means.items():
        print(f"{value:>10} mean {_fmt(row['final_score_fedavg'])} {_fmt(row['final_score_wima'])} "
              f"{_fmt(row['final_score_swa'])}")
    return EXIT_OK


def _fmt(x) -> str:
    return f"{x:8.4f}" if x is not None else f"{'-':>8}"


def cmd_audit(args) -> int:
    cfg = _load(args)
    if args.window is not None:
        mask = cfg.server.wima.mask if cfg.server.wima is not None else "all"
        cfg = cfg.with_server(wima=WimaConfig(args.window, mask))
    if cfg.server.wima is None:
        raise UsageError("audit-identity needs server.wima (or --window)")
    cfg = cfg.replace(audit_identity=True)
    sim = build_simulation(cfg)
    checked, worst, worst_ratio = 0, 0.0, 0.0
    for rec in iter_rounds(sim, cfg):
        if rec.identity_residual is None:
            continue
        checked += 1
        bound = 1.0 + sim.state.window.mean().max_abs()
        worst = max(worst, rec.identity_residual)
        worst_ratio = max(worst_ratio, rec.identity_residual / bound)
    print(f"window={cfg.server.wima.window} aggregator={cfg.server.aggregator} "
          f"rounds_checked={checked} max_residual={worst:.3e} "
          f"max_residual/(1+|w|_inf)={worst_ratio:.3e}")
    failed = worst > args.tolerance if args.tolerance is not None else worst_ratio > IDENTITY_RTOL
    if failed:
        print("FAIL: window mean and decay form disagree", file=sys.stderr)
        return EXIT_DIVERGED
    print("PASS")
    return EXIT_OK


def cmd_partition_report(args) -> int:
    cfg = _load(args)
    fed = build_federated_dataset(cfg)
    out = Path(args.output or (Path(cfg.output_dir or ".") / "partition.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    fed.write_manifest(out)
    sizes = [c.num_samples for c in fed.clients]
    tvs = [total_variation_from_uniform(c.data.class_counts()) for c in fed.clients]
    classes = [int(np.count_nonzero(c.data.class_counts())) for c in fed.clients]
    print(f"clients={fed.num_clients} alpha={cfg.partition.alpha} train={sum(sizes)} "
          f"test={len(fed.test_set)}")
    print(f"samples/client min={min(sizes)} max={max(sizes)}")
    print(f"classes/client min={min(classes)} max={max(classes)}")
    print(f"TV from uniform mean={np.mean(tvs):.4f} max={max(tvs):.4f}")
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wima", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rounds", type=int)
        sp.add_argument("--output-dir")

    sp = sub.add_parser("run", help="run one experiment")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run one experiment per axis value and replicate")
    common(sp)
    sp.add_argument("--axis", required=True, choices=AXES)
    sp.add_argument("--values", required=True, help="comma separated, e.g. 1,5,20,100")
    sp.add_argument("--replicates", type=int, default=DEFAULT_REPLICATES)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("audit-identity", help="check the window mean against its decay form every round")
    common(sp)
    sp.add_argument("--window", type=int)
    sp.add_argument("--tolerance", type=float, default=None,
                    help="absolute residual bound (default 1e-9 * (1 + max|w|) per round)")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("partition-report", help="write the client partition manifest")
    common(sp)
    sp.add_argument("--output", help="manifest path (default <output_dir>/partition.json)")
    sp.set_defaults(func=cmd_partition_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericDivergenceError as exc:
        where = f" (round {exc.round})" if exc.round is not None else ""
        print(f"numeric divergence{where}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
