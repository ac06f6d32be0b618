"""Command-line entry point.

Exit codes: 0 on success, 2 on a configuration error, 3 on a numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, DomainError, NumericError
from .experiments import (
    FLATNESS_COLUMNS,
    VINCENT_POLICIES,
    VINCENT_STEPS,
    convex_rate,
    flatness_compare,
    flatter_than,
    mean_by_policy,
    sweep,
    vincent_protocol,
    write_table,
)
from .policies import PolicyConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("grawalab")


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, total_steps=args.steps)
    if getattr(args, "policy", None):
        if len(args.policy) != 1:
            raise ConfigError("run takes a single --policy", key="policy")
        cfg = replace(cfg, policy=PolicyConfig.from_dict({**cfg.policy.to_dict(), "policy": args.policy[0]}))
    return cfg


def _out_dir(args, cfg=None):
    out = args.out or (cfg.out if cfg is not None else None) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_run(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    record = cfg.execute()
    csv_path, json_path = record.write(out, "run")
    cfg.dump(out / "config.json")
    print(f"wrote {csv_path} and {json_path}")
    if record.flagged:
        print(f"numeric error: {record.error}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_vincent(args):
    policies = args.policy or list(VINCENT_POLICIES)
    for p in policies:
        if p not in VINCENT_POLICIES:
            raise ConfigError(f"policy {p!r} is not part of the Vincent protocol", key="policy")
    seeds = args.seeds if args.seeds else ([args.seed] if args.seed is not None else [0, 1, 2])
    out = _out_dir(args)
    results = vincent_protocol(policies, seeds, args.steps or VINCENT_STEPS, out)
    rows = [asdict(r) for r in results]
    write_table(
        out / "vincent_summary.csv",
        [{**r, "x": r["center"][0], "y": r["center"][1]} for r in rows],
        ("policy", "seed", "x", "y", "center_loss", "curvature", "converged", "rounds", "flagged"),
    )
    print(f"{'policy':8} {'seed':>4} {'center':>22} {'loss':>9} {'curv':>8} conv")
    for r in results:
        c = f"({r.center[0]:.4f}, {r.center[1]:.4f})"
        print(f"{r.policy:8} {r.seed:4d} {c:>22} {r.center_loss:9.5f} {r.curvature:8.3f} {r.converged}")
    flat = flatter_than(results)
    if flat:
        print(f"GRAWA family flatter than LSGD on {sum(flat.values())}/{len(flat)} seeds")
    return EXIT_NUMERIC if any(r.flagged for r in results) else EXIT_OK


def cmd_convex_rate(args):
    params = json.loads(Path(args.config).read_text()) if args.config else {}
    allowed = {"dim", "M", "noise_sigma", "c", "policy", "lam", "tau", "steps", "seeds", "objective_seed", "lr_schedule"}
    for key in params:
        if key not in allowed:
            raise ConfigError(f"unknown convex-rate key {key!r}", key=key)
    if args.steps is not None:
        params["steps"] = args.steps
    if args.seed is not None:
        params["seeds"] = list(range(args.seed, args.seed + len(params.get("seeds", range(10)))))
    if args.policy:
        params["policy"] = args.policy[0]
    report = convex_rate(**params)
    out = _out_dir(args)
    d = report.to_dict()
    (out / "convex_rate.json").write_text(json.dumps(d, indent=2, default=float) + "\n")
    if report.flagged:
        print("run diverged; slope omitted", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"log-log slope {report.slope:.4f} +/- {report.half_width:.4f} over t in {report.fit_window}")
    return EXIT_OK


def cmd_flatness(args):
    cfg = _load_config(argparse.Namespace(**{**vars(args), "policy": None}))
    if cfg.objective.kind != "mlp_classifier":
        cfg = replace(cfg, objective=replace(cfg.objective, kind="mlp_classifier"))
    policies = args.policy or ["easgd", "mgrawa", "lgrawa"]
    seeds = args.seeds or [0, 1, 2]
    out = _out_dir(args, cfg)
    rows = flatness_compare(cfg, policies, seeds, k=args.k)
    write_table(out / "flatness.csv", rows, FLATNESS_COLUMNS)
    for which in ("center", "best_worker"):
        print(which, "mean frobenius_proxy", mean_by_policy(rows, "frobenius_proxy", which))
    print(f"wrote {out / 'flatness.csv'}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(argparse.Namespace(**{**vars(args), "policy": None}))
    grid = json.loads(Path(args.grid).read_text()) if args.grid else {}
    if args.policy:
        grid["policy.policy"] = args.policy
    if not grid:
        raise ConfigError("sweep needs --grid or --policy", key="grid")
    out = _out_dir(args, cfg)
    rows = sweep(cfg, grid, out)
    cols = tuple(sorted(grid)) + ("rounds", "simulated_comm_cost", "center_loss", "mean_final_loss", "flagged")
    write_table(out / "sweep.csv", rows, cols)
    print(f"{len(rows)} runs; wrote {out / 'sweep.csv'}")
    return EXIT_NUMERIC if any(r["flagged"] for r in rows) else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="grawalab", description="Simulated distributed training with gradient-norm weighted averaging.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int, help="local steps per worker")
        p.add_argument("--policy", action="append", help="policy name (repeatable)")
        return p

    common(sub.add_parser("run", help="execute one configured run")).set_defaults(func=cmd_run)
    p = common(sub.add_parser("vincent", help="2-D Vincent function comparison"))
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_vincent)
    common(sub.add_parser("convex-rate", help="suboptimality rate on a noisy quadratic")).set_defaults(func=cmd_convex_rate)
    p = common(sub.add_parser("flatness", help="flatness metrics on the MLP task"))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--k", type=int, default=20, help="Lanczos directions")
    p.set_defaults(func=cmd_flatness)
    p = common(sub.add_parser("sweep", help="grid over config keys"))
    p.add_argument("--grid", help='JSON object of dotted keys to value lists, e.g. {"policy.tau": [4, 16]}')
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DomainError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
