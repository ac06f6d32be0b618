"""Canned experiment protocols built on the simulation harness."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .config import RunConfig
from .errors import ConfigError
from .flatness import full_gradient_norm, generalization_gap, hessian_spectrum
from .harness import jittered_schedule, run
from .local_opt import LocalOptConfig
from .objectives import ObjectiveSpec, Vincent2D
from .policies import PolicyConfig

log = logging.getLogger(__name__)

PARALLEL_ENV = "GRAWALAB_MAX_PARALLEL"

VINCENT_INITS = ((0.25, 0.25), (0.25, 10.0), (10.0, 0.25), (10.0, 10.0))
VINCENT_ETA = 0.01
VINCENT_TAU = 4
VINCENT_STEPS = 5000
VINCENT_THRESHOLD = -1.99
VINCENT_MAX_SKEW = 2
# Tuned so that every policy settles in a global minimum from the corner inits.
VINCENT_POLICIES = {
    "easgd": {"lambda": 0.43, "easgd_rho": 0.43},
    "lsgd": {"lambda": 0.1, "mu": 0.1},
    "grawa": {"lambda": 0.5},
    "mgrawa": {"lambda": 0.5, "mu": 0.05},
    "lgrawa": {"lambda": 0.5, "mu": 0.05},
}
GRAWA_FAMILY = ("grawa", "mgrawa", "lgrawa")

TRAJECTORY_COLUMNS = ("step", "worker_id", "x", "y", "loss")
FLATNESS_COLUMNS = (
    "policy", "seed", "which", "train_error", "test_error", "gap",
    "full_grad_norm", "frobenius_proxy", "loss",
)


def max_parallel():
    """Parallel run cap from the environment; 1 (sequential) when unset."""
    raw = os.environ.get(PARALLEL_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{PARALLEL_ENV} must be an integer, got {raw!r}", key=PARALLEL_ENV) from exc
    return max(1, n)


def pmap(fn, items):
    """``[fn(x) for x in items]``, fanned out over processes when allowed.

    Results come back in input order, so output is independent of the pool size.
    """
    items = list(items)
    n = min(max_parallel(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# Vincent protocol ----------------------------------------------------------


@dataclass
class VincentResult:
    policy: str
    seed: int
    center: tuple
    center_loss: float
    worker_losses: list
    curvature: float
    converged: bool
    rounds: int
    flagged: bool = False
    trajectory_csv: str | None = None


def curvature_score(objective, params):
    """Mean absolute second derivative along both axes."""
    fxx, fyy = objective.second_derivatives(params)
    return float((abs(fxx) + abs(fyy)) / 2.0)


def vincent_policy_config(policy, overrides=None):
    if policy not in VINCENT_POLICIES:
        raise ConfigError(f"policy {policy!r} is not part of the Vincent protocol", key="policy")
    d = {"policy": policy, "tau": VINCENT_TAU, **VINCENT_POLICIES[policy], **(overrides or {})}
    return PolicyConfig.from_dict(d)


def write_trajectory(path, objective, trajectory):
    """CSV of every worker position after each of its local steps."""
    steps = np.array([s for s, _, _ in trajectory])
    ids = np.array([m for _, m, _ in trajectory])
    xy = np.array([p for _, _, p in trajectory]).reshape(-1, 2)
    loss = -np.sin(10 * np.log(xy[:, 0])) - np.sin(10 * np.log(xy[:, 1]))
    order = np.lexsort((ids, steps))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for i in order:
            w.writerow((int(steps[i]), int(ids[i]), repr(float(xy[i, 0])), repr(float(xy[i, 1])), repr(float(loss[i]))))


def vincent_run(policy, seed, steps=VINCENT_STEPS, out_dir=None, overrides=None):
    objective = Vincent2D()
    inits = [objective.params_from_flat(p) for p in VINCENT_INITS]
    record = run(
        objective,
        len(inits),
        vincent_policy_config(policy, overrides),
        LocalOptConfig(eta=VINCENT_ETA),
        jittered_schedule(seed, VINCENT_MAX_SKEW),
        steps,
        seed,
        inits=inits,
        trace_params=out_dir is not None,
    )
    center = record.center.params if record.center is not None else record.workers[0]
    losses = [float(v) for v in record.final.get("final_losses", [np.nan])]
    path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = str(out / f"vincent_{policy}_seed{seed}.csv")
        write_trajectory(path, objective, record.trajectory)
    return VincentResult(
        policy=policy,
        seed=seed,
        center=tuple(float(v) for v in center.flat),
        center_loss=float(objective.eval(center)),
        worker_losses=losses,
        curvature=curvature_score(objective, center),
        converged=bool(max(losses) <= VINCENT_THRESHOLD) and not record.flagged,
        rounds=record.ledger.rounds,
        flagged=record.flagged,
        trajectory_csv=path,
    )


def _vincent_job(args):
    return vincent_run(*args)


def vincent_protocol(policies=tuple(VINCENT_POLICIES), seeds=(0, 1, 2), steps=VINCENT_STEPS, out_dir=None):
    """Four workers from the corners of ``[0.25, 10]^2``, one run per (policy, seed)."""
    jobs = [(p, s, steps, out_dir) for p in policies for s in seeds]
    return pmap(_vincent_job, jobs)


def flatter_than(results, family=GRAWA_FAMILY, baseline="lsgd"):
    """Per seed: is every family member's curvature below the baseline's?"""
    by_key = {(r.policy, r.seed): r for r in results}
    seeds = sorted({r.seed for r in results})
    out = {}
    for s in seeds:
        base = by_key.get((baseline, s))
        members = [by_key[(p, s)] for p in family if (p, s) in by_key]
        if base is None or not members:
            continue
        out[s] = all(m.curvature < base.curvature for m in members)
    return out


# Convex rate ---------------------------------------------------------------


@dataclass
class ConvexRateReport:
    slope: float | None
    half_width: float | None
    seed_slopes: list
    semilog_slope: float | None
    suboptimality: np.ndarray = field(repr=False)
    fit_window: tuple = (0, 0)
    flagged: bool = False

    def to_dict(self):
        d = asdict(self)
        d["suboptimality"] = [float(v) for v in self.suboptimality]
        return d


def mean_suboptimality(objective, record, steps):
    """``mean_m f(x_m^t) - f*`` for ``t = 1..steps`` from a traced run."""
    acc = np.zeros(steps)
    cnt = np.zeros(steps)
    for t, _, x in record.trajectory:
        acc[t - 1] += 0.5 * x @ objective.A @ x
        cnt[t - 1] += 1
    return acc / np.maximum(cnt, 1) - objective.f_star


def loglog_slope(values, start):
    t = np.arange(1, len(values) + 1)
    sel = t >= start
    return float(np.polyfit(np.log(t[sel]), np.log(values[sel]), 1)[0])


def convex_rate(
    dim=10,
    M=4,
    noise_sigma=0.1,
    c=1.0,
    policy="grawa",
    lam=0.5,
    tau=4,
    steps=2000,
    seeds=range(10),
    objective_seed=1234,
    lr_schedule="inverse_t",
):
    """Suboptimality decay of GRAWA on a noisy strongly convex quadratic.

    The slope is fitted on the last decade of steps, ``[steps/10, steps]``, of
    the seed-averaged curve; ``half_width`` is a 95% t-interval over per-seed
    slopes. ``semilog_slope`` fits ``log(f - f*)`` against ``t`` (linear
    convergence shows up there as a negative constant).
    """
    objective = ObjectiveSpec(kind="quadratic", dim=dim, noise_sigma=noise_sigma, seed=objective_seed).build()
    pol = PolicyConfig(policy=policy, lam=lam, tau=tau)
    local = LocalOptConfig(eta=c, lr_schedule=lr_schedule)
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed", key="seeds")
    curves = []
    for s in seeds:
        rec = run(objective, M, pol, local, None, steps, s, trace_params=True)
        if rec.flagged:
            log.warning("seed %d diverged: %s", s, rec.error)
            return ConvexRateReport(None, None, [], None, np.zeros(0), flagged=True)
        curves.append(mean_suboptimality(objective, rec, steps))
    S = np.mean(curves, axis=0)
    start = max(1, steps // 10)
    if not np.all(np.isfinite(S)) or np.any(S <= 0):
        return ConvexRateReport(None, None, [], None, S, (start, steps), flagged=True)
    per_seed = [loglog_slope(cv, start) for cv in curves]
    if len(per_seed) > 1:
        half = float(stats.t.ppf(0.975, len(per_seed) - 1) * np.std(per_seed, ddof=1) / np.sqrt(len(per_seed)))
    else:
        half = float("nan")
    t = np.arange(1, steps + 1)
    sel = t >= start
    semilog = float(np.polyfit(t[sel], np.log(S[sel]), 1)[0])
    return ConvexRateReport(loglog_slope(S, start), half, per_seed, semilog, S, (start, steps))


# Flatness comparison -------------------------------------------------------


def _flat_metrics(objective, params, k, seed):
    train, test = objective.dataset, objective.test_set
    tr = objective.error_rate(params, train)
    te = objective.error_rate(params, test)
    spec = hessian_spectrum(objective, params, train, k=min(k, params.total_dim), seed=seed)
    return {
        "train_error": tr,
        "test_error": te,
        "gap": generalization_gap(tr, te),
        "full_grad_norm": full_gradient_norm(objective, params, train),
        "frobenius_proxy": spec.frobenius_proxy,
        "loss": objective.eval(params, train),
    }


def _flatness_job(args):
    cfg, k = args
    objective = cfg.objective.build()
    rec = cfg.execute()
    rows = []
    if rec.flagged:
        return rows, rec.flagged
    train = objective.dataset
    losses = [objective.eval(w, train) for w in rec.workers]
    best = rec.workers[int(np.argmin(losses))]
    targets = [("best_worker", best)]
    if rec.center is not None and not cfg.policy.is_dp:
        targets.append(("center", rec.center.params))
    for which, params in targets:
        rows.append({"policy": cfg.policy.policy, "seed": cfg.seed, "which": which,
                     **_flat_metrics(objective, params, k, cfg.seed)})
    return rows, False


def flatness_compare(base, policies, seeds, k=20, policy_overrides=None):
    """Train every (policy, seed) pair from ``base`` and measure flatness.

    ``base`` is a :class:`RunConfig` with an MLP objective. Returns one row
    per (policy, seed, which) where ``which`` is the best worker (lowest full
    training loss) or the center.
    """
    if base.objective.kind != "mlp_classifier":
        raise ConfigError("flatness comparison needs an mlp_classifier objective", key="objective")
    if len(policies) < 2:
        raise ConfigError("need at least two policies", key="policy")
    if len(seeds) < 3:
        raise ConfigError("need at least three seeds", key="seed")
    overrides = policy_overrides or {}
    jobs = []
    for p in policies:
        pol = PolicyConfig.from_dict({**base.policy.to_dict(), "policy": p, **overrides.get(p, {})})
        local = base.local
        if p == "dp_sam" and local.sam_rho == 0:
            local = replace(local, sam_rho=0.05)
        for s in seeds:
            jobs.append((replace(base, policy=pol, local=local, seed=int(s)), k))
    rows = []
    for job_rows, flagged in pmap(_flatness_job, jobs):
        rows.extend(job_rows)
    return rows


def write_table(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def mean_by_policy(rows, column, which="center"):
    acc = {}
    for r in rows:
        if r["which"] == which:
            acc.setdefault(r["policy"], []).append(r[column])
    return {p: float(np.mean(v)) for p, v in acc.items()}


# Sweep ---------------------------------------------------------------------


def expand_grid(base, grid):
    """Configs for the cartesian product of ``grid``.

    Keys are dotted paths such as ``"policy.tau"`` or ``"seed"``.
    """
    keys = sorted(grid)
    base_dict = base.to_dict()
    configs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        d = _deep_copy(base_dict)
        for key, value in zip(keys, values):
            _set_path(d, key, value)
        configs.append((dict(zip(keys, values)), RunConfig.from_dict(d)))
    return configs


def _deep_copy(d):
    return {k: _deep_copy(v) if isinstance(v, dict) else v for k, v in d.items()}


def _set_path(d, key, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown sweep key {key!r}", key=key)
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown sweep key {key!r}", key=key)
    node[parts[-1]] = value


def _sweep_job(cfg):
    rec = cfg.execute()
    return rec.summary(), rec.csv_text()


def sweep(base, grid, out_dir=None):
    """Run every grid point; returns one summary row per point.

    With ``out_dir`` each point writes ``point_XXXX.csv``/``.json`` into its
    own file pair.
    """
    configs = expand_grid(base, grid)
    results = pmap(_sweep_job, [c for _, c in configs])
    rows = []
    for i, ((point, cfg), (summary, text)) in enumerate(zip(configs, results)):
        row = {**point, "rounds": summary["rounds"], "flagged": summary["flagged"],
               "simulated_comm_cost": summary["simulated_comm_cost"],
               "center_loss": summary.get("center_loss"),
               "mean_final_loss": float(np.mean(summary.get("final_losses", [np.nan])))}
        rows.append(row)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"point_{i:04d}.csv").write_text(text)
            (out / f"point_{i:04d}.json").write_text(_json_dump({**summary, "point": point}))
    return rows


def _json_dump(d):
    return json.dumps(d, indent=2, sort_keys=True, default=float) + "\n"
