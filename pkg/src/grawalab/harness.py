"""Simulated asynchronous data-parallel training.

Workers are stepped one local iteration at a time in a seeded interleaving.
A communication round fires whenever ``M * tau`` divides the total number of
local steps taken so far; during a round every worker is frozen (barrier).
Data-parallel policies instead run in lock step with an all-reduce after
every step.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .local_opt import OptBuffers, proximity_step, sam_gradient, sgd_step
from .objectives import make_shards
from .params import uniform_mean
from .policies import (
    LAYERWISE_POLICIES,
    LOCAL_POLICIES,
    SHARED_BATCH_POLICIES,
    CenterVariable,
    GradNormProfile,
    accumulate_profile,
    center_easgd,
    center_lgrawa,
    center_lsgd,
    center_mgrawa,
    dp_allreduce,
    pull_update,
    smooth_profile,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "worker_id", "loss", "grad_norm", "event")
SUMMARY_SCHEMA = "grawalab.run/1"


@dataclass
class Schedule:
    """Worker interleaving: ``round_robin`` or ``jittered`` (seeded, bounded skew)."""

    kind: str = "round_robin"
    max_skew: int = 0
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("round_robin", "jittered"):
            raise ConfigError(f"unknown schedule {self.kind!r}", key="schedule")
        if isinstance(self.max_skew, bool) or int(self.max_skew) != self.max_skew or self.max_skew < 0:
            raise ConfigError("max_skew must be an integer >= 0", key="max_skew")
        self.max_skew = int(self.max_skew)

    @classmethod
    def from_dict(cls, d):
        for key in d:
            if key not in ("kind", "max_skew", "seed"):
                raise ConfigError(f"unknown schedule key {key!r}", key=key)
        return cls(**d)

    def to_dict(self):
        return {"kind": self.kind, "max_skew": self.max_skew, "seed": self.seed}


def jittered_schedule(seed, max_skew):
    return Schedule("jittered", max_skew, seed)


def make_interleaving(M, steps_per_worker, schedule=None, seed=0):
    """Order in which workers take their local steps.

    Under ``jittered`` every pick is uniform over the workers that can step
    without any worker getting more than ``max_skew`` steps ahead of another;
    ``max_skew == 0`` is plain round robin.
    """
    schedule = schedule or Schedule()
    if schedule.kind == "round_robin" or schedule.max_skew == 0:
        return np.tile(np.arange(M), steps_per_worker)
    rng = np.random.default_rng(schedule.seed if schedule.seed is not None else seed)
    skew = schedule.max_skew
    counts = np.zeros(M, dtype=np.int64)
    order = np.empty(M * steps_per_worker, dtype=np.int64)
    for i in range(order.size):
        lo = counts.min()
        eligible = np.flatnonzero((counts - lo < skew) & (counts < steps_per_worker))
        w = eligible[rng.integers(eligible.size)]
        counts[w] += 1
        order[i] = w
    return order


def should_communicate(counters, M, tau):
    total = int(sum(counters))
    return total > 0 and total % (M * tau) == 0


@dataclass
class CommLedger:
    cost_a: float = 1.0
    cost_b: float = 0.0
    rounds: int = 0
    events: list = field(default_factory=list)

    def record(self, global_step, policy, dim):
        self.rounds += 1
        self.events.append((global_step, policy, self.cost_a + self.cost_b * dim))

    @property
    def total_cost(self):
        return float(sum(e[2] for e in self.events))


@dataclass
class WorkerState:
    id: int
    params: object
    opt_buffers: OptBuffers
    t: int = 0
    shard: object = None
    last_profile: GradNormProfile | None = None
    last_batch: object = None
    rng: np.random.Generator | None = None
    since_round: int = 0
    score_mvg: np.ndarray | None = None


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    centers: list = field(default_factory=list)
    ledger: CommLedger = field(default_factory=CommLedger)
    workers: list = field(default_factory=list)
    center: CenterVariable | None = None
    final: dict = field(default_factory=dict)
    flagged: bool = False
    error: str | None = None
    full_grad_sq: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def sort_rows(self):
        self.rows.sort(key=lambda r: (r[0], r[1]))

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for step, wid, loss, gnorm, event in self.rows:
            w.writerow((step, wid, repr(float(loss)), repr(float(gnorm)), event))
        return buf.getvalue()

    def csv_digest(self):
        return hashlib.sha256(self.csv_text().encode()).hexdigest()

    def write_csv(self, path):
        Path(path).write_text(self.csv_text())

    def summary(self):
        return {
            "schema": SUMMARY_SCHEMA,
            "config": self.config,
            "flagged": self.flagged,
            "error": self.error,
            "rounds": self.ledger.rounds,
            "simulated_comm_cost": self.ledger.total_cost,
            **self.final,
        }

    def write(self, out_dir, name="run"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.write_csv(out / f"{name}.csv")
        (out / f"{name}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return out / f"{name}.csv", out / f"{name}.json"


def read_csv(path):
    """Parse a run CSV back into ``(step, worker_id, loss, grad_norm, event)`` tuples."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        return [(int(s), int(w), float(l), float(g), e) for s, w, l, g, e in reader]


def _round_rng(seed, round_index):
    return np.random.default_rng([seed, 2, round_index])


def run(
    objective,
    M,
    policy,
    local,
    schedule=None,
    total_steps=100,
    seed=0,
    *,
    batch_size=32,
    inits=None,
    comm_cost=(1.0, 0.0),
    track_full_grad=False,
    trace_params=False,
):
    """Run ``M`` workers for ``total_steps`` local steps each.

    ``inits`` optionally gives one starting point per worker; otherwise all
    workers share ``objective.init_params``. A numeric failure stops the run
    and returns the partial record with ``flagged`` set.
    """
    if M < 1:
        raise ConfigError("worker count must be positive", key="workers")
    if total_steps < 0:
        raise ConfigError("total_steps must be >= 0", key="total_steps")
    if policy.policy == "dp_sam" and local.sam_rho <= 0:
        raise ConfigError("dp_sam needs sam_rho > 0", key="sam_rho")
    schedule = schedule or Schedule()

    if inits is None:
        x0 = objective.project(objective.init_params(np.random.default_rng([seed, 0])))
        inits = [x0.copy() for _ in range(M)]
    else:
        if len(inits) != M:
            raise ConfigError("one initial point per worker is required", key="inits")
        inits = [objective.project(p.copy()) for p in inits]
    shared_init = all(p == inits[0] for p in inits)

    dataset = objective.dataset
    shards = make_shards(dataset, M, seed, batch_size) if dataset is not None else [None] * M
    workers = [
        WorkerState(m, inits[m], OptBuffers(inits[m]), shard=shards[m], rng=np.random.default_rng([seed, 1, m]))
        for m in range(M)
    ]
    record = RunRecord(ledger=CommLedger(*comm_cost))
    record.config = {
        "objective": objective.kind,
        "workers": M,
        "policy": policy.to_dict(),
        "local": local.to_dict(),
        "schedule": schedule.to_dict(),
        "total_steps": total_steps,
        "seed": seed,
        "batch_size": batch_size,
    }
    # Without a shared starting model there is no center until the first round.
    center = CenterVariable(inits[0].copy(), "initial", 0) if shared_init else None

    start = time.perf_counter()
    try:
        if policy.is_dp:
            center = _run_dp(objective, workers, policy, local, total_steps, record, track_full_grad, trace_params)
        else:
            center = _run_async(
                objective, workers, policy, local, schedule, total_steps, seed, batch_size,
                record, center, track_full_grad, trace_params,
            )
    except NumericError as exc:
        record.flagged = True
        record.error = str(exc)
        log.warning("run aborted: %s", exc)

    record.sort_rows()
    record.workers = [w.params for w in workers]
    record.center = center
    record.final = _final_metrics(objective, workers, center)
    record.final["wall_time"] = time.perf_counter() - start
    return record


def _final_metrics(objective, workers, center):
    batch = objective.full_batch()
    out = {"total_local_steps": int(sum(w.t for w in workers))}
    try:
        out["final_losses"] = [objective.eval(w.params, batch) for w in workers]
        if center is not None:
            out["center_loss"] = objective.eval(center.params, batch)
            out["center_params_norm"] = center.params.norm()
    except Exception as exc:  # final metrics are best effort on a flagged run
        out["final_error"] = str(exc)
    return out


def _local_gradient(objective, ws, batch, local):
    if local.sam_rho > 0:
        return sam_gradient(objective, ws.params, batch, local.sam_rho, ws.rng)
    return objective.grad(ws.params, batch, ws.rng), False


def _check_loss(loss, ws):
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss on worker {ws.id} at local step {ws.t + 1}")


def _run_dp(objective, workers, policy, local, total_steps, record, track_full_grad, trace_params):
    full = objective.full_batch()
    dim = workers[0].params.total_dim
    for step in range(1, total_steps + 1):
        grads, info = [], []
        for ws in workers:
            batch = ws.shard.next_batch() if ws.shard is not None else full
            loss = objective.eval(ws.params, batch)
            _check_loss(loss, ws)
            if track_full_grad:
                record.full_grad_sq.append((step, ws.id, objective.grad(ws.params, full).norm() ** 2))
            g, skipped = _local_gradient(objective, ws, batch, local)
            grads.append(g)
            info.append((loss, g.norm(), skipped))
        gbar = dp_allreduce(grads)
        for ws, (loss, gnorm, skipped) in zip(workers, info):
            ws.params = objective.project(sgd_step(ws.params, gbar, ws.opt_buffers, local, step))
            ws.t += 1
            tags = ["allreduce"]
            if skipped:
                tags.append("ascend-skipped")
            record.rows.append((step, ws.id, loss, gnorm, ";".join(tags)))
            if trace_params:
                record.trajectory.append((step, ws.id, ws.params.flat.copy()))
        record.ledger.record(step * len(workers), policy.policy, dim)
    return CenterVariable(workers[0].params.copy(), "replica", record.ledger.rounds)


def _run_async(objective, workers, policy, local, schedule, total_steps, seed, batch_size,
               record, center, track_full_grad, trace_params):
    M = len(workers)
    full = objective.full_batch()
    dim = workers[0].params.total_dim
    order = make_interleaving(M, total_steps, schedule, seed)
    counters = [0] * M
    name = policy.policy
    is_local = name in LOCAL_POLICIES
    gamma = policy.gamma
    prox = policy.uses_proximity
    round_index = 0
    prev_profiles = [None] * M

    for global_step, w in enumerate(order, start=1):
        ws = workers[w]
        batch = ws.shard.next_batch() if ws.shard is not None else full
        loss = objective.eval(ws.params, batch)
        _check_loss(loss, ws)
        if track_full_grad:
            record.full_grad_sq.append((ws.t + 1, ws.id, objective.grad(ws.params, full).norm() ** 2))
        g, skipped = _local_gradient(objective, ws, batch, local)
        gnorm = g.norm()
        ws.last_batch = batch

        if is_local:
            ws.since_round += 1
            cur = GradNormProfile(g.layer_norms())
            prev = GradNormProfile(ws.score_mvg, ws.score_mvg) if ws.score_mvg is not None else None
            ws.last_profile = smooth_profile(cur, prev, gamma, ws.since_round, policy.leading_gamma)
            ws.score_mvg = ws.last_profile.momentum_state

        params = objective.project(sgd_step(ws.params, g, ws.opt_buffers, local, ws.t + 1))
        if prox and center is not None:
            params = objective.project(proximity_step(params, center.params, policy.mu, policy.tau))
        ws.params = params
        ws.t += 1
        counters[w] += 1
        event = "ascend-skipped" if skipped else ""

        if should_communicate(counters, M, policy.tau):
            round_index += 1
            center = _communicate(objective, workers, policy, center, round_index, seed, batch_size, prev_profiles)
            new_params = pull_update([x.params for x in workers], center, policy.lam)
            for x, p in zip(workers, new_params):
                x.params = objective.project(p)
                if is_local:
                    x.score_mvg = None
                    x.since_round = 0
            record.ledger.record(global_step, name, dim)
            record.centers.append((round_index, global_step, center.params.flat.copy()))
            event = "comm" if not event else event + ";comm"

        record.rows.append((ws.t, ws.id, loss, gnorm, event))
        if trace_params:
            record.trajectory.append((ws.t, ws.id, ws.params.flat.copy()))
    return center


def _communicate(objective, workers, policy, center, round_index, seed, batch_size, prev_profiles):
    name = policy.policy
    params = [w.params for w in workers]
    if name in SHARED_BATCH_POLICIES:
        data = objective.dataset
        if data is not None:
            idx = _round_rng(seed, round_index).choice(data.size, size=min(batch_size, data.size), replace=False)
            shared = data.take(np.sort(idx))
        else:
            shared = objective.full_batch()
        profiles = []
        for m, w in enumerate(workers):
            # Same draw for every worker: the shared batch is identical for all.
            rng = _round_rng(seed, round_index) if objective.stochastic else None
            prof = accumulate_profile(objective, w.params, shared, rng, flatten=(name == "grawa"))
            if policy.gamma > 0:
                prof = smooth_profile(prof, prev_profiles[m], policy.gamma, round_index, policy.leading_gamma)
            prev_profiles[m] = prof
            w.last_profile = prof
            profiles.append(prof)
        if name == "lgrawa":
            return center_lgrawa(params, profiles, round_index, policy.epsilon_norm)
        return center_mgrawa(params, profiles, round_index, policy.epsilon_norm)
    if name in LOCAL_POLICIES:
        profiles = []
        for w in workers:
            if w.last_profile is None:
                w.last_profile = GradNormProfile(np.ones(w.params.num_layers))
            profiles.append(w.last_profile)
        if name in LAYERWISE_POLICIES:
            return center_lgrawa(params, profiles, round_index, policy.epsilon_norm)
        return center_mgrawa(params, profiles, round_index, policy.epsilon_norm)
    if name == "easgd":
        prev = center.params if center is not None else uniform_mean(params)
        return center_easgd(params, prev, policy.easgd_rho, round_index)
    if name == "lsgd":
        full = objective.full_batch()
        losses = [objective.eval(w.params, w.last_batch if w.last_batch is not None else full) for w in workers]
        return center_lsgd(params, losses, round_index)
    raise ConfigError(f"policy {name!r} has no communication round", key="policy")
