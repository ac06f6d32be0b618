import csv
import json

import numpy as np
import pytest

from grawalab.config import RunConfig
from grawalab.errors import ConfigError
from grawalab.experiments import (
    VINCENT_THRESHOLD,
    convex_rate,
    curvature_score,
    expand_grid,
    flatness_compare,
    flatter_than,
    max_parallel,
    sweep,
    vincent_run,
)
from grawalab.objectives import Vincent2D


def test_curvature_score_at_minimum():
    v = Vincent2D()
    x = np.exp(np.pi / 20 + 3 * np.pi / 5)
    assert curvature_score(v, v.params_from_flat([x, x])) == pytest.approx(100 / x**2)


def test_single_vincent_run_writes_one_trajectory(tmp_path):
    res = vincent_run("mgrawa", 0, out_dir=tmp_path)
    assert res.converged and max(res.worker_losses) <= VINCENT_THRESHOLD
    files = list(tmp_path.glob("*.csv"))
    assert [f.name for f in files] == ["vincent_mgrawa_seed0.csv"]
    with open(files[0]) as fh:
        rows = list(csv.DictReader(fh))
    assert {r["worker_id"] for r in rows} == {"0", "1", "2", "3"}
    assert len(rows) == 4 * 5000
    last = [r for r in rows if r["step"] == "5000"]
    assert all(float(r["loss"]) <= VINCENT_THRESHOLD for r in last)


def test_vincent_rejects_unknown_policy():
    with pytest.raises(ConfigError):
        vincent_run("dp_sgd", 0, steps=10)


def test_flatter_than():
    class R:
        def __init__(self, policy, seed, curvature):
            self.policy, self.seed, self.curvature = policy, seed, curvature
    rs = [R("lsgd", 0, 3.0), R("mgrawa", 0, 1.0), R("lsgd", 1, 1.0), R("mgrawa", 1, 2.0)]
    assert flatter_than(rs, family=("mgrawa",)) == {0: True, 1: False}


def test_convex_rate_noiseless_is_linear():
    rep = convex_rate(noise_sigma=0.0, c=0.5, lr_schedule="constant", steps=200, seeds=[0, 1], M=2)
    assert not rep.flagged
    assert rep.semilog_slope < 0
    S = rep.suboptimality
    tail = np.diff(np.log(S[100:]))
    assert np.all(tail < 0)
    assert np.ptp(tail) < 0.1 * abs(tail.mean())


def test_convex_rate_decoupled_matches_band():
    rep = convex_rate(lam=0.0, steps=1000, seeds=range(4))
    assert -1.3 <= rep.slope <= -0.7


def test_convex_rate_flags_divergence():
    with np.errstate(all="ignore"):
        rep = convex_rate(c=100.0, lr_schedule="constant", steps=200, seeds=[0])
    assert rep.flagged and rep.slope is None


def _mlp_base(steps=40):
    return RunConfig.from_dict({
        "objective": {"kind": "mlp_classifier", "widths": [2, 6, 2], "n_train": 64, "n_test": 64},
        "policy": {"policy": "mgrawa", "tau": 4},
        "local": {"eta": 0.1},
        "workers": 2, "total_steps": steps, "batch_size": 8,
    })


def test_flatness_rows_per_policy_seed():
    rows = flatness_compare(_mlp_base(), ["lgrawa", "dp_sgd"], [0, 1, 2], k=5)
    keys = [(r["policy"], r["seed"], r["which"]) for r in rows]
    assert len(keys) == len(set(keys)) == 3 * 2 + 3
    for r in rows:
        assert r["gap"] == pytest.approx(r["test_error"] - r["train_error"])
        assert r["frobenius_proxy"] > 0


def test_flatness_identical_for_identical_policies():
    rows = flatness_compare(_mlp_base(), ["dp_sgd", "dp_sgd"], [0, 1, 2], k=5)
    assert rows[:3] == rows[3:]


def test_flatness_validation():
    with pytest.raises(ConfigError):
        flatness_compare(_mlp_base(), ["mgrawa"], [0, 1, 2])
    with pytest.raises(ConfigError):
        flatness_compare(_mlp_base(), ["mgrawa", "easgd"], [0, 1])
    with pytest.raises(ConfigError):
        flatness_compare(RunConfig(), ["mgrawa", "easgd"], [0, 1, 2])


def test_expand_grid_and_sweep(tmp_path):
    base = RunConfig.from_dict({"objective": {"kind": "quadratic", "dim": 3}, "workers": 2, "total_steps": 32})
    configs = expand_grid(base, {"policy.tau": [4, 8], "policy.policy": ["easgd", "mgrawa"]})
    assert len(configs) == 4
    assert configs[0][1].policy.tau == 4
    rows = sweep(base, {"policy.tau": [4, 8]}, tmp_path)
    assert [r["rounds"] for r in rows] == [8, 4]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["point_0000.csv", "point_0000.json", "point_0001.csv", "point_0001.json"]
    assert json.loads((tmp_path / "point_0001.json").read_text())["point"] == {"policy.tau": 8}
    with pytest.raises(ConfigError):
        expand_grid(base, {"policy.period": [4]})


def test_parallel_cap(monkeypatch):
    monkeypatch.delenv("GRAWALAB_MAX_PARALLEL", raising=False)
    assert max_parallel() == 1
    monkeypatch.setenv("GRAWALAB_MAX_PARALLEL", "3")
    assert max_parallel() == 3
    monkeypatch.setenv("GRAWALAB_MAX_PARALLEL", "many")
    with pytest.raises(ConfigError):
        max_parallel()


def test_parallel_sweep_matches_sequential(monkeypatch):
    base = RunConfig.from_dict({"objective": {"kind": "quadratic", "dim": 3, "noise_sigma": 0.1}, "workers": 2, "total_steps": 16})
    grid = {"seed": [0, 1]}
    seq = sweep(base, grid)
    monkeypatch.setenv("GRAWALAB_MAX_PARALLEL", "2")
    par = sweep(base, grid)
    assert seq == par
