"""Run configuration files (JSON)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .harness import Schedule, run
from .local_opt import LocalOptConfig
from .objectives import ObjectiveSpec
from .policies import PolicyConfig

_SECTIONS = {
    "objective": ObjectiveSpec,
    "policy": PolicyConfig,
    "local": LocalOptConfig,
    "schedule": Schedule,
}
_SCALARS = ("workers", "total_steps", "seed", "batch_size", "out", "comm_cost")


@dataclass
class RunConfig:
    """Everything needed to reproduce one simulated run.

    Example::

        {"objective": {"kind": "quadratic", "dim": 4, "noise_sigma": 0.1},
         "policy": {"policy": "mgrawa", "lambda": 0.5, "tau": 8},
         "local": {"eta": 0.1},
         "workers": 4, "total_steps": 200, "seed": 0}
    """

    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    local: LocalOptConfig = field(default_factory=LocalOptConfig)
    schedule: Schedule = field(default_factory=Schedule)
    workers: int = 4
    total_steps: int = 100
    seed: int = 0
    batch_size: int = 32
    out: str | None = None
    comm_cost: tuple = (1.0, 0.0)

    def __post_init__(self):
        for name in ("workers", "total_steps", "batch_size", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}", key=name)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", key="workers")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0", key="total_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        cost = tuple(float(c) for c in self.comm_cost)
        if len(cost) != 2 or min(cost) < 0:
            raise ConfigError("comm_cost must be two non-negative numbers [a, b]", key="comm_cost")
        self.comm_cost = cost

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object", key=None)
        kwargs = {}
        for key, value in d.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key} must be an object", key=key)
                kwargs[key] = _SECTIONS[key].from_dict(value)
            elif key in _SCALARS:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}", key=key)
        return cls(**kwargs)

    def to_dict(self):
        d = {key: getattr(self, key).to_dict() for key in _SECTIONS}
        for key in _SCALARS:
            d[key] = getattr(self, key)
        d["comm_cost"] = list(self.comm_cost)
        return d

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})", key=None) from exc
        return cls.from_dict(data)

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def execute(self, **kwargs):
        objective = self.objective.build()
        return run(
            objective,
            self.workers,
            self.policy,
            self.local,
            self.schedule,
            self.total_steps,
            self.seed,
            batch_size=self.batch_size,
            comm_cost=self.comm_cost,
            **kwargs,
        )
