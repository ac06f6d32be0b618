"""Per-worker update rules applied between communication rounds."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, NumericError

SCHEDULES = ("constant", "inverse_t")
SAM_EPS = 1e-12


@dataclass
class LocalOptConfig:
    """Local SGD settings.

    With ``lr_schedule="inverse_t"`` the step size at local step ``t`` is
    ``eta / t``, i.e. ``eta`` plays the role of the constant ``c``.
    """

    eta: float = 0.1
    momentum: float = 0.0
    nesterov: bool = False
    weight_decay: float = 0.0
    sam_rho: float = 0.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("eta must be > 0", key="eta")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)", key="momentum")
        if self.nesterov and self.momentum == 0:
            raise ConfigError("nesterov requires momentum > 0", key="nesterov")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", key="weight_decay")
        if self.sam_rho < 0:
            raise ConfigError("sam_rho must be >= 0", key="sam_rho")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}", key="lr_schedule")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown local optimizer key {key!r}", key=key)
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def rate(self, t):
        if self.lr_schedule == "inverse_t":
            return self.eta / max(int(t), 1)
        return self.eta


class OptBuffers:
    """Momentum buffer (flat, zero-initialized) and step counter."""

    __slots__ = ("momentum", "step")

    def __init__(self, params):
        self.momentum = np.zeros_like(params.flat)
        self.step = 0

    def copy(self):
        out = OptBuffers.__new__(OptBuffers)
        out.momentum = self.momentum.copy()
        out.step = self.step
        return out


def sgd_step(params, grad, buffers, config, t):
    """One SGD (optionally momentum / Nesterov) step at local iteration ``t``.

    Weight decay is coupled: ``weight_decay * params`` is added to the
    gradient. ``buffers`` is updated in place; the new params are returned.
    """
    params.check_signature(grad)
    g = grad.flat
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient in local step")
    if config.weight_decay:
        g = g + config.weight_decay * params.flat
    if config.momentum:
        buf = buffers.momentum
        buf *= config.momentum
        buf += g
        d = g + config.momentum * buf if config.nesterov else buf
    else:
        d = g
    buffers.step += 1
    return params.like(params.flat - config.rate(t) * d)


def sam_gradient(objective, params, batch, rho, rng=None):
    """Descent gradient of one SAM step.

    Ascends to ``params + rho * g / |g|`` and returns the gradient there,
    evaluated on the same batch. Returns ``(gradient, skipped)``; the ascent
    is skipped (raw gradient returned) when ``rho == 0`` or ``|g| < 1e-12``.
    """
    # Stochastic objectives draw their sample from rng; replaying the state
    # makes the ascent and descent gradients see the same sample.
    state = rng.bit_generator.state if rng is not None else None
    g = objective.grad(params, batch, rng)
    if rho == 0:
        return g, False
    norm = g.norm()
    if norm < SAM_EPS:
        return g, True
    adv = params.like(params.flat + (rho / norm) * g.flat)
    if state is not None:
        rng.bit_generator.state = state
    return objective.grad(adv, batch, rng), False


def sam_step(objective, params, batch, buffers, config, t, rng=None):
    """SAM ascent/descent on one batch; returns ``(params, gradient, skipped)``."""
    g, skipped = sam_gradient(objective, params, batch, config.sam_rho, rng)
    return sgd_step(params, g, buffers, config, t), g, skipped


def proximity_step(params, center, mu, tau):
    """Pull toward the (stale) center: ``(1 - mu/tau) x + (mu/tau) x_C``."""
    if tau <= 0:
        raise ConfigError("tau must be positive", key="tau")
    frac = mu / tau
    if not 0 <= frac <= 1:
        raise ConfigError(f"mu/tau = {frac} is outside [0, 1]", key="mu")
    params.check_signature(center)
    if frac == 0:
        return params.copy()
    return params.like((1.0 - frac) * params.flat + frac * center.flat)
