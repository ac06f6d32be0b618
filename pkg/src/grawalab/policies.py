"""Center-variable policies and distributed updates.

GRAWA weights each worker inversely to its gradient norm, so workers sitting
in flat regions dominate the center. MGRAWA scores a worker by the sum of its
per-layer accumulated gradient norms; LGRAWA weights every layer separately.
EASGD, LSGD and data-parallel averaging are the baselines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, NumericError, SignatureError
from .params import LayeredParams, uniform_mean, weighted_sum

POLICIES = (
    "grawa",
    "mgrawa",
    "lgrawa",
    "local_mgrawa",
    "local_lgrawa",
    "easgd",
    "lsgd",
    "dp_sgd",
    "dp_sam",
)
SHARED_BATCH_POLICIES = frozenset({"grawa", "mgrawa", "lgrawa"})
LOCAL_POLICIES = frozenset({"local_mgrawa", "local_lgrawa"})
DP_POLICIES = frozenset({"dp_sgd", "dp_sam"})
# Policies that pull toward the stale center between rounds.
PROXIMITY_POLICIES = frozenset({"mgrawa", "lgrawa", "local_mgrawa", "local_lgrawa", "lsgd"})
LAYERWISE_POLICIES = frozenset({"lgrawa", "local_lgrawa"})

EPSILON_NORM = 1e-12

# Config keys differ from attribute names where the key is a Python keyword.
_KEY_TO_ATTR = {"lambda": "lam"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}


@dataclass
class PolicyConfig:
    policy: str = "mgrawa"
    lam: float = 0.5
    tau: int = 16
    mu: float = 0.0
    gamma: float = 0.0
    easgd_rho: float = 0.5
    epsilon_norm: float = EPSILON_NORM
    leading_gamma: bool = True

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}", key="policy")
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}", key="lambda")
        if isinstance(self.tau, bool) or int(self.tau) != self.tau or self.tau < 1:
            raise ConfigError(f"tau must be an integer >= 1, got {self.tau}", key="tau")
        self.tau = int(self.tau)
        if self.mu < 0 or self.mu > self.tau:
            raise ConfigError(f"mu must satisfy 0 <= mu/tau <= 1, got mu={self.mu}", key="mu")
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}", key="gamma")
        if not 0 <= self.easgd_rho <= 1:
            raise ConfigError(f"easgd_rho must be in [0, 1], got {self.easgd_rho}", key="easgd_rho")
        if not self.epsilon_norm > 0:
            raise ConfigError("epsilon_norm must be > 0", key="epsilon_norm")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            attr = _KEY_TO_ATTR.get(key, key)
            if attr not in known or key in _ATTR_TO_KEY:
                raise ConfigError(f"unknown policy key {key!r}", key=key)
            kwargs[attr] = value
        return cls(**kwargs)

    def to_dict(self):
        return {_ATTR_TO_KEY.get(f.name, f.name): getattr(self, f.name) for f in fields(self)}

    @property
    def uses_proximity(self):
        return self.policy in PROXIMITY_POLICIES and self.mu > 0

    @property
    def is_dp(self):
        return self.policy in DP_POLICIES


@dataclass
class GradNormProfile:
    """Per-layer gradient norm scores of one worker.

    ``momentum_state`` holds the running average when the profile went
    through :func:`smooth_profile`.
    """

    per_layer: np.ndarray
    momentum_state: np.ndarray | None = None
    step_count: int = 0
    model_total: float = field(init=False)

    def __post_init__(self):
        self.per_layer = np.asarray(self.per_layer, dtype=np.float64)
        if (self.per_layer < 0).any():
            raise ValueError("gradient norm scores must be >= 0")
        self.model_total = float(np.sum(self.per_layer))


@dataclass
class CenterVariable:
    params: LayeredParams
    provenance: str
    round_index: int = 0
    weights: np.ndarray | None = None


def grawa_theta(norms, epsilon_norm=EPSILON_NORM):
    """Normalizer ``prod(a) / sum_i prod_{j != i} a_j`` of the GRAWA weights.

    Algebraically equal to ``1 / sum(1 / a_i)``. Norms are floored at
    ``epsilon_norm``.
    """
    a = np.maximum(np.asarray(norms, dtype=np.float64), epsilon_norm)
    if a.size == 0:
        raise ConfigError("need at least one gradient norm", key="norms")
    # Theta is homogeneous of degree one; scaling by the smallest norm keeps
    # the products in range and makes equal norms exactly 1.
    scale = a.min()
    b = a / scale
    total = math.prod(b)
    others = sum(math.prod(np.delete(b, i)) for i in range(b.size))
    return scale * total / others


def grawa_weights(norms, epsilon_norm=EPSILON_NORM):
    """Weights ``Theta / a_m``: inversely proportional to the norms, summing to 1."""
    a = np.maximum(np.asarray(norms, dtype=np.float64), epsilon_norm)
    if a.size == 0:
        raise ConfigError("need at least one gradient norm", key="norms")
    b = a / a.min()
    return grawa_theta(b, epsilon_norm=np.finfo(float).tiny) / b


def accumulate_profile(objective, params, shared_batch, rng=None, flatten=False):
    """Norms of the gradients summed over ``shared_batch``.

    ``G_k`` is the sum of per-sample gradients of layer ``k`` (the batch-mean
    gradient times the batch size); the profile holds ``|G_k|_F``. With
    ``flatten=True`` all layers are treated as one vector, giving a single
    entry (vanilla GRAWA).
    """
    if shared_batch is None or shared_batch.size < 1:
        raise ConfigError("shared batch must be non-empty", key="batch")
    g = objective.grad(params, shared_batch, rng)
    G = g * float(shared_batch.size)
    if flatten:
        return GradNormProfile(np.array([G.norm()]))
    return GradNormProfile(G.layer_norms())


def smooth_profile(profile, previous, gamma, step, leading_gamma=True):
    """Momentum on gradient-norm scores with bias correction.

    ``mvg = gamma * mvg_prev + (1 - gamma) * current`` and the estimate is
    ``gamma * mvg / (1 - gamma**step)``; ``leading_gamma=False`` drops the
    leading factor. ``gamma == 0`` switches smoothing off.
    """
    if not 0 <= gamma < 1:
        raise ConfigError("gamma must be in [0, 1)", key="gamma")
    if step < 1:
        raise ConfigError("step must be >= 1", key="step")
    cur = profile.per_layer
    if gamma == 0:
        return GradNormProfile(cur.copy(), cur.copy(), step)
    prev = previous.momentum_state if previous is not None and previous.momentum_state is not None else np.zeros_like(cur)
    mvg = gamma * prev + (1.0 - gamma) * cur
    est = mvg / (1.0 - gamma**step)
    if leading_gamma:
        est = gamma * est
    return GradNormProfile(est, mvg, step)


def _stack_check(worker_params):
    if not worker_params:
        raise ConfigError("need at least one worker", key="workers")
    first = worker_params[0]
    for p in worker_params[1:]:
        if p.shapes != first.shapes:
            raise SignatureError(f"worker signature mismatch: {first.shapes} vs {p.shapes}")
    return first


def center_mgrawa(worker_params, profiles, round_index=0, epsilon_norm=EPSILON_NORM):
    """One weight per worker from its model-level score, applied to every layer."""
    _stack_check(worker_params)
    if len(profiles) != len(worker_params):
        raise SignatureError("one profile per worker is required")
    beta = grawa_weights([p.model_total for p in profiles], epsilon_norm)
    return CenterVariable(weighted_sum(worker_params, beta), "weighted_average", round_index, beta)


def center_lgrawa(worker_params, profiles, round_index=0, epsilon_norm=EPSILON_NORM):
    """Layer-wise GRAWA: layer ``k`` of the center uses weights from the ``A^k_m``."""
    first = _stack_check(worker_params)
    K = first.num_layers
    if len(profiles) != len(worker_params):
        raise SignatureError("one profile per worker is required")
    for p in profiles:
        if p.per_layer.shape != (K,):
            raise SignatureError(f"profile has {p.per_layer.size} layers, params have {K}")
    scores = np.stack([p.per_layer for p in profiles])  # (M, K)
    beta = np.stack([grawa_weights(scores[:, k], epsilon_norm) for k in range(K)], axis=1)
    sizes = np.diff(first.offsets)
    coord_weights = [np.repeat(beta[m], sizes) for m in range(len(worker_params))]
    return CenterVariable(weighted_sum(worker_params, coord_weights), "per_layer_weighted", round_index, beta)


def center_easgd(worker_params, previous_center, rho, round_index=0):
    """Moving average ``(1 - rho) x_C_prev + rho mean(x_m)``."""
    _stack_check(worker_params)
    if not 0 <= rho <= 1:
        raise ConfigError("easgd_rho must be in [0, 1]", key="easgd_rho")
    avg = uniform_mean(worker_params)
    prev = previous_center.params if isinstance(previous_center, CenterVariable) else previous_center
    avg.check_signature(prev)
    out = avg.like((1.0 - rho) * prev.flat + rho * avg.flat)
    return CenterVariable(out, "moving_average", round_index)


def center_lsgd(worker_params, worker_batch_losses, round_index=0):
    """Deep copy of the worker with the smallest loss; ties go to the lowest index."""
    _stack_check(worker_params)
    losses = np.asarray(worker_batch_losses, dtype=np.float64)
    if losses.shape != (len(worker_params),):
        raise SignatureError("one loss per worker is required")
    if np.isnan(losses).all():
        raise NumericError("all worker losses are NaN; no leader")
    leader = int(np.nanargmin(losses))
    weights = np.zeros(len(losses))
    weights[leader] = 1.0
    return CenterVariable(worker_params[leader].copy(), "leader_copy", round_index, weights)


def leader_index(center):
    return int(np.argmax(center.weights))


def pull_update(worker_params, center, lam):
    """``x_m <- (1 - lam) x_m + lam x_C`` for every worker."""
    if not 0 <= lam <= 1:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}", key="lambda")
    c = center.params if isinstance(center, CenterVariable) else center
    out = []
    for p in worker_params:
        p.check_signature(c)
        out.append(p.like((1.0 - lam) * p.flat + lam * c.flat))
    return out


def dp_allreduce(grads):
    """Uniform mean of the worker gradients."""
    _stack_check(grads)
    m = len(grads)
    mean = weighted_sum(grads, [1.0 / m] * m)
    return grads[0].like(mean.flat)
