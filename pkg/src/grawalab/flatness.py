"""Flatness and generalization diagnostics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import ConfigError
from .params import LayeredParams
from .policies import grawa_weights
from .params import weighted_sum


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    frobenius_proxy: float
    k: int
    n_iter: int
    breakdown: bool = False
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_dict(self):
        d = asdict(self)
        d["eigenvalues"] = [float(v) for v in self.eigenvalues]
        d["residuals"] = [float(v) for v in self.residuals]
        return d


@dataclass
class TheoreticalConstants:
    """Constants from the convergence assumptions; ``None`` means unknown."""

    L: float | None = None
    m: float | None = None
    mu_spl: float | None = None
    k_cone: float | None = None
    sigma: float | None = None
    nu: float | None = None
    zeta: float | None = None
    rho_bound: float | None = None

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be >= 0", key=name)


def quadratic_constants(objective):
    """Known constants of a noisy quadratic: smoothness, strong convexity, noise."""
    return TheoreticalConstants(L=objective.L, m=objective.m, sigma=objective.noise_sigma * np.sqrt(objective.dim), nu=0.0)


def full_gradient_norm(objective, params, dataset=None):
    """Norm of the noise-free mean gradient over the whole dataset, all layers flattened."""
    batch = dataset if dataset is not None else objective.full_batch()
    return objective.grad(params, batch).norm()


def hvp(objective, params, v, dataset=None):
    """Hessian-vector product.

    Exact for objectives exposing ``hessian()``; otherwise a central
    difference of gradients with step ``1e-4 (1 + |x|) / |v|``.
    """
    vec = v.flat if isinstance(v, LayeredParams) else np.asarray(v, dtype=np.float64)
    if vec.shape != params.flat.shape:
        raise ConfigError("vector does not match the parameter dimension", key="v")
    if hasattr(objective, "hessian"):
        return objective.hessian() @ vec
    vnorm = np.linalg.norm(vec)
    if vnorm == 0:
        return np.zeros_like(vec)
    batch = dataset if dataset is not None else objective.full_batch()
    h = 1e-4 * (1.0 + params.norm()) / vnorm
    gp = objective.grad(params.like(params.flat + h * vec), batch).flat
    gm = objective.grad(params.like(params.flat - h * vec), batch).flat
    return (gp - gm) / (2.0 * h)


def hvp_oracle(objective, params, dataset=None):
    return lambda v: hvp(objective, params, v, dataset)


def lanczos_spectrum(hvp_oracle, dim, k=None, seed=0, n_iter=None, tol=1e-10):
    """Top-``k`` Ritz values (by magnitude) of a symmetric operator.

    Runs ``n_iter`` Lanczos steps with full reorthogonalization from a seeded
    Gaussian start vector (default ``min(dim, 2k + 10)`` steps, so small
    problems are solved exactly). When an invariant subspace is hit, the
    iteration restarts from a fresh random direction orthogonal to the basis
    and ``breakdown`` is set; if no such direction exists the spectrum found
    so far is returned.
    """
    if k is None:
        k = min(dim, 100)
    if not 1 <= k <= dim:
        raise ConfigError(f"k must be in [1, {dim}], got {k}", key="k")
    if n_iter is None:
        n_iter = min(dim, 2 * k + 10)
    n_iter = max(k, min(int(n_iter), dim))
    rng = np.random.default_rng(seed)

    V = np.zeros((n_iter, dim))
    alphas, betas = [], []
    breakdown = False
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    beta_last = 0.0
    scale = 0.0
    j = 0
    while True:
        V[j] = v
        w = np.asarray(hvp_oracle(v), dtype=np.float64)
        alpha = float(w @ v)
        w = w - alpha * v
        if j > 0 and betas[-1] > 0:
            w -= betas[-1] * V[j - 1]
        for _ in range(2):
            w -= V[: j + 1].T @ (V[: j + 1] @ w)
        alphas.append(alpha)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        j += 1
        if j == n_iter:
            beta_last = beta
            break
        if beta <= tol * max(scale, 1.0):
            breakdown = True
            v = _fresh_direction(rng, V[:j])
            if v is None:
                break
            betas.append(0.0)
        else:
            v = w / beta
            betas.append(beta)

    a = np.array(alphas)
    b = np.array(betas[: len(alphas) - 1])
    if a.size == 1:
        theta, S = a.copy(), np.ones((1, 1))
    else:
        theta, S = eigh_tridiagonal(a, b)
    residuals = np.abs(beta_last * S[-1])
    order = np.argsort(-np.abs(theta), kind="stable")[:k]
    top = theta[order]
    return SpectrumReport(
        eigenvalues=top,
        frobenius_proxy=float(np.sqrt(np.sum(top**2))),
        k=int(top.size),
        n_iter=len(alphas),
        breakdown=breakdown,
        residuals=residuals[order],
    )


def _fresh_direction(rng, basis):
    for _ in range(3):
        v = rng.standard_normal(basis.shape[1])
        for _ in range(2):
            v -= basis.T @ (basis @ v)
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n
    return None


def hessian_spectrum(objective, params, dataset=None, k=None, seed=0, n_iter=None):
    return lanczos_spectrum(hvp_oracle(objective, params, dataset), params.total_dim, k, seed, n_iter)


def generalization_gap(train_err_pct, test_err_pct):
    """Test error minus train error, both in percent."""
    for name, v in (("train_err_pct", train_err_pct), ("test_err_pct", test_err_pct)):
        if not 0 <= v <= 100:
            raise ConfigError(f"{name} must be in [0, 100], got {v}", key=name)
    return test_err_pct - train_err_pct


@dataclass
class DominanceResult:
    dominance_fraction: float
    jensen_fraction: float
    trials: int


def center_dominance_probe(objective, M, trials, seed=0, spread=1.0, tol=1e-10):
    """How often the GRAWA center beats its workers on a convex objective.

    Workers are placed at ``x* + spread * N(0, I)``; weights come from the
    exact gradient norms. ``dominance_fraction`` counts trials with
    ``f(x_C) <= min_i f(x_i)``, ``jensen_fraction`` those with
    ``f(x_C) <= sum_i beta_i f(x_i)``.
    """
    if not getattr(objective, "convex", False):
        raise ConfigError(f"dominance probe needs a convex objective, got {objective.kind}", key="objective")
    if M < 1 or trials < 1:
        raise ConfigError("M and trials must be >= 1", key="trials")
    rng = np.random.default_rng(seed)
    x_star = objective.minimizer()
    batch = objective.full_batch()
    dominated = jensen = 0
    for _ in range(trials):
        workers = [x_star.like(x_star.flat + spread * rng.standard_normal(x_star.total_dim)) for _ in range(M)]
        norms = [objective.grad(w, batch).norm() for w in workers]
        values = np.array([objective.eval(w, batch) for w in workers])
        beta = grawa_weights(norms)
        fc = objective.eval(weighted_sum(workers, beta), batch)
        dominated += fc <= values.min() + tol
        jensen += fc <= float(beta @ values) + tol
    return DominanceResult(dominated / trials, jensen / trials, trials)


def running_average(values):
    """Cumulative mean ``(1/n) sum_{i<=n} values[i]`` for every prefix."""
    v = np.asarray(values, dtype=np.float64)
    return np.cumsum(v) / np.arange(1, v.size + 1)


def averaged_grad_sq_curve(record):
    """Running average over workers and steps of the full gradient norm squared.

    Entry ``t-1`` averages ``|grad F(x_m^s)|^2`` over all workers and all
    local steps ``s <= t``. Needs a record produced with ``track_full_grad``.
    """
    if not record.full_grad_sq:
        raise ConfigError("record has no full-gradient trace; run with track_full_grad=True", key="track_full_grad")
    steps = max(s for s, _, _ in record.full_grad_sq)
    per_step = np.zeros(steps)
    counts = np.zeros(steps)
    for s, _, g2 in record.full_grad_sq:
        per_step[s - 1] += g2
        counts[s - 1] += 1
    return np.cumsum(per_step) / np.cumsum(counts)
