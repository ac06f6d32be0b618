"""Differentiable objectives and data sharding.

Three objective kinds are supported:

* ``vincent2d`` -- ``f(x, y) = -sin(10 ln x) - sin(10 ln y)``, each coordinate
  is its own layer, evaluated full-batch.
* ``quadratic`` -- ``f(x) = 1/2 x^T A x`` with optional additive Gaussian
  gradient noise.
* ``mlp_classifier`` -- a dense tanh/relu network with softmax cross-entropy
  on a synthetic 2-D dataset. One dense layer (weights plus bias row) is one
  layer unit.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DomainError, SignatureError
from .params import LayeredGradient, LayeredParams

KINDS = ("vincent2d", "quadratic", "mlp_classifier")


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ConfigError("batch must contain at least one sample", key="batch")
        if len(self.inputs) != len(self.targets):
            raise ConfigError("inputs and targets have different row counts", key="batch")

    @property
    def size(self):
        return len(self.inputs)

    def take(self, idx):
        return Batch(self.inputs[idx], self.targets[idx])


# Analytic objectives ignore their data; they are evaluated on this placeholder.
FULL_BATCH = Batch(np.zeros((1, 0)), np.zeros(1))


class Objective:
    kind = None
    convex = False
    dataset = None
    test_set = None
    f_star = None
    stochastic = False

    def __init__(self, shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        self._template = LayeredParams(np.zeros(sum(int(np.prod(s)) for s in self.shapes)), self.shapes)

    @property
    def dim(self):
        return self._template.total_dim

    def full_batch(self):
        return self.dataset if self.dataset is not None else FULL_BATCH

    def params_from_flat(self, flat):
        return self._template.like(np.array(flat, dtype=np.float64))

    def _check(self, params):
        if params.shapes != self.shapes:
            raise SignatureError(f"{self.kind} expects shapes {self.shapes}, got {params.shapes}")

    def _gradient(self, params, flat):
        out = object.__new__(LayeredGradient)
        out.flat = flat
        out.shapes = params.shapes
        out.offsets = params.offsets
        out.source = "batch-accumulated"
        return out

    def project(self, params):
        return params

    def eval(self, params, batch):
        raise NotImplementedError

    def grad(self, params, batch, rng=None):
        raise NotImplementedError

    def init_params(self, rng):
        raise NotImplementedError


class Vincent2D(Objective):
    kind = "vincent2d"
    lower = 0.25
    upper = 10.0
    f_star = -2.0

    def __init__(self):
        super().__init__([(1,), (1,)])

    def _checked(self, params):
        self._check(params)
        x = params.flat
        if not x.min() > 0:
            raise DomainError(f"vincent2d is defined for positive coordinates, got {x.tolist()}")
        return x

    def eval(self, params, batch=None):
        x = self._checked(params)
        return float(-np.sin(10.0 * np.log(x)).sum())

    def grad(self, params, batch=None, rng=None):
        x = self._checked(params)
        g = -10.0 * np.cos(10.0 * np.log(x)) / x
        return self._gradient(params, g)

    def second_derivatives(self, params):
        """Diagonal of the Hessian (the function is separable)."""
        x = self._checked(params)
        u = 10.0 * np.log(x)
        return (100.0 * np.sin(u) + 10.0 * np.cos(u)) / x**2

    def project(self, params):
        return params.like(np.minimum(np.maximum(params.flat, self.lower), self.upper))

    def init_params(self, rng):
        return self.params_from_flat(rng.uniform(self.lower, self.upper, size=2))


class Quadratic(Objective):
    kind = "quadratic"
    convex = True
    f_star = 0.0

    def __init__(self, A, noise_sigma=0.0, layer_sizes=None):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError("quadratic Hessian must be square", key="objective")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12):
            raise ConfigError("quadratic Hessian must be symmetric", key="objective")
        A = 0.5 * (A + A.T)
        if np.linalg.eigvalsh(A).min() <= 0:
            raise ConfigError("quadratic Hessian must be positive definite", key="objective")
        if noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0", key="noise_sigma")
        d = A.shape[0]
        layer_sizes = list(layer_sizes) if layer_sizes else [d]
        if sum(layer_sizes) != d or min(layer_sizes) < 1:
            raise ConfigError(f"layer_sizes {layer_sizes} do not partition dimension {d}", key="layer_sizes")
        super().__init__([(n,) for n in layer_sizes])
        self.A = A
        self.noise_sigma = float(noise_sigma)
        self.stochastic = self.noise_sigma > 0
        eig = np.linalg.eigvalsh(A)
        self.L = float(eig[-1])
        self.m = float(eig[0])

    def eval(self, params, batch=None):
        self._check(params)
        x = params.flat
        return float(0.5 * x @ self.A @ x)

    def grad(self, params, batch=None, rng=None):
        """Exact gradient, plus N(0, sigma^2) noise per coordinate when ``rng`` is given."""
        self._check(params)
        g = self.A @ params.flat
        if rng is not None and self.noise_sigma > 0:
            g = g + self.noise_sigma * rng.standard_normal(g.shape)
        return self._gradient(params, g)

    def hessian(self):
        return self.A

    def minimizer(self):
        return self.params_from_flat(np.zeros(self.dim))

    def init_params(self, rng):
        return self.params_from_flat(rng.standard_normal(self.dim))


def _spirals(n, noise, rng):
    labels = rng.integers(0, 2, size=n)
    r = rng.uniform(0.05, 1.0, size=n)
    theta = 3.0 * np.pi * r + np.pi * labels
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return pts + noise * rng.standard_normal(pts.shape), labels


def _blobs(n, noise, rng):
    labels = rng.integers(0, 2, size=n)
    centers = np.array([[-0.5, 0.0], [0.5, 0.0]])
    return centers[labels] + (0.3 + noise) * rng.standard_normal((n, 2)), labels


DATASETS = {"spirals": _spirals, "blobs": _blobs}


class MLPClassifier(Objective):
    kind = "mlp_classifier"

    def __init__(self, widths, activation="tanh", train=None, test=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError("mlp widths need >= 2 entries, all >= 1", key="widths")
        if activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {activation!r}", key="activation")
        super().__init__([(a + 1, b) for a, b in zip(widths[:-1], widths[1:])])
        self.widths = widths
        self.activation = activation
        self.dataset = train
        self.test_set = test

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def _forward(self, params, x):
        acts = [x]
        pre = []
        a = x
        layers = params.layers
        for k, W in enumerate(layers):
            z = a @ W[:-1] + W[-1]
            pre.append(z)
            a = z if k == len(layers) - 1 else self._act(z)
            acts.append(a)
        return pre, acts

    def logits(self, params, inputs):
        self._check(params)
        return self._forward(params, inputs)[1][-1]

    @staticmethod
    def _xent(logits, y):
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        return shifted, logz, float(np.mean(logz - shifted[np.arange(len(y)), y]))

    def eval(self, params, batch):
        self._check(params)
        y = batch.targets.astype(int)
        return self._xent(self._forward(params, batch.inputs)[1][-1], y)[2]

    def grad(self, params, batch, rng=None):
        self._check(params)
        y = batch.targets.astype(int)
        n = len(y)
        pre, acts = self._forward(params, batch.inputs)
        shifted, logz, _ = self._xent(acts[-1], y)
        dz = np.exp(shifted - logz[:, None])
        dz[np.arange(n), y] -= 1.0
        dz /= n
        layers = params.layers
        out = np.empty_like(params.flat)
        for k in range(len(layers) - 1, -1, -1):
            W = layers[k]
            a_prev = acts[k]
            dW = np.empty_like(W)
            dW[:-1] = a_prev.T @ dz
            dW[-1] = dz.sum(axis=0)
            out[params.offsets[k]:params.offsets[k + 1]] = dW.ravel()
            if k > 0:
                da = dz @ W[:-1].T
                if self.activation == "tanh":
                    dz = da * (1.0 - a_prev**2)
                else:
                    dz = da * (pre[k - 1] > 0)
        return self._gradient(params, out)

    def error_rate(self, params, batch):
        """Misclassification rate in percent."""
        pred = self.logits(params, batch.inputs).argmax(axis=1)
        return 100.0 * float(np.mean(pred != batch.targets.astype(int)))

    def init_params(self, rng):
        layers = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            W = np.zeros((a + 1, b))
            W[:-1] = rng.standard_normal((a, b)) / np.sqrt(a)
            layers.append(W)
        return LayeredParams.from_layers(layers)


@dataclass
class ObjectiveSpec:
    kind: str = "quadratic"
    dim: int = 10
    noise_sigma: float = 0.0
    diag: list | None = None
    eig_min: float = 1.0
    eig_max: float = 2.0
    rotate: bool = True
    layer_sizes: list | None = None
    widths: list = field(default_factory=lambda: [2, 16, 16, 2])
    activation: str = "tanh"
    dataset: str = "spirals"
    n_train: int = 512
    n_test: int = 512
    data_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}", key="kind")
        if self.kind == "vincent2d":
            self.dim = 2
        if self.kind == "quadratic":
            if self.diag is not None:
                self.dim = len(self.diag)
            if self.dim < 1:
                raise ConfigError("dim must be >= 1", key="dim")
            if not 0 < self.eig_min <= self.eig_max:
                raise ConfigError("need 0 < eig_min <= eig_max", key="eig_min")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0", key="noise_sigma")
        if self.kind == "mlp_classifier":
            if self.dataset not in DATASETS:
                raise ConfigError(f"unknown dataset {self.dataset!r}", key="dataset")
            if self.n_train < 1 or self.n_test < 1:
                raise ConfigError("n_train and n_test must be >= 1", key="n_train")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown objective key {key!r}", key=key)
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def build(self):
        if self.kind == "vincent2d":
            return Vincent2D()
        if self.kind == "quadratic":
            if self.diag is not None:
                A = np.diag(np.asarray(self.diag, dtype=np.float64))
            else:
                rng = np.random.default_rng(self.seed)
                eig = np.linspace(self.eig_min, self.eig_max, self.dim)
                if self.rotate:
                    Q, _ = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))
                    A = (Q * eig) @ Q.T
                    A = 0.5 * (A + A.T)
                else:
                    A = np.diag(eig)
            return Quadratic(A, self.noise_sigma, self.layer_sizes)
        rng = np.random.default_rng(self.seed)
        make = DATASETS[self.dataset]
        x, y = make(self.n_train + self.n_test, self.data_noise, rng)
        mu, sd = x[: self.n_train].mean(0), x[: self.n_train].std(0)
        x = (x - mu) / sd
        train = Batch(x[: self.n_train], y[: self.n_train])
        test = Batch(x[self.n_train:], y[self.n_train:])
        if self.widths[0] != 2:
            raise ConfigError("synthetic datasets are 2-D; widths[0] must be 2", key="widths")
        return MLPClassifier(self.widths, self.activation, train, test)


def make_objective(spec):
    if isinstance(spec, dict):
        spec = ObjectiveSpec.from_dict(spec)
    return spec.build()


class ShardStream:
    """Endless stream of mini-batches over one worker's shard.

    The shard is reshuffled at the start of every epoch; the last batch of an
    epoch may be smaller than ``batch_size``.
    """

    def __init__(self, dataset, indices, batch_size, rng):
        self.dataset = dataset
        self.indices = np.asarray(indices)
        self.batch_size = max(1, min(int(batch_size), len(self.indices)))
        self.rng = rng
        self.epoch = 0
        self._order = None
        self._pos = 0

    def next_batch(self):
        if self._order is None or self._pos >= len(self._order):
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
            self.epoch += 1
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.dataset.take(idx)


def make_shards(dataset, M, seed, batch_size=32):
    """Split ``dataset`` into ``M`` disjoint, exhaustive shards.

    Returns one :class:`ShardStream` per worker, each with its own RNG.
    """
    if M <= 0:
        raise ConfigError("worker count must be positive", key="workers")
    if dataset.size < M:
        raise ConfigError(f"dataset of {dataset.size} samples cannot be split over {M} workers", key="workers")
    perm = np.random.default_rng([seed, 7]).permutation(dataset.size)
    parts = np.array_split(perm, M)
    return [
        ShardStream(dataset, np.sort(part), batch_size, np.random.default_rng([seed, 8, m]))
        for m, part in enumerate(parts)
    ]
