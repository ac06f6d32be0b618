"""Layered parameter vectors.

A model is an ordered list of dense tensors ("layer units"). Internally the
tensors live in one contiguous float64 vector so that the arithmetic used by
the distributed policies (weighted sums, convex combinations) is a single
numpy call; ``layers`` hands out reshaped views into that vector.
"""
from __future__ import annotations

import numpy as np

from .errors import SignatureError


class LayeredParams:
    __slots__ = ("flat", "shapes", "offsets")

    def __init__(self, flat, shapes, offsets=None):
        self.flat = np.asarray(flat, dtype=np.float64)
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        if offsets is None:
            sizes = [int(np.prod(s)) for s in self.shapes]
            if not sizes or min(sizes) < 1:
                raise SignatureError("every layer needs at least one entry")
            offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.offsets = offsets
        if self.flat.ndim != 1 or self.flat.size != self.offsets[-1]:
            raise SignatureError(
                f"flat vector of size {self.flat.size} does not match shapes {self.shapes}"
            )

    @classmethod
    def from_layers(cls, layers):
        arrays = [np.asarray(a, dtype=np.float64) for a in layers]
        if not arrays:
            raise SignatureError("at least one layer is required")
        flat = np.concatenate([a.ravel() for a in arrays])
        return cls(flat, [a.shape for a in arrays])

    @classmethod
    def zeros_like(cls, other):
        return cls(np.zeros_like(other.flat), other.shapes, other.offsets)

    def like(self, flat):
        """New instance with this signature and the given flat data.

        Skips validation; ``flat`` must be a float64 vector of the right size.
        """
        out = object.__new__(type(self))
        out.flat = flat
        out.shapes = self.shapes
        out.offsets = self.offsets
        return out

    @property
    def layers(self):
        return [
            self.flat[a:b].reshape(s)
            for a, b, s in zip(self.offsets[:-1], self.offsets[1:], self.shapes)
        ]

    def layer(self, k):
        a, b = self.offsets[k], self.offsets[k + 1]
        return self.flat[a:b].reshape(self.shapes[k])

    @property
    def num_layers(self):
        return len(self.shapes)

    @property
    def total_dim(self):
        return int(self.offsets[-1])

    @property
    def signature(self):
        return self.shapes

    def check_signature(self, other):
        if self.shapes != other.shapes:
            raise SignatureError(f"signature mismatch: {self.shapes} vs {other.shapes}")

    def copy(self):
        return self.like(self.flat.copy())

    def norm(self):
        """Euclidean norm of all layers flattened together."""
        return float(np.sqrt(np.dot(self.flat, self.flat)))

    def layer_norms(self):
        """Frobenius norm of every layer."""
        sq = np.add.reduceat(self.flat * self.flat, self.offsets[:-1])
        return np.sqrt(sq)

    def is_finite(self):
        return bool(np.isfinite(self.flat).all())

    def _other_flat(self, other):
        if isinstance(other, LayeredParams):
            self.check_signature(other)
            return other.flat
        return other

    def __add__(self, other):
        return self.like(self.flat + self._other_flat(other))

    def __sub__(self, other):
        return self.like(self.flat - self._other_flat(other))

    def __mul__(self, scalar):
        return self.like(self.flat * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self.like(self.flat / scalar)

    def __neg__(self):
        return self.like(-self.flat)

    def __eq__(self, other):
        if not isinstance(other, LayeredParams):
            return NotImplemented
        return self.shapes == other.shapes and np.array_equal(self.flat, other.flat)

    __hash__ = None

    def __repr__(self):
        return f"{type(self).__name__}(shapes={self.shapes}, norm={self.norm():.6g})"


class LayeredGradient(LayeredParams):
    """Gradient with the same signature as its parameters.

    ``source`` is ``"single-sample"`` or ``"batch-accumulated"``.
    """

    __slots__ = ("source",)

    def __init__(self, flat, shapes, offsets=None, source="batch-accumulated"):
        super().__init__(flat, shapes, offsets)
        self.source = source

    def like(self, flat):
        out = LayeredParams.like(self, flat)
        out.source = self.source
        return out


def weighted_sum(params_list, weights):
    """``sum_m weights[m] * params_list[m]`` as a new LayeredParams.

    Accumulates in worker order so that callers with identical weights get
    bit-identical results.
    """
    first = params_list[0]
    out = first.flat * weights[0]
    for p, w in zip(params_list[1:], weights[1:]):
        first.check_signature(p)
        out = out + p.flat * w
    return LayeredParams(out, first.shapes, first.offsets)


def uniform_mean(params_list):
    m = len(params_list)
    return weighted_sum(params_list, [1.0 / m] * m)
