import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grawalab.errors import SignatureError
from grawalab.params import LayeredGradient, LayeredParams, uniform_mean, weighted_sum


def make(seed=0, shapes=((2, 3), (4,), (1,))):
    rng = np.random.default_rng(seed)
    return LayeredParams.from_layers([rng.standard_normal(s) for s in shapes])


def test_layers_round_trip():
    a = np.arange(6.0).reshape(2, 3)
    b = np.array([7.0, 8.0])
    p = LayeredParams.from_layers([a, b])
    assert p.num_layers == 2
    assert p.total_dim == 8
    np.testing.assert_array_equal(p.layer(0), a)
    np.testing.assert_array_equal(p.layers[1], b)
    assert p.signature == ((2, 3), (2,))


def test_layers_are_views():
    p = make()
    p.layer(1)[0] = 123.0
    assert p.flat[6] == 123.0


def test_norms():
    p = LayeredParams.from_layers([np.array([3.0, 4.0]), np.array([[1.0, 2.0], [2.0, 4.0]])])
    np.testing.assert_allclose(p.layer_norms(), [5.0, 5.0])
    assert p.norm() == pytest.approx(np.sqrt(50.0))


def test_arithmetic_requires_matching_signature():
    p = make()
    q = make(shapes=((3, 2), (4,), (1,)))
    with pytest.raises(SignatureError):
        p + q
    r = make(1)
    np.testing.assert_array_equal((p + r).flat, p.flat + r.flat)
    np.testing.assert_array_equal((2 * p - r).flat, 2 * p.flat - r.flat)
    np.testing.assert_array_equal((-p / 2).flat, -p.flat / 2)


def test_bad_construction():
    with pytest.raises(SignatureError):
        LayeredParams(np.zeros(5), [(2, 3)])
    with pytest.raises(SignatureError):
        LayeredParams.from_layers([])
    with pytest.raises(SignatureError):
        LayeredParams(np.zeros(0), [(0,)])


def test_copy_is_independent():
    p = make()
    q = p.copy()
    q.flat[0] += 1
    assert p != q


def test_gradient_keeps_source():
    g = LayeredGradient(np.ones(3), [(3,)], source="single-sample")
    assert (g * 2).source == "single-sample"
    assert isinstance(g + g, LayeredGradient)


def test_uniform_mean_matches_numpy():
    ps = [make(s) for s in range(5)]
    np.testing.assert_allclose(uniform_mean(ps).flat, np.mean([p.flat for p in ps], axis=0), rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.integers(0, 1000))
def test_weighted_sum_is_linear(weights, seed):
    ps = [make(seed + i) for i in range(len(weights))]
    out = weighted_sum(ps, weights)
    expect = sum(w * p.flat for w, p in zip(weights, ps))
    np.testing.assert_allclose(out.flat, expect, atol=1e-12)
