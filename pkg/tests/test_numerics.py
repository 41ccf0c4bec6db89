import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sialab.numerics import SeededRng, clip, dot, l1_norm, rng_int, rng_substream, rng_uniform, sign

finite = st.floats(-10, 10, allow_nan=False, width=32)
tensors = arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)), elements=finite)


def test_clip_examples():
    out = clip(np.array([-0.5, 0.3, 1.2], np.float32), 0, 1)
    np.testing.assert_array_equal(out, np.array([0.0, 0.3, 1.0], np.float32))
    z = np.zeros((2, 3, 3), np.float32)
    np.testing.assert_array_equal(clip(z, 0, 1), z)
    np.testing.assert_array_equal(clip(np.array([0.2, 0.8], np.float32), 0.5, 0.5), [0.5, 0.5])


def test_clip_rejects_empty_interval():
    with pytest.raises(ValueError):
        clip(np.zeros(3), 1.0, 0.0)


def test_sign_examples():
    np.testing.assert_array_equal(sign(np.array([-2.0, 0.0, 3.0], np.float32)), [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(sign(np.full((2, 2), 0.3, np.float32)), np.ones((2, 2)))


def test_l1_and_dot_examples():
    assert l1_norm(np.array([-2.0, 3.0])) == 5.0
    assert l1_norm(np.zeros(4)) == 0.0
    assert l1_norm(np.full(4, 0.5)) == 2.0
    assert dot(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0
    assert dot(np.eye(3)[0], np.eye(3)[2]) == 0.0
    u = np.array([0.6, 0.8])
    assert dot(u, u) == pytest.approx(1.0)


def test_dot_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        dot(np.zeros(3), np.zeros(4))


@given(tensors)
def test_clip_idempotent(t):
    once = clip(t, 0, 1)
    np.testing.assert_array_equal(clip(once, 0, 1), once)
    assert once.min() >= 0 and once.max() <= 1


@given(tensors)
def test_sign_idempotent_and_odd(t):
    s = sign(t)
    np.testing.assert_array_equal(sign(s), s)
    np.testing.assert_array_equal(sign(-t), -s)


@given(tensors)
def test_l1_nonnegative(t):
    n = l1_norm(t)
    assert n >= 0
    assert (n == 0) == (not np.any(t))


@settings(max_examples=50)
@given(st.integers(0, 2**32), st.floats(-3, 3), st.floats(-3, 3))
def test_dot_symmetric_bilinear(seed, a, b):
    r = SeededRng(seed)
    x, y, z = (r.normal(size=(2, 4, 4)).astype(np.float32) for _ in range(3))
    assert dot(x, y) == dot(y, x)
    lhs = dot(a * x + b * y, z)
    rhs = a * dot(x, z) + b * dot(y, z)
    assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-5)


def test_rng_examples():
    assert rng_int(SeededRng(1), 0, 1) == 0
    a, b = SeededRng(42), SeededRng(42)
    assert [rng_uniform(a, 0, 1) for _ in range(2)] == [rng_uniform(b, 0, 1) for _ in range(2)]


def test_rng_uniform_mean():
    draws = SeededRng(123).uniform(0, 1, size=100_000)
    assert 0.49 <= draws.mean() <= 0.51


def test_rng_empty_ranges_rejected():
    r = SeededRng(0)
    with pytest.raises(ValueError):
        rng_uniform(r, 1, 1)
    with pytest.raises(ValueError):
        rng_int(r, 3, 3)


def test_substream_is_pure_and_distinct():
    parent = SeededRng(7)
    before = parent.key
    s1 = rng_substream(parent, 1)
    s1_again = rng_substream(parent, 1)
    assert parent.key == before
    # deriving does not advance the parent: its next draw matches a fresh generator
    assert parent.uniform() == SeededRng(7).uniform()
    assert s1.uniform(size=5).tolist() == s1_again.uniform(size=5).tolist()
    s2 = parent.substream(2)
    assert s2.key != s1.key
    assert not np.array_equal(s2.uniform(size=8), parent.substream(1).uniform(size=8))


def test_bit_identical_sequences():
    a = SeededRng(99, stream_id=3)
    b = SeededRng(99, stream_id=3)
    np.testing.assert_array_equal(a.normal(size=50), b.normal(size=50))
    np.testing.assert_array_equal(a.integers(0, 1000, size=50), b.integers(0, 1000, size=50))


def test_substreams_uncorrelated():
    root = SeededRng(5)
    xs = np.stack([root.substream(i).uniform(size=2000) for i in range(8)])
    c = np.corrcoef(xs)
    off = c[~np.eye(8, dtype=bool)]
    assert np.abs(off).max() < 0.1
