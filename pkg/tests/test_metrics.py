import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sialab.metrics import attack_success_rate, binomial_diff_ci, diversity_score, paired_diff_ci
from sialab.numerics import SeededRng


class FixedVictim:
    def __init__(self, pred):
        self.pred = np.asarray(pred)

    def classify(self, x):
        return self.pred


class RandomVictim:
    def __init__(self, seed):
        self.rng = SeededRng(seed)

    def classify(self, x):
        return self.rng.integers(0, 10, size=len(x))


class Identity:
    """Extractor whose only feature map is the input itself."""

    def features(self, x):
        return [np.asarray(x)]


def test_asr_counts():
    labels = np.arange(10)
    pred = labels.copy()
    pred[:7] += 1
    assert attack_success_rate(FixedVictim(pred), np.zeros((10, 1, 2, 2)), labels) == 0.7
    assert attack_success_rate(FixedVictim(labels), np.zeros((10, 1, 2, 2)), labels) == 0.0


def test_asr_random_victim():
    labels = SeededRng(0).integers(0, 10, size=10_000)
    rate = attack_success_rate(RandomVictim(1), np.zeros((10_000, 1, 1, 1)), labels)
    assert 0.88 <= rate <= 0.92


def test_asr_rejects_bad_input():
    with pytest.raises(ValueError):
        attack_success_rate(FixedVictim([]), np.zeros((0, 1, 2, 2)), [])
    with pytest.raises(ValueError):
        attack_success_rate(FixedVictim([0]), np.zeros((2, 1, 2, 2)), [0])


def test_diversity_identity_reduction():
    rng = SeededRng(2)
    x = rng.uniform(size=(3, 5, 4))
    y = rng.uniform(size=(3, 5, 4))
    direct = sum(np.sqrt(((x[:, i, j] - y[:, i, j]) ** 2).sum()) for i in range(5) for j in range(4)) / 20
    assert diversity_score(Identity(), x, y) == pytest.approx(direct, rel=1e-12)


def test_diversity_zero_and_shape_check():
    x = SeededRng(3).uniform(size=(1, 4, 4))
    assert diversity_score(Identity(), x, x) == 0.0
    with pytest.raises(ValueError):
        diversity_score(Identity(), x, x[:, :3])


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_diversity_symmetric(seed):
    rng = SeededRng(seed)
    x, y = rng.uniform(size=(2, 3, 3)), rng.uniform(size=(2, 3, 3))
    assert diversity_score(Identity(), x, y) == diversity_score(Identity(), y, x)


def test_dense_features_count_as_one_site():
    class Flat:
        def features(self, x):
            return [np.asarray(x).ravel()]

    x, y = np.zeros((1, 2, 2)), np.ones((1, 2, 2))
    assert diversity_score(Flat(), x, y) == pytest.approx(2.0 / 4)


def test_confidence_intervals():
    lo, hi = binomial_diff_ci(0.6, 0.4, 500, 500)
    assert lo < 0.2 < hi and lo > 0
    se = np.sqrt(0.24 / 500 * 2)
    assert hi - lo == pytest.approx(2 * 1.959964 * se)
    a = np.array([1, 1, 0, 1] * 50)
    b = np.array([0, 1, 0, 1] * 50)
    lo, hi = paired_diff_ci(a, b)
    assert lo > 0 and hi < 0.5
    assert paired_diff_ci(a, a) == (0.0, 0.0)
