import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csrecon.errors import DegenerateInputError
from csrecon.stats import dunn_posthoc, friedman_test, within_subject_ranks

# fixtures: (scores [subjects x models], frozen Friedman chi^2)
TEXTBOOK = np.array([
    [9.0, 7.0, 8.0],
    [9.5, 6.5, 7.0],
    [5.0, 8.0, 4.0],
    [7.5, 5.0, 6.0],
    [9.5, 7.5, 7.0],
    [7.5, 6.0, 5.0],
    [8.0, 6.0, 7.0],
    [7.0, 6.5, 4.0],
    [8.5, 7.0, 6.5],
    [6.0, 7.0, 3.0],
])
TIED = np.array([
    [1.0, 1.0, 2.0, 3.0],
    [2.0, 2.0, 2.0, 1.0],
    [0.5, 0.7, 0.7, 0.9],
    [3.0, 1.0, 2.0, 2.0],
    [1.0, 2.0, 3.0, 4.0],
])
TWO = np.array([[0.1, 0.2], [0.3, 0.25], [0.5, 0.6], [0.2, 0.4], [0.9, 1.0], [0.3, 0.35]])


def hand_ranks(row):
    order = sorted(range(len(row)), key=lambda i: row[i])
    ranks = [0.0] * len(row)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and row[order[j + 1]] == row[order[i]]:
            j += 1
        for p in range(i, j + 1):
            ranks[order[p]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def hand_friedman(scores):
    n, k = len(scores), len(scores[0])
    ranks = [hand_ranks(list(r)) for r in scores]
    sums = [sum(r[j] for r in ranks) for j in range(k)]
    chi2 = 12 / (n * k * (k + 1)) * sum(s * s for s in sums) - 3 * n * (k + 1)
    ties = 0
    for row in scores:
        for v in set(row):
            t = list(row).count(v)
            ties += t**3 - t
    return chi2 / (1 - ties / (n * (k**3 - k)))


def chi2_sf(x, dof):
    """Survival function for even or odd dof via the regularized gamma series."""
    a, x2 = dof / 2, x / 2
    term = total = 1 / a
    for n in range(1, 500):
        term *= x2 / (a + n)
        total += term
    return 1 - math.exp(-x2 + a * math.log(x2) - math.lgamma(a)) * total


@pytest.mark.parametrize("scores,frozen", [(TEXTBOOK, 10.4), (TIED, 3.0), (TWO, 8 / 3)])
def test_friedman_matches_hand_oracle(scores, frozen):
    res = friedman_test(scores)
    assert abs(res.statistic - hand_friedman(scores.tolist())) < 1e-10
    assert abs(res.statistic - frozen) < 1e-10
    assert abs(res.p_value - chi2_sf(frozen, scores.shape[1] - 1)) < 1e-10


def hand_dunn(scores):
    n, k = len(scores), len(scores[0])
    ranks = [hand_ranks(list(r)) for r in scores]
    mean = [sum(r[j] for r in ranks) / n for j in range(k)]
    se = math.sqrt(k * (k + 1) / (6 * n))
    m = k * (k - 1) // 2
    out = {}
    for i, j in itertools.combinations(range(k), 2):
        z = (mean[i] - mean[j]) / se
        p = math.erfc(abs(z) / math.sqrt(2))
        out[(i, j)] = (z, p, min(1.0, m * p))
    return out


@pytest.mark.parametrize("scores", [TEXTBOOK, TIED, TWO])
def test_dunn_matches_hand_oracle(scores):
    res = dunn_posthoc(scores)
    for (i, j), (z, p, adj) in hand_dunn(scores.tolist()).items():
        assert abs(res.z[i, j] - z) < 1e-10
        assert abs(res.raw_p[i, j] - p) < 1e-10
        assert abs(res.adjusted_p[i, j] - adj) < 1e-10
    np.testing.assert_array_equal(res.adjusted_p, res.adjusted_p.T)
    assert np.all(res.adjusted_p >= res.raw_p) and np.all(res.adjusted_p <= 1)


def test_identical_models():
    scores = np.tile(np.arange(6.0)[:, None], (1, 4))
    res = friedman_test(scores)
    assert res.statistic == 0 and res.p_value == 1


@given(st.integers(0, 10_000))
def test_friedman_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((7, 4))
    assert friedman_test(np.exp(3 * x) + 2).statistic == pytest.approx(friedman_test(x).statistic, abs=1e-12)


@given(st.integers(0, 10_000))
def test_dunn_permutation_symmetric(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((8, 4))
    perm = rng.permutation(4)
    a, b = dunn_posthoc(x), dunn_posthoc(x[:, perm])
    np.testing.assert_allclose(b.adjusted_p, a.adjusted_p[np.ix_(perm, perm)], atol=1e-15)


def test_degenerate_sizes():
    for bad in (np.zeros((1, 3)), np.zeros((3, 1)), np.zeros(4)):
        with pytest.raises(DegenerateInputError):
            friedman_test(bad)


def test_ranks_average_ties():
    np.testing.assert_array_equal(within_subject_ranks([[3, 1, 3, 2], [0, 0, 0, 1]]), [[3.5, 1, 3.5, 2], [2, 2, 2, 4]])


def test_text_report():
    text = dunn_posthoc(TEXTBOOK, labels=["a", "b", "c"]).to_text()
    assert "a vs b" in text and "Bonferroni" in text
