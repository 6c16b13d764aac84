"""Rank-based comparison of models: Friedman test and Dunn's post-hoc test."""
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import DegenerateInputError

ALPHA = 0.05


@dataclass
class StatTestResult:
    test: str
    statistic: float
    p_value: float
    labels: tuple = ()
    raw_p: np.ndarray = None
    adjusted_p: np.ndarray = None
    z: np.ndarray = None
    mean_ranks: np.ndarray = None
    alpha: float = ALPHA
    extra: dict = field(default_factory=dict)

    @property
    def significant(self):
        return self.p_value < self.alpha

    def to_text(self):
        lines = [f"test: {self.test}", f"statistic: {self.statistic:.6g}", f"p_value: {self.p_value:.6g}"]
        lines.append(f"alpha: {self.alpha}")
        if self.mean_ranks is not None:
            lines.append("mean_ranks: " + ", ".join(f"{l}={r:.4f}" for l, r in zip(self.labels, self.mean_ranks)))
        if self.adjusted_p is not None:
            lines.append("pairwise adjusted p (Bonferroni):")
            k = len(self.labels)
            for i in range(k):
                for j in range(i + 1, k):
                    flag = " *" if self.adjusted_p[i, j] < self.alpha else ""
                    lines.append(
                        f"  {self.labels[i]} vs {self.labels[j]}: z={self.z[i, j]:.4f} "
                        f"p={self.raw_p[i, j]:.6g} p_adj={self.adjusted_p[i, j]:.6g}{flag}"
                    )
        return "\n".join(lines) + "\n"


def _scores(scores):
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise DegenerateInputError(f"need a [subjects x models] matrix with both sides >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("scores must be finite")
    return x


def within_subject_ranks(scores):
    """Average ranks (1 = smallest) within each row."""
    return np.apply_along_axis(sps.rankdata, 1, _scores(scores))


def friedman_test(scores, labels=None, alpha=ALPHA):
    """Friedman chi-squared from rank sums with the tie correction.

    A matrix whose rows are all ties yields ``statistic = 0, p = 1``.
    """
    x = _scores(scores)
    n, k = x.shape
    ranks = within_subject_ranks(x)
    rank_sums = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * np.sum(rank_sums**2) - 3.0 * n * (k + 1)
    ties = 0.0
    for row in x:
        _, counts = np.unique(row, return_counts=True)
        ties += np.sum(counts**3 - counts)
    denom = 1.0 - ties / (n * (k**3 - k))
    if denom <= 0:
        chi2, p = 0.0, 1.0
    else:
        chi2 = max(chi2 / denom, 0.0)
        p = float(sps.chi2.sf(chi2, k - 1))
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(k))
    return StatTestResult("friedman", float(chi2), p, labels, mean_ranks=rank_sums / n, alpha=alpha)


def dunn_posthoc(scores, labels=None, alpha=ALPHA):
    """Dunn's pairwise z-tests on Friedman mean ranks, Bonferroni-adjusted.

    ``z_ij = (R_i - R_j) / sqrt(k (k + 1) / (6 n))`` with two-sided p-values.
    """
    x = _scores(scores)
    n, k = x.shape
    mean_ranks = within_subject_ranks(x).mean(axis=0)
    se = np.sqrt(k * (k + 1) / (6.0 * n))
    z = (mean_ranks[:, None] - mean_ranks[None, :]) / se
    raw = 2.0 * sps.norm.sf(np.abs(z))
    m = k * (k - 1) // 2
    adjusted = np.minimum(1.0, raw * m)
    np.fill_diagonal(raw, 1.0)
    np.fill_diagonal(adjusted, 1.0)
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(k))
    fr = friedman_test(x, labels, alpha)
    return StatTestResult(
        "dunn-bonferroni",
        fr.statistic,
        fr.p_value,
        labels,
        raw_p=raw,
        adjusted_p=adjusted,
        z=z,
        mean_ranks=mean_ranks,
        alpha=alpha,
        extra={"comparisons": m},
    )
