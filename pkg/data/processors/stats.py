"""
Friedman test over blocks x treatments and a mean-rank post-hoc comparison.
"""

import logging
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from data.models.errors import DataValidationError, OmnibusNotSignificantError
from data.models.report_schemas import FriedmanResult, PostHocResult

logger = logging.getLogger(__name__)


def friedman(matrix: np.ndarray, treatments: Optional[Sequence[str]] = None) -> FriedmanResult:
    """Friedman chi-square with mid-ranks and tie correction; rows are blocks, columns treatments"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2 or matrix.shape[1] < 2:
        raise DataValidationError(f"Friedman test needs at least 2 blocks x 2 treatments, got {matrix.shape}")
    n, k = matrix.shape
    names = list(treatments) if treatments is not None else [f"t{j}" for j in range(k)]
    if len(names) != k:
        raise DataValidationError(f"{len(names)} treatment names for {k} columns")

    ranks = np.apply_along_axis(stats.rankdata, 1, matrix)
    rank_sums = ranks.sum(axis=0)
    statistic = 12.0 / (n * k * (k + 1)) * np.sum(rank_sums ** 2) - 3.0 * n * (k + 1)

    ties = 0.0
    for row in matrix:
        _, counts = np.unique(row, return_counts=True)
        ties += np.sum(counts ** 3 - counts)
    correction = 1.0 - ties / (n * k * (k * k - 1))

    if correction <= 0:
        chi2 = 0.0
    else:
        chi2 = max(0.0, float(statistic / correction))
    p_value = float(stats.chi2.sf(chi2, k - 1)) if chi2 > 0 else 1.0

    return FriedmanResult(
        chi2=chi2,
        df=k - 1,
        p_value=min(1.0, p_value),
        n_blocks=n,
        treatments=names,
        mean_ranks={name: float(r) for name, r in zip(names, rank_sums / n)}
    )


def format_friedman(result: FriedmanResult) -> str:
    if result.p_value < 0.001:
        p_text = "p<.001"
    else:
        p_text = f"p={result.p_value:.3f}".replace("0.", ".", 1)
    return f"X2({result.df})={result.chi2:.2f}, {p_text}"


def critical_difference(k: int, n: int, alpha: float = 0.05) -> float:
    """Nemenyi critical difference for mean ranks of k treatments over n blocks"""
    q = stats.studentized_range.ppf(1.0 - alpha, k, np.inf) / np.sqrt(2.0)
    return float(q * np.sqrt(k * (k + 1) / (6.0 * n)))


def posthoc_mean_ranks(
    result: FriedmanResult, alpha: float = 0.05, require_significant: bool = True
) -> PostHocResult:
    """Pairwise |mean rank difference| > critical difference; lower rank is better"""
    if require_significant and result.p_value >= alpha:
        raise OmnibusNotSignificantError(
            f"Friedman test not significant (p={result.p_value:.4f} >= {alpha}); post-hoc comparison skipped"
        )
    names = result.treatments
    k = len(names)
    cd = critical_difference(k, result.n_blocks, alpha)
    ranks = np.array([result.mean_ranks[name] for name in names])

    significant = [[False] * k for _ in range(k)]
    for i, j in combinations(range(k), 2):
        flag = bool(abs(ranks[i] - ranks[j]) > cd)
        significant[i][j] = significant[j][i] = flag

    best = None
    leader = int(np.argmin(ranks))
    if all(significant[leader][j] for j in range(k) if j != leader):
        best = names[leader]

    logger.info(f"Post-hoc critical difference {cd:.3f} over {k} treatments; best: {best or 'none'}")
    return PostHocResult(
        alpha=alpha,
        critical_difference=cd,
        treatments=names,
        significant=significant,
        best=best
    )
