"""Exact statistics for classifier evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import beta


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    class_order: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_order)
        if counts.shape != (k, k):
            raise ValueError(f"counts must be {k}x{k}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        object.__setattr__(self, "class_order", tuple(str(c) for c in self.class_order))
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_predictions(cls, class_order: Sequence[str], true: Sequence[str], predicted: Sequence[str]):
        index = {c: i for i, c in enumerate(class_order)}
        counts = np.zeros((len(class_order), len(class_order)), dtype=np.int64)
        for t, p in zip(true, predicted, strict=True):
            if t not in index or p not in index:
                raise ValueError(f"label outside class order: {t!r} / {p!r}")
            counts[index[t], index[p]] += 1
        return cls(tuple(class_order), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    def to_dict(self) -> dict:
        return {"class_order": list(self.class_order), "counts": self.counts.tolist()}


@dataclass(frozen=True)
class BinomialCI:
    successes: int
    trials: int
    level: float
    lower: float
    upper: float

    def to_dict(self) -> dict:
        return {"successes": self.successes, "trials": self.trials, "level": self.level,
                "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class FisherResult:
    table: tuple[tuple[int, int], tuple[int, int]]
    p_two_sided: float
    flagged: str | None = field(default=None)

    def to_dict(self) -> dict:
        return {"table": [list(r) for r in self.table], "p_two_sided": self.p_two_sided, "flagged": self.flagged}


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return cm.correct / cm.total


def per_class_recall(cm: ConfusionMatrix, label: str) -> float:
    i = cm.class_order.index(str(label))
    row = int(cm.counts[i].sum())
    if row == 0:
        raise ValueError(f"no true {label} records in the confusion matrix")
    return int(cm.counts[i, i]) / row


def clopper_pearson(successes: int, trials: int, level: float = 0.95) -> BinomialCI:
    """Exact equal-tailed binomial interval, via beta quantiles of the binomial tails."""
    if not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    alpha = 1.0 - level
    k, n = successes, trials
    lower = 0.0 if k == 0 else float(beta.ppf(alpha / 2, k, n - k + 1))
    upper = 1.0 if k == n else float(beta.ppf(1 - alpha / 2, k + 1, n - k))
    return BinomialCI(k, n, level, lower, upper)


def _hypergeom_weights(r1: int, c1: int, n: int) -> dict[int, int]:
    # weight(a) = C(c1, a) * C(n - c1, r1 - a); probability = weight / C(n, r1)
    lo, hi = max(0, r1 - (n - c1)), min(r1, c1)
    return {a: math.comb(c1, a) * math.comb(n - c1, r1 - a) for a in range(lo, hi + 1)}


def fisher_exact(table, method: str = "minlike") -> FisherResult:
    """Two-sided Fisher exact test for a 2×2 table.

    ``minlike`` sums the probabilities of all tables (fixed margins) at most
    as probable as the observed one; ``central`` doubles the smaller
    one-sided tail. Arithmetic is exact integer/rational until the final
    division. A zero margin yields p = 1 with a flag.
    """
    (a, b), (c, d) = [[int(v) for v in row] for row in table]
    if min(a, b, c, d) < 0:
        raise ValueError("table cells must be nonnegative")
    tab = ((a, b), (c, d))
    r1, r2, c1, c2 = a + b, c + d, a + c, b + d
    n = r1 + r2
    if 0 in (r1, r2, c1, c2):
        return FisherResult(tab, 1.0, "zero margin")
    weights = _hypergeom_weights(r1, c1, n)
    denom = math.comb(n, r1)
    observed = weights[a]
    if method == "minlike":
        num = sum(w for w in weights.values() if w <= observed)
    elif method == "central":
        low = sum(w for x, w in weights.items() if x <= a)
        high = sum(w for x, w in weights.items() if x >= a)
        num = min(2 * min(low, high), denom)
    else:
        raise ValueError(f"unknown two-sided method {method!r}")
    return FisherResult(tab, float(Fraction(num, denom)))


def accuracy_table(correct_a: int, n_a: int, correct_b: int, n_b: int) -> tuple[tuple[int, int], tuple[int, int]]:
    return ((correct_a, n_a - correct_a), (correct_b, n_b - correct_b))


def compare_accuracies(cm_a: ConfusionMatrix, cm_b: ConfusionMatrix) -> FisherResult:
    return fisher_exact(accuracy_table(cm_a.correct, cm_a.total, cm_b.correct, cm_b.total))


def recover_count(percent: float, trials: int) -> int:
    """Integer success count behind a printed two-decimal percentage.

    Tries rounding first, then truncation (some published tables truncate),
    then falls back to the nearest count.
    """
    rounded = [k for k in range(trials + 1) if round(100 * k / trials, 2) == round(percent, 2)]
    if len(rounded) == 1:
        return rounded[0]
    truncated = [k for k in range(trials + 1) if math.floor(10000 * k / trials + 1e-9) == round(percent * 100)]
    if len(truncated) == 1:
        return truncated[0]
    return min(range(trials + 1), key=lambda k: abs(100 * k / trials - percent))


def ci_note(ci: BinomialCI) -> str | None:
    if ci.successes == ci.trials:
        return (f"exact interval for {ci.trials}/{ci.trials} has lower bound {ci.lower:.5f}; "
                "a degenerate (1, 1) interval is not a valid Clopper-Pearson interval")
    return None
