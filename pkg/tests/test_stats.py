from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import cp_oracle, fisher_oracle
from mttgan.stats import (
    ConfusionMatrix, accuracy, ci_note, clopper_pearson, compare_accuracies, fisher_exact, per_class_recall,
    recover_count,
)


def test_clopper_pearson_matches_bisection_oracle_small_n():
    worst = 0.0
    for n in range(1, 51):
        for k in range(n + 1):
            ci = clopper_pearson(k, n)
            lo, hi = cp_oracle(k, n)
            worst = max(worst, abs(ci.lower - lo), abs(ci.upper - hi))
    assert worst < 1e-9


def test_clopper_pearson_edges_and_errors():
    assert clopper_pearson(0, 10).lower == 0.0
    assert clopper_pearson(10, 10).upper == 1.0
    with pytest.raises(ValueError):
        clopper_pearson(11, 10)
    with pytest.raises(ValueError):
        clopper_pearson(1, 10, level=1.0)


def test_clopper_pearson_table_example():
    ci = clopper_pearson(101, 136)
    assert abs(ci.lower - 0.66068) < 5e-4 and abs(ci.upper - 0.81374) < 5e-4


def test_perfect_score_interval_is_not_degenerate():
    ci = clopper_pearson(136, 136)
    assert ci.upper == 1.0 and ci.lower < 1.0
    assert abs(ci.lower - (0.025 ** (1 / 136))) < 1e-9
    assert "not a valid" in ci_note(ci)
    assert ci_note(clopper_pearson(5, 136)) is None


@given(st.integers(1, 300), st.data())
@settings(max_examples=200, deadline=None)
def test_clopper_pearson_brackets_point_estimate(n, data):
    k = data.draw(st.integers(0, n))
    ci = clopper_pearson(k, n)
    assert 0.0 <= ci.lower <= k / n <= ci.upper <= 1.0
    wider = clopper_pearson(k, n, 0.99)
    assert wider.lower <= ci.lower + 1e-12 and wider.upper >= ci.upper - 1e-12


def test_fisher_matches_enumeration_all_small_tables():
    checked = 0
    for a, b, c, d in product(range(7), repeat=4):
        r1, r2, c1, c2 = a + b, c + d, a + c, b + d
        if max(r1, r2, c1, c2) > 12:
            continue
        if 0 in (r1, r2, c1, c2):
            assert fisher_exact([[a, b], [c, d]]).p_two_sided == 1.0
            continue
        for method in ("minlike", "central"):
            assert fisher_exact([[a, b], [c, d]], method).p_two_sided == float(fisher_oracle(((a, b), (c, d)), method))
        checked += 1
    assert checked > 1000


@given(st.lists(st.integers(0, 12), min_size=4, max_size=4))
@settings(max_examples=300, deadline=None)
def test_fisher_symmetries(cells):
    a, b, c, d = cells
    p = fisher_exact([[a, b], [c, d]]).p_two_sided
    assert 0.0 < p <= 1.0
    assert p == fisher_exact([[c, d], [a, b]]).p_two_sided
    assert p == fisher_exact([[b, a], [d, c]]).p_two_sided
    assert p == fisher_exact([[a, c], [b, d]]).p_two_sided


def test_fisher_zero_margin_flagged():
    res = fisher_exact([[0, 0], [3, 4]])
    assert res.p_two_sided == 1.0 and res.flagged == "zero margin"
    with pytest.raises(ValueError):
        fisher_exact([[1, -1], [2, 2]])
    with pytest.raises(ValueError):
        fisher_exact([[1, 1], [2, 2]], method="bogus")


def test_confusion_matrix_and_accuracy():
    cm = ConfusionMatrix.from_predictions(["covid", "normal"], ["covid", "covid", "normal", "normal"],
                                          ["covid", "normal", "normal", "normal"])
    assert cm.total == 4 and cm.correct == 3
    assert accuracy(cm) == 0.75
    assert per_class_recall(cm, "covid") == 0.5
    assert per_class_recall(cm, "normal") == 1.0
    np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])


def test_compare_accuracies_builds_correct_incorrect_table():
    cm_a = ConfusionMatrix(("covid", "normal"), np.array([[60, 8], [2, 66]]))
    cm_b = ConfusionMatrix(("covid", "normal"), np.array([[40, 28], [7, 61]]))
    res = compare_accuracies(cm_a, cm_b)
    assert res.table == ((126, 10), (101, 35))


def test_recover_count_rounding_and_truncation():
    assert recover_count(74.26, 136) == 101
    assert recover_count(99.26, 136) == 135
    assert recover_count(84.19, 272) == 229
    # truncation fallback: 94.11 is 128/136 = 94.1176... truncated
    assert recover_count(94.11, 136) == 128
