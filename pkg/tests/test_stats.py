import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import binomial_two_sided_enumeration, binomial_two_sided_pascal, chi2_1df_sf_quad
from phinet.stats import (
    Accuracy,
    accuracy,
    chi2_sf_1df,
    confusion_matrix,
    evaluation_report,
    exact_binomial_p,
    format_percent,
    format_table,
    mcnemar_from_counts,
    mcnemar_test,
    mean_accuracy,
    report_json,
)


def paired(b, c, both_right=0, both_wrong=0):
    a = [False] * b + [True] * c + [True] * both_right + [False] * both_wrong
    bb = [True] * b + [False] * c + [True] * both_right + [False] * both_wrong
    return a, bb


# ---------------------------------------------------------------- McNemar


def test_balanced_discordance_gives_p_one():
    r = mcnemar_from_counts(5, 5)
    assert r.p_exact == 1.0
    assert r.p_chi2 == pytest.approx(chi2_sf_1df(r.statistic))


def test_chi_square_example():
    r = mcnemar_from_counts(10, 2)
    assert r.statistic == pytest.approx(49 / 12, abs=1e-12)
    assert abs(r.statistic - 4.0833) <= 1e-4
    assert abs(r.p_chi2 - 0.0433) <= 1e-3


def test_exact_example_is_the_closed_fraction():
    assert exact_binomial_p(15, 2) == float(Fraction(308, 131072))
    assert exact_binomial_p(15, 2) == pytest.approx(0.00235, abs=1e-5)


def test_no_discordant_pairs():
    r = mcnemar_test([True, False], [True, False])
    assert (r.b, r.c, r.statistic, r.p_chi2, r.p_exact) == (0, 0, 0.0, 1.0, 1.0)


@pytest.mark.parametrize("n", range(0, 17))
def test_exact_p_equals_enumeration_small(n):
    for b in range(n + 1):
        assert exact_binomial_p(b, n - b) == binomial_two_sided_enumeration(b, n - b)


def test_exact_p_equals_pascal_count_up_to_thirty():
    for n in range(31):
        for b in range(n + 1):
            assert exact_binomial_p(b, n - b) == binomial_two_sided_pascal(b, n - b)


def test_pascal_oracle_agrees_with_enumeration():
    for n in range(13):
        for b in range(n + 1):
            assert binomial_two_sided_pascal(b, n - b) == binomial_two_sided_enumeration(b, n - b)


@pytest.mark.parametrize("x", [0.01, 0.1, 0.5, 1.0, 2.0, 3.84, 4.0833, 6.63, 10.0, 20.0])
def test_chi2_survival_matches_numeric_integral(x):
    assert abs(chi2_sf_1df(x) - chi2_1df_sf_quad(x)) <= 1e-6


def test_chi2_survival_known_critical_values():
    assert chi2_sf_1df(3.841458820694124) == pytest.approx(0.05, abs=1e-12)
    assert chi2_sf_1df(0.0) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 20), st.integers(0, 20))
def test_antisymmetry_and_concordant_invariance(b, c, right, wrong):
    if b + c + right + wrong == 0:
        return
    a, bb = paired(b, c, right, wrong)
    r = mcnemar_test(a, bb)
    assert (r.b, r.c) == (b, c)
    s = mcnemar_test(bb, a)
    assert (s.b, s.c) == (c, b)
    assert (s.statistic, s.p_chi2, s.p_exact) == (r.statistic, r.p_chi2, r.p_exact)
    if b + c:
        base = mcnemar_test(*paired(b, c))
        assert base == r
    assert 0.0 <= r.p_exact <= 1.0 and 0.0 <= r.p_chi2 <= 1.0


def test_item_order_does_not_matter():
    rng = np.random.default_rng(0)
    a, bb = rng.random(50) < 0.8, rng.random(50) < 0.6
    perm = rng.permutation(50)
    assert mcnemar_test(a, bb) == mcnemar_test(a[perm], bb[perm])


def test_mcnemar_errors():
    with pytest.raises(ValueError, match="length"):
        mcnemar_test([True], [True, False])
    with pytest.raises(ValueError):
        mcnemar_test([], [])
    with pytest.raises(ValueError):
        mcnemar_from_counts(-1, 2)


def test_result_serializes():
    d = mcnemar_from_counts(10, 2).to_dict()
    assert json.loads(json.dumps(d)) == d
    assert set(d) == {"b", "c", "statistic", "p_chi2", "p_exact"}


# ---------------------------------------------------------------- accuracy


def test_percent_formatting_examples():
    assert Accuracy(406, 409).percent == "99.27%"
    assert Accuracy(406, 409).errors == 3
    assert format_percent(1.0) == "100.00%"
    assert mean_accuracy([99.27, 99.56, 93.88]) == "97.57%"
    with pytest.raises(ValueError):
        mean_accuracy([])


def test_accuracy_counts_and_errors():
    acc = accuracy([0, 1, 2, 2], [0, 1, 1, 2])
    assert (acc.correct, acc.total, acc.fraction) == (3, 4, 0.75)
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])
    with pytest.raises(ValueError):
        accuracy([], [])


def tally(pred, labels, k):
    out = [[0] * k for _ in range(k)]
    for p, y in zip(pred, labels):
        out[y][p] += 1
    return out


@pytest.mark.parametrize("seed", range(10))
def test_confusion_matrix_matches_tally(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    n = int(rng.integers(1, 80))
    pred, labels = rng.integers(0, k, n), rng.integers(0, k, n)
    cm = confusion_matrix(pred, labels, k)
    assert cm.counts.tolist() == tally(pred.tolist(), labels.tolist(), k)
    assert cm.total == n
    assert cm.accuracy == np.trace(cm.counts) / cm.total == accuracy(pred, labels).fraction


def test_confusion_per_class_and_errors():
    cm = confusion_matrix([0, 0, 1], [0, 1, 1], 3, ["A", "B", "C"])
    assert cm.per_class_accuracy() == {"A": 1.0, "B": 0.5, "C": None}
    with pytest.raises(ValueError, match="range"):
        confusion_matrix([3], [0], 3)
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 3)


# ---------------------------------------------------------------- reports


def test_report_and_table():
    classes = ["T1", "T2", "FLAIR"]
    rep = evaluation_report([0, 1, 2, 0], [0, 1, 2, 2], classes)
    assert rep["correct"] == 3 and rep["errors"] == 1 and rep["total"] == 4
    assert rep["confusion"][2][0] == 1
    assert json.loads(report_json(rep)) == json.loads(json.dumps(rep))
    table = format_table({"Phi-Net": rep, "Baseline": dict(rep, accuracy=0.5, correct=2, errors=2)})
    lines = table.splitlines()
    assert "Phi-Net" in lines[0] and "Baseline" in lines[0]
    assert lines[2].startswith("Accuracy") and "75.00%" in lines[2] and "50.00%" in lines[2]
    assert lines[3].startswith("# Correct Predictions") and "3/4" in lines[3]
    assert lines[4].startswith("# Errors") and "2/4" in lines[4]
    assert len({len(l) for l in lines}) == 1
