import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clsgen import metrics as M
from clsgen.textproto import LabelMap, parse_classification

from oracles import auroc_pairs, kappa_table, threshold_scan


def fixture(seed, n=None, ties=True):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(4, 40))
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    s = rng.integers(0, 10, n) / 10 if ties else rng.random(n)
    return s, y


# worked values ------------------------------------------------------------------


def test_auroc_worked_value():
    assert M.auroc([.1, .4, .35, .8], [0, 0, 1, 1]) == 0.75


def test_auroc_extremes():
    assert M.auroc([.1, .2, .8, .9], [0, 0, 1, 1]) == 1.0
    assert M.auroc([.5] * 4, [0, 1, 0, 1]) == 0.5


def test_auroc_single_class_is_undefined():
    with pytest.raises(M.UndefinedMetricError):
        M.auroc([.1, .2], [1, 1])
    assert M.safe(M.auroc, [.1, .2], [1, 1]) is None


def test_auroc_drops_missing_labels():
    assert M.auroc([.1, .9, .5], [0, 1, None]) == 1.0


def test_prf_worked_values():
    assert M.precision_recall_f1([1, 1, 0, 0], [1, 0, 1, 0]) == (0.5, 0.5, 0.5)
    assert M.precision_recall_f1([1, 0, 1], [1, 0, 1]) == (1.0, 1.0, 1.0)
    assert M.precision_recall_f1([0, 0], [0, 0]) == (0.0, 0.0, 0.0)


def test_unparsable_policies():
    pred, gold = [None, 1, None], [1, 1, 0]
    assert M.confusion(pred, gold) == {"tp": 1, "fp": 0, "fn": 1, "tn": 1}
    assert M.confusion(pred, gold, "exclude") == {"tp": 1, "fp": 0, "fn": 0, "tn": 0}


def test_kappa_worked_values():
    assert M.cohens_kappa([1, 1, 0, 0], [1, 0, 0, 0]) == 0.5
    assert M.cohens_kappa([1, 0, 1, 0], [0, 1, 0, 1]) == -1.0
    assert M.cohens_kappa([1, 0, 1], [1, 0, 1]) == 1.0


def test_kappa_degenerate_and_errors():
    assert M.cohens_kappa([1, 1], [1, 1]) == 1.0
    with pytest.raises(M.UndefinedMetricError):
        M.cohens_kappa([None], [1])
    with pytest.raises(ValueError):
        M.cohens_kappa([1], [1, 0])


def test_kappa_wrong_policy_counts_missing_as_disagreement():
    assert M.cohens_kappa([1, 0, 1, 0], [1, 0, None, None], "drop") == 1.0
    assert M.cohens_kappa([1, 0, 1, 0], [1, 0, None, None], "wrong") == M.cohens_kappa([1, 0, 1, 0], [1, 0, 0, 1])


def test_tune_threshold_worked_value():
    t = M.tune_threshold([.2, .6, .7], [0, 1, 1])
    assert t == pytest.approx(0.4)
    assert M.threshold_objective([.2, .6, .7], [0, 1, 1], t) == 1.0


def test_tune_threshold_all_positive_is_zero():
    assert M.tune_threshold([.3, .6], [1, 1]) == 0.0


def test_tune_threshold_empty():
    with pytest.raises(ValueError):
        M.tune_threshold([], [])


def test_kappa_bands():
    assert M.kappa_band(-0.2) == "poor"
    assert M.kappa_band(0.5) == "moderate"
    assert M.kappa_band(0.95) == "almost perfect"


def test_rationale_label_metrics():
    assert M.rationale_label_metrics([1, 0, 1], [1, 0, 1]) == (0.0, 1.0)
    inferred = [1] * 5 + [0] * 5
    verbal = list(inferred)
    verbal[0] = 0
    assert M.rationale_label_metrics(inferred, verbal)[0] == pytest.approx(0.1)
    with pytest.raises(M.UndefinedMetricError):
        M.rationale_label_metrics([None], [1])


def test_parsability_counts_collapse_outputs():
    lm = LabelMap()
    outs = [parse_classification(t, lm) for t in
            ["x\n\nClassification: 1:death", "Pom Pomuppy Pom Pom", "Classification: 0:alive", "Pom Pom"]]
    assert M.parsability(outs) == 0.5
    with pytest.raises(ValueError):
        M.parsability([])


def test_alignment_delegates_and_self_consistent():
    s, y = fixture(3, ties=False)
    assert M.auroc_alignment(s, y) == M.auroc(s, y)
    assert M.auroc_alignment(s, (s >= 0.5).astype(int)) == 1.0


def test_alignment_null_is_half():
    rng = np.random.default_rng(0)
    s = rng.random(10_000)
    v = rng.integers(0, 2, 10_000)
    assert abs(M.auroc_alignment(s, v) - 0.5) <= 0.02


def test_report_reconciles_exclusions():
    probs = [.9, .1, .8, .2]
    verbal = [1, 0, None, 0]
    rep = M.build_report(probs, [1, 0, 1, 0], verbal, parsed=None, thresholds={"f1": 0.5},
                         inferred=[1, None, 1, 0], readable=[True, None, False, True])
    assert rep.exclusions == {"alignment": 1, "auroc": 0, "judge": 2}
    assert rep.auroc == 1.0 and rep.rli == 0.0
    assert rep.readability == pytest.approx(2 / 3)
    assert '"kappa_band"' in rep.to_json()


# oracle comparisons ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(50))
def test_auroc_matches_pair_oracle(seed):
    s, y = fixture(seed)
    assert abs(M.auroc(s, y) - auroc_pairs(s, y)) < 1e-12


@pytest.mark.parametrize("seed", range(50))
def test_tune_threshold_matches_scan(seed):
    s, y = fixture(seed)
    for obj in ("f1", "kappa"):
        assert abs(M.tune_threshold(s, y, obj) - threshold_scan(s, y, obj)) < 1e-12


@pytest.mark.parametrize("seed", range(50))
def test_kappa_matches_table(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 2, 30), rng.integers(0, 2, 30)
    assert abs(M.cohens_kappa(a, b) - kappa_table(a, b)) < 1e-12


# properties ----------------------------------------------------------------------------


scores_labels = st.integers(0, 10_000).map(lambda s: fixture(s, ties=False))


@settings(max_examples=50, deadline=None)
@given(scores_labels, st.sampled_from([np.exp, np.sqrt, lambda x: 3 * x - 7, lambda x: x ** 3]))
def test_auroc_monotone_invariance(sy, f):
    s, y = sy
    assert M.auroc(f(s), y) == pytest.approx(M.auroc(s, y), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(scores_labels)
def test_auroc_complement(sy):
    s, y = sy
    assert M.auroc(s, y) + M.auroc(1 - s, y) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(scores_labels)
def test_tuned_threshold_is_optimal(sy):
    s, y = sy
    t = M.tune_threshold(s, y)
    best = M.threshold_objective(s, y, t)
    for c in M.candidate_thresholds(s):
        assert best >= M.threshold_objective(s, y, c)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_kappa_symmetric_and_bounded(pairs):
    a, b = zip(*pairs)
    k = M.cohens_kappa(a, b)
    assert -1.0 <= k <= 1.0
    assert k == pytest.approx(M.cohens_kappa(b, a), abs=1e-12)
