"""Independent reference implementations used by unit and acceptance tests."""

import itertools
from fractions import Fraction

import numpy as np


def auroc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p, n in itertools.product(pos, neg):
        wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def f1_direct(pred, gold):
    tp = sum(1 for p, g in zip(pred, gold) if p == 1 and g == 1)
    fp = sum(1 for p, g in zip(pred, gold) if p == 1 and g == 0)
    fn = sum(1 for p, g in zip(pred, gold) if p == 0 and g == 1)
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def kappa_table(a, b):
    """Kappa from the 2x2 contingency table."""
    t = np.zeros((2, 2))
    for x, y in zip(a, b):
        t[x, y] += 1
    n = t.sum()
    p_o = np.trace(t) / n
    p_e = (t.sum(1) * t.sum(0)).sum() / n ** 2
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1 - p_e)


def threshold_scan(scores, gold, objective):
    """Smallest threshold in {0, 1, midpoints} reaching the best objective (exact arithmetic)."""
    u = sorted(set(float(s) for s in scores))
    cands = sorted(set([0.0, 1.0] + [(a + b) / 2 for a, b in zip(u, u[1:])]))
    best, best_t = None, None
    for t in cands:
        pred = [int(s >= t) for s in scores]
        v = _f1_exact(pred, gold) if objective == "f1" else _kappa_exact(pred, gold)
        if best is None or v > best:
            best, best_t = v, t
    return best_t


def _f1_exact(pred, gold):
    tp = sum(1 for p, g in zip(pred, gold) if p == 1 and g == 1)
    wrong = sum(1 for p, g in zip(pred, gold) if p != g)
    return Fraction(0) if tp == 0 else Fraction(2 * tp, 2 * tp + wrong)


def _kappa_exact(a, b):
    n = len(a)
    p_o = Fraction(sum(1 for x, y in zip(a, b) if x == y), n)
    pa, pb = Fraction(sum(a), n), Fraction(sum(b), n)
    p_e = pa * pb + (1 - pa) * (1 - pb)
    if p_e == 1:
        return Fraction(1 if p_o == 1 else 0)
    return (p_o - p_e) / (1 - p_e)


def z_select(rows):
    """Index of the max z-score sum; constant columns contribute 0; earliest on ties."""
    cols = list(zip(*rows))
    total = [0.0] * len(rows)
    for col in cols:
        m = sum(col) / len(col)
        sd = (sum((c - m) ** 2 for c in col) / len(col)) ** 0.5
        for i, c in enumerate(col):
            total[i] += 0.0 if sd == 0 else (c - m) / sd
    best = max(total)
    return next(i for i, t in enumerate(total) if t == best)


def z_select_filled(rows):
    """``z_select`` after replacing missing entries by their column minimum."""
    cols = list(zip(*rows))
    filled_cols = []
    for col in cols:
        present = [c for c in col if c is not None]
        low = min(present) if present else 0.0
        filled_cols.append([low if c is None else c for c in col])
    return z_select([list(r) for r in zip(*filled_cols)])


def majority_vote_f1(acc, parse, n_runs, prevalence):
    """Expected F1 of majority voting over ``n_runs`` noisy runs.

    Each run parses with probability ``parse`` and is then correct with
    probability ``acc``. Instances with no parsed run count as negative
    predictions; ties go negative. Uses expected confusion counts.
    """
    from math import comb

    def p_positive_majority(p_vote_pos):
        total = 0.0
        for m in range(1, n_runs + 1):
            pm = comb(n_runs, m) * parse ** m * (1 - parse) ** (n_runs - m)
            wins = sum(comb(m, j) * p_vote_pos ** j * (1 - p_vote_pos) ** (m - j)
                       for j in range(m + 1) if 2 * j > m)
            total += pm * wins
        return total

    tpr = p_positive_majority(acc)
    fpr = p_positive_majority(1 - acc)
    tp = prevalence * tpr
    fp = (1 - prevalence) * fpr
    fn = prevalence * (1 - tpr)
    return 2 * tp / (2 * tp + fp + fn)
