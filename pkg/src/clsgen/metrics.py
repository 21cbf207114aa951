"""Classification and head/text consistency metrics.

Missing labels (unparsable generations) are represented as ``None`` or a
negative integer in label series; helpers drop them pairwise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. AUROC with one class)."""


MISSING = -1


def as_labels(values) -> np.ndarray:
    """Label series as int array with ``MISSING`` for absent entries."""
    out = np.array([MISSING if v is None else int(v) for v in values], dtype=np.int64)
    bad = (out != MISSING) & (out != 0) & (out != 1)
    if bad.any():
        raise ValueError("labels must be 0, 1 or missing")
    return out


def _paired(scores, labels) -> tuple[np.ndarray, np.ndarray, int]:
    s = np.asarray(scores, dtype=np.float64)
    y = as_labels(labels)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} scores vs {y.shape} labels")
    keep = y != MISSING
    return s[keep], y[keep], int((~keep).sum())


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (wins + 0.5 ties) / (n_pos * n_neg), midranks for ties."""
    s, y, _ = _paired(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes among non-missing labels")
    ranks = _midranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_alignment(scores, verbalized) -> float:
    """AUROC of head probabilities against the model's own verbalized labels."""
    return auroc(scores, verbalized)


def confusion(pred, gold, unparsable: str = "wrong") -> dict[str, int]:
    """Confusion counts. ``unparsable='wrong'`` scores a missing prediction as
    a miss for gold positives and a non-event for negatives; ``'exclude'``
    drops those pairs."""
    p = as_labels(pred)
    g = as_labels(gold)
    if p.shape != g.shape:
        raise ValueError("pred and gold differ in length")
    keep = g != MISSING
    p, g = p[keep], g[keep]
    if unparsable == "exclude":
        ok = p != MISSING
        p, g = p[ok], g[ok]
    elif unparsable != "wrong":
        raise ValueError(f"unknown unparsable policy {unparsable!r}")
    hit = p == 1
    return {
        "tp": int((hit & (g == 1)).sum()),
        "fp": int((hit & (g == 0)).sum()),
        "fn": int((~hit & (g == 1)).sum()),
        "tn": int((~hit & (g == 0)).sum()),
    }


def precision_recall_f1(pred, gold, unparsable: str = "wrong") -> tuple[float, float, float]:
    c = confusion(pred, gold, unparsable)
    tp, fp, fn = c["tp"], c["fp"], c["fn"]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # 2tp / (2tp + fp + fn) equals the harmonic mean; integer form rounds equal ratios identically
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return precision, recall, f1


def cohens_kappa(a, b, unparsable: str = "drop") -> float:
    """Cohen's kappa between two binary label series.

    ``unparsable="drop"`` keeps only pairs where both labels are present.
    ``"wrong"`` treats a missing entry in ``b`` as disagreeing with ``a``
    (pairs with ``a`` missing are still dropped).
    When expected agreement is 1, returns 1.0 for perfect observed agreement
    and 0.0 otherwise.
    """
    if unparsable not in ("drop", "wrong"):
        raise ValueError("unparsable must be 'drop' or 'wrong'")
    x = as_labels(a)
    y = as_labels(b)
    if x.shape != y.shape:
        raise ValueError("series differ in length")
    if unparsable == "wrong":
        y = np.where((y == MISSING) & (x != MISSING), 1 - x, y)
    keep = (x != MISSING) & (y != MISSING)
    x, y = x[keep], y[keep]
    if x.size == 0:
        raise UndefinedMetricError("kappa needs at least one complete pair")
    # integer counts keep the degenerate cases exact: (n*agree - S) / (n^2 - S)
    n = int(x.size)
    agree = int((x == y).sum())
    ax, ay = int(x.sum()), int(y.sum())
    chance = ax * ay + (n - ax) * (n - ay)
    if chance == n * n:
        return 1.0 if agree == n else 0.0
    return (n * agree - chance) / (n * n - chance)


LANDIS_KOCH = ((0.0, "poor"), (0.20, "slight"), (0.40, "fair"), (0.60, "moderate"),
               (0.80, "substantial"), (1.00, "almost perfect"))


def kappa_band(k: float) -> str:
    if k <= 0:
        return "poor"
    for upper, name in LANDIS_KOCH[1:]:
        if k <= upper:
            return name
    return "almost perfect"


def threshold_labels(scores, threshold: float) -> np.ndarray:
    return (np.asarray(scores, dtype=np.float64) >= threshold).astype(np.int64)


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def threshold_objective(scores, gold, threshold: float, objective: str = "f1") -> float:
    pred = threshold_labels(scores, threshold)
    if objective == "f1":
        return precision_recall_f1(pred, gold)[2]
    if objective == "kappa":
        return cohens_kappa(pred, gold)
    raise ValueError(f"unknown objective {objective!r}")


def tune_threshold(scores, gold, objective: str = "f1") -> float:
    """Smallest candidate threshold attaining the best objective on (dev) data.

    Candidates are 0, 1 and midpoints between consecutive distinct scores;
    a score ``>= threshold`` predicts positive.
    """
    s, y, _ = _paired(scores, gold)
    if s.size == 0:
        raise ValueError("tune_threshold needs at least one scored instance")
    best_t, best_v = None, -np.inf
    for t in candidate_thresholds(s):
        v = threshold_objective(s, y, t, objective)
        if v > best_v:
            best_t, best_v = float(t), v
    return best_t


def rationale_label_metrics(inferred, verbalized) -> tuple[float, float]:
    """(RLI, rationale-label kappa) over instances where both labels exist."""
    a = as_labels(inferred)
    b = as_labels(verbalized)
    if a.shape != b.shape:
        raise ValueError("series differ in length")
    keep = (a != MISSING) & (b != MISSING)
    if not keep.any():
        raise UndefinedMetricError("no instance has both an inferred and a verbalized label")
    rli = float((a[keep] != b[keep]).mean())
    return rli, cohens_kappa(a[keep], b[keep])


def parsability(outputs) -> float:
    outputs = list(outputs)
    if not outputs:
        raise ValueError("parsability of an empty list")
    return sum(bool(o.parsable) for o in outputs) / len(outputs)


def safe(fn, *args, **kwargs) -> float | None:
    """Run a metric, mapping undefined results to ``None``."""
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return None


@dataclass
class MetricReport:
    n: int
    auroc: float | None = None
    default: dict = field(default_factory=dict)  # precision/recall/f1/kappa at 0.5
    tuned: dict = field(default_factory=dict)  # same at dev-tuned thresholds
    thresholds: dict = field(default_factory=dict)
    auroc_alignment: float | None = None
    parsability: float | None = None
    rli: float | None = None
    rl_kappa: float | None = None
    readability: float | None = None
    exclusions: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("default", "tuned"):
            if d[k].get("kappa") is not None:
                d[k]["kappa_band"] = kappa_band(d[k]["kappa"])
        return d

    def to_json(self) -> str:
        return json.dumps(_rounded(self.to_dict()), sort_keys=True, indent=2)


def _rounded(obj, digits: int = 10):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj


def classification_block(pred, gold, head_pred=None, verbalized=None) -> dict:
    p, r, f = precision_recall_f1(pred, gold)
    block = {"precision": p, "recall": r, "f1": f}
    if head_pred is not None and verbalized is not None:
        block["kappa"] = safe(cohens_kappa, head_pred, verbalized)
    return block


def build_report(probs, gold, verbalized, parsed, thresholds: dict | None = None,
                 inferred=None, readable=None) -> MetricReport:
    """Assemble the full report for one model on one split.

    ``thresholds`` may carry dev-tuned ``f1`` and ``kappa`` thresholds.
    """
    probs = np.asarray(probs, dtype=np.float64)
    gold = as_labels(gold)
    verbal = as_labels(verbalized)
    n = len(gold)
    excluded_align = int((verbal == MISSING).sum())
    rep = MetricReport(n=n)
    rep.auroc = safe(auroc, probs, gold)
    rep.auroc_alignment = safe(auroc_alignment, probs, verbal)
    rep.parsability = parsability(parsed) if parsed else None
    at_half = threshold_labels(probs, 0.5)
    rep.default = classification_block(at_half, gold, at_half, verbal)
    rep.thresholds = {"default": 0.5}
    if thresholds:
        t_f1 = thresholds.get("f1", 0.5)
        t_k = thresholds.get("kappa", t_f1)
        tuned = classification_block(threshold_labels(probs, t_f1), gold)
        tuned["kappa"] = safe(cohens_kappa, threshold_labels(probs, t_k), verbal)
        rep.tuned = tuned
        rep.thresholds.update({"f1": t_f1, "kappa": t_k})
    if inferred is not None:
        rli_kappa = safe(rationale_label_metrics, inferred, verbal)
        if rli_kappa is not None:
            rep.rli, rep.rl_kappa = rli_kappa
        both = int(((as_labels(inferred) != MISSING) & (verbal != MISSING)).sum())
        rep.exclusions["judge"] = n - both
    if readable is not None:
        readable = [r for r in readable if r is not None]
        rep.readability = (sum(readable) / len(readable)) if readable else None
    rep.exclusions["alignment"] = excluded_align
    rep.exclusions["auroc"] = int((gold == MISSING).sum())
    return rep
