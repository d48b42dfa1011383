"""Ranking metrics and paired significance machinery.

Salience rankings are judged per document with binary relevance; search
rankings per query with graded relevance. Units with no (positive) relevance
are skipped, never scored as zero.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np

DEFAULT_PERMUTATIONS = 10000
WTL_TOLERANCE = 1e-9


class EvaluationError(ValueError):
    pass


def precision_recall_at_k(ranking: Sequence, relevant: set,
                          k: int) -> Optional[tuple[float, float]]:
    """(P@k, R@k) with the denominator fixed at k even for short lists.

    Returns None when the relevant set is empty (unit excluded from averages).
    """
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if not relevant:
        return None
    hits = len(set(ranking[:k]) & relevant)
    return hits / k, hits / len(relevant)


def _gain(grade: int) -> float:
    # negative judgments (e.g., spam) carry no gain; keeps metrics in [0, 1]
    return float(2 ** max(grade, 0) - 1)


def ndcg_at_k(ranking: Sequence, grades: Mapping, k: int = 20) -> Optional[float]:
    """NDCG with gain 2^g - 1 and discount log2(rank + 1); unjudged docs grade 0.

    The ideal ordering ranks all judged docs by grade. None when the unit has
    no positive grade.
    """
    if not any(g > 0 for g in grades.values()):
        return None
    dcg = sum(_gain(grades.get(doc, 0)) / math.log2(r + 2)
              for r, doc in enumerate(ranking[:k]))
    ideal = sorted(grades.values(), reverse=True)[:k]
    idcg = sum(_gain(g) / math.log2(r + 2) for r, g in enumerate(ideal))
    return dcg / idcg


def err_at_k(ranking: Sequence, grades: Mapping, k: int = 20,
             g_max: Optional[int] = None) -> float:
    """Expected reciprocal rank with stopping probabilities (2^g - 1) / 2^g_max."""
    if g_max is None:
        g_max = max((g for g in grades.values()), default=1)
    g_max = max(int(g_max), 1)
    err = 0.0
    not_stopped = 1.0
    for r, doc in enumerate(ranking[:k], start=1):
        stop_p = _gain(grades.get(doc, 0)) / (2 ** g_max)
        err += not_stopped * stop_p / r
        not_stopped *= 1.0 - stop_p
    return err


def win_tie_loss(metric_a: Mapping, metric_b: Mapping,
                 tol: float = WTL_TOLERANCE) -> tuple[int, int, int]:
    """Counts of units where a beats b, ties b, and loses to b (within tol)."""
    if set(metric_a) != set(metric_b):
        raise EvaluationError("win/tie/loss requires identical unit sets")
    w = t = l = 0
    for unit in metric_a:
        diff = metric_a[unit] - metric_b[unit]
        if diff > tol:
            w += 1
        elif diff < -tol:
            l += 1
        else:
            t += 1
    return w, t, l


def permutation_test(diffs: Sequence[float],
                     permutations: int = DEFAULT_PERMUTATIONS,
                     seed: int = 0) -> float:
    """Two-sided paired sign-flip randomization test on the mean difference.

    Exact enumeration when 2^n <= permutations; otherwise Monte Carlo with the
    add-one correction (b + 1) / (B + 1).
    """
    diffs = np.asarray(list(diffs), dtype=np.float64)
    n = len(diffs)
    if n < 1:
        raise EvaluationError("permutation test needs at least one unit")
    observed = abs(float(diffs.mean()))
    eps = 1e-12 * max(1.0, observed)   # guard exact ties against rounding
    if n <= 62 and (1 << n) <= permutations:
        count = 1 << n
        bits = (np.arange(count)[:, None] >> np.arange(n)[None, :]) & 1
        signs = bits * 2 - 1
        means = np.abs(signs @ diffs) / n
        return float((means >= observed - eps).sum()) / count
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(permutations, n)) * 2 - 1
    means = np.abs(signs @ diffs) / n
    b = int((means >= observed - eps).sum())
    return (b + 1) / (permutations + 1)


# ---------------------------------------------------------------------------
# Aggregation over units + TSV report emission

SALIENCE_METRICS = ("P@1", "P@5", "R@1", "R@5")


def evaluate_salience_rankings(rankings: Mapping[str, Sequence],
                               relevant: Mapping[str, set]):
    """Per-document P/R@{1,5} plus means.

    Returns (per_unit, means, skipped) where per_unit maps doc_id ->
    {metric: value}; documents with no relevant entities are skipped.
    """
    per_unit: dict[str, dict[str, float]] = {}
    skipped = 0
    for doc_id, ranking in rankings.items():
        rel = relevant.get(doc_id, set())
        if not rel:
            skipped += 1
            continue
        row = {}
        for k in (1, 5):
            pr = precision_recall_at_k(ranking, rel, k)
            row[f"P@{k}"], row[f"R@{k}"] = pr
        per_unit[doc_id] = row
    means = {m: (sum(r[m] for r in per_unit.values()) / len(per_unit)
                 if per_unit else float("nan"))
             for m in SALIENCE_METRICS}
    return per_unit, means, skipped


def evaluate_search_run(run: Mapping[str, Sequence], qrels: Mapping[str, Mapping],
                        k: int = 20):
    """Per-query NDCG@k / ERR@k plus means.

    g_max for ERR is the maximum grade anywhere in the qrels. Queries missing
    from the qrels or with no positive grade are skipped.
    """
    g_max = max((g for by_doc in qrels.values() for g in by_doc.values()), default=1)
    per_unit: dict[str, dict[str, float]] = {}
    skipped = 0
    for qid, ranking in run.items():
        grades = qrels.get(qid)
        if not grades or not any(g > 0 for g in grades.values()):
            skipped += 1
            continue
        ndcg = ndcg_at_k(ranking, grades, k)
        per_unit[qid] = {f"NDCG@{k}": ndcg,
                         f"ERR@{k}": err_at_k(ranking, grades, k, g_max)}
    metrics = (f"NDCG@{k}", f"ERR@{k}")
    means = {m: (sum(r[m] for r in per_unit.values()) / len(per_unit)
                 if per_unit else float("nan"))
             for m in metrics}
    return per_unit, means, skipped


def tsv_report(per_unit: Mapping[str, Mapping[str, float]],
               aggregate_rows: Sequence[tuple[str, object]]) -> str:
    """UTF-8 TSV: unit_id<TAB>metric<TAB>value, aggregates under unit 'ALL'."""
    lines = []
    for unit_id in sorted(per_unit):
        for metric, value in per_unit[unit_id].items():
            lines.append(f"{unit_id}\t{metric}\t{value:.6f}")
    for metric, value in aggregate_rows:
        if isinstance(value, float):
            lines.append(f"ALL\t{metric}\t{value:.6f}")
        else:
            lines.append(f"ALL\t{metric}\t{value}")
    return "\n".join(lines) + "\n"
