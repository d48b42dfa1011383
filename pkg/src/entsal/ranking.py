"""Ad hoc search adaptation: salience ranking features and run re-ranking.

Per query entity, the 2K kernel scores against a candidate document are
normalized by the document's mention count and combined across query entities
by log-sum. The resulting feature vector, together with the base retrieval
score, feeds a linear pairwise ranker trained with query-level cross
validation; scores re-order TREC runs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, TextIO

import numpy as np

from ._util import atomic_write_text, stable_hash
from .baselines import (LinearRankerParams, LinearTrainConfig, linear_score,
                        train_linear_pairwise)
from .corpus import Document, DescriptionStore, Vocabulary, validate_raw_query
from .model import KernelBank, ModelParams, _kim_forward

log = logging.getLogger(__name__)

DEFAULT_FLOOR = 1e-10
DEFAULT_FOLDS = 5

# search ranker weights live over the 2K salience features plus the base score
RankerParams = LinearRankerParams


class RankingError(ValueError):
    pass


@dataclass(frozen=True)
class Query:
    """Query entities drive the features; words are provenance only."""

    query_id: str
    words: tuple[str, ...]
    entities: tuple[int, ...]


def encode_query(raw: dict, vocab: Vocabulary) -> Query:
    """Unseen query entities map to Unk_entity and still contribute features."""
    validate_raw_query(raw)
    return Query(
        query_id=raw["query_id"],
        words=tuple(raw["words"]),
        entities=tuple(vocab.entity_index(e) for e in raw["entities"]),
    )


# ---------------------------------------------------------------------------
# Salience ranking features

def query_doc_features(query: Query, doc: Document,
                       descriptions: Optional[DescriptionStore],
                       params: ModelParams, bank: KernelBank,
                       floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Log-sum over query entities of the document-size-normalized kernel scores.

    Normalization is by the total mention count, so integer-duplicating the
    document leaves the features unchanged (when no score hits the floor).
    """
    if not query.entities:
        raise RankingError(f"query {query.query_id!r} has no entities")
    n_mentions = len(doc.entity_mentions)
    if n_mentions == 0:
        raise RankingError(f"doc {doc.doc_id!r} has no entity mentions")
    kee_cache: dict = {}
    psi = np.zeros(2 * bank.size)
    for e in query.entities:
        cache = _kim_forward(e, doc, descriptions, params, bank, kee_cache)
        psi += np.log(np.maximum(cache.scores.stacked() / n_mentions, floor))
    return psi


def floor_features(bank: KernelBank, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """The documented fallback for unscorable (query, doc) pairs."""
    return np.full(2 * bank.size, math.log(floor))


def ranker_feature_names(kernel_count: int) -> tuple[str, ...]:
    return tuple(f"kernel_{i}" for i in range(2 * kernel_count)) + ("base_score",)


def rank_score(features: np.ndarray, base_score: float,
               ranker: RankerParams) -> float:
    """Linear score over the standardized (salience features, base score) vector."""
    x = np.concatenate([np.asarray(features, dtype=np.float64), [base_score]])
    if x.shape != (len(ranker.feature_names),):
        raise RankingError(f"feature vector of length {len(x)} does not match "
                           f"ranker dimension {len(ranker.feature_names)}")
    return linear_score(ranker, x)


# ---------------------------------------------------------------------------
# TREC run / qrels files

@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str


def load_run(path: str) -> list[RunEntry]:
    """Parse a TREC run; enforces contiguous ranks and non-increasing scores."""
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise RankingError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, doc_id, rank, score, tag = parts
            entries.append(RunEntry(qid, doc_id, int(rank), float(score), tag))
    _validate_run(entries, path)
    return entries


def _validate_run(entries: Sequence[RunEntry], origin: str) -> None:
    by_query: dict[str, list[RunEntry]] = {}
    seen = set()
    for e in entries:
        key = (e.query_id, e.doc_id)
        if key in seen:
            raise RankingError(f"{origin}: duplicate (query, doc) pair {key}")
        seen.add(key)
        by_query.setdefault(e.query_id, []).append(e)
    for qid, group in by_query.items():
        group = sorted(group, key=lambda e: e.rank)
        if [e.rank for e in group] != list(range(1, len(group) + 1)):
            raise RankingError(f"{origin}: query {qid!r} ranks are not 1..n without gaps")
        for a, b in zip(group, group[1:]):
            if b.score > a.score:
                raise RankingError(f"{origin}: query {qid!r} scores increase with rank")


def write_run(path: str, entries: Iterable[RunEntry]) -> None:
    lines = [f"{e.query_id} Q0 {e.doc_id} {e.rank} {e.score!r} {e.tag}"
             for e in entries]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_qrels(path: str) -> dict[str, dict[str, int]]:
    """TREC qrels: `<query_id> 0 <doc_id> <grade>` per line."""
    qrels: dict[str, dict[str, int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise RankingError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc_id, grade = parts
            qrels.setdefault(qid, {})[doc_id] = int(grade)
    return qrels


def rerank_run(base_run: Sequence[RunEntry], scores: Mapping[tuple[str, str], float],
               tag: str) -> list[RunEntry]:
    """Reorder each query's entries by new score; ties keep base order, then doc_id.

    Entries with no score are demoted with score -inf (warned, not dropped).
    """
    _validate_run(base_run, "base run")
    by_query: dict[str, list[RunEntry]] = {}
    for e in base_run:
        by_query.setdefault(e.query_id, []).append(e)
    missing = 0
    out: list[RunEntry] = []
    for qid, group in by_query.items():
        rescored = []
        for e in sorted(group, key=lambda e: e.rank):
            s = scores.get((e.query_id, e.doc_id))
            if s is None:
                missing += 1
                s = float("-inf")
            rescored.append((s, e))
        rescored.sort(key=lambda se: (-se[0], se[1].rank, se[1].doc_id))
        for new_rank, (s, e) in enumerate(rescored, start=1):
            out.append(RunEntry(qid, e.doc_id, new_rank, s, tag))
    if missing:
        log.warning("rerank: %d base entries had no score; treated as -inf", missing)
    return out


# ---------------------------------------------------------------------------
# SVMlight-style feature files

@dataclass(frozen=True)
class FeatureInstance:
    query_id: str
    doc_id: str
    grade: int
    features: np.ndarray


def export_features(instances: Sequence[FeatureInstance], writer: TextIO) -> None:
    """`<grade> qid:<query_id> 1:<v1> ... # <doc_id>`, grouped by query in
    input order, feature values at 6 significant digits."""
    dims = {len(inst.features) for inst in instances}
    if len(dims) > 1:
        raise RankingError(f"inconsistent feature dimensions: {sorted(dims)}")
    order: list[str] = []
    grouped: dict[str, list[FeatureInstance]] = {}
    for inst in instances:
        if inst.query_id not in grouped:
            order.append(inst.query_id)
            grouped[inst.query_id] = []
        grouped[inst.query_id].append(inst)
    for qid in order:
        for inst in grouped[qid]:
            feats = " ".join(f"{i + 1}:{v:.6g}" for i, v in enumerate(inst.features))
            writer.write(f"{inst.grade} qid:{inst.query_id} {feats} # {inst.doc_id}\n")


def parse_features(path: str) -> list[FeatureInstance]:
    instances = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            body, _, comment = line.partition("#")
            doc_id = comment.strip()
            parts = body.split()
            if len(parts) < 2 or not parts[1].startswith("qid:"):
                raise RankingError(f"{path}:{lineno}: malformed feature line")
            grade = int(parts[0])
            qid = parts[1][len("qid:"):]
            values = []
            for spec_ in parts[2:]:
                idx_s, _, val_s = spec_.partition(":")
                if int(idx_s) != len(values) + 1:
                    raise RankingError(f"{path}:{lineno}: features must be 1-indexed "
                                       f"and contiguous")
                values.append(float(val_s))
            instances.append(FeatureInstance(qid, doc_id, grade,
                                             np.asarray(values, dtype=np.float64)))
    return instances


# ---------------------------------------------------------------------------
# Cross-validated ranker training

@dataclass
class FoldedRanker:
    folds: int
    params_by_fold: list[RankerParams]

    def fold_of(self, query_id: str) -> int:
        return stable_hash("fold", query_id) % self.folds

    def score_instances(self, instances: Sequence[FeatureInstance]
                        ) -> dict[tuple[str, str], float]:
        """Held-out scoring: each query is scored by the model that never saw it."""
        out = {}
        for inst in instances:
            params = self.params_by_fold[self.fold_of(inst.query_id)]
            out[(inst.query_id, inst.doc_id)] = linear_score(params, inst.features)
        return out


def train_ranker(instances: Sequence[FeatureInstance], folds: int = DEFAULT_FOLDS,
                 config: Optional[LinearTrainConfig] = None) -> FoldedRanker:
    """K-fold pairwise training by query: grade > 0 vs grade <= 0 within a query.

    Fold assignment is a stable hash of query_id, so two runs agree. Queries
    contributing no (positive, negative) pair are skipped with a warning.
    """
    if folds < 2:
        raise RankingError("need at least 2 folds")
    if not instances:
        raise RankingError("no feature instances to train on")
    dim = len(instances[0].features)
    feature_names = tuple(f"f{i + 1}" for i in range(dim))

    by_query: dict[str, list[FeatureInstance]] = {}
    for inst in instances:
        by_query.setdefault(inst.query_id, []).append(inst)

    def fold_of(qid: str) -> int:
        return stable_hash("fold", qid) % folds

    pairs_by_query: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    skipped = 0
    for qid, group in by_query.items():
        pos = [i for i in group if i.grade > 0]
        neg = [i for i in group if i.grade <= 0]
        if not pos or not neg:
            skipped += 1
            continue
        pairs_by_query[qid] = [(p.features, n.features) for p in pos for n in neg]
    if skipped:
        log.warning("train_ranker: %d queries had no usable (pos, neg) pair", skipped)
    if not pairs_by_query:
        raise RankingError("no query yields a training pair")

    params_by_fold = []
    for fold in range(folds):
        pairs = [pair for qid, qpairs in pairs_by_query.items()
                 if fold_of(qid) != fold for pair in qpairs]
        if not pairs:
            # every pair-bearing query fell into this fold's test side
            raise RankingError(f"fold {fold} has no training pairs; "
                               f"use fewer folds or more queries")
        params_by_fold.append(train_linear_pairwise(pairs, feature_names, config))
    return FoldedRanker(folds=folds, params_by_fold=params_by_fold)


# ---------------------------------------------------------------------------
# Feature extraction for a base run

def extract_features_for_run(base_run: Sequence[RunEntry],
                             queries_by_id: Mapping[str, Query],
                             docs_by_id: Mapping[str, Document],
                             descriptions: Optional[DescriptionStore],
                             params: ModelParams, bank: KernelBank,
                             qrels: Optional[Mapping[str, Mapping[str, int]]] = None,
                             floor: float = DEFAULT_FLOOR) -> list[FeatureInstance]:
    """(salience features, base score) per run entry, graded from the qrels.

    Pairs that cannot be scored (query without entities, document without
    mentions, or document missing from the corpus) receive the all-floor
    fallback vector so they stay rankable.
    """
    fallback = floor_features(bank, floor)
    psi_cache: dict[tuple[str, str], np.ndarray] = {}
    out = []
    fallbacks = 0
    for entry in base_run:
        query = queries_by_id.get(entry.query_id)
        if query is None:
            raise RankingError(f"run references unknown query {entry.query_id!r}")
        key = (entry.query_id, entry.doc_id)
        psi = psi_cache.get(key)
        if psi is None:
            doc = docs_by_id.get(entry.doc_id)
            try:
                if doc is None:
                    raise RankingError(f"doc {entry.doc_id!r} missing from corpus")
                psi = query_doc_features(query, doc, descriptions, params, bank, floor)
            except RankingError:
                psi = fallback
                fallbacks += 1
            psi_cache[key] = psi
        grade = 0
        if qrels is not None:
            grade = qrels.get(entry.query_id, {}).get(entry.doc_id, 0)
        out.append(FeatureInstance(entry.query_id, entry.doc_id, grade,
                                   np.concatenate([psi, [entry.score]])))
    if fallbacks:
        log.warning("feature extraction: %d pairs used the all-floor fallback",
                    fallbacks)
    return out
