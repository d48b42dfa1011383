"""Frequency, one-step PageRank, and reduced feature-based salience baselines.

Also houses the shared linear pairwise ranker (hinge + L2, subgradient
descent) that both the feature baseline and the search re-ranker train with.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .corpus import Document, DescriptionStore
from .model import ModelParams, cosine, kee_embed

log = logging.getLogger(__name__)

LETOR_FEATURE_NAMES = ("frequency", "first_location", "embedding_vote")

_STD_GUARD = 1e-12


class BaselineError(ValueError):
    pass


def rank_by_score(scores: Mapping[int, float]) -> list[tuple[int, float]]:
    """Descending by score, ties broken by ascending entity index."""
    return sorted(scores.items(), key=lambda es: (-es[1], es[0]))


# ---------------------------------------------------------------------------
# Frequency

def frequency_scores(doc: Document) -> dict[int, float]:
    """Salience as raw mention count. No IDF."""
    return {e: float(c) for e, c in doc.mention_counts().items()}


# ---------------------------------------------------------------------------
# One-step PageRank over embedding similarities

def pagerank_scores(doc: Document, params: ModelParams,
                    descriptions: Optional[DescriptionStore],
                    alpha: float) -> dict[int, float]:
    """One random-walk step over a fully connected entity graph, mixed with
    normalized frequency.

    Nodes are the distinct entities (KEE vectors), edge weights are
    positive-part cosines with rows normalized to transition probabilities
    (an all-zero row falls back to uniform). Both mixture components are
    distributions, so the output sums to 1.
    """
    if not 0.0 <= alpha <= 1.0:
        raise BaselineError(f"alpha must be in [0, 1], got {alpha}")
    entities = doc.distinct_entities()
    n = len(entities)
    if n == 0:
        raise BaselineError(f"doc {doc.doc_id!r} has no entities to walk over")
    counts = doc.mention_counts()
    p = np.array([counts[e] for e in entities], dtype=np.float64)
    p /= p.sum()

    vecs = [kee_embed(e, descriptions, params) for e in entities]
    A = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            w = max(0.0, cosine(vecs[i], vecs[j]))
            A[i, j] = w
            A[j, i] = w
    row_sums = A.sum(axis=1)
    for i in range(n):
        if row_sums[i] <= 0.0:
            A[i, :] = 1.0 / n
        else:
            A[i, :] /= row_sums[i]

    walked = p @ A   # one step along row-stochastic transitions
    mixed = (1.0 - alpha) * p + alpha * walked
    return {e: float(s) for e, s in zip(entities, mixed)}


def fit_pagerank_alpha(docs: Sequence[Document], params: ModelParams,
                       descriptions: Optional[DescriptionStore],
                       grid: Optional[Sequence[float]] = None) -> float:
    """Grid-search alpha by P@1 on the given (dev) documents."""
    if grid is None:
        grid = [round(0.1 * i, 1) for i in range(11)]
    best_alpha, best_p1 = grid[0], -1.0
    for alpha in grid:
        hits = units = 0
        for doc in docs:
            if not doc.salient_entities or not doc.entity_mentions:
                continue
            ranked = rank_by_score(pagerank_scores(doc, params, descriptions, alpha))
            units += 1
            hits += int(ranked[0][0] in doc.salient_entities)
        if units == 0:
            raise BaselineError("no documents with salient entities to fit alpha on")
        p1 = hits / units
        if p1 > best_p1:
            best_alpha, best_p1 = alpha, p1
    return best_alpha


# ---------------------------------------------------------------------------
# Feature baseline (reduced: no parsing/NER/coreference sources)

@dataclass(frozen=True)
class EntityFeatureVector:
    frequency: float
    first_location: float    # first-mention token index / |words|, in [0, 1]
    embedding_vote: float    # sum over other entities of count * cosine(raw rows)

    def as_array(self) -> np.ndarray:
        return np.array([self.frequency, self.first_location, self.embedding_vote])

    def as_dict(self) -> dict[str, float]:
        return {"frequency": self.frequency, "first_location": self.first_location,
                "embedding_vote": self.embedding_vote}


def letor_features(doc: Document, params: ModelParams) -> dict[int, EntityFeatureVector]:
    """Per-entity features; embedding votes use the raw entity rows of V."""
    entities = doc.distinct_entities()
    if not entities:
        return {}
    counts = doc.mention_counts()
    first_pos = {}
    for e, pos in doc.entity_mentions:
        if e not in first_pos or pos < first_pos[e]:
            first_pos[e] = pos
    n_words = len(doc.words)
    out = {}
    for e in entities:
        vote = 0.0
        for other in entities:
            if other != e:
                vote += counts[other] * cosine(params.V[e], params.V[other])
        out[e] = EntityFeatureVector(
            frequency=float(counts[e]),
            first_location=first_pos[e] / n_words if n_words else 0.0,
            embedding_vote=vote,
        )
    return out


# ---------------------------------------------------------------------------
# Linear pairwise ranker

@dataclass
class LinearRankerParams:
    """Linear weights over named, z-scored features.

    mean/std are the training-data standardization statistics; std entries
    below the guard are stored as 1 so constant features contribute nothing.
    """

    feature_names: tuple[str, ...]
    weights: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"feature_names": list(self.feature_names),
                "weights": self.weights.tolist(),
                "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearRankerParams":
        return cls(feature_names=tuple(d["feature_names"]),
                   weights=np.asarray(d["weights"], dtype=np.float64),
                   mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


@dataclass
class LinearTrainConfig:
    lr: float = 0.01        # decayed as lr / sqrt(t) per full-batch step
    epochs: int = 500
    l2: float = 1e-4
    seed: int = 0


def _standardize_stats(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = vectors.mean(axis=0)
    std = vectors.std(axis=0)
    std = np.where(std < _STD_GUARD, 1.0, std)
    return mean, std


def train_linear_pairwise(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                          feature_names: Sequence[str],
                          config: Optional[LinearTrainConfig] = None,
                          trace: Optional[list] = None) -> LinearRankerParams:
    """Minimize sum of pairwise hinges plus L2 by full-batch subgradient descent.

    Subgradient steps are not monotone, so the best iterate by objective is
    tracked and returned; the best-so-far curve (appended per epoch to `trace`
    when given) is non-increasing. Deterministic given the config.
    """
    config = config or LinearTrainConfig()
    if not pairs:
        raise BaselineError("no training pairs")
    n_features = len(feature_names)
    pos = np.asarray([p for p, _ in pairs], dtype=np.float64)
    neg = np.asarray([n for _, n in pairs], dtype=np.float64)
    if pos.shape[1] != n_features or neg.shape[1] != n_features:
        raise BaselineError(f"feature dimension mismatch: pairs have "
                            f"{pos.shape[1]}/{neg.shape[1]} features, names {n_features}")

    mean, std = _standardize_stats(np.vstack([pos, neg]))
    dx = (pos - mean) / std - (neg - mean) / std

    def objective(w: np.ndarray) -> float:
        # overflow to +inf is acceptable here: such iterates simply never win
        with np.errstate(over="ignore"):
            margins = 1.0 - dx @ w
            return float(np.maximum(margins, 0.0).sum() + config.l2 * (w @ w))

    w = np.zeros(n_features)
    best_w = w.copy()
    best_obj = objective(w)
    for t in range(1, config.epochs + 1):
        active = (1.0 - dx @ w) > 0.0
        with np.errstate(over="ignore"):
            grad = -dx[active].sum(axis=0) + 2.0 * config.l2 * w
            w = w - (config.lr / np.sqrt(t)) * grad
        if not np.all(np.isfinite(w)):
            break   # diverged (e.g., extreme l2); the best iterate stands
        obj = objective(w)
        if obj < best_obj:
            best_obj = obj
            best_w = w.copy()
        if trace is not None:
            trace.append(best_obj)

    return LinearRankerParams(feature_names=tuple(feature_names), weights=best_w,
                              mean=mean, std=std)


def linear_score(params: LinearRankerParams,
                 features: Union[Mapping[str, float], np.ndarray, Sequence[float]]) -> float:
    """Score = weights . z-scored features. Mapping inputs are checked by name."""
    if isinstance(features, Mapping):
        unknown = set(features) - set(params.feature_names)
        if unknown:
            raise BaselineError(f"unknown feature names: {sorted(unknown)}")
        try:
            x = np.array([features[name] for name in params.feature_names],
                         dtype=np.float64)
        except KeyError as exc:
            raise BaselineError(f"missing feature {exc.args[0]!r}") from exc
    else:
        x = np.asarray(features, dtype=np.float64)
        if x.shape != (len(params.feature_names),):
            raise BaselineError(f"feature vector shape {x.shape} does not match "
                                f"{len(params.feature_names)} named features")
    z = (x - params.mean) / params.std
    return float(params.weights @ z)
