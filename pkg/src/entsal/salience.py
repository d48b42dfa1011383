"""Salience scoring and end-to-end training with a pairwise hinge loss.

The score of an entity in a document is a learned linear combination of its
2K kernel interaction scores. Training ranks salient entities above
non-salient ones within the same document; gradients are exact analytic
derivatives of the summed hinge loss, optimized with Adam.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._util import stable_hash
from .corpus import (Document, DescriptionStore, SaliencePair, Vocabulary,
                     make_salience_pairs, read_jsonl)
from .model import (Gradients, KernelBank, ModelParams, _kee_backward,
                    _kim_backward, _kim_forward, init_model_params)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Scoring

def score_entity(entity_index: int, doc: Document,
                 descriptions: Optional[DescriptionStore], params: ModelParams,
                 bank: KernelBank) -> float:
    """Salience score: weights dotted with the stacked kernel scores, plus bias."""
    cache = _kim_forward(entity_index, doc, descriptions, params, bank, {})
    return float(params.W_s @ cache.scores.stacked() + params.b_s)


def hinge_loss(score_pos: float, score_neg: float) -> float:
    return max(0.0, 1.0 - score_pos + score_neg)


def rank_entities(doc: Document, descriptions: Optional[DescriptionStore],
                  params: ModelParams, bank: KernelBank) -> list[tuple[int, float]]:
    """Distinct entities of the document, best first; ties break on entity index."""
    distinct = doc.distinct_entities()
    if not distinct:
        return []
    kee_cache: dict = {}
    scored = []
    for e in distinct:
        cache = _kim_forward(e, doc, descriptions, params, bank, kee_cache)
        scored.append((e, float(params.W_s @ cache.scores.stacked() + params.b_s)))
    scored.sort(key=lambda es: (-es[1], es[0]))
    return scored


# ---------------------------------------------------------------------------
# Gradients

def batch_loss(batch: Sequence[SaliencePair], descriptions: Optional[DescriptionStore],
               params: ModelParams, bank: KernelBank) -> float:
    """Summed hinge loss of a batch, sharing KEE work across pairs."""
    kee_cache: dict = {}
    score_cache: dict = {}

    def score(doc: Document, e: int) -> float:
        key = (id(doc), e)
        if key not in score_cache:
            c = _kim_forward(e, doc, descriptions, params, bank, kee_cache)
            score_cache[key] = float(params.W_s @ c.scores.stacked() + params.b_s)
        return score_cache[key]

    return sum(hinge_loss(score(p.doc, p.positive_entity),
                          score(p.doc, p.negative_entity)) for p in batch)


def gradients(batch: Sequence[SaliencePair], descriptions: Optional[DescriptionStore],
              params: ModelParams, bank: KernelBank) -> Gradients:
    """Exact analytic gradient of the summed hinge loss over the batch.

    Pairs that satisfy the margin (including exactly) contribute nothing.
    Scores repeated across pairs are forwarded once and receive their summed
    coefficient; each entity's KEE projection is backpropagated once.
    """
    if not batch:
        raise TrainingError("gradient batch must be non-empty")

    kee_cache: dict = {}
    kim_caches: dict = {}
    scores: dict = {}
    docs_by_key: dict = {}

    def forward(doc: Document, e: int) -> float:
        key = (id(doc), e)
        if key not in scores:
            cache = _kim_forward(e, doc, descriptions, params, bank, kee_cache)
            kim_caches[key] = cache
            docs_by_key[key] = doc
            scores[key] = float(params.W_s @ cache.scores.stacked() + params.b_s)
        return scores[key]

    total_loss = 0.0
    coeffs: dict = {}
    for pair in batch:
        f_pos = forward(pair.doc, pair.positive_entity)
        f_neg = forward(pair.doc, pair.negative_entity)
        loss = hinge_loss(f_pos, f_neg)
        total_loss += loss
        if loss > 0.0:
            kp = (id(pair.doc), pair.positive_entity)
            kn = (id(pair.doc), pair.negative_entity)
            coeffs[kp] = coeffs.get(kp, 0.0) - 1.0
            coeffs[kn] = coeffs.get(kn, 0.0) + 1.0

    grads = Gradients.zeros_like(params)
    grads.loss = total_loss
    dv_accum: dict = {}
    for key, g in coeffs.items():
        if g == 0.0:
            continue
        cache = kim_caches[key]
        grads.W_s += g * cache.scores.stacked()
        grads.b_s += g
        dkim = g * params.W_s
        _kim_backward(cache, dkim, params, bank, grads, dv_accum, kee_cache)
    for e, dv in dv_accum.items():
        _kee_backward(kee_cache[e], dv, params, grads)
    return grads


# ---------------------------------------------------------------------------
# Adam

@dataclass
class OptimizerState:
    """Standard Adam accumulators, one first/second moment per tensor."""

    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float) -> "OptimizerState":
        state = cls(lr=lr)
        for name in ("V", "W_c", "W_p", "W_s"):
            state.m[name] = np.zeros_like(getattr(params, name))
            state.v[name] = np.zeros_like(getattr(params, name))
        state.m["b_s"] = 0.0
        state.v["b_s"] = 0.0
        return state


def adam_step(params: ModelParams, grads: Gradients,
              state: OptimizerState) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update, in place. Deterministic."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in ("V", "W_c", "W_p", "W_s"):
        p = getattr(params, name)
        g = getattr(grads, name)
        if p.shape != g.shape:
            raise TrainingError(f"gradient shape {g.shape} != param shape {p.shape}"
                                f" for {name}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    g = grads.b_s
    state.m["b_s"] = state.beta1 * state.m["b_s"] + (1.0 - state.beta1) * g
    state.v["b_s"] = state.beta2 * state.v["b_s"] + (1.0 - state.beta2) * (g * g)
    params.b_s -= state.lr * (state.m["b_s"] / bc1) / (
        np.sqrt(state.v["b_s"] / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainConfig:
    dim: int = 128
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 3
    eval_interval: int = 1000   # dev evaluations, in batches
    max_epochs: int = 5
    max_pairs: int = 256        # per-document cap on sampled hinge pairs
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.lr < 0:
            raise TrainingError("lr must be >= 0")
        if self.dim < 1 or self.max_epochs < 1 or self.patience < 1:
            raise TrainingError("dim, max_epochs and patience must be >= 1")


@dataclass
class TrainResult:
    params: ModelParams
    bank: KernelBank
    history: list[tuple[int, float]]   # (batches seen, dev P@1)
    best_dev_p1: float


def dev_precision_at_1(docs: Sequence[Document], descriptions: Optional[DescriptionStore],
                       params: ModelParams, bank: KernelBank) -> float:
    """Mean P@1 over documents that carry at least one salient label."""
    hits = 0
    units = 0
    for doc in docs:
        if not doc.salient_entities:
            continue
        ranked = rank_entities(doc, descriptions, params, bank)
        if not ranked:
            continue
        units += 1
        hits += int(ranked[0][0] in doc.salient_entities)
    if units == 0:
        raise TrainingError("dev set has no documents with salient entities;"
                            " dev metric undefined")
    return hits / units


def train_salience(train_docs: Sequence[Document], dev_docs: Sequence[Document],
                   descriptions: Optional[DescriptionStore], vocab: Vocabulary,
                   config: TrainConfig, bank: Optional[KernelBank] = None,
                   init_embeddings: Optional[dict[int, np.ndarray]] = None) -> TrainResult:
    """Mini-batch pairwise training with dev-based early stopping.

    Keeps the checkpoint with the best dev P@1 (the first one on ties) and
    stops after `patience` evaluations without improvement or at max_epochs.
    Deterministic given the config seed.
    """
    config.validate()
    if not train_docs or not dev_docs:
        raise TrainingError("train and dev splits must be non-empty")
    bank = bank or KernelBank.default()
    params = init_model_params(vocab.total_size, d=config.dim, bank=bank,
                               seed=config.seed, init_embeddings=init_embeddings)

    state = OptimizerState.for_params(params, lr=config.lr)
    history: list[tuple[int, float]] = []
    batches_seen = 0

    best_metric = dev_precision_at_1(dev_docs, descriptions, params, bank)
    best_params = params.copy()
    history.append((0, best_metric))
    stale_evals = 0
    stop = False

    def evaluate() -> None:
        nonlocal best_metric, best_params, stale_evals, stop
        metric = dev_precision_at_1(dev_docs, descriptions, params, bank)
        history.append((batches_seen, metric))
        if metric > best_metric:
            best_metric = metric
            best_params = params.copy()
            stale_evals = 0
        else:
            stale_evals += 1
            if stale_evals >= config.patience:
                stop = True

    for epoch in range(config.max_epochs):
        pairs: list[SaliencePair] = []
        for doc in train_docs:
            pairs.extend(make_salience_pairs(
                doc, seed=stable_hash(config.seed, "pairs", epoch, doc.doc_id) % (2 ** 32),
                max_pairs=config.max_pairs))
        if not pairs:
            raise TrainingError("training split yields no salience pairs")
        order = np.random.default_rng([config.seed, epoch]).permutation(len(pairs))
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            grads = gradients(batch, descriptions, params, bank)
            adam_step(params, grads, state)
            params.check_finite()
            batches_seen += 1
            if batches_seen % config.eval_interval == 0:
                evaluate()
                if stop:
                    break
        if stop:
            break
        if batches_seen % config.eval_interval != 0:
            evaluate()   # epoch-end evaluation unless one just ran
            if stop:
                break

    return TrainResult(params=best_params, bank=bank, history=history,
                       best_dev_p1=best_metric)


# ---------------------------------------------------------------------------
# Optional external embedding initialization

def load_initial_embeddings(path: str, vocab: Vocabulary, d: int) -> dict[int, np.ndarray]:
    """Read JSONL {"symbol", "kind", "vector"} records into index -> vector.

    Symbols missing from the vocabulary are skipped; vectors must have
    dimension d.
    """
    out: dict[int, np.ndarray] = {}
    skipped = 0
    for rec in read_jsonl(path):
        kind = rec.get("kind")
        symbol = rec.get("symbol")
        vector = rec.get("vector")
        if kind not in ("word", "entity") or not isinstance(symbol, str) \
                or not isinstance(vector, list):
            raise TrainingError(f"bad embedding record: {json.dumps(rec)[:120]}")
        if len(vector) != d:
            raise TrainingError(f"embedding for {symbol!r} has dimension "
                                f"{len(vector)}, expected {d}")
        if kind == "word":
            idx = vocab.word_index(symbol)
            known = symbol in vocab.word_symbols or symbol == "Unk_word"
        else:
            idx = vocab.entity_index(symbol)
            known = vocab.has_entity(symbol) or symbol == "Unk_entity"
        if not known:
            skipped += 1
            continue
        out[idx] = np.asarray(vector, dtype=np.float64)
    if skipped:
        log.info("skipped %d embedding records for out-of-vocabulary symbols", skipped)
    return out
