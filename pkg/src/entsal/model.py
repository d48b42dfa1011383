"""Knowledge-enriched entity embeddings and kernel interaction scoring.

An entity's vector is the projection of its learned embedding concatenated
with a description embedding composed by a width-3 CNN with coordinatewise
max pooling. A target entity interacts with a document through two banks of
RBF kernels over cosine similarities: one against the KEE vectors of every
mention occurrence, one against the raw embedding rows of every word token.

Everything here is a pure function of immutable parameters; the private
*_forward/*_backward pairs carry the caches the trainer needs for exact
analytic gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._util import atomic_write_text
from .corpus import Document, DescriptionStore, Vocabulary

DEFAULT_DIM = 128
CNN_WIDTH = 3

# corpus.Vocabulary pins Unk_word to index 0; used to right-pad short descriptions
UNK_WORD_INDEX = 0

_NORM_EPS = 1e-12

CHECKPOINT_FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Kernel bank

class KernelBank:
    """RBF kernels (mu_k, sigma_k) pooled over cosine similarities.

    The default bank is one exact-match kernel (mu=1, sigma=1e-3) at index 0
    followed by ten soft kernels with mu in {-0.9, -0.7, ..., 0.9}, sigma=0.1.
    """

    EXACT_INDEX = 0

    def __init__(self, mus: Sequence[float], sigmas: Sequence[float]):
        self.mus = np.asarray(mus, dtype=np.float64)
        self.sigmas = np.asarray(sigmas, dtype=np.float64)
        if self.mus.shape != self.sigmas.shape or self.mus.ndim != 1:
            raise ModelError("kernel mus and sigmas must be 1-d and the same length")
        if np.any(self.sigmas <= 0):
            raise ModelError("kernel sigmas must be positive")

    @property
    def size(self) -> int:
        return len(self.mus)

    @classmethod
    def default(cls) -> "KernelBank":
        mus = [1.0] + [round(-0.9 + 0.2 * i, 1) for i in range(10)]
        sigmas = [1e-3] + [0.1] * 10
        return cls(mus, sigmas)

    def evaluate(self, cosines: np.ndarray) -> np.ndarray:
        """Per-item kernel values: [M] cosines -> [M, K] matrix."""
        c = np.asarray(cosines, dtype=np.float64).reshape(-1, 1)
        diff = c - self.mus[None, :]
        return np.exp(-(diff ** 2) / (2.0 * self.sigmas[None, :] ** 2))

    def derivative(self, cosines: np.ndarray, kmat: np.ndarray) -> np.ndarray:
        """d(kernel)/d(cosine) per item, given the evaluated kernel matrix."""
        c = np.asarray(cosines, dtype=np.float64).reshape(-1, 1)
        return kmat * (self.mus[None, :] - c) / (self.sigmas[None, :] ** 2)

    def to_dict(self) -> dict:
        return {"mu": self.mus.tolist(), "sigma": self.sigmas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelBank":
        return cls(d["mu"], d["sigma"])


@dataclass(frozen=True)
class KernelScores:
    """The 2K kernel-pooled interaction scores of one (entity, document) pair."""

    entity_kernels: np.ndarray
    word_kernels: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.entity_kernels, self.word_kernels])


# ---------------------------------------------------------------------------
# Parameters

@dataclass
class ModelParams:
    """All learned tensors. V is shared by words and entities (one index space)."""

    V: np.ndarray        # [vocab_total, d] embedding table
    W_c: np.ndarray      # [d, h*d] CNN filter over h concatenated word embeddings
    W_p: np.ndarray      # [d, 2d] projection of (entity embedding, description embedding)
    W_s: np.ndarray      # [2K] salience weights over stacked kernel scores
    b_s: float           # salience bias

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def h(self) -> int:
        return self.W_c.shape[1] // self.d

    def validate_shapes(self, kernel_count: int) -> None:
        d = self.d
        if self.W_c.shape != (d, CNN_WIDTH * d):
            raise ModelError(f"W_c shape {self.W_c.shape} != ({d}, {CNN_WIDTH * d})")
        if self.W_p.shape != (d, 2 * d):
            raise ModelError(f"W_p shape {self.W_p.shape} != ({d}, {2 * d})")
        if self.W_s.shape != (2 * kernel_count,):
            raise ModelError(f"W_s shape {self.W_s.shape} != ({2 * kernel_count},)")

    def check_finite(self) -> None:
        for name in ("V", "W_c", "W_p", "W_s"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"tensor {name} contains NaN or Inf")
        if not np.isfinite(self.b_s):
            raise ModelError("b_s is not finite")

    def copy(self) -> "ModelParams":
        return ModelParams(self.V.copy(), self.W_c.copy(), self.W_p.copy(),
                           self.W_s.copy(), float(self.b_s))


def init_model_params(vocab_size: int, d: int = DEFAULT_DIM,
                      bank: Optional[KernelBank] = None, seed: int = 0,
                      init_embeddings: Optional[dict[int, np.ndarray]] = None) -> ModelParams:
    """Fresh parameters: embeddings uniform in [-0.01, 0.01], W_p = [I | I].

    init_embeddings maps vocabulary indices to externally trained vectors and
    overrides the random rows.
    """
    bank = bank or KernelBank.default()
    rng = np.random.default_rng(seed)
    V = rng.uniform(-0.01, 0.01, size=(vocab_size, d))
    W_c = rng.uniform(-1.0, 1.0, size=(d, CNN_WIDTH * d)) / np.sqrt(CNN_WIDTH * d)
    W_p = np.concatenate([np.eye(d), np.eye(d)], axis=1)
    W_s = rng.uniform(-0.1, 0.1, size=2 * bank.size)
    if init_embeddings:
        for idx, vec in init_embeddings.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (d,):
                raise ModelError(f"initial embedding for index {idx} has shape {vec.shape},"
                                 f" expected ({d},)")
            V[idx] = vec
    return ModelParams(V=V, W_c=W_c, W_p=W_p, W_s=W_s, b_s=0.0)


@dataclass
class Gradients:
    """Gradient tensors mirroring ModelParams, plus the loss they came from."""

    V: np.ndarray
    W_c: np.ndarray
    W_p: np.ndarray
    W_s: np.ndarray
    b_s: float
    loss: float = 0.0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(V=np.zeros_like(params.V), W_c=np.zeros_like(params.W_c),
                   W_p=np.zeros_like(params.W_p), W_s=np.zeros_like(params.W_s),
                   b_s=0.0)


# ---------------------------------------------------------------------------
# Cosine

def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1]; zero if either norm is ~0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ModelError(f"cosine dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < _NORM_EPS or nv < _NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _cosines_to_matrix(target: np.ndarray, ctx: np.ndarray):
    """Clamped cosines of target against each row of ctx.

    Returns (cos [M], grad_ok [M], nt, nc [M]). grad_ok is False where the
    zero-norm convention applied or the raw value sat on/over the clamp
    boundary; both conventions carry zero gradient there.
    """
    nt = float(np.linalg.norm(target))
    nc = np.linalg.norm(ctx, axis=1)
    ok = (nt >= _NORM_EPS) & (nc >= _NORM_EPS)
    raw = np.zeros(len(ctx))
    if nt >= _NORM_EPS:
        np.divide(ctx @ target, nc * nt, out=raw, where=ok)
    cos = np.clip(raw, -1.0, 1.0)
    cos[~ok] = 0.0
    grad_ok = ok & (np.abs(raw) < 1.0)
    return cos, grad_ok, nt, nc


def _cosine_pair_grads(u, v, nu, nv, c, dc):
    """Backward of c = cos(u, v): returns (du, dv) for upstream dc."""
    inv = 1.0 / (nu * nv)
    du = dc * (v * inv - c * u / (nu * nu))
    dv = dc * (u * inv - c * v / (nv * nv))
    return du, dv


# ---------------------------------------------------------------------------
# Description embedding (CNN + max pool)

@dataclass
class _DescCache:
    word_indices: tuple[int, ...]   # padded to >= CNN_WIDTH
    windows: np.ndarray             # [P, h*d] stacked window inputs
    argmax: np.ndarray              # [d] winning window per coordinate (first on ties)
    v: np.ndarray                   # [d] pooled description embedding


def _describe_forward(desc_word_indices: Sequence[int],
                      params: ModelParams) -> Optional[_DescCache]:
    """None for an empty sequence (v_D = 0); otherwise the pooled embedding."""
    idx = list(desc_word_indices)
    if not idx:
        return None
    h = CNN_WIDTH
    while len(idx) < h:
        idx.append(UNK_WORD_INDEX)
    emb = params.V[idx]                       # [L, d]
    n_windows = len(idx) - h + 1
    windows = np.stack([emb[p:p + h].reshape(-1) for p in range(n_windows)])
    conv = windows @ params.W_c.T             # [P, d]
    argmax = np.argmax(conv, axis=0)          # np.argmax takes the first maximum
    v = conv[argmax, np.arange(params.d)]
    return _DescCache(tuple(idx), windows, argmax, v)


def describe_embedding(desc_word_indices: Sequence[int], params: ModelParams) -> np.ndarray:
    """Compose description words by CNN windows and coordinatewise max pooling.

    Sequences shorter than the CNN width are right-padded with the Unk_word
    embedding; an empty sequence yields the zero vector.
    """
    cache = _describe_forward(desc_word_indices, params)
    if cache is None:
        return np.zeros(params.d)
    return cache.v.copy()


def _describe_backward(cache: _DescCache, dv: np.ndarray, params: ModelParams,
                       grads: Gradients) -> None:
    # max pool routes each coordinate's gradient to its winning window only
    h = CNN_WIDTH
    d = params.d
    for p in np.unique(cache.argmax):
        coords = np.flatnonzero(cache.argmax == p)
        x_p = cache.windows[p]
        grads.W_c[coords, :] += np.outer(dv[coords], x_p)
        dx = params.W_c[coords, :].T @ dv[coords]     # [h*d]
        dx = dx.reshape(h, d)
        for t in range(h):
            grads.V[cache.word_indices[p + t]] += dx[t]


# ---------------------------------------------------------------------------
# Knowledge enriched embedding

@dataclass
class _KeeCache:
    entity_index: int
    desc: Optional[_DescCache]
    concat: np.ndarray     # [2d] = (entity embedding, description embedding)
    v: np.ndarray          # [d] KEE vector
    norm: float


def _kee_forward(entity_index: int, descriptions: Optional[DescriptionStore],
                 params: ModelParams) -> _KeeCache:
    desc_words = descriptions.get(entity_index) if descriptions is not None else None
    desc = _describe_forward(desc_words, params) if desc_words else None
    v_d = desc.v if desc is not None else np.zeros(params.d)
    concat = np.concatenate([params.V[entity_index], v_d])
    v = params.W_p @ concat
    return _KeeCache(entity_index, desc, concat, v, float(np.linalg.norm(v)))


def kee_embed(entity_index: int, descriptions: Optional[DescriptionStore],
              params: ModelParams) -> np.ndarray:
    """KEE vector: project the entity embedding concatenated with its
    description embedding; an absent description contributes a zero block."""
    if not 0 <= entity_index < len(params.V):
        raise ModelError(f"entity index {entity_index} outside embedding table")
    return _kee_forward(entity_index, descriptions, params).v.copy()


def _kee_backward(cache: _KeeCache, dv: np.ndarray, params: ModelParams,
                  grads: Gradients) -> None:
    grads.W_p += np.outer(dv, cache.concat)
    dconcat = params.W_p.T @ dv
    d = params.d
    grads.V[cache.entity_index] += dconcat[:d]
    if cache.desc is not None:
        _describe_backward(cache.desc, dconcat[d:], params, grads)


# ---------------------------------------------------------------------------
# Kernel pooling and the interaction model

def kernel_pool(target: np.ndarray, context: Sequence[np.ndarray],
                bank: KernelBank) -> np.ndarray:
    """Sum each kernel over the cosines of target vs every context vector."""
    if len(context) == 0:
        return np.zeros(bank.size)
    ctx = np.asarray(context, dtype=np.float64)
    if ctx.shape[1] != len(target):
        raise ModelError(f"context dimension {ctx.shape[1]} != target {len(target)}")
    cos, _, _, _ = _cosines_to_matrix(np.asarray(target, dtype=np.float64), ctx)
    return bank.evaluate(cos).sum(axis=0)


@dataclass
class _KimCache:
    target: _KeeCache
    mention_indices: tuple[int, ...]
    ent_cos: np.ndarray
    ent_grad_ok: np.ndarray
    ent_nc: np.ndarray
    ent_kmat: np.ndarray
    word_indices: tuple[int, ...]
    word_cos: np.ndarray
    word_grad_ok: np.ndarray
    word_nc: np.ndarray
    word_kmat: np.ndarray
    scores: KernelScores


def _kim_forward(entity_index: int, doc: Document,
                 descriptions: Optional[DescriptionStore], params: ModelParams,
                 bank: KernelBank, kee_cache: dict[int, _KeeCache]) -> _KimCache:
    if not 0 <= entity_index < len(params.V):
        raise ModelError(f"entity index {entity_index} outside embedding table")

    def kee(e: int) -> _KeeCache:
        c = kee_cache.get(e)
        if c is None:
            c = kee_cache[e] = _kee_forward(e, descriptions, params)
        return c

    target = kee(entity_index)
    mention_indices = tuple(e for e, _ in doc.entity_mentions)

    if mention_indices:
        ctx = np.stack([kee(e).v for e in mention_indices])
        ent_cos, ent_ok, _, ent_nc = _cosines_to_matrix(target.v, ctx)
        # a mention of the target itself is structurally cos=1 with no gradient
        self_mask = np.array([e == entity_index for e in mention_indices])
        ent_cos[self_mask] = 1.0
        ent_ok &= ~self_mask
        ent_kmat = bank.evaluate(ent_cos)
        entity_kernels = ent_kmat.sum(axis=0)
    else:
        ent_cos = np.zeros(0)
        ent_ok = np.zeros(0, dtype=bool)
        ent_nc = np.zeros(0)
        ent_kmat = np.zeros((0, bank.size))
        entity_kernels = np.zeros(bank.size)

    word_indices = doc.words
    if word_indices:
        rows = params.V[list(word_indices)]
        word_cos, word_ok, _, word_nc = _cosines_to_matrix(target.v, rows)
        word_kmat = bank.evaluate(word_cos)
        word_kernels = word_kmat.sum(axis=0)
    else:
        word_cos = np.zeros(0)
        word_ok = np.zeros(0, dtype=bool)
        word_nc = np.zeros(0)
        word_kmat = np.zeros((0, bank.size))
        word_kernels = np.zeros(bank.size)

    return _KimCache(
        target=target, mention_indices=mention_indices,
        ent_cos=ent_cos, ent_grad_ok=ent_ok, ent_nc=ent_nc, ent_kmat=ent_kmat,
        word_indices=word_indices, word_cos=word_cos, word_grad_ok=word_ok,
        word_nc=word_nc, word_kmat=word_kmat,
        scores=KernelScores(entity_kernels=entity_kernels, word_kernels=word_kernels),
    )


def kim(entity_index: int, doc: Document, descriptions: Optional[DescriptionStore],
        params: ModelParams, bank: KernelBank) -> KernelScores:
    """Kernel interaction scores of a target entity against a document.

    The target need not be mentioned; when it is, its own mentions are part of
    the entity context, which is what makes the exact-match kernel count its
    mention frequency.
    """
    return _kim_forward(entity_index, doc, descriptions, params, bank, {}).scores


def _kim_backward(cache: _KimCache, dkim: np.ndarray, params: ModelParams,
                  bank: KernelBank, grads: Gradients,
                  dv_accum: dict[int, np.ndarray], kee_cache: dict[int, _KeeCache]) -> None:
    """Accumulate gradients of dkim . KIM into grads and per-entity dv_accum.

    dv_accum defers the shared KEE backward so each entity's projection is
    backpropagated once per batch regardless of how many scores touched it.
    """
    K = bank.size
    u_ent, u_word = dkim[:K], dkim[K:]
    d = params.d
    tgt = cache.target

    def add_dv(e: int, dv: np.ndarray) -> None:
        acc = dv_accum.get(e)
        if acc is None:
            dv_accum[e] = dv.copy()
        else:
            acc += dv

    if len(cache.mention_indices) and np.any(cache.ent_grad_ok):
        dcos = bank.derivative(cache.ent_cos, cache.ent_kmat) @ u_ent
        for j in np.flatnonzero(cache.ent_grad_ok):
            e_j = cache.mention_indices[j]
            ctx = kee_cache[e_j]
            du, dv = _cosine_pair_grads(tgt.v, ctx.v, tgt.norm, cache.ent_nc[j],
                                        cache.ent_cos[j], dcos[j])
            add_dv(tgt.entity_index, du)
            add_dv(e_j, dv)

    if len(cache.word_indices) and np.any(cache.word_grad_ok):
        dcos = bank.derivative(cache.word_cos, cache.word_kmat) @ u_word
        for j in np.flatnonzero(cache.word_grad_ok):
            w_j = cache.word_indices[j]
            row = params.V[w_j]
            du, dv = _cosine_pair_grads(tgt.v, row, tgt.norm, cache.word_nc[j],
                                        cache.word_cos[j], dcos[j])
            add_dv(tgt.entity_index, du)
            grads.V[w_j] += dv


# ---------------------------------------------------------------------------
# Checkpoint round trip

def save_checkpoint(path: str, params: ModelParams, bank: KernelBank,
                    vocab: Vocabulary) -> None:
    """Single JSON document; floats serialize via repr so the round trip is
    bit-identical."""
    params.validate_shapes(bank.size)
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "d": params.d,
        "h": params.h,
        "kernels": bank.to_dict(),
        "vocabulary": vocab.to_dict(),
        "V": params.V.tolist(),
        "W_c": params.W_c.tolist(),
        "W_p": params.W_p.tolist(),
        "W_s": params.W_s.tolist(),
        "b_s": float(params.b_s),
    }
    atomic_write_text(path, json.dumps(doc) + "\n")


def load_checkpoint(path: str) -> tuple[ModelParams, KernelBank, Vocabulary]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ModelError(f"unsupported checkpoint format_version "
                         f"{doc.get('format_version')!r}")
    bank = KernelBank.from_dict(doc["kernels"])
    vocab = Vocabulary.from_dict(doc["vocabulary"])
    params = ModelParams(
        V=np.asarray(doc["V"], dtype=np.float64),
        W_c=np.asarray(doc["W_c"], dtype=np.float64),
        W_p=np.asarray(doc["W_p"], dtype=np.float64),
        W_s=np.asarray(doc["W_s"], dtype=np.float64),
        b_s=float(doc["b_s"]),
    )
    if params.d != doc["d"] or params.h != doc["h"]:
        raise ModelError("checkpoint tensor shapes disagree with declared d/h")
    if len(params.V) != vocab.total_size:
        raise ModelError("embedding table does not match vocabulary size")
    params.validate_shapes(bank.size)
    params.check_finite()
    return params, bank, vocab
