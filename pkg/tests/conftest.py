import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))   # for the oracles module

from entsal.corpus import Document, DescriptionStore
from entsal.model import KernelBank, ModelParams, init_model_params

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def bank() -> KernelBank:
    return KernelBank.default()


def random_params(vocab_size: int, d: int = 8, seed: int = 0,
                  bank: KernelBank | None = None) -> ModelParams:
    """Generic random parameters; unlike init_model_params, W_p is dense so
    gradient checks exercise every path."""
    bank = bank or KernelBank.default()
    rng = np.random.default_rng(seed)
    params = init_model_params(vocab_size, d=d, bank=bank, seed=seed)
    params.W_p = rng.normal(scale=0.5, size=(d, 2 * d))
    params.W_c = rng.normal(scale=0.5, size=(d, 3 * d))
    params.V = rng.normal(scale=0.5, size=(vocab_size, d))
    params.W_s = rng.normal(scale=0.5, size=2 * bank.size)
    params.b_s = float(rng.normal())
    return params


def identity_projection_params(vocab_size: int, d: int = 4,
                               seed: int = 0) -> ModelParams:
    """W_p = [I | I] and no bias: KEE reduces to entity row + description block."""
    params = init_model_params(vocab_size, d=d, seed=seed)
    params.W_p = np.concatenate([np.eye(d), np.eye(d)], axis=1)
    return params


def make_doc(doc_id="d", words=(), mentions=(), salient=()) -> Document:
    return Document(doc_id=doc_id, words=tuple(words),
                    entity_mentions=tuple(mentions),
                    salient_entities=frozenset(salient))


def random_doc(rng: np.random.Generator, vocab_size: int, d: int,
               n_words_max: int = 50, n_mentions_max: int = 50,
               entity_lo: int | None = None) -> Document:
    """Random document over indices [entity_lo, vocab) for entities and
    [0, entity_lo) for words."""
    if entity_lo is None:
        entity_lo = vocab_size // 2
    n_words = int(rng.integers(0, n_words_max + 1))
    words = tuple(int(w) for w in rng.integers(0, entity_lo, size=n_words))
    n_mentions = int(rng.integers(1, n_mentions_max + 1))
    mentions = tuple(
        (int(rng.integers(entity_lo, vocab_size)),
         int(rng.integers(0, max(n_words, 1))))
        for _ in range(n_mentions))
    if n_words == 0:
        mentions = ()
    distinct = sorted({e for e, _ in mentions})
    salient = frozenset(distinct[: max(1, len(distinct) // 2)]) if distinct else frozenset()
    return Document(doc_id="rand", words=words, entity_mentions=mentions,
                    salient_entities=salient)


def store_from(entries: dict[int, tuple[int, ...]], max_words: int = 20) -> DescriptionStore:
    store = DescriptionStore(max_words=max_words)
    for e, words in entries.items():
        store.put(e, words)
    return store
