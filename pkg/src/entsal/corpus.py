"""Document/query/label data: reading, validation, encoding, and synthetic generation.

Documents arrive pre-tokenized as JSON Lines:
    {"doc_id": str, "words": [str], "entities": [{"id": str, "positions": [int]}],
     "salient": [str]}
Descriptions: {"entity_id": str, "words": [str]}
Queries:      {"query_id": str, "words": [str], "entities": [str]}

Words and entities live in separate namespaces but share one index space so a
single embedding matrix covers both. Entity mentions are a multiset: one
element per (entity, position) occurrence, so repeated mentions count more
than once downstream.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from ._util import stable_hash

log = logging.getLogger(__name__)

UNK_WORD = "Unk_word"
UNK_ENTITY = "Unk_entity"

DEFAULT_MIN_COUNT = 2
DEFAULT_DESCRIPTION_WORDS = 20
DEFAULT_MAX_PAIRS = 256


class CorpusError(ValueError):
    """A record failed schema validation or an operation precondition."""


# ---------------------------------------------------------------------------
# Vocabulary

class Vocabulary:
    """Joint word/entity symbol table over one shared index space.

    Layout: index 0 is Unk_word, index 1 is Unk_entity, then kept words,
    then kept entities. Lookups of unseen symbols return the matching Unk
    index; both Unk symbols exist even for an empty corpus.
    """

    def __init__(self, word_symbols: Sequence[str], entity_symbols: Sequence[str]):
        self.word_symbols = tuple(word_symbols)
        self.entity_symbols = tuple(entity_symbols)
        self.unk_word_index = 0
        self.unk_entity_index = 1
        self._word_index = {w: 2 + i for i, w in enumerate(self.word_symbols)}
        self._entity_index = {
            e: 2 + len(self.word_symbols) + i for i, e in enumerate(self.entity_symbols)
        }
        if len(self._word_index) != len(self.word_symbols):
            raise CorpusError("duplicate word symbol in vocabulary")
        if len(self._entity_index) != len(self.entity_symbols):
            raise CorpusError("duplicate entity symbol in vocabulary")

    @property
    def total_size(self) -> int:
        return 2 + len(self.word_symbols) + len(self.entity_symbols)

    def word_index(self, symbol: str) -> int:
        return self._word_index.get(symbol, self.unk_word_index)

    def entity_index(self, symbol: str) -> int:
        return self._entity_index.get(symbol, self.unk_entity_index)

    def has_entity(self, symbol: str) -> bool:
        return symbol in self._entity_index

    def symbol_of(self, index: int) -> tuple[str, str]:
        """Return (kind, symbol) for an index; kind is 'word' or 'entity'."""
        if index == self.unk_word_index:
            return "word", UNK_WORD
        if index == self.unk_entity_index:
            return "entity", UNK_ENTITY
        nw = len(self.word_symbols)
        if 2 <= index < 2 + nw:
            return "word", self.word_symbols[index - 2]
        if 2 + nw <= index < self.total_size:
            return "entity", self.entity_symbols[index - 2 - nw]
        raise CorpusError(f"index {index} outside vocabulary of size {self.total_size}")

    def to_dict(self) -> dict:
        return {"words": list(self.word_symbols), "entities": list(self.entity_symbols)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], d["entities"])


# ---------------------------------------------------------------------------
# Encoded document

@dataclass(frozen=True)
class Document:
    """A document encoded against a vocabulary.

    words: token indices (full multiset, duplicates kept).
    entity_mentions: one (entity_index, token_position) pair per mention
        occurrence, duplicates at the same position allowed and counted.
    salient_entities: subset of the distinct mentioned entity indices.
    """

    doc_id: str
    words: tuple[int, ...]
    entity_mentions: tuple[tuple[int, int], ...]
    salient_entities: frozenset[int]

    def distinct_entities(self) -> tuple[int, ...]:
        return tuple(sorted({e for e, _ in self.entity_mentions}))

    def mention_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e, _ in self.entity_mentions:
            counts[e] = counts.get(e, 0) + 1
        return counts


@dataclass
class EncodeStats:
    """Counters accumulated while encoding; dropped labels are warnings, not errors."""

    documents: int = 0
    dropped_salient_labels: int = 0
    unseen_words: int = 0
    unseen_entities: int = 0


class DescriptionStore:
    """Entity descriptions as word-index sequences, truncated at storage time.

    Absence is distinct from emptiness: get() returns None for entities with
    no stored description and () for an explicitly empty one.
    """

    def __init__(self, max_words: int = DEFAULT_DESCRIPTION_WORDS):
        if max_words < 1:
            raise CorpusError("max_words must be >= 1")
        self.max_words = max_words
        self._store: dict[int, tuple[int, ...]] = {}

    def put(self, entity_index: int, word_indices: Sequence[int]) -> None:
        self._store[entity_index] = tuple(word_indices[: self.max_words])

    def get(self, entity_index: int) -> Optional[tuple[int, ...]]:
        return self._store.get(entity_index)

    def __contains__(self, entity_index: int) -> bool:
        return entity_index in self._store

    def __len__(self) -> int:
        return len(self._store)


@dataclass(frozen=True)
class SaliencePair:
    """One training pair: rank positive_entity above negative_entity in doc."""

    doc: Document
    positive_entity: int
    negative_entity: int


# ---------------------------------------------------------------------------
# Raw-record validation

def _check(cond: bool, doc_id: str, field_name: str, detail: str) -> None:
    if not cond:
        raise CorpusError(f"doc {doc_id!r}: field {field_name!r} {detail}")


def validate_raw_document(rec: dict) -> None:
    """Schema-validate one raw document record; errors name doc_id and field."""
    if not isinstance(rec, dict):
        raise CorpusError("document record is not an object")
    doc_id = rec.get("doc_id")
    if not isinstance(doc_id, str) or not doc_id:
        raise CorpusError(f"doc {doc_id!r}: field 'doc_id' must be a non-empty string")
    words = rec.get("words")
    _check(isinstance(words, list), doc_id, "words", "must be a list")
    _check(all(isinstance(w, str) for w in words), doc_id, "words", "must contain strings")
    entities = rec.get("entities")
    _check(isinstance(entities, list), doc_id, "entities", "must be a list")
    n_words = len(words)
    n_mentions = 0
    for ent in entities:
        _check(isinstance(ent, dict), doc_id, "entities", "entries must be objects")
        _check(isinstance(ent.get("id"), str) and ent["id"] != "", doc_id,
               "entities.id", "must be a non-empty string")
        positions = ent.get("positions")
        _check(isinstance(positions, list), doc_id, "entities.positions", "must be a list")
        for p in positions:
            _check(isinstance(p, int) and not isinstance(p, bool), doc_id,
                   "entities.positions", "must contain integers")
            _check(0 <= p < n_words, doc_id, "entities.positions",
                   f"position {p} out of range [0, {n_words})")
        n_mentions += len(positions)
    salient = rec.get("salient")
    _check(isinstance(salient, list), doc_id, "salient", "must be a list")
    _check(all(isinstance(s, str) for s in salient), doc_id, "salient",
           "must contain strings")
    _check(n_words > 0 or n_mentions == 0, doc_id, "words",
           "may be empty only when there are no entity mentions")


def validate_raw_query(rec: dict) -> None:
    if not isinstance(rec, dict):
        raise CorpusError("query record is not an object")
    qid = rec.get("query_id")
    if not isinstance(qid, str) or not qid:
        raise CorpusError(f"query {qid!r}: field 'query_id' must be a non-empty string")
    _check(isinstance(rec.get("words"), list), qid, "words", "must be a list")
    entities = rec.get("entities")
    _check(isinstance(entities, list), qid, "entities", "must be a list")
    _check(all(isinstance(e, str) for e in entities), qid, "entities",
           "must contain strings")


# ---------------------------------------------------------------------------
# JSON Lines IO

def read_jsonl(path: str) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def write_jsonl(path: str, records: Iterable[dict]) -> None:
    from ._util import atomic_write_text

    lines = [json.dumps(rec, ensure_ascii=False) for rec in records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def iter_raw_documents(path: str) -> Iterator[dict]:
    for rec in read_jsonl(path):
        validate_raw_document(rec)
        yield rec


# ---------------------------------------------------------------------------
# Operations

def build_vocabulary(doc_stream: Iterable[dict], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """Count word/entity occurrences and keep symbols seen >= min_count times.

    Words are counted per token, entities per mention occurrence. Kept symbols
    are ordered by (count desc, symbol asc) so construction is deterministic
    regardless of stream sharding.
    """
    if min_count < 1:
        raise CorpusError("min_count must be >= 1")
    word_counts: dict[str, int] = {}
    entity_counts: dict[str, int] = {}
    for rec in doc_stream:
        validate_raw_document(rec)
        for w in rec["words"]:
            word_counts[w] = word_counts.get(w, 0) + 1
        for ent in rec["entities"]:
            n = len(ent["positions"])
            if n:
                entity_counts[ent["id"]] = entity_counts.get(ent["id"], 0) + n

    def kept(counts: dict[str, int]) -> list[str]:
        items = [(s, c) for s, c in counts.items() if c >= min_count]
        items.sort(key=lambda sc: (-sc[1], sc[0]))
        return [s for s, _ in items]

    return Vocabulary(kept(word_counts), kept(entity_counts))


def encode_document(raw_doc: dict, vocab: Vocabulary,
                    stats: Optional[EncodeStats] = None) -> Document:
    """Map a validated raw record through the vocabulary.

    Unseen symbols become the matching Unk index. Salient labels that name an
    entity never mentioned in the document are dropped and counted, not
    rejected: real annotation pipelines produce them.
    """
    validate_raw_document(raw_doc)
    if stats is None:
        stats = EncodeStats()
    stats.documents += 1

    words = []
    for w in raw_doc["words"]:
        idx = vocab.word_index(w)
        if idx == vocab.unk_word_index and w != UNK_WORD:
            stats.unseen_words += 1
        words.append(idx)

    mentions: list[tuple[int, int]] = []
    for ent in raw_doc["entities"]:
        idx = vocab.entity_index(ent["id"])
        if idx == vocab.unk_entity_index and ent["id"] != UNK_ENTITY:
            stats.unseen_entities += len(ent["positions"])
        for pos in ent["positions"]:
            mentions.append((idx, pos))

    mentioned = {e for e, _ in mentions}
    salient = set()
    for s in raw_doc["salient"]:
        idx = vocab.entity_index(s)
        if idx in mentioned:
            salient.add(idx)
        else:
            stats.dropped_salient_labels += 1
            log.warning("doc %r: salient entity %r not mentioned; label dropped",
                        raw_doc["doc_id"], s)

    return Document(
        doc_id=raw_doc["doc_id"],
        words=tuple(words),
        entity_mentions=tuple(mentions),
        salient_entities=frozenset(salient),
    )


def encode_documents(raw_docs: Iterable[dict], vocab: Vocabulary,
                     stats: Optional[EncodeStats] = None) -> list[Document]:
    stats = stats if stats is not None else EncodeStats()
    return [encode_document(rec, vocab, stats) for rec in raw_docs]


@dataclass
class DescriptionLoadStats:
    stored: int = 0
    skipped_unknown_entity: int = 0
    duplicate_overwrites: int = 0


def load_descriptions(desc_stream: Iterable[dict], vocab: Vocabulary,
                      max_words: int = DEFAULT_DESCRIPTION_WORDS,
                      stats: Optional[DescriptionLoadStats] = None) -> DescriptionStore:
    """Build a DescriptionStore; sequences are truncated to max_words up front.

    Entities absent from the vocabulary are skipped (counted); a duplicate
    entity_id overwrites the earlier record (last one wins, counted).
    """
    store = DescriptionStore(max_words=max_words)
    if stats is None:
        stats = DescriptionLoadStats()
    for rec in desc_stream:
        if not isinstance(rec, dict) or not isinstance(rec.get("entity_id"), str):
            raise CorpusError("description record must have a string 'entity_id'")
        words = rec.get("words")
        if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise CorpusError(
                f"description for {rec.get('entity_id')!r}: 'words' must be a list of strings")
        if not vocab.has_entity(rec["entity_id"]):
            stats.skipped_unknown_entity += 1
            continue
        idx = vocab.entity_index(rec["entity_id"])
        if idx in store:
            stats.duplicate_overwrites += 1
            log.warning("duplicate description for entity %r; last record wins",
                        rec["entity_id"])
        store.put(idx, [vocab.word_index(w) for w in words[:max_words]])
        stats.stored += 1
    return store


def make_salience_pairs(doc: Document, seed: int,
                        max_pairs: int = DEFAULT_MAX_PAIRS) -> list[SaliencePair]:
    """All (salient, non-salient) entity pairs of a document, capped at max_pairs.

    When the cross product exceeds max_pairs, a uniform sample without
    replacement is drawn with the given seed. Output order is deterministic.
    """
    positives = sorted(doc.salient_entities)
    negatives = sorted(set(doc.distinct_entities()) - doc.salient_entities)
    if not positives or not negatives:
        return []
    total = len(positives) * len(negatives)
    if total <= max_pairs:
        chosen = range(total)
    else:
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(total, size=max_pairs, replace=False))
    return [
        SaliencePair(doc, positives[i // len(negatives)], negatives[i % len(negatives)])
        for i in chosen
    ]


# ---------------------------------------------------------------------------
# Synthetic corpus generation

@dataclass
class SyntheticSpec:
    """Configuration for the synthetic topical corpus.

    Every document mixes entities of one home topic (the salient ones, whose
    co-mentioned neighbors share the topic) with a few off-topic distractors
    and one global stop entity that is always the most frequent mention yet
    never salient.
    """

    topics: int = 5
    entities_per_topic: int = 20
    train_docs: int = 200
    dev_docs: int = 200
    test_docs: int = 200
    doc_len_min: int = 40
    doc_len_max: int = 80
    salient_min: int = 3
    salient_max: int = 5
    distractors_min: int = 1
    distractors_max: int = 3
    words_per_topic: int = 30
    common_words: int = 15
    description_words: int = 8
    stop_entity_id: str = "E_STOP"

    def validate(self) -> None:
        if self.topics < 1:
            raise CorpusError("synthetic spec: topics must be >= 1")
        if self.entities_per_topic < 1:
            raise CorpusError("synthetic spec: entities_per_topic must be >= 1")
        if min(self.train_docs, self.dev_docs, self.test_docs) < 1:
            raise CorpusError("synthetic spec: every split needs at least one document")
        if not (1 <= self.doc_len_min <= self.doc_len_max):
            raise CorpusError("synthetic spec: need 1 <= doc_len_min <= doc_len_max")
        if not (1 <= self.salient_min <= self.salient_max <= self.entities_per_topic):
            raise CorpusError("synthetic spec: salient range must fit entities_per_topic")
        if self.distractors_min < 0 or self.distractors_min > self.distractors_max:
            raise CorpusError("synthetic spec: bad distractor range")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"synthetic spec: unknown fields {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class SyntheticCorpus:
    """Raw (JSONL-schema) records for the three splits plus description records."""

    train: list[dict]
    dev: list[dict]
    test: list[dict]
    descriptions: list[dict]


def _topic_entity_id(topic: int, i: int) -> str:
    return f"E{topic}_{i}"


def _make_split(spec: SyntheticSpec, seed: int, split: str, n_docs: int) -> list[dict]:
    rng = np.random.default_rng([seed, stable_hash("split", split) % (2 ** 31)])
    docs = []
    for di in range(n_docs):
        topic = int(rng.integers(spec.topics))
        n_sal = int(rng.integers(spec.salient_min, spec.salient_max + 1))
        n_sal = min(n_sal, spec.entities_per_topic)
        own = rng.choice(spec.entities_per_topic, size=n_sal, replace=False)
        salient_ids = [_topic_entity_id(topic, int(i)) for i in sorted(own)]

        distractor_ids: list[str] = []
        if spec.topics > 1:
            n_dis = int(rng.integers(spec.distractors_min, spec.distractors_max + 1))
            for _ in range(n_dis):
                other = int(rng.integers(spec.topics - 1))
                other = other if other < topic else other + 1
                distractor_ids.append(
                    _topic_entity_id(other, int(rng.integers(spec.entities_per_topic))))

        # word sequence: mostly the home topic's pool, the rest shared filler
        length = int(rng.integers(spec.doc_len_min, spec.doc_len_max + 1))
        topic_pool = [f"w{topic}_{j}" for j in range(spec.words_per_topic)]
        common_pool = [f"c{j}" for j in range(spec.common_words)]
        words = []
        for _ in range(length):
            if rng.random() < 0.75 or not common_pool:
                words.append(topic_pool[int(rng.integers(len(topic_pool)))])
            else:
                words.append(common_pool[int(rng.integers(len(common_pool)))])

        mention_plan: list[tuple[str, int]] = []
        max_topical = 0
        for eid in salient_ids:
            cnt = int(rng.integers(2, 4))
            max_topical = max(max_topical, cnt)
            mention_plan.append((eid, cnt))
        for eid in distractor_ids:
            cnt = int(rng.integers(1, 3))
            max_topical = max(max_topical, cnt)
            mention_plan.append((eid, cnt))
        # stop entity strictly out-counts every other entity in the document
        mention_plan.append((spec.stop_entity_id, max_topical + 1 + int(rng.integers(2))))

        entities = []
        for eid, cnt in mention_plan:
            positions = sorted(int(p) for p in rng.integers(0, length, size=cnt))
            entities.append({"id": eid, "positions": positions})

        docs.append({
            "doc_id": f"{split}_{di:05d}",
            "words": words,
            "entities": entities,
            "salient": salient_ids,
        })
    return docs


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int) -> SyntheticCorpus:
    """Deterministically generate train/dev/test splits and entity descriptions.

    Records are raw JSONL-schema dicts so they round-trip through the same
    loaders as real data. Identical (spec, seed) yields identical output.
    """
    spec.validate()
    train = _make_split(spec, seed, "train", spec.train_docs)
    dev = _make_split(spec, seed, "dev", spec.dev_docs)
    test = _make_split(spec, seed, "test", spec.test_docs)

    desc_rng = np.random.default_rng([seed, stable_hash("descriptions") % (2 ** 31)])
    descriptions = []
    for t in range(spec.topics):
        pool = [f"w{t}_{j}" for j in range(spec.words_per_topic)]
        for i in range(spec.entities_per_topic):
            picks = desc_rng.choice(len(pool), size=min(spec.description_words, len(pool)),
                                    replace=False)
            descriptions.append({
                "entity_id": _topic_entity_id(t, i),
                "words": [pool[int(j)] for j in picks],
            })
    common = [f"c{j}" for j in range(spec.common_words)]
    stop_words = [common[int(j)] for j in
                  desc_rng.integers(0, len(common), size=min(spec.description_words,
                                                             len(common)))]
    descriptions.append({"entity_id": spec.stop_entity_id, "words": stop_words})
    return SyntheticCorpus(train=train, dev=dev, test=test, descriptions=descriptions)
