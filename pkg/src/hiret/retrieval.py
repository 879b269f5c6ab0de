"""Hierarchical two-stage retrieval and token-budgeted context assembly.

Stage 1 retrieves the top-k documents by inner product between an
image-derived query vector and the indexed title embeddings. Stage 2 embeds
the chunks of each retrieved document, scores them against the question
embedding, and keeps the top n per document, giving at most k*n passages.
In oracle mode the ground-truth entity replaces stage 1 outright.

The assembled prompt follows a fixed template: the image placeholder, a
context header, the passage texts one per line, the question, and a short
answer instruction. Whole passages are dropped (never truncated) when the
token budget would be exceeded.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .ann.index import HnswIndex, SearchHit
from .embeddings import EmbeddingProvider, EmbeddingStore, as_vector, inner_product
from .errors import BudgetError, NotFoundError
from .kb import KnowledgeBase

PROMPT_HEADER = "<IMAGE>\nGiven the following context:\n"
PROMPT_FOOTER = "\nGive a short answer. ASSISTANT:"
DEFAULT_BUDGET = 2048


class Tokenizer(Protocol):
    def count(self, text: str) -> int: ...


@dataclass(frozen=True)
class WhitespaceTokenizer:
    """Default token counter: whitespace-separated pieces.

    Deployments that enforce a real model context window plug in the model's
    tokenizer; the default keeps tests deterministic and dependency-free.
    """

    def count(self, text: str) -> int:
        return len(text.split())


@dataclass(frozen=True)
class RetrievalQuery:
    """One retrieval request; embeddings are resolved before this is built."""

    query_id: str
    question: str
    question_embedding: np.ndarray
    image_embedding: np.ndarray | None = None
    oracle_entity: str | None = None


EntityHit = SearchHit  # stage-1 hits are document-level search hits


@dataclass(frozen=True)
class PassageHit:
    """A scored chunk: provenance (doc_id, chunk_index) plus its exact text."""

    doc_id: str
    chunk_index: int
    score: float
    text: str


@dataclass(frozen=True)
class AssembledContext:
    prompt: str
    token_count: int
    included_passages: tuple[PassageHit, ...]
    dropped_passages: tuple[PassageHit, ...]


def render_prompt(question: str, passage_texts: Sequence[str]) -> str:
    return PROMPT_HEADER + "\n".join(passage_texts) + "\n" + question + PROMPT_FOOTER


def assemble_context(
    question: str,
    passages: Sequence[PassageHit],
    budget: int = DEFAULT_BUDGET,
    tokenizer: Tokenizer = WhitespaceTokenizer(),
) -> AssembledContext:
    """Greedily include passages in their given order under ``budget`` tokens.

    The first passage that would push the prompt over budget is dropped along
    with every passage after it, so the included set is always a prefix.
    Raises :class:`BudgetError` when even the zero-passage prompt exceeds the
    budget.
    """
    base_prompt = render_prompt(question, [])
    base_tokens = tokenizer.count(base_prompt)
    if base_tokens > budget:
        raise BudgetError(
            f"budget {budget} cannot fit the prompt template plus question ({base_tokens} tokens)"
        )
    included: list[PassageHit] = []
    texts: list[str] = []
    prompt, token_count = base_prompt, base_tokens
    cut = len(passages)
    for i, passage in enumerate(passages):
        candidate_prompt = render_prompt(question, texts + [passage.text])
        candidate_tokens = tokenizer.count(candidate_prompt)
        if candidate_tokens > budget:
            cut = i
            break
        included.append(passage)
        texts.append(passage.text)
        prompt, token_count = candidate_prompt, candidate_tokens
    return AssembledContext(
        prompt=prompt,
        token_count=token_count,
        included_passages=tuple(included),
        dropped_passages=tuple(passages[cut:]),
    )


class ChunkEmbeddingCache:
    """Thread-safe per-document memo of chunk embedding matrices.

    Chunk vectors are computed lazily for retrieved documents only and at
    most once per document: concurrent requests for the same document block
    on a per-document lock while one of them runs the provider.
    """

    def __init__(self, provider: EmbeddingProvider):
        self.provider = provider
        self._matrices: dict[str, np.ndarray] = {}
        self._doc_locks: dict[str, threading.Lock] = {}
        self._master = threading.Lock()
        self._embed_calls = 0  # chunks embedded; exposed for at-most-once tests

    @property
    def embed_calls(self) -> int:
        return self._embed_calls

    def vectors_for_doc(self, kb: KnowledgeBase, doc_id: str) -> np.ndarray:
        with self._master:
            cached = self._matrices.get(doc_id)
            if cached is not None:
                return cached
            lock = self._doc_locks.setdefault(doc_id, threading.Lock())
        with lock:
            with self._master:
                cached = self._matrices.get(doc_id)
            if cached is not None:
                return cached
            chunks = kb.get_chunks(doc_id)
            if chunks:
                matrix = np.vstack([as_vector(self.provider.embed_text(c.text)) for c in chunks])
            else:
                matrix = np.empty((0, self.provider.dim), dtype=np.float32)
            matrix.flags.writeable = False
            with self._master:
                self._matrices[doc_id] = matrix
                self._embed_calls += len(chunks)
        return matrix


class StoreChunkVectors:
    """Chunk vectors looked up from a precomputed store keyed ``{doc_id}#{chunk_index}``.

    This is the path for offline-extracted chunk embeddings; the provider
    path computes them on the fly.
    """

    def __init__(self, store: EmbeddingStore):
        self.store = store

    def vectors_for_doc(self, kb: KnowledgeBase, doc_id: str) -> np.ndarray:
        chunks = kb.get_chunks(doc_id)
        if not chunks:
            return np.empty((0, self.store.dim), dtype=np.float32)
        return np.vstack([self.store.get(f"{doc_id}#{c.chunk_index}") for c in chunks])


@dataclass
class RetrievalEngine:
    """The immutable query-time bundle: KB, title index, and chunk vectors."""

    kb: KnowledgeBase
    index: HnswIndex
    chunk_vectors: ChunkEmbeddingCache | StoreChunkVectors
    tokenizer: Tokenizer = field(default_factory=WhitespaceTokenizer)

    def __post_init__(self):
        missing = [id_ for id_ in self.index.ids if id_ not in self.kb]
        if missing:
            raise NotFoundError(
                f"{len(missing)} indexed id(s) missing from the knowledge base, "
                f"first: {missing[0]!r}"
            )


def retrieve_entities(
    index: HnswIndex, image_embedding: np.ndarray, k: int, ef_search: int | None = None
) -> list[EntityHit]:
    """Stage 1: top-k documents whose title embedding best matches the image query."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return index.search(image_embedding, k, ef_search=ef_search)


def retrieve_passages(
    kb: KnowledgeBase,
    doc_id: str,
    question_embedding: np.ndarray,
    n: int,
    chunk_provider: EmbeddingProvider | None = None,
    cache: ChunkEmbeddingCache | StoreChunkVectors | None = None,
) -> list[PassageHit]:
    """Stage 2: top-n chunks of one document by inner product with the question.

    Chunk vectors come from ``cache`` when given, otherwise they are computed
    with ``chunk_provider``. Ordering is score descending with ties broken by
    chunk_index ascending; fewer than n passages come back only when the
    document has fewer chunks.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if cache is None:
        if chunk_provider is None:
            raise ValueError("either chunk_provider or cache is required")
        cache = ChunkEmbeddingCache(chunk_provider)
    source = cache
    chunks = kb.get_chunks(doc_id)
    matrix = source.vectors_for_doc(kb, doc_id)
    question_embedding = as_vector(question_embedding)
    scored = [
        (chunk, inner_product(question_embedding, matrix[i])) for i, chunk in enumerate(chunks)
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0].chunk_index))
    return [
        PassageHit(chunk.doc_id, chunk.chunk_index, score, chunk.text)
        for chunk, score in scored[:n]
    ]


def hierarchical_retrieve(
    engine: RetrievalEngine,
    query: RetrievalQuery,
    k: int,
    n: int,
    oracle: bool = False,
    ef_search: int | None = None,
    entity_depth: int | None = None,
) -> tuple[list[EntityHit], list[PassageHit]]:
    """Two-step search: entities from the image query, then passages per entity.

    Returns up to k*n passages ordered by (entity rank ascending, passage
    score descending). With ``oracle=True`` stage 1 is replaced by the
    query's ground-truth entity as a single rank-1 hit. ``entity_depth`` (>=
    k) widens the returned entity ranking, e.g. for recall@k bookkeeping,
    without changing which documents feed stage 2.
    """
    if k < 1 or n < 1:
        raise ValueError(f"k and n must be >= 1, got k={k}, n={n}")
    if oracle:
        if query.oracle_entity is None:
            raise ValueError(f"query {query.query_id!r} has no oracle entity")
        if query.oracle_entity not in engine.kb:
            raise NotFoundError(f"oracle entity not in knowledge base: {query.oracle_entity!r}")
        score = 0.0
        if query.image_embedding is not None and query.oracle_entity in engine.index:
            score = inner_product(
                as_vector(query.image_embedding), engine.index.vector(query.oracle_entity)
            )
        entities = [EntityHit(query.oracle_entity, score, 1)]
        stage2 = entities
    else:
        if query.image_embedding is None:
            raise ValueError(f"query {query.query_id!r} has no image embedding")
        depth = k if entity_depth is None else max(k, entity_depth)
        entities = retrieve_entities(engine.index, query.image_embedding, depth, ef_search)
        stage2 = entities[:k]

    passages: list[PassageHit] = []
    for hit in stage2:
        passages.extend(
            retrieve_passages(
                engine.kb, hit.id, query.question_embedding, n, cache=engine.chunk_vectors
            )
        )
    return entities, passages


def load_queries_jsonl(
    path: str | Path,
    image_store: EmbeddingStore | None,
    question_store: EmbeddingStore,
) -> tuple[list[RetrievalQuery], list[tuple[str, str]]]:
    """Read queries from JSON-lines, resolving embedding ids against the stores.

    Expected fields: query_id, question, question_embedding_id, and
    optionally image_embedding_id, gt_entity, gt_answers. Returns the usable
    queries plus (query_id, reason) diagnostics for the skipped ones.
    """
    queries: list[RetrievalQuery] = []
    skipped: list[tuple[str, str]] = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                skipped.append((f"line {line_no}", f"invalid JSON: {exc}"))
                continue
            query_id = obj.get("query_id")
            question = obj.get("question")
            if not isinstance(query_id, str) or not query_id:
                skipped.append((f"line {line_no}", "missing query_id"))
                continue
            if not isinstance(question, str):
                skipped.append((query_id, "missing question"))
                continue
            q_emb_id = obj.get("question_embedding_id", query_id)
            if q_emb_id not in question_store:
                skipped.append((query_id, f"question embedding {q_emb_id!r} not in store"))
                continue
            image_embedding = None
            i_emb_id = obj.get("image_embedding_id", query_id)
            if image_store is not None and i_emb_id in image_store:
                image_embedding = image_store.get(i_emb_id)
            queries.append(
                RetrievalQuery(
                    query_id=query_id,
                    question=question,
                    question_embedding=question_store.get(q_emb_id),
                    image_embedding=image_embedding,
                    oracle_entity=obj.get("gt_entity"),
                )
            )
    return queries, skipped
