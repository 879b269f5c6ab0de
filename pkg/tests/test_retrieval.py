import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiret import ann
from hiret.embeddings import EmbeddingStore, inner_product, test_embedder
from hiret.errors import BudgetError, NotFoundError
from hiret.kb import Document, ingest
from hiret.retrieval import (
    ChunkEmbeddingCache,
    PassageHit,
    RetrievalEngine,
    RetrievalQuery,
    WhitespaceTokenizer,
    assemble_context,
    hierarchical_retrieve,
    render_prompt,
    retrieve_passages,
)
from synth import build_planted_corpus

DIM = 16
CHUNK_SEED = 13


def passage(text, doc="d", idx=0, score=0.0):
    return PassageHit(doc, idx, score, text)


class TestPromptAssembly:
    def test_golden_template(self):
        ctx = assemble_context("Q?", [passage("A"), passage("B"), passage("C")], budget=2048)
        assert ctx.prompt == (
            "<IMAGE>\nGiven the following context:\nA\nB\nC\nQ?\nGive a short answer. ASSISTANT:"
        )
        assert ctx.dropped_passages == ()

    def test_zero_passages(self):
        ctx = assemble_context("Q?", [], budget=2048)
        assert ctx.prompt == "<IMAGE>\nGiven the following context:\n\nQ?\nGive a short answer. ASSISTANT:"
        assert ctx.included_passages == ()

    def test_budget_cut_after_first_passage(self):
        # Whitespace oracle: header 5 + question 4 + footer 5 = 14 base tokens,
        # then A adds 3, B 2, C 1. Budget 17 fits exactly [A].
        tok = WhitespaceTokenizer()
        passages = [passage("alpha beta gamma"), passage("delta epsilon"), passage("zeta")]
        base = tok.count(render_prompt("What color is it?", []))
        assert base == 14
        ctx = assemble_context("What color is it?", passages, budget=17)
        assert [p.text for p in ctx.included_passages] == ["alpha beta gamma"]
        assert [p.text for p in ctx.dropped_passages] == ["delta epsilon", "zeta"]
        assert ctx.token_count == 17 == tok.count(ctx.prompt)

    def test_drop_is_suffix_not_skip(self):
        # The first overflowing passage also drops everything after it, even
        # if a later passage would have fit.
        passages = [passage("one"), passage("w1 w2 w3 w4 w5 w6"), passage("tiny")]
        base = WhitespaceTokenizer().count(render_prompt("Q?", []))
        ctx = assemble_context("Q?", passages, budget=base + 2)
        assert [p.text for p in ctx.included_passages] == ["one"]
        assert [p.text for p in ctx.dropped_passages] == ["w1 w2 w3 w4 w5 w6", "tiny"]

    def test_budget_too_small_raises(self):
        with pytest.raises(BudgetError):
            assemble_context("some question here", [], budget=5)

    def test_budget_exactly_base_is_allowed(self):
        base = WhitespaceTokenizer().count(render_prompt("Q?", []))
        ctx = assemble_context("Q?", [], budget=base)
        assert ctx.token_count == base

    @settings(max_examples=150)
    @given(
        st.lists(st.lists(st.sampled_from(["w", "xyz", "a b", ""]), max_size=12), max_size=8),
        st.integers(min_value=0, max_value=60),
    )
    def test_budget_never_exceeded(self, word_lists, extra):
        passages = [passage(" ".join(words), idx=i) for i, words in enumerate(word_lists)]
        tok = WhitespaceTokenizer()
        budget = tok.count(render_prompt("q?", [])) + extra
        ctx = assemble_context("q?", passages, budget=budget)
        assert ctx.token_count <= budget
        assert tok.count(ctx.prompt) == ctx.token_count
        assert list(ctx.included_passages) == passages[: len(ctx.included_passages)]
        assert list(ctx.included_passages) + list(ctx.dropped_passages) == passages


def tiny_kb():
    docs = [
        Document("D1", "first doc", "aaaa bbbb cccc dddd"),
        Document("D2", "second doc", "eeee ffff"),
        Document("D3", "third doc", ""),
    ]
    return ingest(docs, chunk_size=5)  # "aaaa " etc: D1 -> 4 chunks, D2 -> 2, D3 -> 0


class TestRetrievePassages:
    def test_clamps_to_available_chunks(self):
        kb = tiny_kb()
        emb = test_embedder(CHUNK_SEED, DIM)
        hits = retrieve_passages(kb, "D2", emb.embed_text("eeee "), 3, chunk_provider=emb)
        assert len(hits) == 2

    def test_identity_chunk_embedding_ranks_first(self):
        kb = tiny_kb()
        emb = test_embedder(CHUNK_SEED, DIM)
        target = kb.get_chunks("D1")[2]
        hits = retrieve_passages(kb, "D1", emb.embed_text(target.text), 2, chunk_provider=emb)
        assert hits[0].chunk_index == target.chunk_index
        assert abs(hits[0].score - 1.0) < 1e-6

    def test_matches_per_document_brute_force(self):
        kb = tiny_kb()
        emb = test_embedder(CHUNK_SEED, DIM)
        rng = np.random.default_rng(4)
        for _ in range(10):
            q = rng.standard_normal(DIM).astype(np.float32)
            hits = retrieve_passages(kb, "D1", q, 3, chunk_provider=emb)
            oracle = sorted(
                (
                    (inner_product(q, emb.embed_text(c.text)), -c.chunk_index, c.chunk_index)
                    for c in kb.get_chunks("D1")
                ),
                reverse=True,
            )[:3]
            assert [(h.score, h.chunk_index) for h in hits] == [(s, i) for s, _, i in oracle]

    def test_empty_document_yields_no_passages(self):
        kb = tiny_kb()
        emb = test_embedder(CHUNK_SEED, DIM)
        assert retrieve_passages(kb, "D3", emb.embed_text("x"), 2, chunk_provider=emb) == []

    def test_unknown_doc(self):
        kb = tiny_kb()
        emb = test_embedder(CHUNK_SEED, DIM)
        with pytest.raises(NotFoundError):
            retrieve_passages(kb, "nope", emb.embed_text("x"), 1, chunk_provider=emb)

    def test_provenance_texts_match_kb(self):
        kb = tiny_kb()
        emb = test_embedder(CHUNK_SEED, DIM)
        q = np.random.default_rng(11).standard_normal(DIM).astype(np.float32)
        for hit in retrieve_passages(kb, "D1", q, 4, chunk_provider=emb):
            assert hit.text == kb.get_chunks(hit.doc_id)[hit.chunk_index].text


def small_engine(n_entities=30, n_queries=9):
    corpus = build_planted_corpus(n_entities=n_entities, n_queries=n_queries)
    index = ann.build(corpus.title_store)
    engine = RetrievalEngine(kb=corpus.kb, index=index, chunk_vectors=corpus.chunk_cache())
    return corpus, engine


class TestHierarchicalRetrieve:
    def test_k_times_n_passages(self):
        corpus, engine = small_engine()
        query = corpus.queries[0]
        entities, passages = hierarchical_retrieve(engine, query, k=2, n=1)
        assert len(entities) == 2
        assert len(passages) == 2  # every doc has 5 chunks >= n

    def test_oracle_mode_restricts_to_gt_doc(self):
        corpus, engine = small_engine()
        query = corpus.queries[1]
        entities, passages = hierarchical_retrieve(engine, query, k=5, n=2, oracle=True)
        assert [e.id for e in entities] == [query.oracle_entity]
        assert entities[0].rank == 1
        assert {p.doc_id for p in passages} == {query.oracle_entity}
        assert len(passages) == 2

    def test_oracle_without_entity_raises(self):
        corpus, engine = small_engine()
        from dataclasses import replace

        query = replace(corpus.queries[0], oracle_entity=None)
        with pytest.raises(ValueError):
            hierarchical_retrieve(engine, query, 1, 1, oracle=True)

    def test_planted_gold_chunk_rank1(self):
        corpus, engine = small_engine()
        query = next(q for q in corpus.queries if corpus.gold_ranks[q.query_id] == 1)
        record = corpus.records[query.query_id]
        _, passages = hierarchical_retrieve(engine, query, k=1, n=3, oracle=True)
        assert len(passages) == 3
        assert {p.doc_id for p in passages} == {record.gt_entity}
        assert (passages[0].doc_id, passages[0].chunk_index) == record.gold_chunk

    def test_passage_ordering_entity_rank_then_score(self):
        corpus, engine = small_engine()
        query = corpus.queries[2]
        entities, passages = hierarchical_retrieve(engine, query, k=3, n=2)
        entity_rank = {e.id: e.rank for e in entities}
        keys = [(entity_rank[p.doc_id], -p.score, p.chunk_index) for p in passages]
        assert keys == sorted(keys)

    def test_monotone_in_n_superset(self):
        corpus, engine = small_engine()
        for query in corpus.queries[:5]:
            previous: set = set()
            for n in (1, 2, 3, 4):
                _, passages = hierarchical_retrieve(engine, query, k=1, n=n, oracle=True)
                current = {(p.doc_id, p.chunk_index) for p in passages}
                assert previous <= current
                previous = current

    def test_cardinality_random_kbs(self):
        rng = np.random.default_rng(99)
        emb = test_embedder(3, DIM)
        for trial in range(40):
            n_docs = int(rng.integers(1, 8))
            docs = [
                Document(f"D{i}", f"title {i}", "ab " * int(rng.integers(0, 9)))
                for i in range(n_docs)
            ]
            kb = ingest(docs, chunk_size=4)
            store = EmbeddingStore.build(
                ((d.doc_id, emb.embed_text(d.title)) for d in docs), kind="title"
            )
            engine = RetrievalEngine(
                kb=kb, index=ann.build(store), chunk_vectors=ChunkEmbeddingCache(emb)
            )
            k = int(rng.integers(1, 5))
            n = int(rng.integers(1, 4))
            query = RetrievalQuery(
                query_id=f"t{trial}",
                question="q?",
                question_embedding=emb.embed_text(f"question {trial}"),
                image_embedding=emb.embed_text(f"image {trial}"),
            )
            entities, passages = hierarchical_retrieve(engine, query, k=k, n=n)
            assert len(passages) <= k * n
            if len(entities) == k and all(
                len(kb.get_chunks(e.id)) >= n for e in entities
            ):
                assert len(passages) == k * n


class CountingProvider:
    def __init__(self, dim):
        self._inner = test_embedder(CHUNK_SEED, dim)
        self.dim = dim
        self.calls = 0
        self._lock = threading.Lock()

    def embed_text(self, text):
        with self._lock:
            self.calls += 1
        return self._inner.embed_text(text)


class TestChunkCache:
    def test_at_most_once_under_concurrency(self):
        kb = tiny_kb()
        provider = CountingProvider(DIM)
        cache = ChunkEmbeddingCache(provider)
        with ThreadPoolExecutor(max_workers=8) as pool:
            futures = [
                pool.submit(cache.vectors_for_doc, kb, doc_id)
                for _ in range(25)
                for doc_id in ("D1", "D2", "D3")
            ]
            results = [f.result() for f in futures]
        assert provider.calls == 6  # D1: 4 chunks, D2: 2, D3: 0
        assert cache.embed_calls == 6
        assert all(r.flags.writeable is False for r in results)

    def test_lazy_only_retrieved_docs(self):
        corpus, engine = small_engine()
        query = corpus.queries[0]
        hierarchical_retrieve(engine, query, k=2, n=1)
        # 2 retrieved docs x 5 chunks each; the other 28 docs stay unembedded
        assert engine.chunk_vectors.embed_calls == 10


def test_engine_rejects_index_ids_missing_from_kb():
    corpus = build_planted_corpus(n_entities=5, n_queries=3)
    extra = EmbeddingStore.build(
        list(corpus.title_store.items()) + [("GHOST", corpus.title_store.get("E0000"))],
        kind="title",
    )
    with pytest.raises(NotFoundError, match="GHOST"):
        RetrievalEngine(
            kb=corpus.kb, index=ann.build(extra), chunk_vectors=corpus.chunk_cache()
        )
