"""Operator CLI: ingest, build-index, retrieve, eval, inspect.

stdout carries machine-readable JSON only; human diagnostics go to stderr.
Every option can also be set through an environment variable with the
``HIRET_`` prefix (e.g. ``HIRET_BUILD_INDEX_M``); flags take precedence over
the environment, which takes precedence over defaults.
"""

from __future__ import annotations

import json
import shlex
import sys
from dataclasses import asdict
from pathlib import Path

import click

from . import ann, kb as kb_mod
from .embeddings import HashEmbedder, load_store, save_store
from .errors import HiretError
from .evalharness import (
    EchoAnswerer,
    EvidenceContainmentAnswerer,
    ExperimentConfig,
    ExternalCommandAnswerer,
    MetricsReport,
    load_eval_records_jsonl,
    render_csv,
    render_markdown,
    run_experiment,
)
from .retrieval import (
    DEFAULT_BUDGET,
    ChunkEmbeddingCache,
    RetrievalEngine,
    StoreChunkVectors,
    assemble_context,
    hierarchical_retrieve,
    load_queries_jsonl,
)

SCHEMA_VERSION = 1


def _fail(message: str) -> SystemExit:
    click.echo(f"error: {message}", err=True)
    return SystemExit(1)


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, ensure_ascii=False))


def _chunk_vectors(spec: str, question_dim: int | None = None):
    """Parse a chunk-embedder spec: ``hash:SEED:DIM`` or ``wemb:PATH``."""
    kind, _, rest = spec.partition(":")
    if kind == "hash":
        seed_s, _, dim_s = rest.partition(":")
        try:
            seed, dim = int(seed_s), int(dim_s)
        except ValueError:
            raise _fail(f"bad hash embedder spec {spec!r}, expected hash:SEED:DIM") from None
        return ChunkEmbeddingCache(HashEmbedder(seed, dim))
    if kind == "wemb":
        return StoreChunkVectors(load_store(rest, kind="chunk"))
    raise _fail(f"unknown chunk embedder {spec!r}, expected hash:SEED:DIM or wemb:PATH")


@click.group(context_settings={"auto_envvar_prefix": "HIRET", "show_default": True})
def main() -> None:
    """Hierarchical entity/passage retrieval over an external knowledge base."""


@main.command()
@click.option("--docs", required=True, type=click.Path(), help="Documents JSON-lines file.")
@click.option("--chunk-size", default=kb_mod.DEFAULT_CHUNK_SIZE, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Knowledge-base directory.")
def ingest(docs: str, chunk_size: int, out_dir: str) -> None:
    """Ingest documents into a chunked knowledge base on disk."""
    docs_path = Path(docs)
    if not docs_path.is_file():
        raise _fail(f"cannot read documents file: {docs_path}")
    rejected: list[kb_mod.RejectedRecord] = []
    try:
        knowledge = kb_mod.ingest(
            kb_mod.read_documents_jsonl(docs_path, rejected), chunk_size, rejected
        )
    except HiretError as exc:
        raise _fail(str(exc)) from None
    if len(knowledge) == 0:
        raise _fail(f"no documents accepted from {docs_path}")
    kb_mod.save_kb(knowledge, out_dir)
    sidecar = Path(out_dir) / "rejected.jsonl"
    with sidecar.open("w", encoding="utf-8") as fh:
        for record in rejected:
            fh.write(
                json.dumps(
                    {"line": record.position, "reason": record.reason, "raw": record.raw},
                    ensure_ascii=False,
                )
                + "\n"
            )
    click.echo(
        f"documents: {len(knowledge)}, chunks: {knowledge.total_chunks()}, "
        f"rejected: {len(rejected)}",
        err=True,
    )
    _emit(
        {
            "schema_version": SCHEMA_VERSION,
            "documents": len(knowledge),
            "chunks": knowledge.total_chunks(),
            "rejected": len(rejected),
            "chunk_size": chunk_size,
            "kb_dir": str(out_dir),
        }
    )


@main.command("build-index")
@click.option("--titles", required=True, type=click.Path(), help="Title embeddings (.wemb).")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Index file to write.")
@click.option("--m", default=ann.DEFAULT_M, show_default=True, type=int, help="Links per vertex above layer 0.")
@click.option("--m0", default=None, type=int, help="Links per vertex at layer 0 [default: 2*M].")
@click.option("--ef-construction", default=ann.DEFAULT_EF_CONSTRUCTION, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--brute-force-threshold", default=ann.DEFAULT_BRUTE_FORCE_THRESHOLD, show_default=True, type=int)
@click.option("--selection", default="heuristic", show_default=True, type=click.Choice(["heuristic", "simple"]))
@click.option("--kernel", default=None, type=str, help="Graph kernel (fast|python) [default: auto].")
def build_index(
    titles: str,
    out_path: str,
    m: int,
    m0: int | None,
    ef_construction: int,
    seed: int,
    brute_force_threshold: int,
    selection: str,
    kernel: str | None,
) -> None:
    """Build the HNSW index over title embeddings and write it to disk."""
    try:
        store = load_store(titles, kind="title")
        params = ann.HnswParams(
            M=m,
            M0=m0,
            ef_construction=ef_construction,
            seed=seed,
            neighbor_selection=selection,
            brute_force_threshold=brute_force_threshold,
        )
        index = ann.build(store, params, kernel=kernel)
        ann.save_index(index, out_path)
    except (HiretError, ValueError) as exc:
        raise _fail(str(exc)) from None
    stats = index.stats()
    click.echo(
        f"indexed {stats['count']} vectors (dim {stats['dim']}) with "
        f"M={params.M}, M0={params.m0}, ef_construction={params.ef_construction}, "
        f"seed={params.seed}, kernel={stats['kernel']}",
        err=True,
    )
    _emit({"schema_version": SCHEMA_VERSION, "index": str(out_path), **stats})


def _load_engine(
    kb_dir: str, index_path: str, chunk_embedder: str, kernel: str | None = None
) -> RetrievalEngine:
    knowledge = kb_mod.load_kb(kb_dir)
    index = ann.load_index(index_path, kernel=kernel)
    return RetrievalEngine(kb=knowledge, index=index, chunk_vectors=_chunk_vectors(chunk_embedder))


@main.command()
@click.option("--kb", "kb_dir", required=True, type=click.Path())
@click.option("--index", "index_path", required=True, type=click.Path())
@click.option("--image-store", default=None, type=click.Path(), help="Image-query embeddings (.wemb).")
@click.option("--question-store", required=True, type=click.Path(), help="Question embeddings (.wemb).")
@click.option("--queries", required=True, type=click.Path(), help="Queries JSON-lines file.")
@click.option("--query-id", default=None, help="Retrieve only this query.")
@click.option("--chunk-embedder", required=True, help="hash:SEED:DIM or wemb:PATH.")
@click.option("--k", default=1, show_default=True, type=int)
@click.option("--n", default=1, show_default=True, type=int)
@click.option("--ef-search", default=None, type=int, help="Beam width [default: max(64, 4k)].")
@click.option("--budget", default=DEFAULT_BUDGET, show_default=True, type=int)
@click.option("--oracle", is_flag=True, help="Use the query's gt_entity instead of stage 1.")
@click.option("--kernel", default=None, type=str)
def retrieve(
    kb_dir: str,
    index_path: str,
    image_store: str | None,
    question_store: str,
    queries: str,
    query_id: str | None,
    chunk_embedder: str,
    k: int,
    n: int,
    ef_search: int | None,
    budget: int,
    oracle: bool,
    kernel: str | None,
) -> None:
    """Run hierarchical retrieval and emit one JSON result line per query."""
    try:
        engine = _load_engine(kb_dir, index_path, chunk_embedder, kernel)
        image = load_store(image_store, kind="image-query") if image_store else None
        question = load_store(question_store, kind="question-query")
        loaded, skipped = load_queries_jsonl(queries, image, question)
    except HiretError as exc:
        raise _fail(str(exc)) from None
    for qid, reason in skipped:
        click.echo(f"skipping {qid}: {reason}", err=True)
    if query_id is not None:
        loaded = [q for q in loaded if q.query_id == query_id]
        if not loaded:
            raise _fail(f"query id {query_id!r} not found (or unusable) in {queries}")
    elif skipped:
        raise _fail(f"{len(skipped)} unusable quer(y/ies) in {queries}")
    try:
        for query in loaded:
            entities, passages = hierarchical_retrieve(
                engine, query, k, n, oracle=oracle, ef_search=ef_search
            )
            context = assemble_context(query.question, passages, budget, engine.tokenizer)
            _emit(
                {
                    "schema_version": SCHEMA_VERSION,
                    "query_id": query.query_id,
                    "entities": [asdict(hit) for hit in entities],
                    "passages": [asdict(hit) for hit in passages],
                    "prompt": context.prompt,
                    "token_count": context.token_count,
                    "dropped_passages": len(context.dropped_passages),
                }
            )
    except (HiretError, ValueError) as exc:
        raise _fail(str(exc)) from None


def _parse_config(spec: str, budget: int, threads: int, ef_search: int | None) -> ExperimentConfig:
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    oracle = False
    if parts and parts[-1].lower() == "oracle":
        oracle = True
        parts = parts[:-1]
    if len(parts) != 2:
        raise _fail(f"bad --config {spec!r}, expected K,N[,oracle]")
    try:
        k, n = int(parts[0]), int(parts[1])
    except ValueError:
        raise _fail(f"bad --config {spec!r}, expected K,N[,oracle]") from None
    label = "oracle" if oracle else "retrieved"
    return ExperimentConfig(
        k=k, n=n, oracle=oracle, budget=budget, label=label, threads=threads, ef_search=ef_search
    )


def _make_answerer(spec: str, queries, records, knowledge):
    if spec == "evidence":
        return EvidenceContainmentAnswerer.from_eval_data(queries, records, knowledge)
    if spec == "echo":
        return EchoAnswerer()
    if spec.startswith("command:"):
        return ExternalCommandAnswerer(shlex.split(spec[len("command:") :]))
    raise _fail(f"unknown answerer {spec!r}, expected evidence, echo, or command:...")


@main.command("eval")
@click.option("--kb", "kb_dir", required=True, type=click.Path())
@click.option("--index", "index_path", required=True, type=click.Path())
@click.option("--image-store", default=None, type=click.Path())
@click.option("--question-store", required=True, type=click.Path())
@click.option("--queries", required=True, type=click.Path())
@click.option("--eval-records", required=True, type=click.Path())
@click.option("--chunk-embedder", required=True, help="hash:SEED:DIM or wemb:PATH.")
@click.option("--answerer", default="evidence", show_default=True, help="evidence, echo, or command:CMD.")
@click.option("--config", "configs", multiple=True, help="K,N[,oracle]; repeatable.")
@click.option("--k", default=1, show_default=True, type=int)
@click.option("--n", default=1, show_default=True, type=int)
@click.option("--oracle", is_flag=True)
@click.option("--budget", default=DEFAULT_BUDGET, show_default=True, type=int)
@click.option("--ef-search", default=None, type=int)
@click.option("--threads", default=1, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
@click.option("--kernel", default=None, type=str)
def eval_cmd(
    kb_dir: str,
    index_path: str,
    image_store: str | None,
    question_store: str,
    queries: str,
    eval_records: str,
    chunk_embedder: str,
    answerer: str,
    configs: tuple[str, ...],
    k: int,
    n: int,
    oracle: bool,
    budget: int,
    ef_search: int | None,
    threads: int,
    out_dir: str,
    kernel: str | None,
) -> None:
    """Run experiment sweeps and write markdown + CSV reports."""
    try:
        engine = _load_engine(kb_dir, index_path, chunk_embedder, kernel)
        image = load_store(image_store, kind="image-query") if image_store else None
        question = load_store(question_store, kind="question-query")
        loaded, skipped = load_queries_jsonl(queries, image, question)
        records = load_eval_records_jsonl(eval_records)
    except HiretError as exc:
        raise _fail(str(exc)) from None
    for qid, reason in skipped:
        click.echo(f"skipping {qid}: {reason}", err=True)
    if not loaded:
        raise _fail(f"no usable queries in {queries}")

    if configs:
        parsed = [_parse_config(spec, budget, threads, ef_search) for spec in configs]
    else:
        parsed = [
            ExperimentConfig(
                k=k,
                n=n,
                oracle=oracle,
                budget=budget,
                label="oracle" if oracle else "retrieved",
                threads=threads,
                ef_search=ef_search,
            )
        ]
    answer_provider = _make_answerer(answerer, loaded, records, engine.kb)

    report = MetricsReport()
    for config in parsed:
        row = run_experiment(engine, loaded, records, config, answer_provider)
        report.add(row)
        click.echo(
            f"[{row.label} k={row.k} n={row.n}] evaluated={row.evaluated} "
            f"skipped={len(row.skipped)} accuracy={row.accuracy:.1f} "
            f"evidence_hit_rate={row.evidence_hit_rate:.1f}",
            err=True,
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(render_markdown(report), encoding="utf-8")
    (out / "report.csv").write_text(render_csv(report), encoding="utf-8")
    rows_payload = []
    for row in report.rows:
        payload = asdict(row)
        payload["recall_at"] = {str(key): value for key, value in row.recall_at.items()}
        rows_payload.append(payload)
    _emit({"schema_version": SCHEMA_VERSION, "rows": rows_payload, "report_dir": str(out)})

    problems = report.violations()
    for violation in problems:
        click.echo(f"invariant violation: {violation}", err=True)
    if any(row.evaluated == 0 for row in report.rows):
        raise _fail("a configuration evaluated zero queries")
    if problems:
        raise _fail("invariant checks failed during the run")


@main.command()
@click.option("--kb", "kb_dir", default=None, type=click.Path())
@click.option("--index", "index_path", default=None, type=click.Path())
@click.option("--store", "store_path", default=None, type=click.Path(), help="A .wemb file.")
@click.option("--kernel", default=None, type=str)
def inspect(
    kb_dir: str | None, index_path: str | None, store_path: str | None, kernel: str | None
) -> None:
    """Dump knowledge-base / index / embedding-store statistics as JSON."""
    if not any([kb_dir, index_path, store_path]):
        raise _fail("nothing to inspect: pass --kb, --index and/or --store")
    payload: dict = {"schema_version": SCHEMA_VERSION}
    try:
        if kb_dir:
            knowledge = kb_mod.load_kb(kb_dir)
            payload["kb"] = {
                "documents": len(knowledge),
                "chunks": knowledge.total_chunks(),
                "chunk_size": knowledge.chunk_size,
            }
        if index_path:
            payload["index"] = ann.load_index(index_path, kernel=kernel).stats()
        if store_path:
            store = load_store(store_path)
            payload["store"] = {
                "count": len(store),
                "dim": store.dim,
                "kind": store.kind,
                "normalized": store.normalized,
            }
    except HiretError as exc:
        raise _fail(str(exc)) from None
    _emit(payload)


if __name__ == "__main__":
    main()
