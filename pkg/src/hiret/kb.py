"""Knowledge-base ingestion, chunking and persistence.

The knowledge base is a set of documents (title + body) addressed by a unique
``doc_id``. Document bodies are segmented into fixed-size character chunks
(600 characters by default); chunks are the unit of passage retrieval. Chunk
boundaries count unicode scalar values, never bytes, so multi-byte characters
are never split.

On disk a knowledge base is a directory holding ``documents.jsonl`` (one JSON
object per line: doc_id, title, url, text) plus ``kb_meta.json`` with the
chunk size. Chunks are derived data: they are recomputed deterministically on
load rather than stored.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DuplicateDocIdError, FormatError, NotFoundError

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 600

KB_META_NAME = "kb_meta.json"
KB_DOCUMENTS_NAME = "documents.jsonl"
KB_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Document:
    """One knowledge-base entry: a titled article body."""

    doc_id: str
    title: str
    text: str
    url: str | None = None


@dataclass(frozen=True)
class Chunk:
    """A contiguous slice of a document's text.

    ``char_start``/``char_end`` are offsets in unicode scalar values; the
    chunks of one document are contiguous, non-overlapping, and cover the
    full text.
    """

    doc_id: str
    chunk_index: int
    char_start: int
    char_end: int
    text: str


@dataclass(frozen=True)
class RejectedRecord:
    """Diagnostic for an ingest record that was dropped, with its source position."""

    position: int  # 1-based line number (files) or record ordinal (streams)
    reason: str
    raw: str


def chunk_document(text: str, chunk_size: int, doc_id: str = "") -> list[Chunk]:
    """Split ``text`` into consecutive chunks of ``chunk_size`` characters.

    Every chunk except possibly the last has exactly ``chunk_size`` unicode
    scalar values; the last has between 1 and ``chunk_size``. Empty text
    yields an empty list. Concatenating the chunk texts in order reproduces
    the input exactly.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    chunks = []
    for index, start in enumerate(range(0, len(text), chunk_size)):
        end = min(start + chunk_size, len(text))
        chunks.append(Chunk(doc_id, index, start, end, text[start:end]))
    return chunks


@dataclass
class KnowledgeBase:
    """Immutable-after-ingestion store of documents and their derived chunks."""

    chunk_size: int
    documents: dict[str, Document] = field(default_factory=dict)
    chunks: dict[str, list[Chunk]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.documents

    def get_document(self, doc_id: str) -> Document:
        try:
            return self.documents[doc_id]
        except KeyError:
            raise NotFoundError(f"unknown doc_id: {doc_id!r}") from None

    def get_chunks(self, doc_id: str) -> list[Chunk]:
        if doc_id not in self.documents:
            raise NotFoundError(f"unknown doc_id: {doc_id!r}")
        return self.chunks[doc_id]

    def list_titles(self) -> list[tuple[str, str]]:
        """All (doc_id, title) pairs, sorted by doc_id ascending."""
        return [(doc_id, self.documents[doc_id].title) for doc_id in sorted(self.documents)]

    def total_chunks(self) -> int:
        return sum(len(c) for c in self.chunks.values())


def _validate_document(doc: Document) -> str | None:
    """Return a rejection reason for a malformed document, or None if valid."""
    if not isinstance(doc.doc_id, str) or not doc.doc_id:
        return "doc_id must be a non-empty string"
    if not isinstance(doc.title, str) or not doc.title:
        return "title must be a non-empty string"
    if not isinstance(doc.text, str):
        return "text must be a string"
    return None


def ingest(
    documents: Iterable[Document],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    rejected: list[RejectedRecord] | None = None,
) -> KnowledgeBase:
    """Build a :class:`KnowledgeBase` from a stream of documents.

    Malformed records (empty title, empty doc_id) are rejected individually
    and reported via ``rejected`` and the log; they never abort the stream.
    A duplicate doc_id is an integrity violation and raises
    :class:`DuplicateDocIdError` naming the id.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    kb = KnowledgeBase(chunk_size=chunk_size)
    for position, doc in enumerate(documents, start=1):
        reason = _validate_document(doc)
        if reason is not None:
            logger.warning("rejecting ingest record %d: %s", position, reason)
            if rejected is not None:
                rejected.append(RejectedRecord(position, reason, repr(doc)))
            continue
        if doc.doc_id in kb.documents:
            raise DuplicateDocIdError(doc.doc_id)
        kb.documents[doc.doc_id] = doc
        kb.chunks[doc.doc_id] = chunk_document(doc.text, chunk_size, doc_id=doc.doc_id)
    return kb


def read_documents_jsonl(
    path: str | Path, rejected: list[RejectedRecord] | None = None
) -> Iterator[Document]:
    """Yield documents from a UTF-8 JSON-lines file.

    Expected fields per line: doc_id (string), title (string), text (string),
    url (string, optional). Lines that fail to parse or validate are reported
    through ``rejected`` (and logged) and skipped.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                logger.warning("%s:%d: invalid JSON: %s", path, line_no, exc)
                if rejected is not None:
                    rejected.append(RejectedRecord(line_no, f"invalid JSON: {exc}", line.rstrip("\n")))
                continue
            if not isinstance(obj, dict):
                if rejected is not None:
                    rejected.append(RejectedRecord(line_no, "line is not a JSON object", line.rstrip("\n")))
                continue
            doc = Document(
                doc_id=obj.get("doc_id"),
                title=obj.get("title"),
                text=obj.get("text"),
                url=obj.get("url"),
            )
            reason = _validate_document(doc)
            if reason is None and doc.url is not None and not isinstance(doc.url, str):
                reason = "url must be a string when present"
            if reason is not None:
                logger.warning("%s:%d: %s", path, line_no, reason)
                if rejected is not None:
                    rejected.append(RejectedRecord(line_no, reason, line.rstrip("\n")))
                continue
            yield doc


def save_kb(kb: KnowledgeBase, out_dir: str | Path) -> None:
    """Persist a knowledge base to ``out_dir`` (documents.jsonl + kb_meta.json)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / KB_DOCUMENTS_NAME).open("w", encoding="utf-8") as fh:
        for doc_id in sorted(kb.documents):
            doc = kb.documents[doc_id]
            record = {"doc_id": doc.doc_id, "title": doc.title, "text": doc.text}
            if doc.url is not None:
                record["url"] = doc.url
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    meta = {
        "schema_version": KB_SCHEMA_VERSION,
        "chunk_size": kb.chunk_size,
        "documents": len(kb),
        "chunks": kb.total_chunks(),
    }
    (out_dir / KB_META_NAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_kb(kb_dir: str | Path) -> KnowledgeBase:
    """Load a knowledge base persisted by :func:`save_kb`, re-deriving chunks."""
    kb_dir = Path(kb_dir)
    meta_path = kb_dir / KB_META_NAME
    if not meta_path.is_file():
        raise FormatError(f"not a knowledge-base directory (missing {KB_META_NAME}): {kb_dir}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("schema_version") != KB_SCHEMA_VERSION:
        raise FormatError(f"unsupported kb schema_version: {meta.get('schema_version')!r}")
    chunk_size = meta.get("chunk_size")
    if not isinstance(chunk_size, int) or chunk_size < 1:
        raise FormatError(f"invalid chunk_size in {meta_path}: {chunk_size!r}")
    rejected: list[RejectedRecord] = []
    kb = ingest(read_documents_jsonl(kb_dir / KB_DOCUMENTS_NAME, rejected), chunk_size, rejected)
    if rejected:
        raise FormatError(
            f"{kb_dir / KB_DOCUMENTS_NAME}: {len(rejected)} malformed document line(s); "
            f"first: line {rejected[0].position}: {rejected[0].reason}"
        )
    return kb
