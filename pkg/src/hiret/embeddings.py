"""Dense vectors, inner-product scoring, and the ``.wemb`` binary store format.

Vectors are 1-D ``numpy.float32`` arrays. All similarity in the engine is the
plain inner product; :func:`inner_product` is the single canonical scorer
(float64 accumulation over the float32 payload) so that every score reported
anywhere can be recomputed bit-for-bit.

``.wemb`` file layout (little-endian throughout):

    magic   4 bytes  b"WEMB"
    version u16      1
    flags   u16      bit 0: vectors are pre-normalized (L2 norm 1)
                     bits 1-3: store kind tag (0 none, 1 title, 2 image-query,
                               3 question-query, 4 chunk)
                     bits 4-15: reserved, must be zero
    dim     u32      vector width, >= 1
    count   u64      number of records
    records count times:
        id_len  u16
        id      id_len bytes, UTF-8
        values  dim * f32

This layout is the bit-exact interchange contract with the offline embedding
extractor; the loader validates structure and finiteness and never mutates
the float payload (round-trips are bit-exact).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .errors import DimensionMismatchError, FormatError, NotFoundError

WEMB_MAGIC = b"WEMB"
WEMB_VERSION = 1
_HEADER = struct.Struct("<4sHHIQ")
_ID_LEN = struct.Struct("<H")

FLAG_NORMALIZED = 0x0001
_KIND_SHIFT = 1
_KIND_MASK = 0x7 << _KIND_SHIFT
_KNOWN_FLAGS = FLAG_NORMALIZED | _KIND_MASK

STORE_KINDS: tuple[str | None, ...] = (None, "title", "image-query", "question-query", "chunk")


def as_vector(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float32 vector."""
    vec = np.asarray(values, dtype=np.float32)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("vector contains NaN or Inf")
    if dim is not None and vec.size != dim:
        raise DimensionMismatchError(f"expected dim {dim}, got {vec.size}")
    return vec


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    """Canonical similarity score: sum of elementwise products in float64."""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)))


def batch_inner_products(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Inner products of each matrix row with ``query``, float64.

    Used for candidate ranking; the per-hit scores that leave the engine are
    always recomputed through :func:`inner_product`.
    """
    if matrix.shape[1] != query.shape[0]:
        raise DimensionMismatchError(f"dimension mismatch: {matrix.shape[1]} vs {query.shape[0]}")
    return matrix.astype(np.float64, copy=False) @ query.astype(np.float64, copy=False)


def normalize(v: np.ndarray) -> np.ndarray:
    """Return ``v`` rescaled to unit L2 norm (float32). Zero vectors are an error."""
    v64 = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v64))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("cannot normalize a zero or non-finite vector")
    unit = v64 / norm
    # Renormalize once more before the float32 cast so the final norm deviates
    # only by the cast rounding itself (well under 1e-6 at any dim).
    unit = unit / float(np.linalg.norm(unit))
    return unit.astype(np.float32)


class EmbeddingProvider(Protocol):
    """Deterministic text-to-vector mapping: equal inputs yield identical vectors."""

    dim: int

    def embed_text(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic stand-in for a real encoder.

    Maps any string to a unit-norm float32 vector by seeding a PRNG from a
    keyed BLAKE2b digest of the text. Pure: equal (seed, dim, text) triples
    always produce identical vectors, across processes and platforms.
    """

    def __init__(self, seed: int, dim: int):
        if dim < 2:
            raise ValueError(f"dim must be >= 2, got {dim}")
        self.seed = seed
        self.dim = dim
        self._key = struct.pack("<q", seed)

    def embed_text(self, text: str) -> np.ndarray:
        digest = hashlib.blake2b(text.encode("utf-8"), key=self._key, digest_size=16).digest()
        entropy = int.from_bytes(digest, "little")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        raw = rng.standard_normal(self.dim)
        return normalize(raw)


def test_embedder(seed: int, dim: int) -> HashEmbedder:
    """The deterministic hash-based embedding provider used throughout the tests."""
    return HashEmbedder(seed, dim)


test_embedder.__test__ = False  # keep pytest from collecting the factory as a test


@dataclass(eq=False)
class EmbeddingStore:
    """Immutable id-keyed collection of same-dimension vectors.

    ``kind`` tags what the vectors embed (title, image-query, question-query,
    chunk); ``normalized`` records whether the producer pre-normalized them.
    The engine never re-normalizes loaded vectors.
    """

    dim: int
    kind: str | None = None
    normalized: bool = False
    _ids: list[str] = field(default_factory=list)
    _rows: dict[str, int] = field(default_factory=dict)
    _matrix: np.ndarray | None = None
    _ids_arr: np.ndarray | None = None

    @classmethod
    def build(
        cls,
        items: Iterable[tuple[str, np.ndarray]],
        kind: str | None = None,
        normalized: bool = False,
        dim: int | None = None,
    ) -> "EmbeddingStore":
        ids: list[str] = []
        rows: dict[str, int] = {}
        vectors: list[np.ndarray] = []
        for id_, values in items:
            if not isinstance(id_, str) or not id_:
                raise ValueError(f"embedding id must be a non-empty string, got {id_!r}")
            if id_ in rows:
                raise ValueError(f"duplicate embedding id: {id_!r}")
            vec = as_vector(values)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DimensionMismatchError(
                    f"vector for {id_!r} has dim {vec.size}, store dim is {dim}"
                )
            rows[id_] = len(ids)
            ids.append(id_)
            vectors.append(vec)
        if dim is None:
            raise ValueError("cannot infer dim of an empty store; pass dim explicitly")
        matrix = np.vstack(vectors) if vectors else np.empty((0, dim), dtype=np.float32)
        matrix.flags.writeable = False
        store = cls(dim=dim, kind=kind, normalized=normalized)
        store._ids = ids
        store._rows = rows
        store._matrix = matrix
        return store

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, id_: str) -> bool:
        return id_ in self._rows

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def matrix(self) -> np.ndarray:
        """Read-only (len, dim) float32 view, rows in id insertion order."""
        return self._matrix

    @property
    def ids_array(self) -> np.ndarray:
        """Ids as a numpy unicode array aligned with matrix rows (cached)."""
        if self._ids_arr is None:
            self._ids_arr = (
                np.array(self._ids, dtype=np.str_) if self._ids else np.empty(0, dtype=np.str_)
            )
        return self._ids_arr

    def get(self, id_: str) -> np.ndarray:
        try:
            return self._matrix[self._rows[id_]]
        except KeyError:
            raise NotFoundError(f"unknown embedding id: {id_!r}") from None

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        for id_ in self._ids:
            yield id_, self._matrix[self._rows[id_]]


def _encode_flags(kind: str | None, normalized: bool) -> int:
    try:
        kind_tag = STORE_KINDS.index(kind)
    except ValueError:
        raise ValueError(f"unknown store kind: {kind!r} (expected one of {STORE_KINDS[1:]})") from None
    return (FLAG_NORMALIZED if normalized else 0) | (kind_tag << _KIND_SHIFT)


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    """Write a store to ``path`` in the ``.wemb`` format (bit-exact payload)."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(
            _HEADER.pack(
                WEMB_MAGIC,
                WEMB_VERSION,
                _encode_flags(store.kind, store.normalized),
                store.dim,
                len(store),
            )
        )
        for id_, vec in store.items():
            id_bytes = id_.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise ValueError(f"embedding id too long for format: {id_[:40]!r}...")
            fh.write(_ID_LEN.pack(len(id_bytes)))
            fh.write(id_bytes)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def load_store(path: str | Path, kind: str | None = None) -> EmbeddingStore:
    """Read a ``.wemb`` file, validating structure and value finiteness.

    ``kind`` overrides the kind tag recorded in the header flags (useful for
    files produced by writers that leave the tag unset).
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header ({len(data)} bytes)")
    magic, version, flags, dim, count = _HEADER.unpack_from(data, 0)
    if magic != WEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {WEMB_MAGIC!r}")
    if version != WEMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {WEMB_VERSION}")
    if flags & ~_KNOWN_FLAGS:
        raise FormatError(f"{path}: unknown flag bits set: 0x{flags:04x}")
    if dim < 1:
        raise FormatError(f"{path}: invalid dim {dim}")
    kind_tag = (flags & _KIND_MASK) >> _KIND_SHIFT
    if kind_tag >= len(STORE_KINDS):
        raise FormatError(f"{path}: unknown kind tag {kind_tag}")
    normalized = bool(flags & FLAG_NORMALIZED)

    offset = _HEADER.size
    vec_bytes = dim * 4
    ids: list[str] = []
    rows: dict[str, int] = {}
    matrix = np.empty((count, dim), dtype=np.float32)
    for record in range(count):
        if offset + _ID_LEN.size > len(data):
            raise FormatError(f"{path}: truncated at record {record} (id length)")
        (id_len,) = _ID_LEN.unpack_from(data, offset)
        offset += _ID_LEN.size
        if offset + id_len + vec_bytes > len(data):
            raise FormatError(f"{path}: truncated at record {record}")
        try:
            id_ = data[offset : offset + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: record {record} id is not valid UTF-8: {exc}") from None
        offset += id_len
        if id_ in rows:
            raise FormatError(f"{path}: duplicate id {id_!r} at record {record}")
        matrix[record] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
        rows[id_] = record
        ids.append(id_)
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after {count} records")
    if count and not np.all(np.isfinite(matrix)):
        bad = int(np.argwhere(~np.isfinite(matrix).all(axis=1))[0][0])
        raise FormatError(f"{path}: non-finite values in record {bad} (id {ids[bad]!r})")

    matrix.flags.writeable = False
    store = EmbeddingStore(dim=dim, kind=kind or STORE_KINDS[kind_tag], normalized=normalized)
    store._ids = ids
    store._rows = rows
    store._matrix = matrix
    return store
