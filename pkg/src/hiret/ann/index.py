"""HNSW approximate nearest-neighbor index over title embeddings.

A multi-layer navigable graph in the style of Malkov & Yashunin: every node
lives on layer 0, a geometrically thinning subset on higher layers. Queries
greedily descend the upper layers and run a beam search of width ``ef`` on
layer 0. Scoring is the plain inner product (searches maximize it); graph
traversal internally negates scores so smaller means closer.

Determinism contract: node ordinals follow ascending id order, per-node
levels come from a PRNG keyed by (seed, ordinal), and every traversal
decision uses the total order (distance, ordinal). Building the same store
with the same parameters and kernel therefore yields byte-identical saved
indexes. Small indexes (at most ``brute_force_threshold`` entries) route
searches to exhaustive scoring, which makes them exact.

Index file layout (little-endian, documented for the ``.whnw`` files written
by :func:`save_index`):

    magic    4 bytes  b"WHNW"
    version  u16      1
    reserved u16      0
    params   M u32, M0 u32, ef_construction u32, seed u64,
             brute_force_threshold u32, neighbor_selection u8 (0 heuristic,
             1 simple), dim u32, count u64, max_level i32, entry i64
    nodes    count times: [id_len u16][id UTF-8][level i32]
    vectors  count * dim * f32
    adjacency per layer 0..max_level, per node present at that layer in
             ordinal order: [degree u32][degree u32 deltas], neighbors sorted
             ascending and delta-encoded (first value absolute)

The float payload round-trips bit-exactly, so a loaded index replays
searches identically to the index that was saved.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ..embeddings import EmbeddingStore, as_vector, batch_inner_products, inner_product
from ..errors import DimensionMismatchError, FormatError, NotFoundError
from .kernels import resolve_kernel

WHNW_MAGIC = b"WHNW"
WHNW_VERSION = 1
_IDX_HEADER = struct.Struct("<4sHH")
_IDX_PARAMS = struct.Struct("<IIIQIBIQiq")
_ID_LEN = struct.Struct("<H")
_LEVEL = struct.Struct("<i")
_DEG = struct.Struct("<I")

DEFAULT_M = 32
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_BRUTE_FORCE_THRESHOLD = 1024

_SELECTION_CODES = {"heuristic": 0, "simple": 1}
_SELECTION_NAMES = {v: k for k, v in _SELECTION_CODES.items()}


@dataclass(frozen=True)
class HnswParams:
    """Build-time parameters. ``M0`` defaults to ``2 * M``."""

    M: int = DEFAULT_M
    M0: int | None = None
    ef_construction: int = DEFAULT_EF_CONSTRUCTION
    seed: int = 0
    neighbor_selection: str = "heuristic"  # "simple" keeps the nearest M (debug aid)
    brute_force_threshold: int = DEFAULT_BRUTE_FORCE_THRESHOLD

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if self.M0 is not None and self.M0 < 1:
            raise ValueError(f"M0 must be >= 1, got {self.M0}")
        if self.ef_construction < 1:
            raise ValueError(f"ef_construction must be >= 1, got {self.ef_construction}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.neighbor_selection not in _SELECTION_CODES:
            raise ValueError(f"unknown neighbor_selection: {self.neighbor_selection!r}")
        if self.brute_force_threshold < 0:
            raise ValueError("brute_force_threshold must be >= 0")

    @property
    def m0(self) -> int:
        return self.M0 if self.M0 is not None else 2 * self.M


@dataclass(frozen=True)
class SearchHit:
    """One ranked result: hits sort by score descending, ties by id ascending."""

    id: str
    score: float
    rank: int


def default_ef_search(k: int) -> int:
    return max(64, 4 * k)


@dataclass
class _Layer:
    adj: np.ndarray  # (n, cap) int32, filled rows prefix per node
    deg: np.ndarray  # (n,) int32

    @classmethod
    def empty(cls, n: int, cap: int) -> "_Layer":
        return cls(np.full((n, cap), -1, dtype=np.int32), np.zeros(n, dtype=np.int32))


def _levels_for(count: int, params: HnswParams) -> np.ndarray:
    """Per-node layer assignment: floor(-ln(U) / ln(M)), U keyed by (seed, ordinal)."""
    ml = 1.0 / math.log(params.M)
    levels = np.empty(count, dtype=np.int32)
    for ordinal in range(count):
        seq = np.random.SeedSequence(entropy=[params.seed, ordinal])
        u = np.random.Generator(np.random.PCG64(seq)).random()
        levels[ordinal] = int(-math.log(max(u, 1e-300)) * ml)
    return levels


class HnswIndex:
    """Immutable-after-build graph index; safe for concurrent searches."""

    def __init__(
        self,
        params: HnswParams,
        ids: list[str],
        matrix: np.ndarray,
        levels: np.ndarray,
        layers: list[_Layer],
        entry: int,
        max_level: int,
        kernel: str | None = None,
    ):
        self.params = params
        self._ids = ids
        self._ids_arr = np.array(ids, dtype=np.str_) if ids else np.empty(0, dtype=np.str_)
        self._ordinals = {id_: i for i, id_ in enumerate(ids)}
        self._matrix = matrix
        self._levels = levels
        self._layers = layers
        self._entry = entry
        self._max_level = max_level
        self.kernel_name, self._kernel = resolve_kernel(kernel)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, id_: str) -> bool:
        return id_ in self._ordinals

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def vector(self, id_: str) -> np.ndarray:
        try:
            return self._matrix[self._ordinals[id_]]
        except KeyError:
            raise NotFoundError(f"id not in index: {id_!r}") from None

    def stats(self) -> dict:
        per_layer = [
            {"layer": layer, "nodes": int((self._levels >= layer).sum()), "edges": int(l.deg.sum())}
            for layer, l in enumerate(self._layers)
        ]
        return {
            "count": len(self),
            "dim": self.dim,
            "max_level": self._max_level,
            "entry_id": self._ids[self._entry] if self._entry >= 0 else None,
            "kernel": self.kernel_name,
            "params": {
                "M": self.params.M,
                "M0": self.params.m0,
                "ef_construction": self.params.ef_construction,
                "seed": self.params.seed,
                "neighbor_selection": self.params.neighbor_selection,
                "brute_force_threshold": self.params.brute_force_threshold,
            },
            "layers": per_layer,
        }

    def search(self, query: np.ndarray, k: int, ef_search: int | None = None) -> list[SearchHit]:
        """Top-k ids by inner product with ``query``.

        Scores in the returned hits are recomputed with the canonical
        :func:`hiret.embeddings.inner_product` on the stored float32 vectors,
        never taken from graph traversal.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if len(self) == 0:
            return []
        query = as_vector(query, dim=self.dim)
        if ef_search is None:
            ef_search = default_ef_search(k)
        elif ef_search < k:
            raise ValueError(f"ef_search ({ef_search}) must be >= k ({k})")

        if len(self) <= self.params.brute_force_threshold:
            scores = batch_inner_products(self._matrix, query)
            ordinals = _topk_ordinals(scores, self._ids_arr, min(k, len(self)))
            return self._finalize(query, ordinals)

        entry = self._entry
        for layer in range(self._max_level, 0, -1):
            found, _ = self._kernel.search_layer(
                self._matrix,
                self._layers[layer].adj,
                self._layers[layer].deg,
                query,
                np.array([entry], dtype=np.int32),
                1,
            )
            entry = int(found[0])
        found, _ = self._kernel.search_layer(
            self._matrix,
            self._layers[0].adj,
            self._layers[0].deg,
            query,
            np.array([entry], dtype=np.int32),
            ef_search,
        )
        scores = batch_inner_products(self._matrix[found], query)
        chosen = found[_topk_ordinals(scores, self._ids_arr[found], min(k, found.size))]
        return self._finalize(query, chosen)

    def _finalize(self, query: np.ndarray, ordinals: Iterable[int]) -> list[SearchHit]:
        scored = [
            (self._ids[o], inner_product(query, self._matrix[o])) for o in np.asarray(ordinals)
        ]
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return [SearchHit(id_, score, rank) for rank, (id_, score) in enumerate(scored, start=1)]


def _topk_ordinals(scores: np.ndarray, ids_arr: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best scores, exact ties resolved by ascending id."""
    n = scores.shape[0]
    if k >= n:
        candidates = np.arange(n)
    else:
        cut = np.partition(scores, n - k)[n - k]
        candidates = np.flatnonzero(scores >= cut)
    order = candidates[np.lexsort((ids_arr[candidates], -scores[candidates]))]
    return order[:k]


def exact_search(store: EmbeddingStore, query: np.ndarray, k: int) -> list[SearchHit]:
    """Brute-force top-k over a store: the oracle the graph index is tested against."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(store) == 0:
        return []
    query = as_vector(query, dim=store.dim)
    scores = batch_inner_products(store.matrix, query)
    ordinals = _topk_ordinals(scores, store.ids_array, min(k, len(store)))
    ids, matrix = store.ids, store.matrix
    scored = [(ids[int(o)], inner_product(query, matrix[int(o)])) for o in ordinals]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return [SearchHit(id_, score, rank) for rank, (id_, score) in enumerate(scored, start=1)]


def build(
    store: EmbeddingStore, params: HnswParams | None = None, kernel: str | None = None
) -> HnswIndex:
    """Construct the graph by inserting the store's vectors in ascending id order."""
    params = params or HnswParams()
    if params.M0 is None:
        params = dataclasses.replace(params, M0=params.m0)
    ids = sorted(store.ids)
    count = len(ids)
    if count == 0:
        empty = np.empty((0, store.dim), dtype=np.float32)
        empty.flags.writeable = False
        return HnswIndex(
            params,
            [],
            empty,
            np.empty(0, dtype=np.int32),
            [],
            entry=-1,
            max_level=-1,
            kernel=kernel,
        )
    matrix = np.ascontiguousarray(np.vstack([store.get(id_) for id_ in ids]), dtype=np.float32)
    if matrix.shape[1] != store.dim:
        raise DimensionMismatchError("store vectors disagree with store dim")
    levels = _levels_for(count, params)
    kernel_name, kern = resolve_kernel(kernel)

    layers: list[_Layer] = []

    def ensure_layers(top: int) -> None:
        while len(layers) <= top:
            cap = params.m0 if len(layers) == 0 else params.M
            layers.append(_Layer.empty(count, cap))

    entry = -1
    max_level = -1
    for i in range(count):
        level = int(levels[i])
        ensure_layers(level)
        if entry < 0:
            entry, max_level = i, level
            continue
        query = matrix[i]
        ep = entry
        for layer in range(max_level, level, -1):
            found, _ = kern.search_layer(
                matrix,
                layers[layer].adj,
                layers[layer].deg,
                query,
                np.array([ep], dtype=np.int32),
                1,
            )
            ep = int(found[0])
        entries = np.array([ep], dtype=np.int32)
        for layer in range(min(level, max_level), -1, -1):
            cand_ids, cand_dists = kern.search_layer(
                matrix,
                layers[layer].adj,
                layers[layer].deg,
                query,
                entries,
                params.ef_construction,
            )
            cap = params.m0 if layer == 0 else params.M
            if params.neighbor_selection == "heuristic":
                selected = kern.select_neighbors(matrix, cand_ids, cand_dists, cap)
            else:
                selected = cand_ids[:cap]
            adj, deg = layers[layer].adj, layers[layer].deg
            adj[i, : selected.size] = selected
            deg[i] = selected.size
            for j in selected:
                j = int(j)
                if deg[j] < cap:
                    adj[j, deg[j]] = i
                    deg[j] += 1
                else:
                    over = np.append(adj[j, : deg[j]], np.int32(i)).astype(np.int32)
                    over_dists = kern.dists_to(matrix, j, over)
                    if params.neighbor_selection == "heuristic":
                        keep = kern.select_neighbors(matrix, over, over_dists, cap)
                    else:
                        keep = over[np.lexsort((over, over_dists))][:cap]
                    adj[j, : keep.size] = keep
                    adj[j, keep.size : cap] = -1
                    deg[j] = keep.size
            entries = cand_ids
        if level > max_level:
            entry, max_level = i, level

    # Canonicalize adjacency rows ascending. Traversal orders every decision
    # by (distance, ordinal), so row order never affects results; sorting here
    # makes the in-memory graph identical to its serialized form.
    for layer in layers:
        for i in range(count):
            layer.adj[i, : layer.deg[i]] = np.sort(layer.adj[i, : layer.deg[i]])
    matrix.flags.writeable = False
    return HnswIndex(params, ids, matrix, levels, layers, entry, max_level, kernel=kernel_name)


def save_index(index: HnswIndex, path: str | Path) -> None:
    """Write the index in the ``.whnw`` format (adjacency canonicalized ascending)."""
    path = Path(path)
    count = len(index)
    with path.open("wb") as fh:
        fh.write(_IDX_HEADER.pack(WHNW_MAGIC, WHNW_VERSION, 0))
        fh.write(
            _IDX_PARAMS.pack(
                index.params.M,
                index.params.m0,
                index.params.ef_construction,
                index.params.seed,
                index.params.brute_force_threshold,
                _SELECTION_CODES[index.params.neighbor_selection],
                index.dim,
                count,
                index._max_level,
                index._entry,
            )
        )
        for i, id_ in enumerate(index._ids):
            id_bytes = id_.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise ValueError(f"id too long for index format: {id_[:40]!r}...")
            fh.write(_ID_LEN.pack(len(id_bytes)))
            fh.write(id_bytes)
            fh.write(_LEVEL.pack(int(index._levels[i])))
        if count:
            fh.write(np.ascontiguousarray(index._matrix, dtype="<f4").tobytes())
        for layer_no, layer in enumerate(index._layers):
            for i in range(count):
                if index._levels[i] < layer_no:
                    continue
                neighbors = np.sort(layer.adj[i, : layer.deg[i]])
                deltas = np.diff(neighbors, prepend=np.int32(0)) if neighbors.size else neighbors
                fh.write(_DEG.pack(neighbors.size))
                fh.write(deltas.astype("<u4").tobytes())


def load_index(path: str | Path, kernel: str | None = None) -> HnswIndex:
    """Read a ``.whnw`` file; the result replays searches identically to the saved index."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _IDX_HEADER.size + _IDX_PARAMS.size:
        raise FormatError(f"{path}: file too short for header ({len(data)} bytes)")
    magic, version, reserved = _IDX_HEADER.unpack_from(data, 0)
    if magic != WHNW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {WHNW_MAGIC!r}")
    if version != WHNW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {WHNW_VERSION}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved header field is nonzero")
    (
        m,
        m0,
        ef_construction,
        seed,
        brute_force_threshold,
        selection_code,
        dim,
        count,
        max_level,
        entry,
    ) = _IDX_PARAMS.unpack_from(data, _IDX_HEADER.size)
    if selection_code not in _SELECTION_NAMES:
        raise FormatError(f"{path}: unknown neighbor-selection code {selection_code}")
    if dim < 1:
        raise FormatError(f"{path}: invalid dim {dim}")
    try:
        params = HnswParams(
            M=m,
            M0=m0,
            ef_construction=ef_construction,
            seed=seed,
            neighbor_selection=_SELECTION_NAMES[selection_code],
            brute_force_threshold=brute_force_threshold,
        )
    except ValueError as exc:
        raise FormatError(f"{path}: invalid params block: {exc}") from None

    offset = _IDX_HEADER.size + _IDX_PARAMS.size
    ids: list[str] = []
    levels = np.empty(count, dtype=np.int32)
    seen: set[str] = set()
    for record in range(count):
        if offset + _ID_LEN.size > len(data):
            raise FormatError(f"{path}: truncated in node table at record {record}")
        (id_len,) = _ID_LEN.unpack_from(data, offset)
        offset += _ID_LEN.size
        if offset + id_len + _LEVEL.size > len(data):
            raise FormatError(f"{path}: truncated in node table at record {record}")
        id_ = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        (level,) = _LEVEL.unpack_from(data, offset)
        offset += _LEVEL.size
        if id_ in seen:
            raise FormatError(f"{path}: duplicate id {id_!r} in node table")
        if level < 0 or (max_level >= 0 and level > max_level):
            raise FormatError(f"{path}: node {record} has invalid level {level}")
        seen.add(id_)
        ids.append(id_)
        levels[record] = level

    vec_bytes = count * dim * 4
    if offset + vec_bytes > len(data):
        raise FormatError(f"{path}: truncated in vector payload")
    matrix = (
        np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
        .reshape(count, dim)
        .copy()
        if count
        else np.empty((0, dim), dtype=np.float32)
    )
    offset += vec_bytes
    if count and not np.all(np.isfinite(matrix)):
        raise FormatError(f"{path}: non-finite vector values")

    layers: list[_Layer] = []
    for layer_no in range(max_level + 1):
        cap = params.m0 if layer_no == 0 else params.M
        layer = _Layer.empty(count, cap)
        for i in range(count):
            if levels[i] < layer_no:
                continue
            if offset + _DEG.size > len(data):
                raise FormatError(f"{path}: truncated in adjacency (layer {layer_no}, node {i})")
            (degree,) = _DEG.unpack_from(data, offset)
            offset += _DEG.size
            if degree > cap:
                raise FormatError(
                    f"{path}: node {i} degree {degree} exceeds layer {layer_no} cap {cap}"
                )
            if offset + 4 * degree > len(data):
                raise FormatError(f"{path}: truncated in adjacency (layer {layer_no}, node {i})")
            deltas = np.frombuffer(data, dtype="<u4", count=degree, offset=offset)
            offset += 4 * degree
            neighbors = np.cumsum(deltas.astype(np.int64))
            if degree and (neighbors[-1] >= count or neighbors[0] < 0):
                raise FormatError(f"{path}: adjacency out of range (layer {layer_no}, node {i})")
            layer.adj[i, :degree] = neighbors.astype(np.int32)
            layer.deg[i] = degree
        layers.append(layer)
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    if count and (entry < 0 or entry >= count):
        raise FormatError(f"{path}: invalid entry point {entry}")

    matrix.flags.writeable = False
    return HnswIndex(params, ids, matrix, levels, layers, int(entry), int(max_level), kernel=kernel)
