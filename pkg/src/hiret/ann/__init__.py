"""Approximate nearest-neighbor search: HNSW graph index plus exact oracle."""

from .index import (
    DEFAULT_BRUTE_FORCE_THRESHOLD,
    DEFAULT_EF_CONSTRUCTION,
    DEFAULT_M,
    HnswIndex,
    HnswParams,
    SearchHit,
    build,
    default_ef_search,
    exact_search,
    load_index,
    save_index,
)
from .kernels import available_kernels, default_kernel, resolve_kernel

__all__ = [
    "DEFAULT_BRUTE_FORCE_THRESHOLD",
    "DEFAULT_EF_CONSTRUCTION",
    "DEFAULT_M",
    "HnswIndex",
    "HnswParams",
    "SearchHit",
    "available_kernels",
    "build",
    "default_ef_search",
    "default_kernel",
    "exact_search",
    "load_index",
    "resolve_kernel",
    "save_index",
]
