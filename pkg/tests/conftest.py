import numpy as np
import pytest

from hiret import ann
from hiret.embeddings import EmbeddingStore, test_embedder


@pytest.fixture(scope="session")
def unit_vectors_1k():
    """1000 seeded random unit vectors (dim 32) as (ids, matrix)."""
    rng = np.random.default_rng(123)
    matrix = rng.standard_normal((1000, 32)).astype(np.float32)
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    ids = [f"v{i:04d}" for i in range(1000)]
    return ids, matrix


@pytest.fixture(scope="session")
def unit_store_1k(unit_vectors_1k):
    ids, matrix = unit_vectors_1k
    return EmbeddingStore.build(zip(ids, matrix), kind="title", normalized=True)


@pytest.fixture(scope="session")
def hash16():
    return test_embedder(5, 16)


@pytest.fixture(params=ann.available_kernels())
def kernel(request):
    """Run a test against every built graph kernel."""
    return request.param
