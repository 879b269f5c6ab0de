"""hiret: hierarchical entity/passage retrieval with an HNSW index.

The pipeline mirrors retrieval-augmented question answering over an external
knowledge base: stage 1 finds candidate documents by nearest-neighbor search
over title embeddings with an image-derived query vector, stage 2 scores the
chunks of each retrieved document against a question embedding, and the
winning passages are assembled into a token-budgeted prompt for an answer
provider. An evaluation harness measures entity recall@k and end-to-end
answer accuracy across (k, n, oracle) configurations.
"""

__version__ = "0.1.0"
