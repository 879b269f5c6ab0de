import numpy as np
import pytest

from hiret import embeddings
from hiret.embeddings import (
    EmbeddingStore,
    as_vector,
    inner_product,
    load_store,
    normalize,
    save_store,
)
from hiret.errors import DimensionMismatchError, FormatError


def vec(*values):
    return np.array(values, dtype=np.float32)


class TestInnerProduct:
    def test_orthogonal(self):
        assert inner_product(vec(1, 0), vec(0, 1)) == 0.0

    def test_hand_arithmetic(self):
        assert inner_product(vec(1, 2), vec(3, 4)) == 11.0

    def test_unit_self_similarity(self):
        v = normalize(vec(0.3, -1.2, 4.5))
        assert abs(inner_product(v, v) - 1.0) < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            inner_product(vec(1, 2), vec(1, 2, 3))

    def test_symmetric_and_bilinear(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            a = rng.standard_normal(24).astype(np.float32)
            b = rng.standard_normal(24).astype(np.float32)
            alpha = float(rng.uniform(-3, 3))
            assert inner_product(a, b) == inner_product(b, a)
            assert inner_product((alpha * a).astype(np.float32), b) == pytest.approx(
                alpha * inner_product(a, b), abs=1e-5 * max(1.0, abs(alpha))
            )

    def test_unit_norm_scores_bounded(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            a = normalize(rng.standard_normal(16))
            b = normalize(rng.standard_normal(16))
            assert -1.0 - 1e-6 <= inner_product(a, b) <= 1.0 + 1e-6


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(normalize(vec(3, 4)), [0.6, 0.8], atol=1e-7)

    def test_idempotent_on_unit_vectors(self):
        v = normalize(vec(1, 2, 3, 4))
        again = normalize(v)
        assert abs(float(np.linalg.norm(again)) - 1.0) < 1e-6
        np.testing.assert_allclose(again, v, atol=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            normalize(vec(0, 0))

    def test_norm_stays_tight_at_high_dim(self):
        rng = np.random.default_rng(3)
        v = normalize(rng.standard_normal(2048))
        assert abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) < 1e-6


def test_as_vector_rejects_non_finite():
    with pytest.raises(ValueError):
        as_vector([1.0, float("nan")])


class TestStore:
    def build(self, n=3, dim=4, kind="title"):
        rng = np.random.default_rng(n * 7 + dim)
        return EmbeddingStore.build(
            ((f"id{i}", rng.standard_normal(dim).astype(np.float32)) for i in range(n)),
            kind=kind,
            normalized=False,
        )

    def test_round_trip_bit_exact(self, tmp_path):
        store = self.build()
        path = tmp_path / "s.wemb"
        save_store(store, path)
        loaded = load_store(path)
        assert loaded.dim == store.dim
        assert loaded.kind == store.kind
        assert loaded.normalized == store.normalized
        assert loaded.ids == store.ids
        assert loaded.matrix.tobytes() == store.matrix.tobytes()

    def test_normalized_flag_round_trip(self, tmp_path):
        store = EmbeddingStore.build([("a", normalize(vec(1, 2)))], kind="chunk", normalized=True)
        save_store(store, tmp_path / "s.wemb")
        assert load_store(tmp_path / "s.wemb").normalized is True

    def test_empty_store_round_trip(self, tmp_path):
        store = EmbeddingStore.build([], dim=8)
        save_store(store, tmp_path / "s.wemb")
        loaded = load_store(tmp_path / "s.wemb")
        assert len(loaded) == 0 and loaded.dim == 8

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "s.wemb"
        save_store(self.build(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_store(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "s.wemb"
        save_store(self.build(), path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_store(path)

    def test_unknown_flag_bits(self, tmp_path):
        path = tmp_path / "s.wemb"
        save_store(self.build(), path)
        raw = bytearray(path.read_bytes())
        raw[6] |= 0x80
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="flag"):
            load_store(path)

    def test_truncation_names_record(self, tmp_path):
        path = tmp_path / "s.wemb"
        save_store(self.build(n=3), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-6])  # cut into the last record's floats
        with pytest.raises(FormatError, match="record 2"):
            load_store(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "s.wemb"
        save_store(self.build(), path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(FormatError, match="trailing"):
            load_store(path)

    def test_non_finite_payload_rejected(self, tmp_path):
        path = tmp_path / "s.wemb"
        save_store(self.build(n=2, dim=2), path)
        raw = bytearray(path.read_bytes())
        raw[-4:] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="non-finite"):
            load_store(path)

    def test_duplicate_ids_rejected_on_build(self):
        with pytest.raises(ValueError, match="duplicate"):
            EmbeddingStore.build([("a", vec(1, 2)), ("a", vec(3, 4))])

    def test_mixed_dims_rejected(self):
        with pytest.raises(DimensionMismatchError):
            EmbeddingStore.build([("a", vec(1, 2)), ("b", vec(1, 2, 3))])

    def test_unicode_ids_round_trip(self, tmp_path):
        store = EmbeddingStore.build([("Müller (Fußball)", vec(1, 2)), ("漢字", vec(3, 4))])
        save_store(store, tmp_path / "s.wemb")
        assert load_store(tmp_path / "s.wemb").ids == ["Müller (Fußball)", "漢字"]


class TestHashEmbedder:
    def test_deterministic(self):
        emb = embeddings.test_embedder(7, 12)
        np.testing.assert_array_equal(emb.embed_text("abc"), emb.embed_text("abc"))
        again = embeddings.test_embedder(7, 12)
        np.testing.assert_array_equal(emb.embed_text("abc"), again.embed_text("abc"))

    def test_unit_norm(self):
        emb = embeddings.test_embedder(7, 12)
        for text in ["", "abc", "a much longer string", "漢字"]:
            assert abs(float(np.linalg.norm(emb.embed_text(text))) - 1.0) < 1e-6

    def test_nearby_strings_differ(self):
        # Verified by direct evaluation: one-character edits move the vector.
        emb = embeddings.test_embedder(7, 12)
        a, b = emb.embed_text("abc"), emb.embed_text("abd")
        assert np.any(a != b)

    def test_seed_changes_vectors(self):
        a = embeddings.test_embedder(7, 12).embed_text("abc")
        b = embeddings.test_embedder(8, 12).embed_text("abc")
        assert np.any(a != b)

    def test_dim_validation(self):
        with pytest.raises(ValueError):
            embeddings.test_embedder(7, 1)
