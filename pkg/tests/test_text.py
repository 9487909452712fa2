import hashlib

import numpy as np
import pytest

from semcl.errors import ConfigurationError, MissingEmbeddingError, ProtocolError
from semcl.text import (
    CachedEncoder,
    EmbeddingCache,
    FixtureEncoder,
    SemanticProjector,
    build_class_template,
    build_task_template,
    encode,
    project_to_backbone,
    task_semantics,
)


class TestTemplates:
    def test_two_class_text(self):
        assert build_task_template(["cat", "dog"]).text == "A photo of cat or dog."

    def test_single_class_degenerates(self):
        assert build_task_template(["cat"]).text == "A photo of cat."

    def test_separator_count(self):
        names = [f"name{i}" for i in range(20)]
        assert build_task_template(names).text.count(" or ") == 19

    def test_class_template(self):
        assert build_class_template("cat").text == "A photo of cat."

    def test_empty_rejected(self):
        with pytest.raises(ProtocolError):
            build_task_template([])
        with pytest.raises(ProtocolError):
            build_class_template("")

    def test_injective_on_name_lists(self):
        lists = [["a", "b"], ["b", "a"], ["a"], ["a", "b", "c"], ["ab"]]
        texts = {build_task_template(names).text for names in lists}
        assert len(texts) == len(lists)


class TestFixtureEncoder:
    def test_deterministic(self):
        enc = FixtureEncoder(dim=16, seed=3)
        text = "A photo of cat."
        np.testing.assert_array_equal(encode(text, enc), encode(text, enc))

    def test_matches_hash_oracle(self):
        # independent re-derivation of the fixture's hash-to-vector rule
        enc = FixtureEncoder(dim=8, seed=3)
        text = "A photo of cat."
        digest = hashlib.sha256(f"3:{text}".encode()).digest()
        expected = np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(8)
        np.testing.assert_array_equal(encode(text, enc), expected)

    def test_distinct_classes_distinct_vectors(self):
        enc = FixtureEncoder(dim=12, seed=0)
        vectors = [encode(build_class_template(n).text, enc) for n in ("cat", "dog", "owl")]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.array_equal(vectors[i], vectors[j])


class TestEmbeddingCache:
    def test_round_trip(self, tmp_path):
        cache = EmbeddingCache(encoder_name="fixture:0", dim=6, pooling="hash")
        cache.put("A photo of cat.", np.arange(6.0))
        cache.put("A photo of dog.", np.linspace(-1, 1, 6))
        cache.save(tmp_path / "cache")
        back = EmbeddingCache.load(tmp_path / "cache")
        assert back.encoder_name == "fixture:0"
        assert back.dim == 6
        np.testing.assert_array_equal(back.get("A photo of cat."), np.arange(6.0))
        np.testing.assert_array_equal(back.get("A photo of dog."), cache.get("A photo of dog."))

    def test_miss_lists_text(self):
        cache = EmbeddingCache(encoder_name="fixture:0", dim=4, pooling="hash")
        with pytest.raises(MissingEmbeddingError, match="A photo of owl."):
            cache.get("A photo of owl.")

    def test_cached_encoder_serves_offline(self):
        live = FixtureEncoder(dim=5, seed=1)
        cache = EmbeddingCache(encoder_name=live.name, dim=5, pooling="hash")
        text = "A photo of cat."
        cache.put(text, live.encode(text))
        offline = CachedEncoder(cache)  # no fallback: encoder is "down"
        np.testing.assert_array_equal(offline.encode(text), live.encode(text))
        with pytest.raises(MissingEmbeddingError, match="A photo of dog."):
            offline.encode("A photo of dog.")

    def test_width_mismatch_rejected(self):
        cache = EmbeddingCache(encoder_name="x", dim=4, pooling="hash")
        with pytest.raises(ConfigurationError):
            cache.put("text", np.zeros(5))


class TestProjection:
    def test_identity_returns_input(self):
        proj = SemanticProjector.identity(4)
        vec = np.array([1.0, -2.0, 3.0, 0.5])
        np.testing.assert_array_equal(project_to_backbone(vec, proj), vec)

    def test_hand_matmul(self):
        matrix = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]).T  # [2, 4]
        proj = SemanticProjector(text_dim=4, target_dim=2, matrix=matrix)
        np.testing.assert_array_equal(
            project_to_backbone(np.array([1.0, 2.0, 3.0, 4.0]), proj), np.array([1.0, 2.0])
        )

    def test_zero_maps_to_zero(self):
        proj = SemanticProjector.seeded(6, 3, seed=1)
        np.testing.assert_array_equal(project_to_backbone(np.zeros(6), proj), np.zeros(3))

    def test_unconfigured_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            SemanticProjector(text_dim=4, target_dim=2)

    def test_seeded_is_reproducible(self):
        a = SemanticProjector.seeded(8, 3, seed=7)
        b = SemanticProjector.seeded(8, 3, seed=7)
        np.testing.assert_array_equal(a.matrix, b.matrix)


def test_task_semantics_shapes_and_distinctness():
    enc = FixtureEncoder(dim=16, seed=2)
    proj = SemanticProjector.seeded(16, 8, seed=3)
    prompt, class_emb = task_semantics(("cat", "dog"), enc, proj)
    assert prompt.shape == (8,)
    assert class_emb.shape == (2, 8)
    assert not np.array_equal(class_emb[0], class_emb[1])
