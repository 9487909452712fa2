import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semcl.core import (
    LabelSpace,
    PromptPool,
    TokenSequence,
    assemble_input,
    cosine,
    split_classes,
)
from semcl.errors import ConfigurationError, DegenerateInputError, ProtocolError

from conftest import make_bundle


class TestCosine:
    def test_self_similarity(self):
        v = np.array([0.3, -1.2, 4.0])
        assert cosine(v, v) == pytest.approx(1.0)

    def test_orthogonality(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)

    def test_hand_computed(self):
        # dot = 4, norms sqrt(5) each -> 4/5
        assert cosine(np.array([1.0, 2.0]), np.array([2.0, 1.0])) == pytest.approx(0.8)

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateInputError):
            cosine(np.zeros(3), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(DegenerateInputError):
            cosine(torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))

    def test_torch_matches_numpy(self):
        u = np.array([0.5, -2.0, 1.0])
        v = np.array([1.5, 0.3, -0.7])
        expected = cosine(u, v)
        got = cosine(torch.from_numpy(u), torch.from_numpy(v))
        assert float(got) == pytest.approx(float(expected), abs=1e-12)

    @given(
        st.lists(st.floats(-100, 100), min_size=2, max_size=8),
        st.lists(st.floats(-100, 100), min_size=2, max_size=8),
        st.floats(0.01, 50),
    )
    @settings(max_examples=100, deadline=None)
    def test_properties(self, u_vals, v_vals, scale):
        size = min(len(u_vals), len(v_vals))
        u = np.array(u_vals[:size])
        v = np.array(v_vals[:size])
        if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
            return
        sim = cosine(u, v)
        assert -1.0 - 1e-9 <= sim <= 1.0 + 1e-9
        assert cosine(v, u) == pytest.approx(sim, abs=1e-9)
        assert cosine(scale * u, v) == pytest.approx(sim, abs=1e-9)


class TestTokenSequence:
    def test_full_scale_length(self):
        seq = TokenSequence(
            class_token=torch.zeros(8, dtype=torch.float64),
            image_tokens=torch.zeros(196, 8, dtype=torch.float64),
            semantic_prompt=torch.zeros(8, dtype=torch.float64),
            visual_prompt=torch.zeros(10, 8, dtype=torch.float64),
        )
        assert len(seq) == 208

    def test_toy_length(self):
        bundle = make_bundle(d=16, l_vp=2, adapter_layers=())
        seq = assemble_input(
            torch.zeros(16, dtype=torch.float64),
            torch.zeros(4, 16, dtype=torch.float64),
            bundle,
        )
        assert len(seq) == 8

    def test_position_map_is_bijective(self):
        gen = torch.Generator().manual_seed(1)
        parts = {
            "class_token": torch.randn(6, generator=gen, dtype=torch.float64),
            "image_tokens": torch.randn(3, 6, generator=gen, dtype=torch.float64),
            "semantic_prompt": torch.randn(6, generator=gen, dtype=torch.float64),
            "visual_prompt": torch.randn(2, 6, generator=gen, dtype=torch.float64),
        }
        seq = TokenSequence(**parts)
        matrix = seq.to_matrix()
        assert torch.equal(matrix[seq.class_index], parts["class_token"])
        assert torch.equal(matrix[seq.image_slice], parts["image_tokens"])
        assert torch.equal(matrix[seq.semantic_index], parts["semantic_prompt"])
        assert torch.equal(matrix[seq.visual_slice], parts["visual_prompt"])
        # every row is covered exactly once
        indices = [seq.class_index, *range(1, 4), seq.semantic_index, 5, 6]
        assert sorted(indices) == list(range(len(seq)))

    def test_matrix_round_trip(self):
        gen = torch.Generator().manual_seed(2)
        seq = TokenSequence(
            class_token=torch.randn(6, generator=gen, dtype=torch.float64),
            image_tokens=torch.randn(3, 6, generator=gen, dtype=torch.float64),
            semantic_prompt=torch.randn(6, generator=gen, dtype=torch.float64),
            visual_prompt=torch.randn(2, 6, generator=gen, dtype=torch.float64),
        )
        back = TokenSequence.from_matrix(seq.to_matrix(), num_image_tokens=3)
        for name in ("class_token", "image_tokens", "semantic_prompt", "visual_prompt"):
            assert torch.equal(getattr(seq, name), getattr(back, name))

    def test_width_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            TokenSequence(
                class_token=torch.zeros(8, dtype=torch.float64),
                image_tokens=torch.zeros(4, 9, dtype=torch.float64),
                semantic_prompt=torch.zeros(8, dtype=torch.float64),
                visual_prompt=torch.zeros(2, 8, dtype=torch.float64),
            )

    def test_assemble_dimension_mismatch(self):
        bundle = make_bundle(d=16, adapter_layers=())
        with pytest.raises(ConfigurationError):
            assemble_input(
                torch.zeros(16, dtype=torch.float64),
                torch.zeros(4, 8, dtype=torch.float64),
                bundle,
            )


class TestPromptPool:
    def test_append_enforces_order(self):
        pool = PromptPool()
        bundle = make_bundle(adapter_layers=())
        bundle.task_id = 2
        with pytest.raises(ProtocolError):
            pool.append(bundle)

    def test_append_rejects_duplicate_classes(self):
        pool = PromptPool()
        pool.append(make_bundle(adapter_layers=()))
        again = make_bundle(adapter_layers=())
        again.task_id = 2
        with pytest.raises(ProtocolError):
            pool.append(again)

    def test_upto_shares_bundles(self):
        pool = PromptPool()
        pool.append(make_bundle(adapter_layers=()))
        view = pool.upto(1)
        assert view.bundles[0] is pool.bundles[0]


class TestLabelSpace:
    def test_split_identity_order(self):
        space = split_classes([7, 8, 9, 10], 2, order_seed=None)
        assert space.task_classes == ((7, 8), (9, 10))

    def test_split_rejects_indivisible(self):
        with pytest.raises(ConfigurationError):
            split_classes([1, 2, 3], 2, order_seed=None)

    def test_overlap_rejected(self):
        with pytest.raises(ConfigurationError):
            LabelSpace(task_classes=((1, 2), (2, 3)))

    def test_task_lookup(self):
        space = split_classes(list(range(6)), 3, order_seed=None)
        assert space.task_of(4) == 2
        assert space.cumulative(1) == (0, 1, 2)
        with pytest.raises(ProtocolError):
            space.classes_for(3)
