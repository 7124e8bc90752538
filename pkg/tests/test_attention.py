import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pointfit.attention import fused_attention, point_attention
from pointfit.errors import ShapeMismatchError


class TestFusedAttention:
    def test_empty_reference_equals_plain_self_attention(self):
        gen = torch.Generator().manual_seed(0)
        q = torch.randn(2, 5, 8, generator=gen)
        k = torch.randn(2, 5, 8, generator=gen)
        v = torch.randn(2, 5, 8, generator=gen)
        plain = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(8), dim=-1) @ v
        empty = torch.zeros(2, 0, 8)
        assert torch.allclose(fused_attention(q, k, v, empty, empty), plain, atol=0)
        assert torch.allclose(fused_attention(q, k, v), plain, atol=0)

    def test_scalar_case(self):
        # q=[1,0], k_m=[1,0], k_r=[0,0], v_m=[1,0], v_r=[0,1]:
        # scores [1/sqrt(2), 0] -> weights [0.6697, 0.3303]
        q = torch.tensor([[[1.0, 0.0]]])
        k_m = torch.tensor([[[1.0, 0.0]]])
        k_r = torch.tensor([[[0.0, 0.0]]])
        v_m = torch.tensor([[[1.0, 0.0]]])
        v_r = torch.tensor([[[0.0, 1.0]]])
        out = fused_attention(q, k_m, v_m, k_r, v_r)[0, 0]
        assert float(out[0]) == pytest.approx(0.6697, abs=1e-4)
        assert float(out[1]) == pytest.approx(0.3303, abs=1e-4)

    def test_rows_stochastic(self):
        gen = torch.Generator().manual_seed(1)
        q = torch.randn(3, 7, 4, generator=gen)
        k = torch.randn(3, 7, 4, generator=gen)
        k_r = torch.randn(3, 9, 4, generator=gen)
        scores = q @ torch.cat([k, k_r], dim=-2).transpose(-2, -1) / 2.0
        w = torch.softmax(scores, dim=-1)
        assert torch.allclose(w.sum(-1), torch.ones(3, 7), atol=1e-6)

    def test_output_in_value_convex_hull(self):
        gen = torch.Generator().manual_seed(2)
        q = torch.randn(1, 6, 3, generator=gen)
        k = torch.randn(1, 6, 3, generator=gen)
        v = torch.randn(1, 6, 3, generator=gen)
        k_r = torch.randn(1, 4, 3, generator=gen)
        v_r = torch.randn(1, 4, 3, generator=gen)
        out = fused_attention(q, k, v, k_r, v_r)
        allv = torch.cat([v, v_r], dim=-2)
        assert (out <= allv.amax(dim=-2, keepdim=True) + 1e-6).all()
        assert (out >= allv.amin(dim=-2, keepdim=True) - 1e-6).all()

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            fused_attention(torch.zeros(1, 2, 4), torch.zeros(1, 2, 3), torch.zeros(1, 2, 3))
        with pytest.raises(ShapeMismatchError):
            fused_attention(torch.zeros(1, 2, 4), torch.zeros(1, 2, 4),
                            torch.zeros(1, 2, 4), torch.zeros(1, 3, 4), torch.zeros(1, 2, 4))


class TestPointAttention:
    def test_zero_embeddings_reduce_to_fused(self):
        gen = torch.Generator().manual_seed(3)
        q = torch.randn(2, 5, 4, generator=gen)
        k = torch.randn(2, 5, 4, generator=gen)
        v = torch.randn(2, 5, 4, generator=gen)
        k_r = torch.randn(2, 8, 4, generator=gen)
        v_r = torch.randn(2, 8, 4, generator=gen)
        zero_p = torch.zeros(2, 5, 4)
        zero_g = torch.zeros(2, 8, 4)
        a = point_attention(q, k, v, k_r, v_r, zero_p, zero_g)
        b = fused_attention(q, k, v, k_r, v_r)
        assert torch.equal(a, b)

    def test_scalar_case(self):
        # d_k=1: logits [(1+1)(1+1), (1+1)(0+2)] = [4,4] -> output 0.5
        one = lambda x: torch.tensor([[[float(x)]]])
        out = point_attention(one(1), one(1), one(0), one(0), one(1), one(1), one(2))
        assert float(out) == pytest.approx(0.5, abs=1e-7)

    def test_values_untouched_by_embeddings(self):
        # embeddings change only the mixing weights; output stays within the
        # value range per dimension
        gen = torch.Generator().manual_seed(4)
        q = torch.randn(1, 4, 2, generator=gen)
        k = torch.randn(1, 4, 2, generator=gen)
        v = torch.randn(1, 4, 2, generator=gen)
        k_r = torch.randn(1, 3, 2, generator=gen)
        v_r = torch.randn(1, 3, 2, generator=gen)
        allv = torch.cat([v, v_r], dim=-2)
        for scale in (0.0, 0.5, 5.0):
            e_p = scale * torch.randn(1, 4, 2, generator=gen)
            e_g = scale * torch.randn(1, 3, 2, generator=gen)
            out = point_attention(q, k, v, k_r, v_r, e_p, e_g)
            assert (out <= allv.amax(dim=-2, keepdim=True) + 1e-5).all()
            assert (out >= allv.amin(dim=-2, keepdim=True) - 1e-5).all()

    def test_token_count_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            point_attention(torch.zeros(1, 2, 4), torch.zeros(1, 2, 4), torch.zeros(1, 2, 4),
                            torch.zeros(1, 3, 4), torch.zeros(1, 3, 4),
                            e_p=torch.zeros(1, 2, 4), e_g=torch.zeros(1, 2, 4))
        with pytest.raises(ShapeMismatchError):
            point_attention(torch.zeros(1, 2, 4), torch.zeros(1, 2, 4), torch.zeros(1, 2, 4),
                            None, None, e_p=torch.zeros(1, 3, 4), e_g=None)

    @settings(max_examples=20, deadline=None)
    @given(shift=st.floats(-4, 4))
    def test_uniform_query_shift_changes_nothing_with_uniform_keys(self, shift):
        # adding the same embedding to q and all keys shifts every logit by a
        # row-constant when keys are identical, leaving softmax weights equal
        q = torch.tensor([[[1.0]]])
        k = torch.tensor([[[2.0], [2.0]]])
        v = torch.tensor([[[0.0], [1.0]]])
        e_p = torch.full((1, 1, 1), shift)
        e_k = torch.full((1, 2, 1), shift)
        out = fused_attention(q + e_p, k + e_k, v)
        assert float(out) == pytest.approx(0.5, abs=1e-6)
