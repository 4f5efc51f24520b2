"""Masked multi-head attention semantics, both masking modes."""

import numpy as np
import pytest

from mvsa import tensor as tz
from mvsa.attention import (
    AttentionParams,
    causal_mask,
    merge_heads,
    multi_head_block,
    multi_view_attention,
    split_heads,
)
from mvsa.errors import ConfigError, ShapeError
from mvsa.masks import MaskSet, WindowSchedule, build_mask_set
from mvsa.rng import RngState
from mvsa.tensor import Tensor, grad_check


def dense_attention_oracle(q, k, v):
    """Reference scaled dot-product attention, computed with plain numpy."""
    d_k = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d_k)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)) @ v


def random_qkv(rng, b=2, h=2, n=6, d_k=4):
    return (
        Tensor(rng.normal(size=(b, h, n, d_k))),
        Tensor(rng.normal(size=(b, h, n, d_k))),
        Tensor(rng.normal(size=(b, h, n, d_k))),
    )


def full_mask(heads, n):
    return build_mask_set(WindowSchedule.full(heads, n), n)


class TestUnmaskedEquivalence:
    def test_all_ones_mask_collapses_to_dense_attention(self):
        for trial in range(6):
            rng = np.random.default_rng(trial)
            q, k, v = random_qkv(rng)
            want = dense_attention_oracle(q.data, k.data, v.data)
            for mode in ("post_softmax", "pre_softmax"):
                got = multi_view_attention(q, k, v, full_mask(2, 6), mode=mode).data
                np.testing.assert_allclose(got, want, atol=1e-12, err_msg=f"{mode} trial {trial}")
            got_none = multi_view_attention(q, k, v, None).data
            np.testing.assert_allclose(got_none, want, atol=1e-12)

    def test_single_step_output_equals_values(self):
        rng = np.random.default_rng(1)
        q, k, v = random_qkv(rng, n=1)
        for mode in ("post_softmax", "pre_softmax"):
            out = multi_view_attention(q, k, v, build_mask_set(WindowSchedule.exponential(2), 1), mode=mode)
            np.testing.assert_allclose(out.data, v.data, atol=1e-15)


class TestMaskingSemantics:
    def test_weights_via_identity_values(self):
        # with V = I the output rows ARE the post-mask attention weights
        rng = np.random.default_rng(3)
        n = d_k = 8
        q = Tensor(rng.normal(size=(1, 2, n, d_k)))
        k = Tensor(rng.normal(size=(1, 2, n, d_k)))
        v = Tensor(np.broadcast_to(np.eye(n), (1, 2, n, n)).copy())
        mask_set = build_mask_set(WindowSchedule((3, 5)), n)

        post = multi_view_attention(q, k, v, mask_set, mode="post_softmax").data
        pre = multi_view_attention(q, k, v, mask_set, mode="pre_softmax").data

        for h in range(2):
            m = mask_set.masks[h]
            # out-of-window weights are exactly zero in both modes
            assert (post[0, h][m == 0] == 0.0).all()
            assert (pre[0, h][m == 0] == 0.0).all()
            # renormalized rows sum to one; un-renormalized rows sum to less
            np.testing.assert_allclose(pre[0, h].sum(axis=-1), 1.0, atol=1e-12)
            row_sums = post[0, h].sum(axis=-1)
            assert (row_sums < 1.0 - 1e-9).all(), "banded rows must lose mass without renormalization"

    def test_post_softmax_equals_dense_weights_times_mask(self):
        rng = np.random.default_rng(4)
        n = d_k = 6
        q = Tensor(rng.normal(size=(1, 1, n, d_k)))
        k = Tensor(rng.normal(size=(1, 1, n, d_k)))
        v = Tensor(np.eye(n)[None, None])
        mask_set = build_mask_set(WindowSchedule((3,)), n)
        got = multi_view_attention(q, k, v, mask_set, mode="post_softmax").data[0, 0]
        dense = dense_attention_oracle(q.data, k.data, np.eye(n)[None, None])[0, 0]
        np.testing.assert_allclose(got, dense * mask_set.masks[0], atol=1e-12)

    def test_masked_value_rows_have_exactly_zero_gradient(self):
        rng = np.random.default_rng(5)
        n, d_k = 12, 8
        q = Tensor(rng.normal(size=(1, 2, n, d_k)))
        k = Tensor(rng.normal(size=(1, 2, n, d_k)))
        v = Tensor(rng.normal(size=(1, 2, n, d_k)), requires_grad=True)
        mask_set = build_mask_set(WindowSchedule((1, 5)), n)
        t = 410 % n  # arbitrary fixed query position
        out = multi_view_attention(q, k, v, mask_set, mode="post_softmax")
        out[:, :, t, :].sum().backward()
        for h in range(2):
            for u in range(n):
                g = v.grad[0, h, u]
                if mask_set.masks[h, t, u] == 0.0:
                    assert (g == 0.0).all(), f"head {h} masked value {u} leaked gradient {g}"
                else:
                    assert (g != 0.0).any(), f"head {h} admitted value {u} should receive gradient"

    def test_masked_value_perturbation_is_invisible_to_forward(self):
        rng = np.random.default_rng(6)
        n, d_k = 12, 8
        q = Tensor(rng.normal(size=(1, 1, n, d_k)))
        k = Tensor(rng.normal(size=(1, 1, n, d_k)))
        v_base = rng.normal(size=(1, 1, n, d_k))
        mask_set = build_mask_set(WindowSchedule((3,)), n)
        t, u = 2, 9  # |t-u| = 7, far outside window 3
        assert mask_set.masks[0, t, u] == 0.0
        base = multi_view_attention(Tensor(q.data), Tensor(k.data), Tensor(v_base), mask_set).data
        bumped = v_base.copy()
        bumped[0, 0, u] += 123.456
        other = multi_view_attention(Tensor(q.data), Tensor(k.data), Tensor(bumped), mask_set).data
        assert (base[0, 0, t] == other[0, 0, t]).all(), "value path must be cut exactly"

    def test_key_coupling_differs_between_modes(self):
        # Perturbing a far-away KEY leaks through the softmax denominator in
        # post_softmax mode (the dense softmax sees every position) but is cut
        # exactly in pre_softmax mode, where barred scores never enter the sum.
        rng = np.random.default_rng(7)
        n, d_k = 12, 8
        q = rng.normal(size=(1, 1, n, d_k))
        k = rng.normal(size=(1, 1, n, d_k))
        v = rng.normal(size=(1, 1, n, d_k))
        mask_set = build_mask_set(WindowSchedule((3,)), n)
        t, u = 2, 9
        k_bumped = k.copy()
        k_bumped[0, 0, u] += 5.0
        for mode, expect_equal in (("pre_softmax", True), ("post_softmax", False)):
            base = multi_view_attention(Tensor(q), Tensor(k), Tensor(v), mask_set, mode=mode).data
            other = multi_view_attention(Tensor(q), Tensor(k_bumped), Tensor(v), mask_set, mode=mode).data
            same = (base[0, 0, t] == other[0, 0, t]).all()
            assert same == expect_equal, f"{mode}: key locality expectation violated"


class TestCausalMask:
    def test_future_positions_never_influence_the_past(self):
        rng = np.random.default_rng(8)
        n, d_k = 7, 4
        q = rng.normal(size=(1, 1, n, d_k))
        k = rng.normal(size=(1, 1, n, d_k))
        v = rng.normal(size=(1, 1, n, d_k))
        hard = causal_mask(n)
        base = multi_view_attention(Tensor(q), Tensor(k), Tensor(v), None, hard_mask=hard).data
        for u in range(1, n):
            kb, vb = k.copy(), v.copy()
            kb[0, 0, u] += 10.0
            vb[0, 0, u] -= 3.0
            other = multi_view_attention(Tensor(q), Tensor(kb), Tensor(vb), None, hard_mask=hard).data
            assert (base[0, 0, :u] == other[0, 0, :u]).all(), f"position {u} leaked into the past"

    def test_causality_survives_post_softmax_banding(self):
        # the hard mask must stay pre-softmax even when band masks are post
        rng = np.random.default_rng(9)
        n, d_k = 8, 4
        q = rng.normal(size=(1, 2, n, d_k))
        k = rng.normal(size=(1, 2, n, d_k))
        v = rng.normal(size=(1, 2, n, d_k))
        mask_set = build_mask_set(WindowSchedule((3, 5)), n)
        hard = causal_mask(n)
        base = multi_view_attention(Tensor(q), Tensor(k), Tensor(v), mask_set, mode="post_softmax", hard_mask=hard).data
        kb = k.copy()
        kb[0, :, n - 1] += 4.0
        other = multi_view_attention(Tensor(q), Tensor(kb), Tensor(v), mask_set, mode="post_softmax", hard_mask=hard).data
        assert (base[0, :, : n - 1] == other[0, :, : n - 1]).all()

    def test_triangle_shape(self):
        np.testing.assert_array_equal(causal_mask(3), [[1, 0, 0], [1, 1, 0], [1, 1, 1]])
        assert causal_mask(2, 4).shape == (2, 4)


class TestBlockLevel:
    def test_head_permutation_with_matching_masks_is_invariant(self):
        rng = RngState(10)
        d_model, heads, n = 12, 3, 9
        params = AttentionParams.init(d_model, heads, rng)
        x = Tensor(np.random.default_rng(0).normal(size=(2, n, d_model)))
        schedule = WindowSchedule((1, 3, 5))
        mask_set = build_mask_set(schedule, n)
        base = multi_head_block(x, params, mask_set).data

        perm = [2, 0, 1]
        d_k = d_model // heads

        def permute_cols(w):
            cols = np.concatenate([np.arange(p * d_k, (p + 1) * d_k) for p in perm])
            return Tensor(w.data[:, cols])

        def permute_vec(b):
            cols = np.concatenate([np.arange(p * d_k, (p + 1) * d_k) for p in perm])
            return Tensor(b.data[cols])

        rows = np.concatenate([np.arange(p * d_k, (p + 1) * d_k) for p in perm])
        permuted = AttentionParams(
            w_q=permute_cols(params.w_q), b_q=permute_vec(params.b_q),
            w_k=permute_cols(params.w_k), b_k=permute_vec(params.b_k),
            w_v=permute_cols(params.w_v), b_v=permute_vec(params.b_v),
            w_o=Tensor(params.w_o.data[rows]), b_o=params.b_o,
            heads=heads,
        )
        permuted_masks = MaskSet(masks=mask_set.masks[perm].copy(), n_steps=n)
        got = multi_head_block(x, permuted, permuted_masks).data
        np.testing.assert_allclose(got, base, atol=1e-12)

    def test_cross_attention_reads_memory_not_queries(self):
        rng = RngState(11)
        params = AttentionParams.init(8, 2, rng)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 8)))
        memory = Tensor(np.zeros((1, 5, 8)))
        out = multi_head_block(x, params, None, memory=memory).data
        # zero memory -> zero values -> output is just the output bias
        np.testing.assert_allclose(out, np.broadcast_to(params.b_o.data, out.shape), atol=1e-12)

    def test_masked_block_gradient(self):
        rng = RngState(12)
        d_model, heads, n = 8, 2, 6
        params = AttentionParams.init(d_model, heads, rng)
        x = Tensor(np.random.default_rng(2).normal(size=(1, n, d_model)), requires_grad=True)
        mask_set = build_mask_set(WindowSchedule.exponential(heads), n)
        tensors = [x] + list(params.named("a").values())

        def f():
            return (multi_head_block(x, params, mask_set, mode="post_softmax") ** 2.0).sum()

        err = grad_check(f, tensors, rng=RngState(13))
        assert err < 1e-6

    def test_split_merge_roundtrip(self):
        x = Tensor(np.random.default_rng(3).normal(size=(2, 5, 12)))
        np.testing.assert_array_equal(merge_heads(split_heads(x, 3)).data, x.data)


class TestValidation:
    def test_mask_step_mismatch(self):
        rng = np.random.default_rng(0)
        q, k, v = random_qkv(rng, n=6)
        with pytest.raises(ShapeError):
            multi_view_attention(q, k, v, build_mask_set(WindowSchedule.exponential(2), 5))

    def test_mask_head_mismatch(self):
        rng = np.random.default_rng(0)
        q, k, v = random_qkv(rng, h=2, n=6)
        with pytest.raises(ShapeError):
            multi_view_attention(q, k, v, build_mask_set(WindowSchedule.exponential(3), 6))

    def test_unknown_mode(self):
        rng = np.random.default_rng(0)
        q, k, v = random_qkv(rng)
        with pytest.raises(ConfigError):
            multi_view_attention(q, k, v, None, mode="renormalized")

    def test_non_4d_inputs(self):
        bad = Tensor(np.zeros((2, 3, 4)))
        with pytest.raises(ShapeError):
            multi_view_attention(bad, bad, bad, None)

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            AttentionParams.init(10, 3, RngState(0))


class TestAttentionDropout:
    def test_dropout_cannot_reopen_masked_positions(self):
        rng = np.random.default_rng(14)
        n, d_k = 10, 4
        q = rng.normal(size=(1, 1, n, d_k))
        k = rng.normal(size=(1, 1, n, d_k))
        v = rng.normal(size=(1, 1, n, d_k))
        mask_set = build_mask_set(WindowSchedule((3,)), n)
        t, u = 1, 8
        vb = v.copy()
        vb[0, 0, u] += 50.0
        a = multi_view_attention(Tensor(q), Tensor(k), Tensor(v), mask_set,
                                 dropout_p=0.5, rng=RngState(99), training=True).data
        b = multi_view_attention(Tensor(q), Tensor(k), Tensor(vb), mask_set,
                                 dropout_p=0.5, rng=RngState(99), training=True).data
        assert (a[0, 0, t] == b[0, 0, t]).all()
