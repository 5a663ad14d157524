"""Neural layers: spec'd examples, brute-force oracles, gradient contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_gradients_match

from spoofprompt.errors import ConfigError, DegenerateInputError, DimensionError, ParameterError
from spoofprompt.layers import (
    AttentionParams,
    cosine_similarity,
    gelu,
    init_attention_params,
    init_block_params,
    l2_normalize,
    layer_norm,
    linear,
    multi_head_attention,
    softmax,
    transformer_block,
)
from spoofprompt.tensor import Rng, Tensor, tsum


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestLinear:
    def test_identity_case(self):
        out = linear(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.array_equal(out.data, [[1.0, 0.0]])

    def test_hand_arithmetic(self):
        # 1*3 + 2*4 + 1 = 12
        out = linear(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([1.0]))
        assert np.array_equal(out.data, [[12.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linear(Tensor(rnd(2, 3)), Tensor(rnd(4, 5)), Tensor(np.zeros(4)))
        with pytest.raises(DimensionError):
            linear(Tensor(rnd(2, 3)), Tensor(rnd(4, 3)), Tensor(np.zeros(5)))

    def test_gradient_matches_finite_differences(self):
        x = Tensor(rnd(3, 4, seed=1), requires_grad=True)
        w = Tensor(rnd(2, 4, seed=2), requires_grad=True)
        b = Tensor(rnd(2, seed=3), requires_grad=True)
        assert_gradients_match(lambda: tsum(linear(x, w, b)),
                               {"x": x, "w": w, "b": b},
                               np.random.default_rng(0), rtol=1e-6)


class TestLayerNorm:
    def test_constant_input_maps_to_zero(self):
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, 0.0)

    def test_already_normalized_input(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(out.data, [1.0, -1.0], atol=1e-9)

    def test_normalizes_last_axis(self):
        x = Tensor(rnd(4, 8, seed=5))
        out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12).data
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=-1), 1.0, atol=1e-6)

    def test_eps_must_be_positive(self):
        with pytest.raises(ParameterError):
            layer_norm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]), eps=0.0)

    def test_gradient_matches_finite_differences(self):
        x = Tensor(rnd(3, 6, seed=6), requires_grad=True)
        g = Tensor(rnd(6, seed=7), requires_grad=True)
        b = Tensor(rnd(6, seed=8), requires_grad=True)
        proj = rnd(3, 6, seed=9)
        assert_gradients_match(lambda: tsum(layer_norm(x, g, b) * proj),
                               {"x": x, "gamma": g, "beta": b},
                               np.random.default_rng(1), rtol=1e-6)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]), temperature=1.0)
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_direct_evaluation(self):
        out = softmax(Tensor([1.0, 0.0]), temperature=1.0)
        e = np.e
        assert np.allclose(out.data, [e / (e + 1), 1 / (e + 1)], atol=1e-12)

    def test_low_temperature_sharpens(self):
        x = Tensor([1.0, 0.0])
        hot = softmax(x, temperature=0.5).data.max()
        cold = softmax(x, temperature=2.0).data.max()
        assert hot > cold

    def test_temperature_must_be_positive(self):
        with pytest.raises(ParameterError):
            softmax(Tensor([1.0]), temperature=0.0)
        with pytest.raises(ParameterError):
            softmax(Tensor([1.0]), temperature=-1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12),
           st.floats(min_value=0.01, max_value=10))
    def test_sums_to_one_property(self, values, temperature):
        out = softmax(Tensor(values), temperature=temperature)
        assert abs(out.data.sum() - 1.0) <= 1e-12
        assert np.all(out.data >= 0)
        if (max(values) - min(values)) / temperature < 700:  # below exp underflow
            assert np.all(out.data > 0)

    def test_masked_rows_zero_and_renormalized(self):
        mask = np.array([True, False, True])
        out = softmax(Tensor([1.0, 100.0, 1.0]), mask=mask)
        assert out.data[1] == 0.0
        assert abs(out.data.sum() - 1.0) <= 1e-12

    def test_gradient_matches_finite_differences(self):
        x = Tensor(rnd(3, 5, seed=10), requires_grad=True)
        proj = rnd(3, 5, seed=11)
        assert_gradients_match(lambda: tsum(softmax(x, temperature=0.7) * proj),
                               {"x": x}, np.random.default_rng(2), rtol=1e-6)


class TestCosine:
    def test_identical_vectors(self):
        v = Tensor([1.0, 2.0, 3.0])
        assert float(cosine_similarity(v, Tensor([1.0, 2.0, 3.0])).data) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert float(cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data) == 0.0

    def test_hand_arithmetic(self):
        out = float(cosine_similarity(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).data)
        assert out == pytest.approx(1 / np.sqrt(2), abs=1e-12)

    def test_zero_vector_degenerate(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))
        with pytest.raises(DegenerateInputError):
            l2_normalize(Tensor([0.0, 0.0]))

    @settings(max_examples=60, deadline=None)
    @given(st.floats(min_value=0.001, max_value=1000), st.floats(min_value=0.001, max_value=1000))
    def test_positive_rescaling_invariance(self, alpha, beta):
        a = np.array([0.3, -1.2, 2.0])
        b = np.array([1.5, 0.4, -0.2])
        base = float(cosine_similarity(Tensor(a), Tensor(b)).data)
        scaled = float(cosine_similarity(Tensor(alpha * a), Tensor(beta * b)).data)
        assert abs(base - scaled) <= 1e-12

    def test_range_bound(self):
        g = np.random.default_rng(3)
        for _ in range(25):
            a, b = g.standard_normal(6), g.standard_normal(6)
            v = float(cosine_similarity(Tensor(a), Tensor(b)).data)
            assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12

    def test_gradient_matches_finite_differences(self):
        a = Tensor(rnd(4, 6, seed=12), requires_grad=True)
        b = Tensor(rnd(4, 6, seed=13), requires_grad=True)
        assert_gradients_match(lambda: tsum(cosine_similarity(a, b)),
                               {"a": a, "b": b}, np.random.default_rng(4), rtol=1e-6)


def manual_attention(x, p: AttentionParams, heads, causal=False):
    """Brute-force numpy attention used as the oracle."""
    n, w = x.shape
    hd = w // heads
    qkv = x @ p.qkv_weight.data.T + p.qkv_bias.data
    q, k, v = qkv[:, :w], qkv[:, w : 2 * w], qkv[:, 2 * w :]
    out = np.zeros((n, w))
    for h in range(heads):
        qs, ks, vs = (m[:, h * hd : (h + 1) * hd] for m in (q, k, v))
        scores = qs @ ks.T / np.sqrt(hd)
        if causal:
            scores = np.where(np.tril(np.ones((n, n), dtype=bool)), scores, -np.inf)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        weights = e / e.sum(axis=-1, keepdims=True)
        out[:, h * hd : (h + 1) * hd] = weights @ vs
    return out @ p.out_weight.data.T + p.out_bias.data


class TestAttention:
    def test_single_token_weight_is_one(self):
        p = init_attention_params(8, Rng(1))
        x = rnd(1, 8, seed=14)
        out = multi_head_attention(Tensor(x), p, heads=2)
        # with one position, attention mixes nothing: output = out_proj(value(x))
        w = 8
        qkv = x @ p.qkv_weight.data.T + p.qkv_bias.data
        value = qkv[:, 2 * w :]
        expected = value @ p.out_weight.data.T + p.out_bias.data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        p = init_attention_params(12, Rng(2), std=0.3)
        x = rnd(5, 12, seed=15)
        for causal in (False, True):
            out = multi_head_attention(Tensor(x), p, heads=3, causal=causal)
            assert np.allclose(out.data, manual_attention(x, p, 3, causal), atol=1e-10)

    def test_duplicated_token_same_output(self):
        # 3-token example: tokens 1 and 2 identical -> identical outputs there
        p = init_attention_params(8, Rng(3), std=0.5)
        row = rnd(8, seed=16)
        x = np.stack([rnd(8, seed=17), row, row])
        out = multi_head_attention(Tensor(x), p, heads=2).data
        assert np.allclose(out[1], out[2], atol=1e-12)
        assert np.allclose(out, manual_attention(x, p, 2), atol=1e-10)

    def test_rows_sum_to_one_via_uniform_value(self):
        # with V = identity passthrough of ones, output equals row weight sum = 1
        w = 4
        p = AttentionParams(
            qkv_weight=Tensor(np.concatenate([np.eye(w), np.eye(w), np.zeros((w, w))], axis=0)),
            qkv_bias=Tensor(np.concatenate([np.zeros(2 * w), np.ones(w)])),  # V = all ones
            out_weight=Tensor(np.eye(w)),
            out_bias=Tensor(np.zeros(w)),
        )
        x = rnd(6, 4, seed=18)
        out = multi_head_attention(Tensor(x), p, heads=2).data
        assert np.allclose(out, 1.0, atol=1e-12)

    def test_width_not_divisible_by_heads(self):
        p = init_attention_params(9, Rng(4))
        with pytest.raises(ConfigError):
            multi_head_attention(Tensor(rnd(3, 9)), p, heads=2)

    def test_batched_matches_loop(self):
        p = init_attention_params(8, Rng(5), std=0.3)
        xs = rnd(3, 4, 8, seed=19)
        batched = multi_head_attention(Tensor(xs), p, heads=2).data
        for i in range(3):
            single = multi_head_attention(Tensor(xs[i]), p, heads=2).data
            assert np.allclose(batched[i], single, atol=1e-12)


class TestTransformerBlock:
    def test_zero_weights_residual_passthrough(self):
        bp = init_block_params(8, Rng(6))
        for t in (bp.attention.qkv_weight, bp.attention.qkv_bias, bp.attention.out_weight,
                  bp.attention.out_bias, bp.mlp_in_weight, bp.mlp_in_bias,
                  bp.mlp_out_weight, bp.mlp_out_bias):
            t.data[...] = 0.0
        x = rnd(5, 8, seed=20)
        out = transformer_block(Tensor(x), bp, heads=2)
        assert np.array_equal(out.data, x)

    def test_shape_preserved(self):
        bp = init_block_params(32, Rng(7))
        out = transformer_block(Tensor(rnd(7, 32, seed=21)), bp, heads=4)
        assert out.shape == (7, 32)

    @pytest.mark.parametrize("n", [1, 2, 9])
    def test_shape_preserved_any_length(self, n):
        bp = init_block_params(8, Rng(8))
        assert transformer_block(Tensor(rnd(n, 8, seed=n)), bp, heads=2).shape == (n, 8)

    def test_two_stacked_blocks_gradient(self):
        b1 = init_block_params(8, Rng(9), std=0.2)
        b2 = init_block_params(8, Rng(10), std=0.2)
        x = Tensor(rnd(4, 8, seed=22), requires_grad=True)
        proj = rnd(4, 8, seed=23)
        params = {"x": x, "qkv1": b1.attention.qkv_weight, "mlp_in2": b2.mlp_in_weight,
                  "gamma1": b1.norm1_gamma, "out2": b2.attention.out_weight}
        for t in params.values():
            t.requires_grad = True

        def build():
            h = transformer_block(x, b1, heads=2)
            h = transformer_block(h, b2, heads=2, causal=True)
            return tsum(h * proj)

        assert_gradients_match(build, params, np.random.default_rng(5), rtol=1e-4)

    def test_gelu_gradient(self):
        x = Tensor(rnd(10, seed=24), requires_grad=True)
        assert_gradients_match(lambda: tsum(gelu(x)), {"x": x},
                               np.random.default_rng(6), rtol=1e-6)
