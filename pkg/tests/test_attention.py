import numpy as np
import pytest

from mnagt import (
    AdaptiveParams,
    Aggregator,
    ConfigError,
    KernelParams,
    KernelSpec,
    MNAConfig,
    MNAParams,
    NormalizationKind,
    ShapeError,
    Tensor,
    adaptive_aggregate,
    aggregate_variant,
    kernel_mha,
    make_kernel_outputs,
    mna_forward,
    normalized_adjacency,
    scaled_dot_attention,
    special_case_kernel,
)
from mnagt.attention import attention_weights, hop_features
from mnagt.oracle import dense_power_propagate, naive_attention
from mnagt.tensor import concat_cols, matmul
from mnagt.verify import array_from_dense, dense_from_array
from conftest import random_graph

SYM = NormalizationKind.SYMMETRIC


def make_kernel_params(rng, d, d_h, m, grad=False):
    return KernelParams(
        wq=[Tensor(rng.normal(size=(d, d_h)), grad_enabled=grad) for _ in range(m)],
        wk=[Tensor(rng.normal(size=(d, d_h)), grad_enabled=grad) for _ in range(m)],
        wv=[Tensor(rng.normal(size=(d, d_h)), grad_enabled=grad) for _ in range(m)],
        wo=Tensor(rng.normal(size=(m * d_h, d)), grad_enabled=grad),
    )


class TestScaledDotAttention:
    def test_single_node_returns_value_row(self, rng):
        q = Tensor(rng.normal(size=(1, 3)))
        k = Tensor(rng.normal(size=(1, 3)))
        v = Tensor(rng.normal(size=(1, 5)))
        np.testing.assert_array_equal(scaled_dot_attention(q, k, v).data, v.data)

    def test_zero_logits_give_block_means(self, rng):
        n = 6
        q = Tensor(np.zeros((n, 3)))
        k = Tensor(rng.normal(size=(n, 3)))
        v = Tensor(rng.normal(size=(n, 4)))
        blocks = [(0, 2), (2, 6)]
        out = scaled_dot_attention(q, k, v, blocks).data
        np.testing.assert_allclose(
            out[:2], np.tile(v.data[:2].mean(axis=0), (2, 1)), atol=1e-12
        )
        np.testing.assert_allclose(
            out[2:], np.tile(v.data[2:].mean(axis=0), (4, 1)), atol=1e-12
        )

    def test_matches_bruteforce_double_loop(self, rng):
        q = Tensor(rng.normal(size=(5, 4)))
        k = Tensor(rng.normal(size=(5, 4)))
        v = Tensor(rng.normal(size=(5, 3)))
        fast = scaled_dot_attention(q, k, v).data
        slow = array_from_dense(
            naive_attention(
                dense_from_array(q.data),
                dense_from_array(k.data),
                dense_from_array(v.data),
            )
        )
        assert np.abs(fast - slow).max() < 1e-8

    def test_blocked_matches_per_block_bruteforce(self, rng):
        q = Tensor(rng.normal(size=(7, 3)))
        k = Tensor(rng.normal(size=(7, 3)))
        v = Tensor(rng.normal(size=(7, 2)))
        blocks = [(0, 3), (3, 5), (5, 7)]
        fast = scaled_dot_attention(q, k, v, blocks).data
        for s, e in blocks:
            slow = array_from_dense(
                naive_attention(
                    dense_from_array(q.data[s:e]),
                    dense_from_array(k.data[s:e]),
                    dense_from_array(v.data[s:e]),
                )
            )
            assert np.abs(fast[s:e] - slow).max() < 1e-8

    def test_bad_blocks_rejected(self, rng):
        q = Tensor(rng.normal(size=(4, 2)))
        with pytest.raises(ShapeError):
            scaled_dot_attention(q, q, q, blocks=[(0, 2), (3, 4)])

    def test_shape_mismatch(self, rng):
        q = Tensor(rng.normal(size=(4, 2)))
        k = Tensor(rng.normal(size=(4, 3)))
        with pytest.raises(ShapeError):
            scaled_dot_attention(q, k, q)

    def test_weights_row_stochastic_and_block_local(self, rng):
        q = Tensor(rng.normal(size=(6, 3)))
        k = Tensor(rng.normal(size=(6, 3)))
        blocks = [(0, 4), (4, 6)]
        mats = attention_weights(q, k, blocks)
        assert [m.shape for m in mats] == [(4, 4), (2, 2)]
        for m in mats:
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-6)
            assert (m >= 0).all()


class TestKernelMHA:
    def test_hop0_bitwise_equals_vanilla_mha(self, rng):
        g = random_graph(rng, 6, 5)
        a_hat = normalized_adjacency(g, SYM)
        h = Tensor(rng.normal(size=(6, 5)))
        params = make_kernel_params(rng, 5, 3, 2)
        fast = kernel_mha(h, a_hat, KernelSpec(0), params).data
        heads = [
            scaled_dot_attention(
                matmul(h, params.wq[j]), matmul(h, params.wk[j]), matmul(h, params.wv[j])
            )
            for j in range(2)
        ]
        vanilla = matmul(concat_cols(heads), params.wo).data
        np.testing.assert_array_equal(fast, vanilla)

    def test_single_head_identity_projection(self, rng):
        d = 4
        g = random_graph(rng, 5, d)
        a_hat = normalized_adjacency(g, SYM)
        h = Tensor(rng.normal(size=(5, d)))
        params = KernelParams(
            wq=[Tensor(rng.normal(size=(d, d)))],
            wk=[Tensor(rng.normal(size=(d, d)))],
            wv=[Tensor(rng.normal(size=(d, d)))],
            wo=Tensor(np.eye(d)),
        )
        out = kernel_mha(h, a_hat, KernelSpec(1), params).data
        hq = Tensor(a_hat.matmul_dense(h.data))
        direct = scaled_dot_attention(
            matmul(hq, params.wq[0]), matmul(hq, params.wk[0]), matmul(h, params.wv[0])
        ).data
        assert np.abs(out - direct).max() < 1e-12

    def test_matches_dense_oracle(self, rng):
        n, d, d_h, m, hop = 6, 4, 3, 3, 2
        g = random_graph(rng, n, d)
        a_hat = normalized_adjacency(g, SYM)
        h = Tensor(rng.normal(size=(n, d)))
        params = make_kernel_params(rng, d, d_h, m)
        fast = kernel_mha(h, a_hat, KernelSpec(hop), params).data

        a_dense = dense_from_array(a_hat.to_dense())
        hk = dense_power_propagate(a_dense, dense_from_array(h.data), hop)
        heads = []
        for j in range(m):
            qj = hk.matmul(dense_from_array(params.wq[j].data))
            kj = hk.matmul(dense_from_array(params.wk[j].data))
            vj = dense_from_array(h.data).matmul(dense_from_array(params.wv[j].data))
            heads.append(array_from_dense(naive_attention(qj, kj, vj)))
        oracle = array_from_dense(
            dense_from_array(np.concatenate(heads, axis=1)).matmul(
                dense_from_array(params.wo.data)
            )
        )
        assert np.abs(fast - oracle).max() < 1e-7

    def test_value_hop_smooths_values(self, rng):
        g = random_graph(rng, 5, 3)
        a_hat = normalized_adjacency(g, SYM)
        h = Tensor(rng.normal(size=(5, 3)))
        params = make_kernel_params(rng, 3, 2, 1)
        plain = kernel_mha(h, a_hat, KernelSpec(1, value_hop=0), params).data
        smoothed = kernel_mha(h, a_hat, KernelSpec(1, value_hop=1), params).data
        assert np.abs(plain - smoothed).max() > 1e-8


class TestMakeKernelOutputs:
    def test_singleton_for_c0(self, rng):
        g = random_graph(rng, 4, 3)
        config = MNAConfig(max_hop=0, heads=1, dim=3, head_dim=2)
        h = Tensor(rng.normal(size=(4, 3)))
        outs = make_kernel_outputs(
            h, normalized_adjacency(g, SYM), config,
            [make_kernel_params(rng, 3, 2, 1)],
        )
        assert len(outs) == 1

    def test_four_outputs_for_c3(self, rng):
        g = random_graph(rng, 5, 3)
        config = MNAConfig(max_hop=3, heads=2, dim=3, head_dim=2)
        h = Tensor(rng.normal(size=(5, 3)))
        outs = make_kernel_outputs(
            h, normalized_adjacency(g, SYM), config,
            [make_kernel_params(rng, 3, 2, 2) for _ in range(4)],
        )
        assert len(outs) == 4
        assert all(z.shape == (5, 3) for z in outs)

    def test_parameter_count_mismatch(self, rng):
        g = random_graph(rng, 4, 3)
        config = MNAConfig(max_hop=2, heads=1, dim=3, head_dim=2)
        with pytest.raises(ConfigError):
            make_kernel_outputs(
                Tensor(rng.normal(size=(4, 3))),
                normalized_adjacency(g, SYM),
                config,
                [make_kernel_params(rng, 3, 2, 1)],
            )

    def test_incremental_propagation_matches_scratch(self, rng):
        from mnagt import propagate

        g = random_graph(rng, 7, 3)
        a_hat = normalized_adjacency(g, SYM)
        h = Tensor(rng.normal(size=(7, 3)))
        hops = hop_features(h, a_hat, range(4))
        for k, smoothed in hops.items():
            scratch = propagate(h, a_hat, k).data
            assert np.abs(smoothed.data - scratch).max() < 1e-9


class TestAdaptiveAggregate:
    def test_singleton_alpha_is_one_and_output_exact(self, rng):
        z = Tensor(rng.normal(size=(4, 3)))
        params = AdaptiveParams(
            w=Tensor(rng.normal(size=(3, 3))), score=Tensor(rng.normal(size=(1, 3)))
        )
        out, alpha = adaptive_aggregate([z], params)
        np.testing.assert_array_equal(alpha.data, np.ones((4, 1)))
        np.testing.assert_array_equal(out.data, z.data)

    def test_identical_inputs_share_weight_equally(self, rng):
        z = Tensor(rng.normal(size=(5, 3)))
        z_copy = Tensor(z.data.copy())
        params = AdaptiveParams(
            w=Tensor(rng.normal(size=(3, 3))), score=Tensor(rng.normal(size=(1, 3)))
        )
        out, alpha = adaptive_aggregate([z, z_copy], params)
        np.testing.assert_allclose(alpha.data, 0.5, atol=1e-12)
        np.testing.assert_allclose(out.data, z.data, atol=1e-12)

    def test_alpha_simplex_and_convex_hull(self, rng):
        for _ in range(20):
            n, d, c = int(rng.integers(1, 7)), 4, int(rng.integers(0, 4))
            z_list = [Tensor(rng.normal(size=(n, d))) for _ in range(c + 1)]
            params = AdaptiveParams(
                w=Tensor(rng.normal(size=(d, d))),
                score=Tensor(rng.normal(size=(1, d))),
            )
            out, alpha = adaptive_aggregate(z_list, params)
            assert np.abs(alpha.data.sum(axis=1) - 1.0).max() < 1e-6
            assert (alpha.data >= 0).all()
            stacked = np.stack([z.data for z in z_list])
            assert (out.data <= stacked.max(axis=0) + 1e-9).all()
            assert (out.data >= stacked.min(axis=0) - 1e-9).all()

    def test_score_activation_variants(self, rng):
        z_list = [Tensor(rng.normal(size=(3, 4))) for _ in range(2)]
        params = AdaptiveParams(
            w=Tensor(rng.normal(size=(4, 4))), score=Tensor(rng.normal(size=(1, 4)))
        )
        outs = {
            act: adaptive_aggregate(z_list, params, act)[1].data
            for act in ("tanh", "relu", "identity")
        }
        assert not np.allclose(outs["tanh"], outs["identity"])

    def test_shape_mismatch(self, rng):
        params = AdaptiveParams(
            w=Tensor(rng.normal(size=(3, 3))), score=Tensor(rng.normal(size=(1, 3)))
        )
        with pytest.raises(ShapeError):
            adaptive_aggregate(
                [Tensor(np.zeros((4, 3))), Tensor(np.zeros((5, 3)))], params
            )


class TestAggregateVariant:
    def test_average_of_identical_inputs(self, rng):
        z = Tensor(rng.normal(size=(3, 4)))
        out = aggregate_variant([z, Tensor(z.data.copy())], Aggregator.AVERAGE)
        np.testing.assert_allclose(out.data, z.data, atol=1e-12)

    def test_sum_is_count_times_average(self, rng):
        z = Tensor(rng.normal(size=(3, 4)))
        z_list = [z, Tensor(z.data.copy()), Tensor(z.data.copy())]
        total = aggregate_variant(z_list, Aggregator.SUM).data
        avg = aggregate_variant(z_list, Aggregator.AVERAGE).data
        np.testing.assert_allclose(total, 3.0 * avg, atol=1e-12)

    def test_concatenate_width_and_projection(self, rng):
        d, c = 4, 2
        z_list = [Tensor(rng.normal(size=(3, d))) for _ in range(c + 1)]
        stacked = concat_cols(z_list)
        assert stacked.shape == (3, (c + 1) * d)
        proj = Tensor(rng.normal(size=((c + 1) * d, d)))
        out = aggregate_variant(z_list, Aggregator.CONCATENATE, proj)
        assert out.shape == (3, d)

    def test_concatenate_requires_projection(self, rng):
        with pytest.raises(ConfigError):
            aggregate_variant(
                [Tensor(rng.normal(size=(3, 4)))], Aggregator.CONCATENATE
            )

    def test_unknown_variant(self, rng):
        with pytest.raises(ConfigError):
            aggregate_variant([Tensor(rng.normal(size=(3, 4)))], "median")


class TestSpecialCases:
    def test_sat_hop0_is_vanilla_everywhere(self):
        plan = special_case_kernel("sat", 0, 3)
        assert plan == [(KernelSpec(0),)] * 3

    def test_graphtrans_first_layer_fully_smoothed(self):
        plan = special_case_kernel("graphtrans", 2, 4)
        assert plan[0] == (KernelSpec(2, value_hop=2),)
        assert plan[1:] == [(KernelSpec(0),)] * 3

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            special_case_kernel("mystery", 1, 2)

    def test_invalid_hop(self):
        with pytest.raises(ConfigError):
            special_case_kernel("sat", -1, 2)


class TestPermutationEquivariance:
    def test_mna_forward_equivariant(self, rng):
        n, d = 7, 4
        g = random_graph(rng, n, d)
        config = MNAConfig(max_hop=2, heads=2, dim=d, head_dim=2, dropout=0.0)
        params = MNAParams(
            kernels=[make_kernel_params(rng, d, 2, 2) for _ in range(3)],
            adaptive=AdaptiveParams(
                w=Tensor(rng.normal(size=(d, d))),
                score=Tensor(rng.normal(size=(1, d))),
            ),
        )
        h = Tensor(g.features)
        out = mna_forward(h, normalized_adjacency(g, SYM), config, params).data

        perm = rng.permutation(n)
        g_p = g.permuted(perm)
        out_p = mna_forward(
            Tensor(g_p.features), normalized_adjacency(g_p, SYM), config, params
        ).data
        assert np.abs(out_p[perm] - out).max() < 1e-6


class TestGraphTransComposition:
    def test_fully_smoothed_kernel_equals_composed_mha(self, rng):
        """A kernel with hop=value_hop=2 must equal plain MHA run on the
        2-step smoothed features, bit for bit."""
        from mnagt import propagate

        g = random_graph(rng, 6, 4)
        a_hat = normalized_adjacency(g, SYM)
        h = Tensor(rng.normal(size=(6, 4)))
        params = make_kernel_params(rng, 4, 3, 2)
        fast = kernel_mha(h, a_hat, KernelSpec(2, value_hop=2), params).data
        smoothed = propagate(h, a_hat, 2)
        heads = [
            scaled_dot_attention(
                matmul(smoothed, params.wq[j]),
                matmul(smoothed, params.wk[j]),
                matmul(smoothed, params.wv[j]),
            )
            for j in range(2)
        ]
        composed = matmul(concat_cols(heads), params.wo).data
        np.testing.assert_array_equal(fast, composed)


class TestAdaptiveSimplexProperty:
    def test_alpha_on_simplex_for_extreme_inputs(self):
        from hypothesis import given, settings
        from hypothesis import strategies as st
        from hypothesis.extra.numpy import arrays

        @settings(max_examples=30, deadline=None)
        @given(
            arrays(
                np.float64,
                st.tuples(st.integers(1, 4), st.just(3)),
                elements=st.floats(-1e6, 1e6),
            ),
            st.integers(0, 3),
        )
        def run(z, extra_kernels):
            rng = np.random.default_rng(0)
            z_list = [Tensor(z)] + [
                Tensor(rng.normal(size=z.shape) * 1e3) for _ in range(extra_kernels)
            ]
            params = AdaptiveParams(
                w=Tensor(rng.normal(size=(3, 3))),
                score=Tensor(rng.normal(size=(1, 3))),
            )
            _, alpha = adaptive_aggregate(z_list, params)
            assert np.isfinite(alpha.data).all()
            assert np.abs(alpha.data.sum(axis=1) - 1.0).max() < 1e-6
            assert (alpha.data >= 0).all()

        run()
