import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vegn import autodiff as ad
from vegn.autodiff import Parameter, Tensor
from vegn.diagnostics import TOY_EDGES, TOY_GENES, attention_inputs, relative_frobenius, toy_graph, toy_model
from vegn.errors import ContractError, DimensionError, NumericalDegeneracyError
from vegn.graph import VariantRecord, build_graph
from vegn.layers import (
    ModelConfig,
    VEGNModel,
    draw_omega,
    exact_softmax_attention,
    favor_attention,
    favor_feature_map,
    gat_layer,
    hetero_aggregate,
    init_gat_params,
    init_performer_params,
    model_forward,
    performer_attention,
)

def as_params(d):
    return {k: Parameter(np.asarray(v, dtype=np.float64), k) for k, v in d.items()}


class TestGat:
    PATH = {  # hand-set 2-dim weights, one per head
        "W_src": [[0.5, -0.3], [0.2, 0.8]],
        "W_dst": [[1.0, 0.1], [-0.4, 0.6]],
        "a_src": [[0.7, -1.2]],
        "a_dst": [[-0.3, 0.9]],
        "W_self": [[0.25, 0.0], [0.5, -0.75]],
    }

    def test_path_graph_matches_scalar_oracle(self):
        x = [[1.0, -2.0], [0.5, 0.5], [-1.5, 0.25]]
        edges = [(0, 1), (1, 0), (1, 2), (2, 1)]
        src, dst = np.array(edges).T
        alphas = []
        out = gat_layer(Tensor(x), Tensor(x), src, dst, as_params(self.PATH), heads=2, attention_out=alphas)
        ref, ref_alpha = oracles.gat_scalar(x, x, edges, self.PATH, heads=2)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)
        for (e, h), a in ref_alpha.items():
            assert abs(alphas[0][e, h] - a) < 1e-12

    def test_empty_neighborhood_is_self_path(self, rng):
        P = init_gat_params(rng, "g", 3, 4, 2)
        x = rng.uniform(-1, 1, (2, 4))
        out = gat_layer(Tensor(rng.uniform(-1, 1, (2, 3))), Tensor(x), np.array([0]), np.array([0]), P, 2, "g")
        expect = x[1] @ P["g.W_self"].data
        np.testing.assert_allclose(out.data[1], np.where(expect > 0, expect, 0.2 * expect), atol=1e-15)

    def test_symmetric_pair(self, rng):
        P = init_gat_params(rng, "g", 4, 4, 2)
        x = np.tile(rng.uniform(-1, 1, (1, 4)), (2, 1))
        out = gat_layer(Tensor(x), Tensor(x), np.array([0, 1]), np.array([1, 0]), P, 2, "g").data
        np.testing.assert_array_equal(out[0], out[1])

    def test_width_mismatch(self, rng):
        P = init_gat_params(rng, "g", 3, 4, 2)
        with pytest.raises(DimensionError):
            gat_layer(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), [0], [1], P, 2, "g")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_attention_sums_to_one(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 10))
        e = int(rng.integers(1, 30))
        src, dst = rng.integers(0, n, e), rng.integers(0, n, e)
        P = init_gat_params(rng, "g", 4, 4, 2)
        alphas = []
        gat_layer(Tensor(rng.normal(size=(n, 4)) * 3), Tensor(rng.normal(size=(n, 4))), src, dst, P, 2, "g",
                  attention_out=alphas)
        a = alphas[0]
        assert np.all(a >= 0)
        sums = np.zeros((n, 2))
        np.add.at(sums, dst, a)
        np.testing.assert_allclose(sums[np.unique(dst)], 1.0, atol=1e-9)

    def test_edge_bias_shifts_attention(self, rng):
        P = init_gat_params(rng, "g", 2, 2, 1)
        x = Tensor(rng.uniform(-1, 1, (3, 2)))
        alphas = []
        gat_layer(x, x, np.array([0, 1]), np.array([2, 2]), P, 1, "g", edge_bias=[0.0, math.log(1e6)],
                  attention_out=alphas)
        assert alphas[0][1, 0] > 0.99


class TestFavor:
    def test_zero_vectors_give_kernel_one(self, rng):
        omega = draw_omega(64, 4, rng)
        z = favor_feature_map(np.zeros((1, 4)), omega).data
        assert (z @ z.T).item() == pytest.approx(1.0, abs=1e-15)

    def test_identical_rows(self, rng):
        x = np.tile(rng.normal(size=(1, 4)), (5, 1))
        out = favor_feature_map(x, draw_omega(32, 4, rng), stabilizer="row").data
        assert np.all(out == out[0])
        assert np.all(out > 0)

    def test_unknown_stabilizer(self, rng):
        with pytest.raises(ContractError):
            favor_feature_map(np.zeros((1, 4)), draw_omega(8, 4, rng), stabilizer="col")

    def test_omega_blocks_are_orthogonal(self, rng):
        om = draw_omega(12, 4, rng)
        for b in range(3):
            block = om[4 * b:4 * b + 4]
            dirs = block / np.linalg.norm(block, axis=1, keepdims=True)
            np.testing.assert_allclose(dirs @ dirs.T, np.eye(4), atol=1e-12)

    def test_matches_exact_attention_small(self):
        errors = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            q, k, v = attention_inputs(16, 4, rng)
            approx = favor_attention(q, k, v, draw_omega(8192, 4, rng)).data
            errors.append(relative_frobenius(approx, exact_softmax_attention(q, k, v)))
        assert errors[0] < 0.05
        assert np.median(errors) < 0.05

    def test_identical_values_are_reproduced(self, rng):
        q, k = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
        u = rng.normal(size=(1, 3))
        out = favor_attention(q, k, np.tile(u, (10, 1)), draw_omega(16, 4, rng)).data
        np.testing.assert_allclose(out, np.tile(u, (10, 1)), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_affine_in_values(self, seed):
        rng = np.random.default_rng(seed)
        q, k, v = rng.normal(size=(7, 4)), rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
        c = rng.normal(size=(1, 3))
        om = draw_omega(32, 4, rng)
        base = favor_attention(q, k, v, om).data
        shifted = favor_attention(q, k, v + c, om).data
        np.testing.assert_allclose(shifted, base + c, atol=1e-12)

    def test_degenerate_normalizer(self, rng):
        q = np.full((2, 4), -1e3)
        k = np.full((2, 4), 1e3)
        with pytest.raises(NumericalDegeneracyError):
            favor_attention(q, k, np.ones((2, 2)), draw_omega(8, 4, rng))

    def test_performer_identical_values(self, rng):
        P = init_performer_params(rng, "p", 4)
        P["p.W_v"].data[:] = 0.0
        x = rng.normal(size=(6, 4))
        out = performer_attention(x, P, draw_omega(16, 2, rng), heads=2, prefix="p").data
        np.testing.assert_allclose(out, x, atol=1e-15)

    def test_performer_dropout_only_in_training(self, rng):
        P = init_performer_params(rng, "p", 4)
        x = rng.normal(size=(6, 4))
        om = draw_omega(16, 2, rng)
        a = performer_attention(x, P, om, 2, "p", dropout=0.5, training=False).data
        b = performer_attention(x, P, om, 2, "p", dropout=0.0).data
        c = performer_attention(x, P, om, 2, "p", dropout=0.5, training=True, rng=np.random.default_rng(1)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestAggregate:
    def test_single(self):
        t = Tensor([[1.0, 2.0]])
        assert hetero_aggregate([t]) is t

    def test_pair(self):
        assert hetero_aggregate([Tensor([1.0, 2.0]), Tensor([3.0, 4.0])]).data.tolist() == [4.0, 6.0]

    def test_left_fold(self, rng):
        xs = [rng.normal(size=4) for _ in range(3)]
        out = hetero_aggregate([Tensor(x) for x in xs]).data
        np.testing.assert_allclose(out, (xs[0] + xs[1]) + xs[2], rtol=0, atol=1e-15)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            hetero_aggregate([Tensor([1.0]), Tensor([1.0, 2.0])])


class TestModel:
    def test_config_defaults(self):
        assert ModelConfig(mode="given").variant_dim == 64
        assert ModelConfig(mode="learnt").variant_dim == 32
        with pytest.raises(ContractError):
            ModelConfig(mode="other")

    def test_zero_head_gives_half(self, given_model, toy):
        given_model.params["head.weight"].data[:] = 0.0
        given_model.params["head.bias"].data[:] = 0.0
        np.testing.assert_array_equal(given_model.predict(toy), 0.5)

    def test_given_forward_matches_scalar_oracle(self, given_model, toy):
        ref = oracles.model_scalar_given(toy, given_model)
        np.testing.assert_allclose(given_model.predict(toy), ref, rtol=0, atol=1e-10)

    def test_default_sizes_match_scalar_oracle(self):
        g = toy_graph(seed=2)
        model = VEGNModel(ModelConfig(mode="given", seed=5), len(TOY_GENES))
        np.testing.assert_allclose(model.predict(g), oracles.model_scalar_given(g, model), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("mode", ["given", "learnt"])
    def test_variant_permutation_equivariance(self, mode, toy):
        model = toy_model(mode, seed=1)
        base = model.predict(toy)
        perm = np.random.default_rng(0).permutation(toy.variant_count)
        records = toy.records()
        shuffled = build_graph([records[i] for i in perm], TOY_EDGES, TOY_GENES)
        np.testing.assert_allclose(model.predict(shuffled), base[perm], rtol=0, atol=1e-12)

    def test_gene_relabeling_invariance(self, given_model, toy):
        base = given_model.predict(toy)
        perm = np.array([3, 0, 4, 1, 2])  # new position i holds old gene perm[i]
        genes = [TOY_GENES[i] for i in perm]
        relabeled = build_graph(toy.records(), TOY_EDGES, genes)
        moved = VEGNModel(given_model.config, len(genes))
        for k, p in given_model.params.items():
            moved.params[k].data[:] = p.data
        moved.params["gene_embeddings"].data[:] = given_model.params["gene_embeddings"].data[perm]
        np.testing.assert_allclose(moved.predict(relabeled), base, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("mode", ["given", "learnt"])
    def test_deterministic_without_dropout(self, mode, toy):
        model = toy_model(mode, seed=4)
        a = model_forward(toy, model).data
        b = model_forward(toy, model, training=True, rng=np.random.default_rng(9)).data if mode == "given" else a
        c = model_forward(toy, model).data
        assert a.tobytes() == b.tobytes() == c.tobytes()

    def test_learnt_training_needs_rng(self, learnt_model, toy):
        with pytest.raises(ContractError):
            learnt_model.forward(toy, training=True)

    def test_learnt_ignores_given_edges_by_default(self, toy):
        m = toy_model("learnt", seed=0)
        assert not any(".interact." in k for k in m.params)
        flagged = toy_model("learnt", seed=0, learnt_uses_given_edges=True)
        assert any(".interact." in k for k in flagged.params)
        assert flagged.predict(toy).shape == (toy.variant_count,)

    def test_omega_frozen_and_reseedable(self, learnt_model, toy):
        before = {k: v.copy() for k, v in learnt_model.buffers.items()}
        learnt_model.predict(toy)
        for k, v in learnt_model.buffers.items():
            np.testing.assert_array_equal(v, before[k])
            assert k not in learnt_model.params
        learnt_model.reseed_omega(np.random.default_rng(123))
        assert any(not np.array_equal(v, before[k]) for k, v in learnt_model.buffers.items())

    def test_gene_count_mismatch(self, given_model):
        g = build_graph([VariantRecord("V", "c", 1, "A", "C", "G1", (0.0,))], [], ["G1"])
        with pytest.raises(DimensionError):
            given_model.predict(g)

    def test_edge_weights_change_given_output(self, toy):
        plain_model = toy_model("given", seed=0)
        weighted = toy_model("given", seed=0, use_edge_weights=True)
        assert not np.array_equal(plain_model.predict(toy), weighted.predict(toy))

    def test_predictions_in_unit_interval(self, learnt_model, toy):
        y = learnt_model.predict(toy)
        assert np.all((y >= 0) & (y <= 1))

    def test_gradients_reach_every_parameter(self, given_model, toy):
        with ad.Tape() as tape:
            loss = ad.sum(given_model.forward(toy))
        ad.backward(loss, tape)
        # every variant has exactly one HAS parent, so HAS attention is constant 1 and its logit weights are inert
        inert = {f"{layer}.{n}" for layer in ("round0.has", "final.has") for n in ("W_dst", "a_src", "a_dst")}
        for name, p in given_model.params.items():
            assert np.any(p.grad != 0) != (name in inert), name
