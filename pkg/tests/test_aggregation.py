import numpy as np
import pytest

from patternbank import aggregation as AG
from patternbank.bank import PatternBank
from patternbank import nn
from patternbank.nn import autodiff as ad


def make_bank(scales=(1, 3), K=4, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return PatternBank(scales=tuple(scales),
                       centroids={c: rng.normal(size=(K, c * d)) for c in scales},
                       K=K, d=d)


def make_query_state(scales=(1, 3), K=4, d=8, d_q=6, query_dim=10, seed=0,
                     softmax_scores=True):
    bank = make_bank(scales, K, d, seed)
    store = nn.ParameterStore()
    rng = np.random.default_rng(seed + 1)
    qs = AG.init_query(store, bank, query_dim, d_q, heads=2, ff=2 * d, rng=rng,
                       softmax_scores=softmax_scores)
    AG.init_adjacency(store, d, rng)
    return qs


class TestPatternScores:
    def test_zero_keys_raw_and_softmax(self):
        qs = make_query_state(softmax_scores=False)
        qs.store["transfer/keys/scale1"].data[:] = 0.0
        q = np.random.default_rng(0).normal(size=(3, 5, 10))
        raw = AG.pattern_scores(qs, ad.constant(q), 1)
        assert np.all(raw.data == 0.0)
        qs.softmax_scores = True
        soft = AG.pattern_scores(qs, ad.constant(q), 1)
        assert np.allclose(soft.data, 0.25)

    def test_single_pattern_weight_is_one(self):
        qs = make_query_state(K=1)
        q = np.random.default_rng(1).normal(size=(2, 3, 10))
        w = AG.pattern_scores(qs, ad.constant(q), 1)
        assert np.allclose(w.data, 1.0)

    def test_softmax_shift_invariance(self):
        qs = make_query_state(softmax_scores=False)
        q = np.random.default_rng(2).normal(size=(4, 6, 10))
        raw = AG.pattern_scores(qs, ad.constant(q), 3).data
        a = ad.softmax(ad.constant(raw), axis=-1).data
        b = ad.softmax(ad.constant(raw + 11.3), axis=-1).data
        assert np.allclose(a, b, atol=1e-12)


class TestRetrievePattern:
    def test_one_hot_selects_projected_centroid(self):
        qs = make_query_state()
        K = qs.bank.K
        omega = np.zeros((1, K))
        omega[0, 2] = 1.0
        got = AG.retrieve_pattern(qs, ad.constant(omega), 3).data[0]
        from patternbank.nn import layers as L

        proj = L.linear(qs.store, "transfer/query/scale3/bankproj",
                        ad.constant(qs.bank.centroids[3])).data
        assert np.allclose(got, proj[2], atol=1e-12)

    def test_duplicated_centroids_uniform_weights(self):
        qs = make_query_state()
        qs.bank.centroids[1][:] = qs.bank.centroids[1][0]
        K = qs.bank.K
        omega = np.full((1, K), 1.0 / K)
        got = AG.retrieve_pattern(qs, ad.constant(omega), 1).data[0]
        from patternbank.nn import layers as L

        proj = L.linear(qs.store, "transfer/query/scale1/bankproj",
                        ad.constant(qs.bank.centroids[1])).data
        assert np.allclose(got, proj[0], atol=1e-12)

    def test_matches_explicit_loop(self):
        qs = make_query_state()
        rng = np.random.default_rng(3)
        omega = rng.normal(size=(5, qs.bank.K))
        got = AG.retrieve_pattern(qs, ad.constant(omega), 3).data
        from patternbank.nn import layers as L

        proj = L.linear(qs.store, "transfer/query/scale3/bankproj",
                        ad.constant(qs.bank.centroids[3])).data
        expect = np.zeros((5, qs.bank.d))
        for i in range(5):
            for k in range(qs.bank.K):
                expect[i] += omega[i, k] * proj[k]
        assert np.allclose(got, expect, atol=1e-12)


class TestAggregateNode:
    def test_output_shape(self):
        qs = make_query_state()
        rng = np.random.default_rng(4)
        queries = rng.normal(size=(7, 12, 10))
        mk = AG.query_meta_knowledge(qs, queries)
        assert mk.Z.shape == (7, 8)
        assert set(mk.per_scale) == {1, 3}

    def test_identical_nodes_identical_rows(self):
        qs = make_query_state()
        rng = np.random.default_rng(5)
        row = rng.normal(size=(1, 12, 10))
        queries = np.repeat(row, 4, axis=0)
        mk = AG.query_meta_knowledge(qs, queries)
        assert np.allclose(mk.Z.data, mk.Z.data[0], atol=1e-12)

    def test_locality_of_rows(self):
        qs = make_query_state()
        rng = np.random.default_rng(6)
        queries = rng.normal(size=(5, 12, 10))
        base = AG.query_meta_knowledge(qs, queries).Z.data
        queries2 = queries.copy()
        queries2[3] += 5.0  # edit one node's history
        alt = AG.query_meta_knowledge(qs, queries2).Z.data
        others = [0, 1, 2, 4]
        assert np.allclose(base[others], alt[others], atol=1e-12)
        assert not np.allclose(base[3], alt[3])

    def test_keys_gradcheck(self):
        qs = make_query_state(scales=(1,), K=3, d=6, d_q=4, query_dim=8)
        rng = np.random.default_rng(7)
        queries = rng.normal(size=(2, 4, 8))

        def loss():
            mk = AG.query_meta_knowledge(qs, queries)
            return ad.tsum(mk.Z * mk.Z)

        rep = nn.finite_diff_check(loss, qs.store, prefix="transfer/keys",
                                   max_coords_per_param=12)
        assert rep.passed, rep.summary()


class TestAttentionAdjacency:
    def test_single_node(self):
        qs = make_query_state()
        A = AG.attention_adjacency(qs.store, np.random.default_rng(0).normal(size=(1, 8)))
        assert np.allclose(A.data, [[1.0]])

    def test_identical_rows_uniform(self):
        qs = make_query_state()
        Z = np.tile(np.random.default_rng(1).normal(size=(1, 8)), (6, 1))
        A = AG.attention_adjacency(qs.store, Z)
        assert np.allclose(A.data, 1.0 / 6.0, atol=1e-12)

    def test_rows_stochastic_random(self):
        qs = make_query_state()
        Z = np.random.default_rng(2).normal(size=(30, 8))
        A = AG.attention_adjacency(qs.store, Z)
        assert np.allclose(A.data.sum(axis=1), 1.0, atol=1e-6)


class TestReconstructGraph:
    def rand_instance(self, n, seed):
        rng = np.random.default_rng(seed)
        Z = rng.normal(size=(n, 4))
        A = AG.row_normalize(np.abs(rng.normal(size=(n, n))))
        Ap = AG.row_normalize(np.abs(rng.normal(size=(n, n))) + 0.1)
        return Z, A, Ap

    def test_zero_meta_knowledge_exact(self):
        n = 6
        Z = np.zeros((n, 4))
        _, A, Ap = self.rand_instance(n, 0)
        C, A_hat = AG.reconstruct_graph(ad.constant(Z), A, ad.constant(Ap), 10.0)
        assert np.array_equal(C.data, (A + Ap) / 2.0)

    def test_scalar_instance(self):
        z, a, gamma = 0.7, 0.4, 10.0
        C, _ = AG.reconstruct_graph(ad.constant([[z]]), np.array([[a]]),
                                    ad.constant([[a]]), gamma)
        assert C.data[0, 0] == pytest.approx((z * z + 2 * gamma * a) / (z * z + 2 * gamma),
                                             rel=1e-12)

    @pytest.mark.parametrize("n,seed", [(3, 1), (3, 2), (10, 3), (64, 4)])
    def test_matches_explicit_inverse_oracle(self, n, seed):
        Z, A, Ap = self.rand_instance(n, seed)
        gamma = 10.0
        C, _ = AG.reconstruct_graph(ad.constant(Z), A, ad.constant(Ap), gamma)
        oracle = np.linalg.inv(Z @ Z.T + 2 * gamma * np.eye(n)) @ \
            (Z @ Z.T + gamma * (A + Ap))
        assert np.max(np.abs(C.data - oracle)) < 1e-8

    def test_normal_equation_residual(self):
        for n, seed in [(3, 5), (10, 6), (64, 7)]:
            Z, A, Ap = self.rand_instance(n, seed)
            gamma = 10.0
            C, _ = AG.reconstruct_graph(ad.constant(Z), A, ad.constant(Ap), gamma)
            lhs = Z @ Z.T + 2 * gamma * np.eye(n)
            rhs = Z @ Z.T + gamma * (A + Ap)
            res = np.linalg.norm(lhs @ C.data - rhs) / np.linalg.norm(rhs)
            assert res < 1e-8

    def test_large_gamma_limit(self):
        Z, A, Ap = self.rand_instance(10, 8)
        _, A_hat = AG.reconstruct_graph(ad.constant(Z), A, ad.constant(Ap), 1e6)
        target = (A + Ap) / 2.0
        target = (target + target.T) / 2.0
        assert np.max(np.abs(A_hat.data - target)) < 1e-3

    def test_exact_symmetry(self):
        Z, A, Ap = self.rand_instance(12, 9)
        _, A_hat = AG.reconstruct_graph(ad.constant(Z), A, ad.constant(Ap), 10.0)
        assert np.max(np.abs(A_hat.data - A_hat.data.T)) == 0.0

    def test_permutation_consistency(self):
        qs = make_query_state()
        rng = np.random.default_rng(10)
        Z = rng.normal(size=(6, 8))
        A_raw = np.abs(rng.normal(size=(6, 6)))
        np.fill_diagonal(A_raw, 0)
        adj = AG.build_adjacency_set(qs.store, ad.constant(Z), A_raw, 10.0)
        perm = rng.permutation(6)
        P = np.eye(6)[perm]
        adj_p = AG.build_adjacency_set(qs.store, ad.constant(Z[perm]),
                                       A_raw[np.ix_(perm, perm)], 10.0)
        assert np.allclose(adj_p.coefficients.data,
                           P @ adj.coefficients.data @ P.T, atol=1e-8)
        assert np.allclose(adj_p.reconstructed.data,
                           P @ adj.reconstructed.data @ P.T, atol=1e-8)

    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError):
            AG.reconstruct_graph(ad.constant(np.zeros((2, 2))), np.eye(2),
                                 ad.constant(np.eye(2)), 0.0)

    def test_nonfinite_z_rejected(self):
        Z = np.full((3, 2), np.nan)
        with pytest.raises(FloatingPointError):
            AG.reconstruct_graph(ad.constant(Z), np.eye(3),
                                 ad.constant(np.eye(3)), 1.0)


class TestGraphOperator:
    def test_clamps_and_row_normalizes(self):
        A = np.array([[0.5, -0.2], [0.3, 0.1]])
        op = AG.graph_operator(ad.constant(A)).data
        assert np.allclose(op[0], [1.0, 0.0], atol=1e-9)
        assert np.allclose(op[1], [0.75, 0.25], atol=1e-9)

    def test_gradient_flows_through_solve_to_z(self):
        store = nn.ParameterStore()
        rng = np.random.default_rng(11)
        z = store.add("z", rng.normal(size=(4, 3)))
        A = AG.row_normalize(np.abs(rng.normal(size=(4, 4))))

        def loss():
            C, A_hat = AG.reconstruct_graph(z, A, ad.constant(np.eye(4) / 4), 10.0)
            return ad.tsum(AG.graph_operator(A_hat))

        rep = nn.finite_diff_check(loss, store)
        assert rep.passed, rep.summary()
