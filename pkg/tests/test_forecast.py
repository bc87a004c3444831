import numpy as np
import pytest

from patternbank import data as D
from patternbank import forecast as F
from patternbank import pretrain as PT
from patternbank.bank import PatternBank
from patternbank import nn
from patternbank.nn import autodiff as ad


def tiny_model(n_nodes=3, T0=12, P=3, horizon=2, d=8, scales=(1, 2), K=3,
               seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    spec = nn.LayerSpec(d=d, d_q=6, heads=2, ff_width=2 * d, enc_depth=1)
    store = nn.ParameterStore()
    enc = PT.init_encoder(store, spec, P, 2, rng)
    enc.norm_mean, enc.norm_std = 50.0, 10.0
    dec = PT.init_decoder(store, spec, P, 2, rng)
    bank = PatternBank(scales=tuple(scales),
                       centroids={c: rng.normal(size=(K, c * d)) for c in scales},
                       K=K, d=d)
    model = F.TransferModel(store, spec, bank, enc, dec, T0, P, horizon,
                            gamma=10.0, **kwargs)
    model.init_params(rng)
    return model


def tiny_window(n_nodes=3, T0=12, horizon=2, seed=0, P=3):
    cities, _ = D.generate_synthetic_corpus(D.SyntheticSpec(
        num_cities=1, nodes_per_city=n_nodes, days=1, seed=seed))
    return F.make_window(cities[0], T0, T0, P, horizon), cities[0].adjacency


class TestTcnDilations:
    def test_receptive_field_exact(self):
        for P in (2, 3, 5, 8, 12, 16):
            assert 1 + sum(F.tcn_dilations(P)) == P

    def test_standard_patch_schedule(self):
        assert F.tcn_dilations(12) == [1, 2, 4, 4]

    def test_too_short(self):
        with pytest.raises(ValueError):
            F.tcn_dilations(1)


class TestShortTerm:
    def setup_state(self, n=4, P=12, d=8, seed=0):
        store = nn.ParameterStore()
        rng = np.random.default_rng(seed)
        F.init_short_term(store, d, 2, P, rng)
        S = rng.normal(size=(n, P, 2))
        return store, S

    def test_identity_operator_no_mixing(self):
        store, S = self.setup_state()
        S[1] = S[0]
        out = F.short_term_forward(store, S, np.eye(4), 12).data
        assert np.allclose(out[0], out[1], atol=1e-12)

    def test_permutation_equivariance(self):
        store, S = self.setup_state()
        A = np.abs(np.random.default_rng(1).normal(size=(4, 4)))
        np.fill_diagonal(A, 0)
        perm = np.array([3, 1, 0, 2])
        out = F.short_term_forward(store, S, A, 12).data
        out_p = F.short_term_forward(store, S[perm], A[np.ix_(perm, perm)], 12).data
        assert np.allclose(out[perm], out_p, atol=1e-10)

    def test_gradcheck_all_block_parameters(self):
        store = nn.ParameterStore()
        rng = np.random.default_rng(2)
        F.init_short_term(store, 4, 2, 3, rng)
        S = rng.normal(size=(2, 3, 2))
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
        truth = rng.normal(size=(2, 4))

        def loss():
            return nn.mse_loss(F.short_term_forward(store, S, A, 3), truth)

        rep = nn.finite_diff_check(loss, store, max_coords_per_param=8)
        assert rep.passed, rep.summary()


class TestLongTerm:
    def test_zero_weights_bias_rows(self):
        store = nn.ParameterStore()
        rng = np.random.default_rng(0)
        F.init_long_term(store, 6, 2, 5, rng)
        store["transfer/lt/map/W"].data[:] = 0.0
        b = store["transfer/lt/map/b"].data
        out = F.long_term_forward(store, rng.normal(size=(4, 6, 2)), 6, 2).data
        assert np.allclose(out, np.tile(b, (4, 1)))

    def test_additivity(self):
        store = nn.ParameterStore()
        rng = np.random.default_rng(1)
        F.init_long_term(store, 6, 2, 5, rng)
        x = rng.normal(size=(3, 6, 2))
        y = rng.normal(size=(3, 6, 2))
        b = store["transfer/lt/map/b"].data
        fx = F.long_term_forward(store, x, 6, 2).data
        fy = F.long_term_forward(store, y, 6, 2).data
        fxy = F.long_term_forward(store, x + y, 6, 2).data
        assert np.allclose(fxy, fx + fy - b, atol=1e-10)

    def test_identical_histories_identical_rows(self):
        store = nn.ParameterStore()
        rng = np.random.default_rng(2)
        F.init_long_term(store, 6, 2, 5, rng)
        x = np.tile(rng.normal(size=(1, 6, 2)), (3, 1, 1))
        out = F.long_term_forward(store, x, 6, 2).data
        assert np.allclose(out, out[0])

    def test_wrong_history_length(self):
        store = nn.ParameterStore()
        F.init_long_term(store, 6, 2, 5, np.random.default_rng(0))
        with pytest.raises(ValueError, match="history"):
            F.long_term_forward(store, np.zeros((2, 5, 2)), 6, 2)


class TestFusionHead:
    def test_constant_head(self):
        store = nn.ParameterStore()
        rng = np.random.default_rng(0)
        F.init_fusion_head(store, 4, 6, rng)
        store["transfer/head/l2/W"].data[:] = 0.0
        store["transfer/head/l2/b"].data[:] = 3.25
        out = F.fuse_and_forecast(store, rng.normal(size=(5, 4)),
                                  rng.normal(size=(5, 4)),
                                  rng.normal(size=(5, 4)), 6)
        assert out.shape == (5, 6, 1)
        assert np.allclose(out.data, 3.25)

    def test_horizon_indexing_at_5min(self):
        # 36 steps at 5 minutes: minutes 10/60/120/180 are steps 2/12/24/36
        for minutes, step in [(10, 2), (60, 12), (120, 24), (180, 36)]:
            assert minutes // 5 == step


class TestForecastLoss:
    def test_trivial_values(self):
        y = np.random.default_rng(0).normal(size=(2, 3, 1))
        assert F.forecast_loss(ad.constant(y), y).item() == 0.0
        assert F.forecast_loss(ad.constant([[[3.0]]]), [[[1.0]]]).item() == 4.0

    def test_equals_core_mse(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 4, 1))
        b = rng.normal(size=(3, 4, 1))
        assert F.forecast_loss(ad.constant(a), b).item() == pytest.approx(
            nn.mse_loss(a.reshape(-1), b.reshape(-1)).item(), rel=1e-12)


class TestTransferModel:
    def test_forward_shape_and_determinism(self):
        model = tiny_model()
        window, A = tiny_window()
        p1 = model.predict(window, A)
        p2 = model.predict(window, A)
        assert p1.shape == (3, 2, 1)
        assert np.array_equal(p1, p2)

    def test_no_meta_zeroes_fusion_slot_only(self):
        model = tiny_model()
        window, A = tiny_window()
        base = model.predict(window, A)
        model.flags.no_meta = True
        ablated = model.predict(window, A)
        assert not np.allclose(base, ablated)
        # with both meta and reconstruction off, the keys are fully bypassed
        model.flags.no_reconstruction = True
        before = model.predict(window, A)
        for c in model.bank.scales:
            model.store[f"transfer/keys/scale{c}"].data += 1.7
        after = model.predict(window, A)
        assert np.array_equal(before, after)
        model.flags.no_meta = False
        changed = model.predict(window, A)
        assert not np.allclose(before, changed)

    def test_no_reconstruction_ignores_gamma(self):
        model = tiny_model()
        window, A = tiny_window()
        model.flags.no_reconstruction = True
        a = model.predict(window, A)
        model.gamma = 123.0
        b = model.predict(window, A)
        assert np.array_equal(a, b)
        model.flags.no_reconstruction = False
        c = model.predict(window, A)
        model.gamma = 10.0
        d = model.predict(window, A)
        assert not np.allclose(c, d)

    def test_full_pipeline_gradcheck_three_nodes(self):
        model = tiny_model(n_nodes=3, d=6)
        window, A = tiny_window(n_nodes=3)

        def loss():
            return model.window_loss(window, A)

        rep = nn.finite_diff_check(loss, model.store, prefix="transfer/",
                                   max_coords_per_param=4)
        assert rep.passed, rep.summary()

    def test_query_with_embeddings_path(self):
        model = tiny_model(query_with_embeddings=True)
        window, A = tiny_window()
        out = model.predict(window, A)
        assert out.shape == (3, 2, 1)

    def test_make_window_out_of_range(self):
        cities, _ = D.generate_synthetic_corpus(D.SyntheticSpec(
            num_cities=1, nodes_per_city=2, days=1, seed=0))
        with pytest.raises(ValueError):
            F.make_window(cities[0], 4, 12, 3, 2)
