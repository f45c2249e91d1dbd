import numpy as np
import pytest

from kgmd import model
from kgmd.data import build_graph, Interaction, ItemRef
from kgmd.params import Dims, GradBuffer, ModelConfig, init_parameters

H = 8
DIMS = Dims(num_users=5, num_items=12, num_entities=6, num_relations=2, num_domains=3)


def make_params(seed=0, **cfg):
    config = ModelConfig(embedding_dim=cfg.pop("embedding_dim", H), **cfg).validate()
    return init_parameters(config, DIMS, seed=seed)


class TestScore:
    def test_arithmetic(self):
        assert model.score([1, 0, 2], [2, 3, 1]) == 4.0

    def test_zero_vector(self):
        x = np.random.default_rng(0).normal(size=16)
        assert model.score(x, np.zeros(16)) == 0.0

    def test_matches_naive_summation(self):
        rng = np.random.default_rng(1)
        u, v = rng.normal(size=64), rng.normal(size=64)
        naive = 0.0
        for a, b in zip(u, v):
            naive += a * b
        assert model.score(u, v) == pytest.approx(naive, abs=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            model.score([1.0, 2.0], [1.0, 2.0, 3.0])


class TestLosses:
    @pytest.mark.parametrize("fp,fn,m,expected", [(2.0, 1.0, 0.5, 0.0), (1.0, 2.0, 0.5, 1.5), (1.0, 1.0, 1.0, 1.0)])
    def test_rec_loss(self, fp, fn, m, expected):
        assert model.rec_loss(fp, fn, m) == expected

    @pytest.mark.parametrize("dp,dn,m,expected", [(0.2, 1.5, 1.0, 0.0), (1.0, 0.5, 1.0, 1.5), (0.0, 0.0, 0.0, 0.0)])
    def test_kge_loss(self, dp, dn, m, expected):
        assert model.kge_loss(dp, dn, m) == expected


class TestTranse:
    def set_rows(self, params, h, r, t):
        p = make_params(kge=True, embedding_dim=2)
        p["entity_emb"][0] = h
        p["relation_emb"][0] = r
        p["entity_emb"][1] = t
        return p

    def test_exact_translation(self):
        p = self.set_rows(None, [0, 0], [1, 1], [1, 1])
        assert model.transe_distance(0, 0, 1, p) == 0.0

    def test_unit_offset(self):
        p = self.set_rows(None, [1, 0], [0, 0], [0, 0])
        assert model.transe_distance(0, 0, 1, p) == 1.0

    def test_arithmetic(self):
        p = self.set_rows(None, [1, 2], [3, 4], [0, 0])
        assert model.transe_distance(0, 0, 1, p) == pytest.approx(np.sqrt(52.0), abs=1e-12)

    def test_index_out_of_range(self):
        p = make_params(kge=True)
        with pytest.raises(IndexError):
            model.transe_distance(0, 99, 0, p)

    def test_zero_iff_exact(self):
        p = make_params(kge=True)
        d = model.transe_distance(0, 0, 1, p)
        assert (d == 0.0) == bool(
            np.all(p["entity_emb"][0] + p["relation_emb"][0] == p["entity_emb"][1])
        )


class TestMint:
    def test_zero_weights_pass_bias_through(self):
        p = make_params(kge=True)
        p["mint.w1"][:] = 0.0
        p["mint.w2"][:] = 0.0
        bias = np.arange(2 * H, dtype=float)
        p["mint.b2"][:] = bias
        v2, e2 = model.mint_forward(np.ones(H), -np.ones(H), p)
        assert np.array_equal(v2, bias[:H]) and np.array_equal(e2, bias[H:])

    def test_shape_contract(self):
        p = make_params(kge=True, embedding_dim=16)
        dims16 = Dims(5, 12, 6, 2, 3)
        p = init_parameters(ModelConfig(embedding_dim=16, kge=True), dims16, seed=0)
        v2, e2 = model.mint_forward(np.ones(16), np.ones(16), p)
        assert v2.shape == (16,) and e2.shape == (16,)

    def test_hand_computed_two_dim_instance(self):
        dims = Dims(2, 2, 2, 1, 1)
        p = init_parameters(ModelConfig(embedding_dim=2, kge=True, mint_hidden=3), dims, seed=0)
        p["mint.w1"][:] = [[1.0, 0.0, 0.5, -1.0], [0.0, 2.0, 0.0, 1.0], [-1.0, 1.0, 1.0, 0.0]]
        p["mint.b1"][:] = [0.1, -0.2, 0.0]
        p["mint.w2"][:] = [[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0], [-1.0, 0.0, 0.0]]
        p["mint.b2"][:] = [0.0, 0.5, 0.0, 1.0]
        v, e = np.array([0.3, -0.4]), np.array([0.2, 0.6])
        # oracle: explicit loops over the two layers
        x = np.concatenate([v, e])
        z1 = np.array([sum(p["mint.w1"][i][j] * x[j] for j in range(4)) + p["mint.b1"][i] for i in range(3)])
        a1 = np.maximum(z1, 0.0)
        y = np.array([sum(p["mint.w2"][i][j] * a1[j] for j in range(3)) + p["mint.b2"][i] for i in range(4)])
        v2, e2 = model.mint_forward(v, e, p)
        assert np.allclose(np.concatenate([v2, e2]), y, atol=1e-12)


class TestCnc:
    def make(self, h=2):
        dims = Dims(2, 2, 2, 1, 1)
        return init_parameters(ModelConfig(embedding_dim=h, kge=True, interaction_block="cnc"), dims, seed=0)

    def test_worked_example(self):
        p = self.make()
        p["cnc.w_vv"][:] = [1.0, 0.0]
        p["cnc.w_ev"][:] = [0.0, 1.0]
        p["cnc.b_v"][:] = 0.0
        v2, _ = model.cnc_forward(np.array([1.0, 2.0]), np.array([3.0, 4.0]), p)
        assert np.allclose(v2, [9.0, 14.0], atol=1e-12)

    def test_zero_item_vector_returns_biases(self):
        p = self.make()
        p["cnc.b_v"][:] = [0.5, -0.5]
        p["cnc.b_e"][:] = [1.0, 2.0]
        v2, e2 = model.cnc_forward(np.zeros(2), np.array([3.0, 4.0]), p)
        assert np.array_equal(v2, [0.5, -0.5]) and np.array_equal(e2, [1.0, 2.0])

    def test_matches_double_loop_oracle(self):
        h = 8
        dims = Dims(2, 2, 2, 1, 1)
        p = init_parameters(ModelConfig(embedding_dim=h, kge=True, interaction_block="cnc"), dims, seed=3)
        rng = np.random.default_rng(7)
        v, e = rng.normal(size=h), rng.normal(size=h)
        C = np.array([[v[i] * e[j] for j in range(h)] for i in range(h)])
        v_oracle = C @ p["cnc.w_vv"] + C.T @ p["cnc.w_ev"] + p["cnc.b_v"]
        e_oracle = C @ p["cnc.w_ve"] + C.T @ p["cnc.w_ee"] + p["cnc.b_e"]
        v2, e2 = model.cnc_forward(v, e, p)
        assert np.allclose(v2, v_oracle, atol=1e-12)
        assert np.allclose(e2, e_oracle, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            model.cnc_forward(np.zeros(2), np.zeros(3), self.make())


class TestEncodeItem:
    def test_kge_off_returns_table_row(self):
        p = make_params()
        assert np.array_equal(model.encode_item(3, 0, p), p["item_emb"][3])

    def test_kge_on_unlinked_bypasses_block(self):
        p = make_params(kge=True)
        out = model.encode_item(3, 0, p, links={0: 0})
        assert np.array_equal(out, p["item_emb"][3])

    def test_linked_item_equals_block_composition(self):
        p = make_params(kge=True)
        links = {3: 5}
        out = model.encode_item(3, 0, p, links=links)
        v2, _ = model.mint_forward(p["item_emb"][3], p["entity_emb"][5], p)
        assert np.allclose(out, v2, atol=1e-12)


class TestEncodeUserBase:
    def test_returns_row_verbatim(self):
        p = make_params()
        assert np.array_equal(model.encode_user_base(2, p), p["user_emb"][2])

    def test_distinct_users_distinct_rows(self):
        p = make_params()
        assert not np.array_equal(model.encode_user_base(0, p), model.encode_user_base(1, p))

    def test_score_gradient_wrt_user_row_is_item_embedding(self):
        p = make_params()
        s, cache = model.forward_score(2, 3, 0, p)
        buf = GradBuffer(p)
        model.backward(cache, 1.0, buf)
        assert np.allclose(buf.row_grads("user_emb")[2], p["item_emb"][3], atol=1e-12)
        assert np.allclose(buf.row_grads("item_emb")[3], p["user_emb"][2], atol=1e-12)


class TestEncodeUserMultidomain:
    def test_constructed_weights_extract_shared_half(self):
        # hidden = 2h with a large bias keeps the ReLU in its linear region
        p = init_parameters(
            ModelConfig(embedding_dim=H, multi_domain=True, r_d_hidden=2 * H), DIMS, seed=0
        )
        c = 100.0
        for d in range(3):
            p[f"rd.{d}.w1"][:] = np.eye(2 * H)
            p[f"rd.{d}.b1"][:] = c
            p[f"rd.{d}.w2"][:] = np.concatenate([np.eye(H), np.zeros((H, H))], axis=1)
            p[f"rd.{d}.b2"][:] = -c
        out = model.encode_user_multidomain(1, 2, p)
        assert np.allclose(out, p["user_shared_emb"][1], atol=1e-12)

    def test_defined_for_untrained_domain_rows(self):
        p = make_params(multi_domain=True)
        out = model.encode_user_multidomain(4, 1, p)
        assert out.shape == (H,) and np.all(np.isfinite(out))

    def test_hand_computed_mlp(self):
        dims = Dims(2, 2, 2, 1, 1)
        p = init_parameters(ModelConfig(embedding_dim=2, multi_domain=True, r_d_hidden=2), dims, seed=0)
        p["user_shared_emb"][0] = [0.5, -1.0]
        p["user_dom_emb.0"][0] = [2.0, 0.25]
        p["rd.0.w1"][:] = [[1.0, -1.0, 0.5, 0.0], [0.0, 1.0, 1.0, -2.0]]
        p["rd.0.b1"][:] = [0.1, 0.2]
        p["rd.0.w2"][:] = [[1.0, 2.0], [-1.0, 0.5]]
        p["rd.0.b2"][:] = [0.0, 0.3]
        x = np.array([0.5, -1.0, 2.0, 0.25])
        z1 = p["rd.0.w1"] @ x + p["rd.0.b1"]
        a1 = np.maximum(z1, 0)
        oracle = p["rd.0.w2"] @ a1 + p["rd.0.b2"]
        assert np.allclose(model.encode_user_multidomain(0, 0, p), oracle, atol=1e-12)


def gnn_params(seed=0, layers=1, h=2, cap=64):
    dims = Dims(4, 6, 3, 1, 2)
    config = ModelConfig(embedding_dim=h, multi_domain=True, gnn=True, gnn_layers=layers,
                         gnn_neighbor_cap=cap, r_d_hidden=h)
    return init_parameters(config, dims, seed=seed), config


class TestEncodeUserGnn:
    def test_single_neighbor_attention_is_one(self):
        p, config = gnn_params()
        X = p["item_emb"][np.array([[2]])]
        mask = np.ones((1, 1), dtype=bool)
        _, cache = model._gnn_forward_batch("shared", p["domain_emb"][0], X, mask, p, 1)
        assert cache["steps"][0]["alpha"].tolist() == [[1.0]]

    def test_attention_is_a_distribution(self):
        p, config = gnn_params(seed=3, layers=2, h=4)
        idx = np.array([[0, 1, 2, 3, 4]])
        X = p["item_emb"][idx]
        mask = np.ones((1, 5), dtype=bool)
        _, cache = model._gnn_forward_batch("shared", p["domain_emb"][1], X, mask, p, 2)
        for step in cache["steps"]:
            alpha = step["alpha"]
            assert np.all(alpha >= 0)
            assert abs(alpha.sum() - 1.0) <= 1e-12

    def test_empty_neighborhood_is_user_independent(self):
        p, config = gnn_params(seed=1, layers=2)
        a = model.encode_user_gnn(0, 1, [], p, config)
        b = model.encode_user_gnn(3, 1, [], p, config)
        assert np.array_equal(a, b)
        assert np.all(np.isfinite(a))

    def test_three_neighbor_hand_oracle(self):
        p, config = gnn_params(seed=2, layers=1)
        nb = [ItemRef(1, 0), ItemRef(3, 0), ItemRef(4, 1)]
        out = model.encode_user_gnn(0, 1, nb, p, config)

        # step-by-step arithmetic oracle for one layer of both GNNs + R_d
        def gnn(group):
            wq, wk, wv, ws, wa = (p[f"gnn.{group}.{n}"] for n in ("wq", "wk", "wv", "ws", "wa"))
            q = p["domain_emb"][1]
            xs = [p["item_emb"][i] for i in (1, 3, 4)]
            s = np.array([wa @ np.tanh(wq @ q + wk @ x) for x in xs])
            a = np.exp(s - s.max())
            a = a / a.sum()
            m = sum(ai * (wv @ x) for ai, x in zip(a, xs))
            return np.tanh(ws @ q + m)

        x = np.concatenate([gnn("shared"), gnn("dom.1")])
        z1 = p["rd.1.w1"] @ x + p["rd.1.b1"]
        oracle = p["rd.1.w2"] @ np.maximum(z1, 0) + p["rd.1.b2"]
        assert np.allclose(out, oracle, atol=1e-12)

    def test_neighbor_cap_is_deterministic_subset(self):
        idx = np.arange(40)
        a = model.cap_neighbors(idx, 8, user=7)
        b = model.cap_neighbors(idx, 8, user=7)
        assert np.array_equal(a, b)
        assert len(a) == 8
        assert set(a.tolist()) <= set(idx.tolist())
        assert np.all(np.diff(a) > 0)  # ascending order kept
        c = model.cap_neighbors(idx, 8, user=8)
        assert not np.array_equal(a, c)  # different users subsample differently

    def test_batched_matches_per_example(self):
        p, config = gnn_params(seed=4, layers=2, h=4)
        graph_nb = [np.array([0, 2, 5]), np.array([1]), np.array([], dtype=np.int64), np.array([0, 1, 2, 3])]
        batched, _ = model.encode_users_batch_gnn(np.arange(4), 0, graph_nb, p, config)
        for u in range(4):
            single = model.encode_user_gnn(u, 0, graph_nb[u], p, config)
            assert np.allclose(batched[u], single, atol=1e-10)


class TestForwardScore:
    def test_base_variant_is_plain_inner_product(self):
        p = make_params()
        s, _ = model.forward_score(1, 2, 0, p)
        assert s == model.score(p["user_emb"][1], p["item_emb"][2])

    def test_kge_off_equals_kge_on_with_unlinked_item(self):
        p_off = make_params(seed=9)
        p_on = make_params(seed=9, kge=True)
        p_on["item_emb"][:] = p_off["item_emb"]
        p_on["user_emb"][:] = p_off["user_emb"]
        s_off, _ = model.forward_score(1, 2, 0, p_off)
        s_on, _ = model.forward_score(1, 2, 0, p_on, links={})
        assert s_off == s_on  # exact bypass equality

    def test_composition_matches_parts(self):
        p = make_params(kge=True, multi_domain=True)
        links = {2: 4}
        s, _ = model.forward_score(1, 2, 0, p, links=links)
        u = model.encode_user_multidomain(1, 0, p)
        v = model.encode_item(2, 0, p, links=links)
        assert s == pytest.approx(model.score(u, v), abs=1e-12)

    def test_gnn_variant_needs_neighbors(self):
        p = make_params(multi_domain=True, gnn=True)
        from kgmd.errors import DataError

        with pytest.raises(DataError):
            model.forward_score(0, 1, 0, p)


class TestBackward:
    def test_inactive_hinge_has_zero_gradient(self):
        from kgmd.training import _rec_batch_step

        p = make_params()
        p["user_emb"][0] = 1.0
        p["item_emb"][0] = 1.0   # f_pos = 8
        p["item_emb"][1] = -1.0  # f_neg = -8, margin satisfied
        graph = build_graph([Interaction(0, ItemRef(0, 0), 0)], ["a", "b", "c"],
                            num_users=5, num_items=12,
                            item_domain=np.zeros(12, dtype=np.int64))
        buf = GradBuffer(p)
        loss = _rec_batch_step(np.array([[0, 0, 0]]), np.array([[1]]), p, p.config, graph, None, 0.5, buf)
        assert loss == 0.0
        grads = buf.dense_grads_for(p)
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_shape_contract_all_variants(self):
        graph_nb = np.array([0, 1])
        for name, cfg in {
            "base": {}, "kge": {"kge": True}, "multd": {"multi_domain": True},
            "multd_kge": {"multi_domain": True, "kge": True},
            "multd_gnn": {"multi_domain": True, "gnn": True},
            "multd_kge_gnn": {"multi_domain": True, "gnn": True, "kge": True},
        }.items():
            p = make_params(**cfg)
            if p.config.gnn:
                out = model.encode_user_gnn(0, 1, graph_nb, p, p.config)
                empty = model.encode_user_gnn(0, 1, [], p, p.config)
                assert empty.shape == (H,)
            elif p.config.multi_domain:
                out = model.encode_user_multidomain(0, 1, p)
            else:
                out = model.encode_user_base(0, p)
            assert out.shape == (H,), name
            v = model.encode_item(1, 0, p, links={1: 0} if p.config.kge else None)
            assert v.shape == (H,), name
