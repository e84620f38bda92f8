import struct
from dataclasses import replace

import numpy as np
import pytest

from mccf import autodiff as ad
from mccf.autodiff import Tensor
from mccf.data import FeatureBatch, HeteroGraph
from mccf.errors import ContractError, ParseError
from mccf.gradcheck import tiny_model_config
from mccf.model import (FORMAT_VERSION, MAGIC, behavior_forward, embed_behavior, embed_lookup,
                        fuse_forward, graph_forward, init_params, load_params, mccf_forward,
                        media_forward, params_to_bytes, project_head, read_tensors, sampled_graph,
                        save_params, wide_deep_forward)


@pytest.fixture
def params():
    return init_params(tiny_model_config(), np.random.default_rng(0))


def small_graph():
    g = HeteroGraph(node_dim=2, edge_dim=1)
    g.add_node("IP", "v", [5.0, -1.0])
    g.add_node("CookieID", "a", [1.0, 1.0])
    g.add_node("DeviceID", "b", [3.0, 3.0])
    g.add_edge(("IP", "v"), ("CookieID", "a"))
    g.add_edge(("IP", "v"), ("DeviceID", "b"))
    g.add_node("IP", "lonely", [2.0, 0.5])
    return g


def batch_for(cfg, rng, B=6, lens=None, media=None):
    lens = np.array(lens if lens is not None else rng.integers(0, cfg.t_max + 1, size=B))
    B = len(lens)
    ids = np.zeros((B, cfg.t_max), dtype=np.int32)
    for r, n in enumerate(lens):
        if n:
            ids[r, -n:] = rng.integers(1, cfg.page_vocab, size=n)
    deep = np.stack([rng.integers(0, v, size=B) for v in cfg.deep_vocab], axis=1)
    if media is None:
        media = np.full((B, 3), -1)
    return FeatureBatch(rng.normal(size=(B, cfg.wide_dim)), deep, ids, lens, np.asarray(media),
                        rng.integers(0, 2, size=B))


class TestEmbedding:
    def test_lookup_rows(self):
        table = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(embed_lookup(table, np.array([2, 0])).data, [[4, 5], [0, 1]])
        np.testing.assert_array_equal(embed_lookup(table, np.zeros(3, dtype=int)).data, [[0, 1]] * 3)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            embed_lookup(Tensor(np.ones((3, 2))), np.array([3]))


class TestWideDeep:
    def test_zero_input_zero_bias(self, params):
        cfg = params.config
        out = wide_deep_forward(Tensor(np.zeros((2, cfg.wide_dim))), Tensor(np.zeros((2, 2 * cfg.embed_dim))),
                                params)
        np.testing.assert_array_equal(out.data, 0.0)
        assert out.shape == (2, cfg.wd_hidden[-1])

    def test_identity_layer(self):
        cfg = tiny_model_config(wide_dim=3, deep_vocab=(2,), embed_dim=2, wd_hidden=(5,), n_heads=1)
        p = init_params(cfg, np.random.default_rng(0))
        p["wd.W1"].data[:] = np.eye(5)
        x = np.array([[0.5, 2.0, 0.0]])
        e = np.array([[1.0, 3.0]])
        out = wide_deep_forward(Tensor(x), Tensor(e), p)
        np.testing.assert_array_equal(out.data, np.hstack([e, x]))

    def test_arity_mismatch(self, params):
        with pytest.raises(ContractError):
            wide_deep_forward(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 16))), params)

    def test_default_widths(self):
        p = init_params(replace(tiny_model_config(), wd_hidden=(256, 128), embed_dim=8), np.random.default_rng(0))
        assert p["wd.W1"].shape[1] == 256 and p["wd.W2"].shape == (256, 128)


class TestBehavior:
    def v_b(self, params, ids, lens):
        e_b, mask, pos = embed_behavior(np.asarray(ids), np.asarray(lens), params)
        return behavior_forward(e_b, mask, params, pos).data

    def test_padding_invariance(self, params):
        cfg = params.config
        ids = np.zeros((1, cfg.t_max), dtype=int)
        ids[0, -2:] = [3, 1]
        alone = self.v_b(params, ids, [2])
        longer = np.zeros((1, cfg.t_max), dtype=int)
        longer[0, -5:] = [1, 2, 3, 4, 5]
        together = self.v_b(params, np.vstack([ids, longer]), [2, 5])[0]
        np.testing.assert_allclose(together, alone[0], rtol=0, atol=1e-9)

    def test_untrimmed_mask_gives_same_result(self, params):
        cfg = params.config
        ids = np.zeros((1, cfg.t_max), dtype=int)
        ids[0, -2:] = [3, 1]
        e_b, mask, pos = embed_behavior(ids, np.array([2]), params)
        trimmed = behavior_forward(e_b, mask, params, pos).data
        full_ids = np.concatenate([[0], ids[0]])
        e_full = ad.concat([params["beh.start"], ad.gather(params["beh.embed"], full_ids[1:])], axis=0)
        e_full = ad.reshape(e_full, (1, cfg.t_max + 1, cfg.embed_dim))
        full_mask = np.concatenate([[True], ids[0] > 0])[None, :]
        untrimmed = behavior_forward(e_full, full_mask, params, np.arange(cfg.t_max + 1)).data
        np.testing.assert_allclose(untrimmed, trimmed, rtol=0, atol=1e-9)

    def test_different_single_tokens(self, params):
        cfg = params.config
        ids = np.zeros((2, cfg.t_max), dtype=int)
        ids[0, -1], ids[1, -1] = 1, 2
        out = self.v_b(params, ids, [1, 1])
        assert np.linalg.norm(out[0] - out[1]) > 1e-6

    def test_order_sensitive(self, params):
        cfg = params.config
        ids = np.zeros((2, cfg.t_max), dtype=int)
        ids[0, -2:], ids[1, -2:] = [1, 2], [2, 1]
        out = self.v_b(params, ids, [2, 2])
        assert np.linalg.norm(out[0] - out[1]) > 0

    def test_all_padding_uses_start_token(self, params):
        cfg = params.config
        out = self.v_b(params, np.zeros((3, cfg.t_max), dtype=int), [0, 0, 0])
        assert out.shape == (3, cfg.embed_dim) and np.isfinite(out).all()
        np.testing.assert_array_equal(out[0], out[1])


class TestGraph:
    def cfg_params(self, depth=1):
        cfg = tiny_model_config(node_dim=2, graph_dim=2, depth=depth)
        p = init_params(cfg, np.random.default_rng(1))
        return cfg, p

    def test_depth_zero_returns_attributes(self):
        _, p = self.cfg_params()
        g = small_graph()
        np.testing.assert_array_equal(graph_forward(("IP", "v"), g, p, depth=0).data, [5.0, -1.0])

    def test_neighbor_mean(self):
        _, p = self.cfg_params()
        g = small_graph()
        # W = [0; I] exposes the neighbor mean directly
        p["graph.W1"].data[:] = np.vstack([np.zeros((2, 2)), np.eye(2)])
        np.testing.assert_allclose(graph_forward(("IP", "v"), g, p).data, [2.0, 2.0], rtol=0, atol=1e-15)

    def test_isolated_node_has_zero_mean(self):
        _, p = self.cfg_params()
        g = small_graph()
        p["graph.W1"].data[:] = np.vstack([np.eye(2), np.zeros((2, 2))])
        np.testing.assert_array_equal(graph_forward(("IP", "lonely"), g, p).data, [2.0, 0.5])

    def test_permutation_invariance(self):
        _, p = self.cfg_params(depth=2)
        rng = np.random.default_rng(0)
        edges = [(("IP", "c"), ("CookieID", f"n{i}")) for i in range(6)]
        edges += [(("CookieID", f"n{i}"), ("DeviceID", f"d{i % 2}")) for i in range(6)]
        attrs = {k: rng.normal(size=2) for e in edges for k in e}

        def build(order):
            g = HeteroGraph(node_dim=2, edge_dim=1)
            for k in sorted(attrs):
                g.add_node(*k, attrs=attrs[k])
            for i in order:
                g.add_edge(*edges[i])
            return g

        base = graph_forward(("IP", "c"), build(range(len(edges))), p).data
        shuffled = graph_forward(("IP", "c"), build(rng.permutation(len(edges))), p).data
        np.testing.assert_allclose(shuffled, base, rtol=0, atol=1e-12)

    def test_unknown_node(self):
        _, p = self.cfg_params()
        with pytest.raises(ContractError):
            graph_forward(("IP", "nope"), small_graph(), p)

    def test_sampling_caps_neighbors_deterministically(self):
        cfg = tiny_model_config(node_dim=2, graph_dim=2, depth=1, sample_size=3)
        p = init_params(cfg, np.random.default_rng(1))
        g = HeteroGraph(node_dim=2, edge_dim=1)
        for i in range(8):
            g.add_edge(("IP", "hub"), ("CookieID", f"c{i}"))
        nb, counts = sampled_graph(g, cfg).neighbors(np.array([0]), 1)
        assert counts.tolist() == [3] and len(set(nb.tolist())) == 3
        a = graph_forward(("IP", "hub"), g, p).data
        g._cache.clear()
        np.testing.assert_array_equal(graph_forward(("IP", "hub"), g, p).data, a)

    def test_media_absent_blocks_are_zero(self, params):
        cfg = params.config
        g = HeteroGraph(node_dim=cfg.node_dim, edge_dim=1)
        g.add_node("IP", "x", np.ones(cfg.node_dim))
        out = media_forward(np.array([[0, -1, -1]]), g, params).data
        assert out.shape == (1, 3 * cfg.graph_dim)
        np.testing.assert_array_equal(out[0, cfg.graph_dim:], 0.0)


class TestHeads:
    def vecs(self, params, rng, B=5):
        cfg = params.config
        return (Tensor(rng.normal(size=(B, cfg.wd_hidden[-1]))), Tensor(rng.normal(size=(B, cfg.embed_dim))),
                Tensor(rng.normal(size=(B, 3 * cfg.graph_dim))))

    def test_y_hat_is_distribution(self, params):
        out = fuse_forward(*self.vecs(params, np.random.default_rng(0)), params)
        np.testing.assert_allclose(out.y_hat.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert out.z2.shape == (5, 2) and out.h1.shape == (5, params.config.fusion_hidden)

    def test_disabled_branch_ignored(self, params):
        rng = np.random.default_rng(0)
        a, b, c = self.vecs(params, rng)
        one = fuse_forward(a, b, c, params, {"b"})
        two = fuse_forward(a, Tensor(rng.normal(size=b.shape)), c, params, {"b"})
        np.testing.assert_array_equal(one.y_hat.data, two.y_hat.data)
        np.testing.assert_array_equal(one.h1.data, two.h1.data)

    def test_zero_weights_give_half(self, params):
        for n in ("fuse.W1", "fuse.W2"):
            params[n].data[:] = 0
        out = fuse_forward(*self.vecs(params, np.random.default_rng(0)), params)
        np.testing.assert_array_equal(out.y_hat.data, 0.5)

    def test_all_disabled(self, params):
        with pytest.raises(ContractError):
            fuse_forward(*self.vecs(params, np.random.default_rng(0)), params, {"wd", "b", "v"})

    def test_projection_zero_weights(self, params):
        for n in params:
            if n.startswith("proj."):
                params[n].data[:] = 0
        z = project_head(Tensor(np.ones((2, params.config.fusion_hidden))), params)
        np.testing.assert_array_equal(z.data, 0.0)
        assert z.shape == (2, params.config.proj_dims[-1])

    def test_logits_source(self):
        p = init_params(tiny_model_config(projection_source="logits"), np.random.default_rng(0))
        assert p["proj.W1"].shape[0] == 2
        g = HeteroGraph(node_dim=6, edge_dim=1)
        out = mccf_forward(batch_for(p.config, np.random.default_rng(0)), g, p)
        assert out.z.shape == (6, p.config.proj_dims[-1])


class CountingBatch(FeatureBatch):
    reads = 0

    def __getattribute__(self, name):
        if name == "behavior_ids":
            type(self).reads += 1
        return super().__getattribute__(name)


class TestForward:
    def test_deterministic(self, params):
        b = batch_for(params.config, np.random.default_rng(3))
        g = HeteroGraph(node_dim=6, edge_dim=1)
        np.testing.assert_array_equal(mccf_forward(b, g, params).z.data, mccf_forward(b, g, params).z.data)

    def test_absent_cookie_and_device(self, params):
        cfg = params.config
        g = HeteroGraph(node_dim=6, edge_dim=1)
        g.add_node("IP", "ip", np.ones(6))
        b = batch_for(cfg, np.random.default_rng(0), lens=[2], media=[[0, -1, -1]])
        out = mccf_forward(b, g, params)
        np.testing.assert_array_equal(out.v_v.data[0, cfg.graph_dim:], 0.0)
        np.testing.assert_allclose(out.y_hat.data.sum(), 1.0, rtol=0, atol=1e-12)

    def test_no_b_never_reads_behavior(self, params):
        b = batch_for(params.config, np.random.default_rng(0))
        cb = CountingBatch(b.wide, b.deep_ids, b.behavior_ids, b.behavior_len, b.media, b.labels)
        CountingBatch.reads = 0
        mccf_forward(cb, HeteroGraph(node_dim=6, edge_dim=1), params, {"b"})
        assert CountingBatch.reads == 0
        mccf_forward(cb, HeteroGraph(node_dim=6, edge_dim=1), params)
        assert CountingBatch.reads > 0

    @pytest.mark.parametrize("off", ["wd", "b", "v"])
    def test_ablation_constant_in_modality_input(self, params, off):
        cfg = params.config
        rng = np.random.default_rng(0)
        g = HeteroGraph(node_dim=6, edge_dim=1)
        for i in range(4):
            g.add_node("IP", f"i{i}", rng.normal(size=6))
        b1 = batch_for(cfg, rng, lens=[1, 2, 3], media=[[0, -1, -1], [1, -1, -1], [2, -1, -1]])
        b2 = batch_for(cfg, rng, lens=[3, 0, 1], media=[[3, -1, -1], [2, -1, -1], [0, -1, -1]])
        mixed = FeatureBatch(b2.wide if off == "wd" else b1.wide, b2.deep_ids if off == "wd" else b1.deep_ids,
                             b2.behavior_ids if off == "b" else b1.behavior_ids,
                             b2.behavior_len if off == "b" else b1.behavior_len,
                             b2.media if off == "v" else b1.media, b1.labels)
        np.testing.assert_array_equal(mccf_forward(b1, g, params, {off}).y_hat.data,
                                      mccf_forward(mixed, g, params, {off}).y_hat.data)

    def test_unknown_modality(self, params):
        with pytest.raises(ContractError):
            mccf_forward(batch_for(params.config, np.random.default_rng(0)), None, params, {"x"})


class TestParams:
    def test_canonical_names(self, params):
        names = set(params)
        assert {"deep.embed", "beh.embed", "beh.pos", "beh.start", "wd.W1", "graph.W2", "fuse.W2",
                "proj.W1", "beh.L1.ln2.g"} <= names
        assert params["beh.pos"].shape == (params.config.t_max + 1, params.config.embed_dim)
        assert params["fuse.W2"].shape[1] == 2

    def test_decay_excludes_biases_and_norm_terms(self, params):
        decayed = set(params.decayed())
        assert "wd.b1" not in decayed and "beh.L0.ln1.g" not in decayed and "beh.L0.ln1.b" not in decayed
        assert {"wd.W1", "deep.embed", "beh.pos", "beh.start", "proj.W2"} <= decayed

    def test_save_load_round_trip(self, params, tmp_path):
        path = tmp_path / "m.mccf"
        save_params(params, path)
        back = load_params(path, params.config)
        for n in params:
            np.testing.assert_array_equal(back[n].data, params[n].data)
        assert path.read_bytes() == params_to_bytes(back)

    def test_header_layout(self, params):
        blob = params_to_bytes(params)
        assert blob[:4] == MAGIC and struct.unpack_from("<I", blob, 4)[0] == FORMAT_VERSION
        first = sorted(params)[0].encode()
        assert struct.unpack_from("<I", blob, 8)[0] == len(first)
        assert blob[12:12 + len(first)] == first

    def test_rejects_unknown_version(self, params):
        blob = bytearray(params_to_bytes(params))
        blob[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        with pytest.raises(ParseError, match="version"):
            read_tensors(bytes(blob))

    def test_rejects_bad_magic(self):
        with pytest.raises(ParseError):
            read_tensors(b"NOPE" + bytes(8))

    def test_rejects_architecture_mismatch(self, params, tmp_path):
        path = tmp_path / "m.mccf"
        save_params(params, path)
        with pytest.raises(ParseError):
            load_params(path, replace(params.config, depth=1))
