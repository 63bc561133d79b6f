import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from patchgraph import gradcheck, nn_core as nn
from patchgraph.errors import EmptyGraphError, ShapeError
from patchgraph.ingest.formats import PatchCoordinateSet
from patchgraph.patch_gcn import (
    GcnModel,
    ModelConfig,
    attention_pool,
    dense_forward,
    gcn_layer_forward,
    message_construct_phi,
    risk_from_hazards,
    softmax_aggregate_rho,
    survival_head,
)
from patchgraph.wsi_graph import KnnConfig, build_knn_graph

SMALL = ModelConfig(d_feat=5, d_model=6, d_attn=4, n_layers=4)


def random_graph(rng, m=10, d=5, k=4):
    cells = rng.choice(36, size=m, replace=False)
    coords = PatchCoordinateSet([(i, "s", int(c % 6) * 256, int(c // 6) * 256) for i, c in enumerate(cells)])
    return build_knn_graph(coords, rng.normal(size=(m, d)), KnnConfig(k), "p")


def perturbed(model, rng, scale=0.3):
    for p in model.parameters():
        p.data = p.data + scale * rng.normal(size=p.shape)
    return model


# ---------------------------------------------------------------- phi / rho

def test_phi_examples():
    assert np.allclose(message_construct_phi([-1.0, 2.0]), [1e-7, 2 + 1e-7], rtol=0, atol=1e-15)
    assert np.array_equal(message_construct_phi([0.0, 0.0]), [1e-7, 1e-7])
    assert np.array_equal(message_construct_phi([-1.0, 2.0], [1.0, -3.0]), [1e-7, 1e-7])
    with pytest.raises(ShapeError):
        message_construct_phi([1.0, 2.0], [1.0])


@given(hnp.arrays(np.float64, 4, elements=st.floats(-1e6, 1e6)))
def test_phi_strictly_positive(h):
    assert (message_construct_phi(h) > 0).all()


def test_rho_identical_messages():
    m = np.array([0.3, -1.2, 5.0])
    assert np.array_equal(softmax_aggregate_rho([m, m, m]), m)


def test_rho_two_messages_hand_value():
    out = softmax_aggregate_rho([[0.0], [math.log(3)]], beta=1.0)
    assert out[0] == pytest.approx(0.75 * math.log(3), rel=1e-15)


def test_rho_large_beta_tends_to_max(rng):
    m = rng.normal(size=(5, 3))
    # distinct by construction: the top two per column differ by >= 0.5
    m[0] = m.max(axis=0) + 0.5
    assert np.allclose(softmax_aggregate_rho(m, beta=50.0), m.max(axis=0), atol=1e-6, rtol=0)
    outs = [softmax_aggregate_rho(m, beta=b) for b in (0.5, 1.0, 5.0, 20.0, 50.0)]
    assert all((b >= a - 1e-12).all() for a, b in zip(outs, outs[1:]))


def test_rho_empty_is_error():
    with pytest.raises(ValueError):
        softmax_aggregate_rho(np.zeros((0, 3)))


# ---------------------------------------------------------------- layer

def test_layer_matches_per_node_phi_rho(rng):
    g = random_graph(rng)
    h = rng.normal(size=(g.num_nodes, 5))
    model = perturbed(GcnModel(ModelConfig(d_feat=5, d_model=5, d_attn=3)), rng)
    lp = model.layer_params(0)
    got = gcn_layer_forward(nn.Tensor(h), g, lp).data
    nbrs = g.neighbors()
    for v in range(g.num_nodes):
        msgs = [message_construct_phi(h[u]) for u in (nbrs[v] or [v])]
        agg = softmax_aggregate_rho(msgs)
        z = h[v] + agg
        upd = np.maximum(z @ lp.w1.data + lp.b1.data[0], 0) @ lp.w2.data + lp.b2.data[0]
        assert np.allclose(got[v], h[v] + upd, atol=1e-12)


def test_layer_zero_mlp_is_identity(rng):
    g = random_graph(rng)
    model = GcnModel(ModelConfig(d_feat=5, d_model=5))
    model.zero_update_layers()
    h = rng.normal(size=(g.num_nodes, 5))
    assert np.array_equal(gcn_layer_forward(nn.Tensor(h), g, model.layer_params(2)).data, h)


@pytest.mark.parametrize("seed", range(5))
def test_layer_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    model = perturbed(GcnModel(ModelConfig(d_feat=5, d_model=5)), rng)
    h = rng.normal(size=(g.num_nodes, 5))
    perm = rng.permutation(g.num_nodes)
    a = gcn_layer_forward(nn.Tensor(h), g, model.layer_params(0)).data
    b = gcn_layer_forward(nn.Tensor(h[perm]), g.permuted(perm), model.layer_params(0)).data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_layer_rejects_row_mismatch(rng):
    g = random_graph(rng)
    with pytest.raises(ShapeError):
        gcn_layer_forward(nn.Tensor(np.zeros((3, 5))), g, GcnModel(SMALL).layer_params(0))


# ---------------------------------------------------------------- dense / pooling

def test_dense_blocks_all_equal_input_when_mlps_zero(rng):
    g = random_graph(rng)
    model = GcnModel(SMALL)
    model.zero_update_layers()
    h_cat = dense_forward(g, model).data
    assert h_cat.shape == (g.num_nodes, 5 * 6)
    blocks = np.split(h_cat, 5, axis=1)
    assert all(np.array_equal(b, blocks[0]) for b in blocks)


def test_dense_without_input_block(rng):
    g = random_graph(rng)
    cfg = ModelConfig(d_feat=5, d_model=6, d_attn=4, dense_include_input=False)
    assert cfg.d_cat == 24
    assert dense_forward(g, GcnModel(cfg)).shape == (g.num_nodes, 24)


def test_single_node_graph(rng):
    g = random_graph(rng, m=1)
    trace = perturbed(GcnModel(SMALL), rng).forward(g)
    assert np.isfinite(trace.h_cat.data).all()
    assert trace.attention.data.tolist() == [[1.0]]
    assert np.allclose(trace.h_bag.data, trace.h_cat.data, atol=1e-15)


def test_attention_uniform_on_identical_rows(rng):
    model = perturbed(GcnModel(SMALL), rng)
    row = rng.normal(size=(1, SMALL.d_cat))
    h_bag, att = attention_pool(nn.Tensor(np.repeat(row, 7, axis=0)), model)
    assert np.allclose(att.data, 1 / 7, atol=1e-15)
    assert np.allclose(h_bag.data, row, atol=1e-14)


@pytest.mark.parametrize("gated", [False, True])
def test_bag_in_convex_hull(rng, gated):
    cfg = ModelConfig(d_feat=5, d_model=6, d_attn=4, gated_attention=gated)
    model = perturbed(GcnModel(cfg), rng, 1.0)
    for _ in range(20):
        h = rng.normal(size=(9, cfg.d_cat))
        h_bag, att = attention_pool(nn.Tensor(h), model)
        assert abs(att.data.sum() - 1) < 1e-12 and (att.data >= 0).all()
        assert (h_bag.data >= h.min(axis=0) - 1e-12).all() and (h_bag.data <= h.max(axis=0) + 1e-12).all()


def test_empty_graph_rejected():
    with pytest.raises(EmptyGraphError):
        attention_pool(nn.Tensor(np.zeros((0, 3))), GcnModel(SMALL))


# ---------------------------------------------------------------- head

def _head_model(bias):
    model = GcnModel(ModelConfig(d_feat=2, d_model=2, d_attn=2, n_layers=0))
    model.params["head.W"].data[...] = 0.0
    model.params["head.b"].data[...] = bias
    return model


def test_head_zero_logits_closed_form():
    logits, hazards, s, risk = survival_head(nn.Tensor(np.ones((1, 2))), _head_model(0.0))
    assert np.array_equal(hazards.data, [[0.5] * 4])
    assert np.array_equal(s, [0.5, 0.25, 0.125, 0.0625])
    assert risk == -0.9375


def test_head_clamps_extreme_logits():
    logits, hazards, s, risk = survival_head(nn.Tensor(np.ones((1, 2))), _head_model(-1e4))
    assert np.array_equal(logits.data, [[-30.0] * 4])
    assert risk == pytest.approx(-4.0, abs=1e-11)
    _, hazards, _, _ = survival_head(nn.Tensor(np.ones((1, 2))), _head_model(1e4))
    assert (hazards.data < 1).all()


@given(hnp.arrays(np.float64, 4, elements=st.floats(-40, 40)))
def test_survival_monotone_and_in_range(bias):
    _, hazards, s, risk = survival_head(nn.Tensor(np.ones((1, 2))), _head_model(bias))
    assert ((hazards.data > 0) & (hazards.data < 1)).all()
    assert (np.diff(s) <= 0).all() and (s >= 0).all() and (s <= 1).all()
    assert -4 <= risk <= 0
    assert risk == risk_from_hazards(hazards.data)


# ---------------------------------------------------------------- model

@pytest.mark.parametrize("seed", range(10))
def test_risk_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, m=12)
    model = perturbed(GcnModel(SMALL, seed=seed), rng)
    perm = rng.permutation(g.num_nodes)
    a, b = model.forward(g), model.forward(g.permuted(perm))
    assert abs(a.risk - b.risk) < 1e-9
    assert np.abs(a.h_bag.data - b.h_bag.data).max() < 1e-9
    assert np.allclose(np.sort(a.attention.data), np.sort(b.attention.data), atol=1e-9)


def test_zero_layer_model_ignores_edges(rng):
    g = random_graph(rng)
    model = perturbed(GcnModel(ModelConfig(d_feat=5, d_model=6, d_attn=4, n_layers=0)), rng)
    rewired = g.with_edges(np.array([[0, 1]]))
    assert abs(model.forward(g).risk - model.forward(rewired).risk) < 1e-12


def test_context_changes_risk_with_layers(rng):
    g = random_graph(rng)
    model = perturbed(GcnModel(SMALL), rng)
    rewired = g.with_edges(np.array([[0, 1]]))
    assert abs(model.forward(g).risk - model.forward(rewired).risk) > 1e-9


def test_feature_dim_mismatch(rng):
    with pytest.raises(ShapeError):
        GcnModel(ModelConfig(d_feat=7)).forward(random_graph(rng))


def test_state_dict_round_trip(rng):
    a = perturbed(GcnModel(SMALL, seed=1), rng)
    b = GcnModel(SMALL, seed=2)
    b.load_state_dict(a.state_dict())
    g = random_graph(rng)
    assert a.forward(g).risk == b.forward(g).risk
    with pytest.raises(ShapeError):
        b.load_state_dict({"proj.W": np.zeros((5, 6))})


def test_init_is_seeded():
    a, b, c = GcnModel(SMALL, seed=4), GcnModel(SMALL, seed=4), GcnModel(SMALL, seed=5)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["proj.W"].data, c.params["proj.W"].data)
    assert not a.params["proj.b"].data.any()


def test_no_grad_forward_matches_training_forward(rng):
    g = random_graph(rng, m=12)
    model = perturbed(GcnModel(SMALL), rng)
    t = model.forward(g)
    with nn.no_grad():
        u = model.forward(g)
    assert np.allclose(t.hazards.data, u.hazards.data, atol=1e-14)


def test_cached_replay_equals_full_forward():
    graph, model, b, c = gradcheck.random_model_instance(3)
    trace = model.forward(graph)
    cache = {"layers": trace.layers, "h_cat": trace.h_cat, "h_bag": trace.h_bag}
    from patchgraph.survival import survival_nll

    full = survival_nll(trace.hazards.data, b, c)
    for stage in range(model.config.n_layers + 3):
        assert gradcheck._loss_from(model, graph, cache, stage, b, c) == pytest.approx(full, rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_model_gradcheck(seed):
    assert gradcheck.check_model(seed) < 1e-4


def test_model_gradcheck_gated():
    assert gradcheck.check_model(0, gated=True) < 1e-4
