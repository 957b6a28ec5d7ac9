import numpy as np
import pytest

from stretnet import numerics as nx
from stretnet.graph import RoadGraph
from stretnet.model import (
    ModelConfig,
    STRetNet,
    block_forward,
    dimension_expansion,
    head_decays,
    init_params,
    prediction_layer,
    s_retnet_forward,
    stack_forward,
    t_retnet_forward,
)
from stretnet.numerics import ConfigError, DimensionError, Tensor
from stretnet.retention import gamma_vector
from stretnet.train import l1_loss

RESIDUAL_KEEP = (".gain", ".gn.gain", "expand.w")


def ring_graph(n, seed=0):
    rng = np.random.default_rng(seed)
    return RoadGraph.from_distances([(i, (i + 1) % n, float(rng.uniform(1, 3))) for i in range(n)], n)


def small(n=4, **kw):
    kw = {"p": 3, "q": 2, "fd": 8, "heads": 2, **kw}
    cfg = ModelConfig(n_nodes=n, **kw)
    return STRetNet(cfg, ring_graph(n), seed=1)


def zero_branches(model):
    # keep norms' gains and the expansion; zero every other learnable weight
    for name, t in model.params.items():
        if not name.endswith(RESIDUAL_KEEP):
            t.data = np.zeros_like(t.data)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(n_nodes=3, fd=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(n_nodes=3, fd=12, heads=4)  # odd head width
    with pytest.raises(ConfigError):
        ModelConfig(n_nodes=3, disable_s_block=True, disable_t_block=True)
    cfg = ModelConfig(n_nodes=3)
    assert (cfg.fd, cfg.heads, cfg.p, cfg.q, cfg.blocks, cfg.s_layers, cfg.t_layers) == (64, 8, 12, 12, 1, 1, 1)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_default_shape_contract():
    model = STRetNet(ModelConfig(n_nodes=5), ring_graph(5))
    x = np.random.default_rng(0).normal(size=(2, 5, 12, 1))
    assert model(x).shape == (2, 5, 12, 1)
    assert dimension_expansion(model, x).shape == (2, 5, 12, 64)


@pytest.mark.parametrize("kw", [{}, {"blocks": 3}, {"s_layers": 1, "t_layers": 3}, {"disable_s_block": True},
                                {"disable_t_block": True}, {"disable_gcn": True}, {"q": 5}])
def test_shape_contract_variants(kw):
    model = small(**kw)
    x = np.random.default_rng(1).normal(size=(3, 4, 3, 1))
    assert model(x).shape == (3, 4, model.cfg.q, 1)


def test_input_validation():
    model = small()
    with pytest.raises(ConfigError):
        model(np.zeros((1, 5, 3, 1)))
    with pytest.raises(DimensionError):
        model(np.zeros((1, 4, 3)))
    with pytest.raises(DimensionError):
        model(np.zeros((1, 4, 4, 1)))
    with pytest.raises(ConfigError):
        STRetNet(ModelConfig(n_nodes=3), ring_graph(4))


def test_zero_expansion_gives_zero_tensor():
    model = small()
    model.params["expand.w"].data[:] = 0
    assert not dimension_expansion(model, np.ones((1, 4, 3, 1))).data.any()


def test_sublayers_reduce_to_residual():
    model = small()
    zero_branches(model)
    x = np.random.default_rng(2).normal(size=(2, 4, 3, 8))
    assert np.array_equal(s_retnet_forward(model, x, model.graph, "block0.s0").data, x)
    assert np.array_equal(t_retnet_forward(model, x, "block0.t0").data, x)


def test_stack_single_block_is_input_plus_block():
    model = small()
    x = np.random.default_rng(3).normal(size=(2, 4, 3, 8))
    y = block_forward(model, x, model.graph, 0).data
    assert np.array_equal(stack_forward(model, x, model.graph).data, x + y)


def test_zero_prediction_weights_give_zero_forecast():
    model = small()
    for k in ("predict.time_w", "predict.time_b", "predict.feat_w", "predict.feat_b"):
        model.params[k].data[:] = 0
    assert not model(np.ones((1, 4, 3, 1))).data.any()


def test_prediction_layer_time_map_is_square_for_default():
    params = init_params(ModelConfig(n_nodes=2))
    assert params["predict.time_w"].shape == (12, 12)
    model = small()
    y = np.random.default_rng(4).normal(size=(1, 4, 3, 8))
    ref = np.einsum("bnpf,pq,fo->bnqo", y, model.params["predict.time_w"].data, model.params["predict.feat_w"].data)
    ref += model.params["predict.time_b"].data[None, None, :, None] * model.params["predict.feat_w"].data.sum()
    ref += model.params["predict.feat_b"].data
    assert np.allclose(prediction_layer(model, y).data, ref, atol=1e-12)


def test_heads_receive_gamma_schedule():
    cfg = ModelConfig(n_nodes=2)
    d = head_decays(cfg)
    assert d.shape == (8, 1, 12, 12)
    for i, g in enumerate(gamma_vector(8)):
        assert d[i, 0, 1, 0] == g


def test_temporal_sublayer_is_causal():
    model = small(p=6)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 4, 6, 8))
    y = x.copy()
    y[:, :, 4] += 1.0
    a = t_retnet_forward(model, x, "block0.t0").data
    b = t_retnet_forward(model, y, "block0.t0").data
    assert np.max(np.abs(a[:, :, :4] - b[:, :, :4])) <= 1e-12
    assert np.abs(a[:, :, 4:] - b[:, :, 4:]).max() > 1e-6


def test_forward_is_deterministic_and_construction_repeatable():
    a, b = small(), small()
    x = np.random.default_rng(6).normal(size=(2, 4, 3, 1))
    assert np.array_equal(a(x).data, a(x).data)
    assert np.array_equal(a(x).data, b(x).data)
    assert a.parameter_count() == b.parameter_count() > 0


def test_parameter_counts():
    full = STRetNet(ModelConfig(n_nodes=8), ring_graph(8))
    nogcn = STRetNet(ModelConfig(n_nodes=8, disable_gcn=True), ring_graph(8))
    h, d = 8, 8
    # GCN weights plus the aggregation rows that consumed their outputs
    assert full.parameter_count() - nogcn.parameter_count() == 2 * h * d * d + 2 * h * d * d
    gcn_only = sum(full.params[k].size for k in full.params if ".gcn" in k)
    assert gcn_only == 2 * h * d * d
    for flag in ("disable_s_block", "disable_t_block", "disable_gcn"):
        assert STRetNet(ModelConfig(n_nodes=8, **{flag: True}), ring_graph(8)).parameter_count() < full.parameter_count()


def test_ablation_flags_change_outputs():
    x = np.random.default_rng(7).normal(size=(2, 4, 3, 1))
    base = small()(x).data
    assert not np.allclose(base, small(disable_gcn=True)(x).data)


def test_node_permutation_equivariance():
    rng = np.random.default_rng(8)
    n = 5
    adj = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) > 0.4)
    np.fill_diagonal(adj, 0)
    cfg = ModelConfig(n_nodes=n, p=4, q=3, fd=8, heads=2, blocks=2)
    model = STRetNet(cfg, RoadGraph.from_adjacency(adj), seed=3)
    perm = rng.permutation(n)
    params = {}
    for k, t in model.params.items():
        v = t.data[perm] if k.endswith((".e1", ".e2")) else t.data
        params[k] = Tensor(v.copy(), True)
    permuted = STRetNet(cfg, RoadGraph.from_adjacency(adj[perm][:, perm]), params=params)
    x = rng.normal(size=(2, n, 4, 1))
    out = model(x).data
    out_p = permuted(x[:, perm], node_positions=list(perm)).data
    assert np.allclose(out_p, out[:, perm], atol=1e-10)


def test_end_to_end_gradient():
    model = small()
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 4, 3, 1))
    y = rng.normal(size=(2, 4, 2, 1))
    err = nx.gradcheck(lambda: l1_loss(model(x), y), model.parameters(), probes=20, rng=rng)
    assert err < 1e-4


def test_parameter_set_must_match_config():
    model = small()
    params = dict(model.params)
    params.pop("predict.feat_b")
    with pytest.raises(ConfigError):
        STRetNet(model.cfg, model.graph, params=params)
