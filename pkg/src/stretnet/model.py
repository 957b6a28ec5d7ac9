"""ST-RetNet forecaster: dimension expansion, stacked spatial-temporal
blocks, and the two-step prediction layer."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .graph import AdaptiveEmbedding, RoadGraph, adaptive_adjacency, gcn_forward
from .numerics import ConfigError, DimensionError, Tensor
from .retention import (
    FfnParams,
    GatedAggregation,
    RetentionHead,
    RotaryPhases,
    decay_matrix,
    ffn,
    gamma_vector,
    gated_multiscale,
    spatial_head_aggregate,
    spatial_retention,
    temporal_retention,
)


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    p: int = 12
    q: int = 12
    fd: int = 64
    heads: int = 8
    s_layers: int = 1
    t_layers: int = 1
    blocks: int = 1
    embed_width: int = 10
    ffn_width: int | None = None
    disable_s_block: bool = False
    disable_t_block: bool = False
    disable_gcn: bool = False

    def __post_init__(self):
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 2 * self.fd)
        for name in ("n_nodes", "p", "q", "fd", "heads", "blocks", "embed_width", "ffn_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.s_layers < 0 or self.t_layers < 0:
            raise ConfigError("layer counts must be nonnegative")
        if self.fd % self.heads:
            raise ConfigError(f"fd={self.fd} is not divisible by heads={self.heads}")
        if self.head_width % 2:
            raise ConfigError(f"head width {self.head_width} must be even for rotary phases")
        if not self.n_s_layers and not self.n_t_layers:
            raise ConfigError("a block needs at least one spatial or temporal sublayer")

    @property
    def head_width(self):
        return self.fd // self.heads

    @property
    def n_s_layers(self):
        return 0 if self.disable_s_block else self.s_layers

    @property
    def n_t_layers(self):
        return 0 if self.disable_t_block else self.t_layers

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _init_shapes(cfg):
    """Ordered (name, shape, init) for every learnable tensor."""
    f, h, d, n = cfg.fd, cfg.heads, cfg.head_width, cfg.n_nodes
    specs = [("expand.w", (1, f), "uniform"), ("expand.b", (f,), "zeros")]

    def norm(prefix, width):
        specs.extend([(f"{prefix}.gain", (width,), "ones"), (f"{prefix}.bias", (width,), "zeros")])

    def common(prefix):
        for w in ("wq", "wk", "wv"):
            specs.append((f"{prefix}.{w}", (h, d, d), "uniform"))
        norm(f"{prefix}.gn", f)
        specs.extend([
            (f"{prefix}.wg", (f, f), "uniform"),
            (f"{prefix}.wo", (f, f), "uniform"),
            (f"{prefix}.ffn0", (f, cfg.ffn_width), "uniform"),
            (f"{prefix}.ffn1", (cfg.ffn_width, f), "uniform"),
        ])
        norm(f"{prefix}.ln", f)

    for k in range(cfg.blocks):
        for i in range(cfg.n_s_layers):
            pre = f"block{k}.s{i}"
            specs.extend([(f"{pre}.e1", (n, cfg.embed_width), "uniform"),
                          (f"{pre}.e2", (n, cfg.embed_width), "uniform")])
            if not cfg.disable_gcn:
                specs.extend([(f"{pre}.gcn1", (h, d, d), "uniform"), (f"{pre}.gcn2", (h, d, d), "uniform")])
            parts = 2 if cfg.disable_gcn else 4
            specs.extend([(f"{pre}.agg_w", (h, parts * d, d), "uniform"), (f"{pre}.agg_b", (h, d), "zeros")])
            common(pre)
        for i in range(cfg.n_t_layers):
            common(f"block{k}.t{i}")
        if k < cfg.blocks - 1:
            norm(f"stack{k}.ln", f)
    specs.extend([
        ("predict.time_w", (cfg.p, cfg.q), "uniform"),
        ("predict.time_b", (cfg.q,), "zeros"),
        ("predict.feat_w", (f, 1), "uniform"),
        ("predict.feat_b", (1,), "zeros"),
    ])
    return specs


def init_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _init_shapes(cfg):
        if kind == "uniform":
            # contraction width: rows of a matrix, embedding width for E1/E2
            fan_in = shape[-1] if name.endswith((".e1", ".e2")) else shape[-2]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


class STRetNet:
    """End-to-end forecaster mapping (B, N, p, 1) windows to (B, N, q, 1)."""

    def __init__(self, cfg, graph, seed=0, params=None):
        if graph.n_nodes != cfg.n_nodes:
            raise ConfigError(f"graph has {graph.n_nodes} nodes, config expects {cfg.n_nodes}")
        self.cfg = cfg
        self.graph = graph
        self.params = init_params(cfg, seed) if params is None else params
        expected = [(name, shape) for name, shape, _ in _init_shapes(cfg)]
        got = [(name, t.shape) for name, t in self.params.items()]
        if got != expected:
            raise ConfigError("parameter set does not match the configuration")

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state):
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float64)

    def __call__(self, x, graph=None, node_positions=None):
        return full_forward(self, x, graph, node_positions)

    # sublayer parameter views -------------------------------------------

    def _head(self, prefix):
        h, d = self.cfg.heads, self.cfg.head_width
        w = [nx.reshape(self.params[f"{prefix}.{k}"], (h, 1, d, d)) for k in ("wq", "wk", "wv")]
        return RetentionHead(*w)

    def _gate(self, prefix):
        p = self.params
        return GatedAggregation(p[f"{prefix}.wg"], p[f"{prefix}.wo"], p[f"{prefix}.gn.gain"], p[f"{prefix}.gn.bias"])

    def _ffn(self, prefix):
        return FfnParams(self.params[f"{prefix}.ffn0"], self.params[f"{prefix}.ffn1"])


def _to_heads(x, h):
    # (B, N, p, f) -> (B, h, N, p, f/h)
    b, n, p, f = x.shape
    return nx.transpose(nx.reshape(x, (b, n, p, h, f // h)), (0, 3, 1, 2, 4))


def _from_heads(x):
    # (B, h, N, p, d) -> (B, N, p, h*d)
    b, h, n, p, d = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 3, 1, 4)), (b, n, p, h * d))


def dimension_expansion(model, x):
    x = nx.as_tensor(x)
    if x.ndim != 4 or x.shape[-1] != 1:
        raise DimensionError(f"expected input (B, N, p, 1), got {x.shape}")
    return nx.pointwise_linear(x, model.params["expand.w"], model.params["expand.b"])


def s_retnet_forward(model, x, graph, prefix, node_positions=None):
    """Spatial sublayer: static GCN + adaptive-adjacency retention per head,
    fused, gated across heads, then the feed-forward network."""
    cfg, p = model.cfg, model.params
    h, d = cfg.heads, cfg.head_width
    xh = _to_heads(x, h)
    a_adp = adaptive_adjacency(AdaptiveEmbedding(p[f"{prefix}.e1"], p[f"{prefix}.e2"]))
    if cfg.disable_gcn:
        h1 = h2 = None
    else:
        w1 = nx.reshape(p[f"{prefix}.gcn1"], (h, 1, d, d))
        w2 = nx.reshape(p[f"{prefix}.gcn2"], (h, 1, d, d))
        h1, h2 = gcn_forward(xh, graph.a_fwd, graph.a_bwd, w1, w2)
    phases = RotaryPhases.build(cfg.n_nodes, d)
    srm = spatial_retention(xh, model._head(prefix), a_adp, phases, positions=node_positions)
    w_agg = nx.reshape(p[f"{prefix}.agg_w"], (h, 1) + p[f"{prefix}.agg_w"].shape[1:])
    b_agg = nx.reshape(p[f"{prefix}.agg_b"], (h, 1, 1, d))
    heads = spatial_head_aggregate(xh, h1, h2, srm, w_agg, b_agg)
    msr = gated_multiscale(x, _from_heads(heads), model._gate(prefix), h)
    return ffn(msr, model._ffn(prefix))


def head_decays(cfg):
    """Stacked per-head decay matrices shaped (h, 1, p, p)."""
    return np.stack([decay_matrix(cfg.p, g).d for g in gamma_vector(cfg.heads)])[:, None]


def t_retnet_forward(model, x, prefix):
    """Temporal sublayer: per-head decayed causal retention (head i uses the
    i-th rate of the gamma schedule), gated aggregation, feed-forward."""
    cfg = model.cfg
    xh = _to_heads(x, cfg.heads)
    heads = temporal_retention(xh, model._head(prefix), head_decays(cfg))
    msr = gated_multiscale(x, _from_heads(heads), model._gate(prefix), cfg.heads)
    return ffn(msr, model._ffn(prefix))


def _ln(model, prefix, x):
    return nx.layer_norm(x, model.params[f"{prefix}.gain"], model.params[f"{prefix}.bias"])


def block_forward(model, x, graph, k, node_positions=None):
    cfg = model.cfg
    cur = x
    for i in range(cfg.n_s_layers):
        pre = f"block{k}.s{i}"
        cur = _ln(model, f"{pre}.ln", nx.add(s_retnet_forward(model, cur, graph, pre, node_positions), cur))
    for i in range(cfg.n_t_layers):
        pre = f"block{k}.t{i}"
        cur = _ln(model, f"{pre}.ln", nx.add(t_retnet_forward(model, cur, pre), cur))
    return cur


def stack_forward(model, x, graph, node_positions=None):
    """Residual stack; the extractor output is the last block's input plus
    its output (no final normalization)."""
    cur = x
    for k in range(model.cfg.blocks):
        y = block_forward(model, cur, graph, k, node_positions)
        if k < model.cfg.blocks - 1:
            cur = _ln(model, f"stack{k}.ln", nx.add(cur, y))
    return nx.add(cur, y)


def prediction_layer(model, y):
    p = model.params
    t = nx.pointwise_linear(nx.swapaxes(y, -1, -2), p["predict.time_w"], p["predict.time_b"])
    return nx.pointwise_linear(nx.swapaxes(t, -1, -2), p["predict.feat_w"], p["predict.feat_b"])


def full_forward(model, x, graph=None, node_positions=None):
    graph = model.graph if graph is None else graph
    x = nx.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"expected input (B, N, p, 1), got {x.shape}")
    if x.shape[1] != graph.n_nodes or graph.n_nodes != model.cfg.n_nodes:
        raise ConfigError(f"input has {x.shape[1]} nodes, graph {graph.n_nodes}, model {model.cfg.n_nodes}")
    if x.shape[2] != model.cfg.p:
        raise DimensionError(f"input window length {x.shape[2]} != p={model.cfg.p}")
    xs = dimension_expansion(model, x)
    return prediction_layer(model, stack_forward(model, xs, graph, node_positions))


def parameter_count(model):
    return model.parameter_count()
