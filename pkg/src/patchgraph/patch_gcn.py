"""Residual softmax-aggregation GCN with dense skips, attention pooling and a
discrete-time survival head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn_core as nn
from .errors import EmptyGraphError, ShapeError
from .wsi_graph import WsiGraph

EPS = 1e-7
BETA = 1.0


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 1024
    d_model: int = 128
    d_attn: int = 128
    n_layers: int = 4
    n_bins: int = 4
    beta: float = BETA
    eps: float = EPS
    gated_attention: bool = False
    dense_include_input: bool = True
    logit_clamp: float = 30.0

    def __post_init__(self):
        if self.beta <= 0 or self.eps <= 0:
            raise ValueError("beta and eps must be positive")
        if self.n_layers < 0 or self.n_bins < 1:
            raise ValueError("n_layers must be >= 0 and n_bins >= 1")

    @property
    def d_cat(self) -> int:
        blocks = self.n_layers + (1 if self.dense_include_input or self.n_layers == 0 else 0)
        return blocks * self.d_model


@dataclass(frozen=True)
class GcnLayerParams:
    w1: nn.Tensor
    b1: nn.Tensor
    w2: nn.Tensor
    b2: nn.Tensor
    beta: float = BETA
    eps: float = EPS


@dataclass
class ForwardTrace:
    layers: list[nn.Tensor]  # X^(0) .. X^(L)
    h_cat: nn.Tensor
    attention: nn.Tensor  # 1 x M
    h_bag: nn.Tensor  # 1 x d_cat
    logits: nn.Tensor  # 1 x n_bins, clamped
    hazards: nn.Tensor
    survival: np.ndarray
    risk: float


# ------------------------------------------------------------ message passing

def message_construct_phi(h_u, h_edge=None, eps: float = EPS) -> np.ndarray:
    """ReLU(h_u + h_edge) + eps; the edge term is skipped when absent."""
    h_u = np.asarray(h_u, dtype=np.float64)
    if h_edge is not None:
        h_edge = np.asarray(h_edge, dtype=np.float64)
        if h_edge.shape != h_u.shape:
            raise ShapeError(f"edge feature shape {h_edge.shape} != node shape {h_u.shape}")
        h_u = h_u + h_edge
    return np.maximum(h_u, 0.0) + eps


def softmax_aggregate_rho(messages, beta: float = BETA) -> np.ndarray:
    """Channel-wise softmax(beta * m) weighted sum over a node's messages."""
    m = np.atleast_2d(np.asarray(messages, dtype=np.float64))
    if m.shape[0] == 0:
        raise ValueError("no messages to aggregate")
    z = beta * m
    z -= z.max(axis=0)
    a = np.exp(z)
    a /= a.sum(axis=0)
    return (a * m).sum(axis=0)


def gcn_layer_forward(h: nn.Tensor, graph: WsiGraph, params: GcnLayerParams) -> nn.Tensor:
    """One residual message-passing layer: h + MLP(h + rho(phi(h_u)))."""
    if h.shape[0] != graph.num_nodes:
        raise ShapeError(f"layer input has {h.shape[0]} rows for {graph.num_nodes} nodes")
    # without edge features phi depends on the sender only, so it is applied per node
    msgs = nn.add_scalar(nn.relu(h), params.eps)
    agg = nn.segment_softmax_aggregate(msgs, graph.message_index, params.beta)
    update = nn.mlp_forward(nn.add(h, agg), params.w1, params.b1, params.w2, params.b2)
    return nn.add(update, h)


# ------------------------------------------------------------ model

class GcnModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        c = config
        shapes = [("proj.W", (c.d_feat, c.d_model)), ("proj.b", (1, c.d_model))]
        for layer in range(c.n_layers):
            shapes += [
                (f"gcn{layer}.W1", (c.d_model, c.d_model)),
                (f"gcn{layer}.b1", (1, c.d_model)),
                (f"gcn{layer}.W2", (c.d_model, c.d_model)),
                (f"gcn{layer}.b2", (1, c.d_model)),
            ]
        shapes += [("attn.V", (c.d_cat, c.d_attn)), ("attn.b", (1, c.d_attn))]
        if c.gated_attention:
            shapes += [("attn.U", (c.d_cat, c.d_attn)), ("attn.c", (1, c.d_attn))]
        shapes += [
            ("attn.w", (c.d_attn, 1)),
            ("head.W", (c.d_cat, c.n_bins)),
            ("head.b", (1, c.n_bins)),
        ]
        seeds = np.random.SeedSequence(seed).generate_state(len(shapes), dtype=np.uint64)
        self.params: dict[str, nn.Parameter] = {}
        for (name, shape), s in zip(shapes, seeds):
            value = np.zeros(shape) if shape[0] == 1 else nn.init_parameters(shape, int(s))
            self.params[name] = nn.Parameter(value, name)

    def parameters(self) -> list[nn.Parameter]:
        return list(self.params.values())

    def layer_params(self, layer: int) -> GcnLayerParams:
        p = self.params
        return GcnLayerParams(
            p[f"gcn{layer}.W1"], p[f"gcn{layer}.b1"], p[f"gcn{layer}.W2"], p[f"gcn{layer}.b2"],
            beta=self.config.beta, eps=self.config.eps,
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ShapeError(
                f"checkpoint parameters {sorted(state)} do not match model {sorted(self.params)}"
            )
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"parameter {k!r}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_update_layers(self) -> None:
        """Set every layer MLP to zero so each layer is the identity."""
        for layer in range(self.config.n_layers):
            for suffix in ("W1", "b1", "W2", "b2"):
                self.params[f"gcn{layer}.{suffix}"].data[...] = 0.0

    def hyperparams(self) -> dict:
        return {"model": asdict(self.config), "seed": self.seed}

    def forward(self, graph: WsiGraph) -> ForwardTrace:
        h_cat, layers = dense_forward(graph, self, return_layers=True)
        h_bag, attention = attention_pool(h_cat, self)
        logits, hazards, survival, risk = survival_head(h_bag, self)
        return ForwardTrace(layers, h_cat, attention, h_bag, logits, hazards, survival, risk)

    __call__ = forward


def _project(x: np.ndarray, w: nn.Tensor, b: nn.Tensor, chunk: int = 8192) -> nn.Tensor:
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"features have dim {x.shape[1]}, model expects {w.shape[0]}")
    if nn.is_grad_enabled() and w.requires_grad:
        return nn.relu(nn.add_broadcast_row(nn.matmul(nn.Tensor(x), w), b))
    # inference on very large graphs: avoid a float64 copy of the whole feature matrix
    out = np.empty((x.shape[0], w.shape[1]))
    for lo in range(0, x.shape[0], chunk):
        blk = np.asarray(x[lo: lo + chunk], dtype=np.float64) @ w.data + b.data
        np.maximum(blk, 0.0, out=out[lo: lo + chunk])
    return nn.Tensor(out)


def dense_forward(graph: WsiGraph, model: GcnModel, return_layers: bool = False):
    """Column-concatenate the projected input and every layer output."""
    if graph.num_nodes == 0:
        raise EmptyGraphError("graph has no nodes")
    p = model.params
    h = _project(graph.node_features, p["proj.W"], p["proj.b"])
    layers = [h]
    for layer in range(model.config.n_layers):
        h = gcn_layer_forward(h, graph, model.layer_params(layer))
        layers.append(h)
    blocks = layers if (model.config.dense_include_input or not model.config.n_layers) else layers[1:]
    h_cat = blocks[0] if len(blocks) == 1 else nn.concat_cols(blocks)
    return (h_cat, layers) if return_layers else h_cat


def attention_pool(h_cat: nn.Tensor, model: GcnModel) -> tuple[nn.Tensor, nn.Tensor]:
    """Attention-MIL pooling; returns (1 x d_cat bag embedding, 1 x M weights)."""
    if h_cat.shape[0] == 0:
        raise EmptyGraphError("cannot pool an empty graph")
    p = model.params
    hidden = nn.tanh(nn.add_broadcast_row(nn.matmul(h_cat, p["attn.V"]), p["attn.b"]))
    if model.config.gated_attention:
        gate = nn.sigmoid(nn.add_broadcast_row(nn.matmul(h_cat, p["attn.U"]), p["attn.c"]))
        hidden = nn.mul(hidden, gate)
    scores = nn.transpose(nn.matmul(hidden, p["attn.w"]))
    attention = nn.rowwise_softmax(scores)
    return nn.matmul(attention, h_cat), attention


def survival_curve(hazards: np.ndarray) -> np.ndarray:
    return np.cumprod(1.0 - np.asarray(hazards, dtype=np.float64).ravel())


def risk_from_hazards(hazards: np.ndarray) -> float:
    """Negative expected number of survived bins; larger means worse prognosis."""
    return -float(survival_curve(hazards).sum())


def survival_head(h_bag: nn.Tensor, model: GcnModel):
    """Returns (clamped logits, hazards, survival curve, risk)."""
    p = model.params
    bound = model.config.logit_clamp
    logits = nn.clamp(nn.add_broadcast_row(nn.matmul(h_bag, p["head.W"]), p["head.b"]), -bound, bound)
    hazards = nn.sigmoid(logits)
    return logits, hazards, survival_curve(hazards.data), risk_from_hazards(hazards.data)
