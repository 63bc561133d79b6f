"""Central finite-difference checks for every autodiff primitive and the full model.

Error measure: ``max|a - n| / max(max|a|, max|n|)`` over all entries of a
gradient (normwise, so tiny entries cannot blow up the ratio). Inputs are
drawn away from the kinks of relu and clamp so the difference quotient is
well defined.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn_core as nn
from . import patch_gcn as pg
from .ingest.formats import FeatureMatrix, PatchCoordinateSet
from .patch_gcn import GcnModel, ModelConfig
from .survival import survival_nll
from .wsi_graph import KnnConfig, MessageIndex, build_knn_graph

STEP = 1e-5
PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g


def _away_from_zero(rng, shape, lo=0.1, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _ring_index(n: int) -> MessageIndex:
    # a cycle plus one chord, so in-degrees differ
    edges = np.array([(i, (i + 1) % n) for i in range(n)] + [(0, n // 2)])
    edges = np.sort(edges, axis=1)
    return MessageIndex.from_edges(np.unique(edges, axis=0), n)


@dataclass
class PrimitiveCase:
    name: str
    op: Callable  # tensors -> tensor
    inputs: Callable  # rng -> list of arrays


def _cases() -> list[PrimitiveCase]:
    index = _ring_index(6)
    return [
        PrimitiveCase("matmul", lambda a, b: nn.matmul(a, b),
                      lambda r: [r.normal(size=(4, 3)), r.normal(size=(3, 5))]),
        PrimitiveCase("add", nn.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        PrimitiveCase("sub", nn.sub, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        PrimitiveCase("mul", nn.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        PrimitiveCase("scale", lambda a: nn.scale(a, -1.7), lambda r: [r.normal(size=(3, 4))]),
        PrimitiveCase("add_scalar", lambda a: nn.add_scalar(a, 0.3), lambda r: [r.normal(size=(3, 4))]),
        PrimitiveCase("add_broadcast_row", nn.add_broadcast_row,
                      lambda r: [r.normal(size=(5, 3)), r.normal(size=(1, 3))]),
        PrimitiveCase("relu", nn.relu, lambda r: [_away_from_zero(r, (4, 4))]),
        PrimitiveCase("tanh", nn.tanh, lambda r: [r.normal(size=(3, 4))]),
        PrimitiveCase("sigmoid", nn.sigmoid, lambda r: [2 * r.normal(size=(3, 4))]),
        PrimitiveCase("exp", nn.exp, lambda r: [r.normal(size=(3, 4))]),
        PrimitiveCase("log", nn.log, lambda r: [r.uniform(0.2, 3.0, (3, 4))]),
        PrimitiveCase("clamp", lambda a: nn.clamp(a, -1.0, 1.0),
                      lambda r: [np.where(r.random((4, 4)) < 0.5, _away_from_zero(r, (4, 4), 0.0, 0.8),
                                          _away_from_zero(r, (4, 4), 1.2, 2.0))]),
        PrimitiveCase("rowwise_softmax", nn.rowwise_softmax, lambda r: [r.normal(size=(3, 6))]),
        PrimitiveCase("transpose", nn.transpose, lambda r: [r.normal(size=(3, 5))]),
        PrimitiveCase("concat_cols", lambda a, b: nn.concat_cols([a, b]),
                      lambda r: [r.normal(size=(4, 2)), r.normal(size=(4, 3))]),
        PrimitiveCase("sum_all", nn.sum_all, lambda r: [r.normal(size=(3, 4))]),
        PrimitiveCase("mean_all", nn.mean_all, lambda r: [r.normal(size=(3, 4))]),
        PrimitiveCase("segment_softmax_aggregate",
                      lambda m: nn.segment_softmax_aggregate(m, index, 1.0),
                      lambda r: [r.normal(size=(6, 4))]),
        PrimitiveCase("segment_softmax_aggregate_beta5",
                      lambda m: nn.segment_softmax_aggregate(m, index, 5.0),
                      lambda r: [0.3 * r.normal(size=(6, 4))]),
    ]


def check_primitive(case: PrimitiveCase, seed: int) -> float:
    """Max relative error over every input of one op, contracted with random weights."""
    rng = np.random.default_rng(seed)
    arrays = case.inputs(rng)
    params = [nn.Parameter(a) for a in arrays]
    probe = case.op(*params)
    weights = rng.normal(size=probe.shape)

    def value() -> float:
        with nn.no_grad():
            return float((case.op(*[nn.Tensor(p.data) for p in params]).data * weights).sum())

    out = case.op(*params)
    out.backward(weights)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        worst = max(worst, max_relative_error(analytic, numeric_grad(value, p.data)))
    return worst


def random_model_instance(seed: int, n_nodes: int = 8, d_feat: int = 6, d_model: int = 8,
                          n_layers: int = 4, gated: bool = False):
    """A k-NN graph on random grid cells plus a freshly initialised model and label."""
    rng = np.random.default_rng(seed)
    cells = rng.choice(25, size=n_nodes, replace=False)
    entries = [(i, "s0", int(c % 5) * 256, int(c // 5) * 256) for i, c in enumerate(cells)]
    coords = PatchCoordinateSet(entries)
    feats = FeatureMatrix(rng.normal(size=(n_nodes, d_feat)))
    graph = build_knn_graph(coords, feats, KnnConfig(3), patient_id=f"g{seed}")
    cfg = ModelConfig(d_feat=d_feat, d_model=d_model, d_attn=d_model, n_layers=n_layers,
                      gated_attention=gated)
    model = GcnModel(cfg, seed=seed)
    for p in model.parameters():  # non-zero biases exercise every path
        if p.shape[0] == 1:
            p.data[...] = 0.1 * rng.normal(size=p.shape)
    bin_, censored = int(rng.integers(cfg.n_bins)), bool(rng.random() < 0.3)
    return graph, model, bin_, censored


def _stage(name: str, n_layers: int) -> int:
    """Index of the first forward stage a parameter feeds: 0 = projection,
    1..L = GCN layers, L+1 = attention, L+2 = head."""
    if name.startswith("proj."):
        return 0
    if name.startswith("gcn"):
        return int(name[3:].split(".")[0]) + 1
    return n_layers + 1 if name.startswith("attn.") else n_layers + 2


def _loss_from(model: GcnModel, graph, cache, stage: int, bin_: int, censored: bool) -> float:
    # replays the forward pass from a cached prefix; the suffix is exactly what
    # GcnModel.forward runs, so a perturbation upstream of ``stage`` is not allowed
    cfg = model.config
    with nn.no_grad():
        if stage <= cfg.n_layers:
            layers = list(cache["layers"][:stage]) if stage else []
            if not stage:
                p = model.params
                layers.append(pg._project(graph.node_features, p["proj.W"], p["proj.b"]))
            for layer in range(max(stage, 1) - 1, cfg.n_layers):
                layers.append(pg.gcn_layer_forward(layers[-1], graph, model.layer_params(layer)))
            blocks = layers if (cfg.dense_include_input or not cfg.n_layers) else layers[1:]
            h_cat = blocks[0] if len(blocks) == 1 else nn.concat_cols(blocks)
        else:
            h_cat = cache["h_cat"]
        h_bag = pg.attention_pool(h_cat, model)[0] if stage <= cfg.n_layers + 1 else cache["h_bag"]
        hazards = pg.survival_head(h_bag, model)[1]
    return survival_nll(hazards.data, bin_, censored)


def check_model(seed: int, **kw) -> float:
    """Every parameter of a random instance against central differences of the loss."""
    graph, model, bin_, censored = random_model_instance(seed, **kw)
    trace = model.forward(graph)
    survival_nll(trace.hazards, bin_, censored).backward()
    cache = {
        "layers": [nn.Tensor(t.data) for t in trace.layers],
        "h_cat": nn.Tensor(trace.h_cat.data),
        "h_bag": nn.Tensor(trace.h_bag.data),
    }
    worst = 0.0
    for p in model.parameters():
        stage = _stage(p.name, model.config.n_layers)
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numeric_grad(lambda: _loss_from(model, graph, cache, stage, bin_, censored), p.data)
        worst = max(worst, max_relative_error(analytic, numeric))
        p.grad = None
    return worst


@dataclass
class GradcheckReport:
    primitives: dict[str, float] = field(default_factory=dict)
    model: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_primitive_error(self) -> float:
        return max(self.primitives.values(), default=0.0)

    @property
    def max_model_error(self) -> float:
        return max(self.model, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_primitive_error < PRIMITIVE_TOL and self.max_model_error < MODEL_TOL

    def lines(self) -> list[str]:
        out = [f"{name:34s} {err:.3e}" for name, err in self.primitives.items()]
        out.append(f"{'model (' + str(len(self.model)) + ' seeds)':34s} {self.max_model_error:.3e}")
        out.append(f"max relative error {max(self.max_primitive_error, self.max_model_error):.3e}"
                   f" in {self.seconds:.1f}s: {'PASS' if self.passed else 'FAIL'}")
        return out


def run_suite(seeds: int = 50, primitive_seeds: int = 3) -> GradcheckReport:
    t0 = time.perf_counter()
    report = GradcheckReport()
    for case in _cases():
        report.primitives[case.name] = max(check_primitive(case, s) for s in range(primitive_seeds))
    report.model = [check_model(s) for s in range(seeds)]
    report.seconds = time.perf_counter() - t0
    return report
