"""Build a 100k-patch k-NN graph and run one no-grad forward pass at d_feat=1024.

Prints one JSON object: knn_seconds, forward_seconds, max_rss_bytes, nodes, edges.
Run it in a fresh process so max RSS reflects this workload only.
"""

import argparse
import json
import resource
import sys
import time

import numpy as np

from patchgraph import nn_core as nn
from patchgraph.ingest.formats import PatchCoordinateSet
from patchgraph.patch_gcn import GcnModel, ModelConfig
from patchgraph.wsi_graph import KnnConfig, build_knn_graph


def uniform_grid_patches(n, seed=0, patch=256):
    side = int(np.ceil(np.sqrt(n / 0.625)))  # ~62% of the grid occupied
    cells = np.sort(np.random.default_rng(seed).choice(side * side, size=n, replace=False))
    return PatchCoordinateSet(
        [(i, "s0", int(c % side) * patch, int(c // side) * patch) for i, c in enumerate(cells)], patch
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=100_000)
    ap.add_argument("--d-feat", type=int, default=1024)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    coords = uniform_grid_patches(args.nodes, args.seed)
    feats = np.random.default_rng(args.seed + 1).standard_normal((args.nodes, args.d_feat), dtype=np.float32)

    t0 = time.perf_counter()
    graph = build_knn_graph(coords, feats, KnnConfig(8), "scale")
    knn_s = time.perf_counter() - t0

    model = GcnModel(ModelConfig(d_feat=args.d_feat), seed=args.seed)
    t0 = time.perf_counter()
    with nn.no_grad():
        trace = model.forward(graph)
    fwd_s = time.perf_counter() - t0

    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    rss_bytes = rss if sys.platform == "darwin" else rss * 1024
    print(json.dumps({
        "nodes": graph.num_nodes,
        "edges": graph.num_edges,
        "knn_seconds": knn_s,
        "forward_seconds": fwd_s,
        "max_rss_bytes": rss_bytes,
        "risk": trace.risk,
        "attention_sum": float(trace.attention.data.sum()),
    }))


if __name__ == "__main__":
    main()
