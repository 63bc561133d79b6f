"""Patch graphs: exact spatial k-NN over patch grids, patient merging, hop sets."""

from __future__ import annotations

import csv
import io
from collections import Counter, deque
from dataclasses import dataclass
from functools import cached_property
from math import gcd

import numpy as np

from .errors import EmptyGraphError, FormatError, ShapeError
from .ingest.formats import FeatureMatrix, PatchCoordinateSet, atomic_write_text


@dataclass(frozen=True)
class KnnConfig:
    k: int = 8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True, eq=False)
class WsiGraph:
    """Node features plus an undirected edge list ``edges[i] = (src, dst)``, src < dst."""

    node_features: np.ndarray
    edges: np.ndarray
    node_coords: tuple[tuple[str, int, int], ...]
    patient_id: str = ""
    patch_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", e)
        m = self.num_nodes
        if len(self.node_coords) != m:
            raise ShapeError(f"{len(self.node_coords)} coordinates for {m} feature rows")
        if len(e):
            if e.min() < 0 or e.max() >= m:
                raise ShapeError("edge endpoint out of range")
            if np.any(e[:, 0] >= e[:, 1]):
                raise FormatError("edges must satisfy src < dst (no self-loops)")
            if len(np.unique(e[:, 0] * m + e[:, 1])) != len(e):
                raise FormatError("duplicate edge")

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def neighbors(self) -> list[list[int]]:
        adj = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            adj[u].append(int(v))
            adj[v].append(int(u))
        return adj

    @cached_property
    def message_index(self) -> "MessageIndex":
        return MessageIndex.from_edges(self.edges, self.num_nodes)

    def with_edges(self, edges) -> "WsiGraph":
        return WsiGraph(self.node_features, edges, self.node_coords, self.patient_id, self.patch_ids)

    def permuted(self, perm: np.ndarray) -> "WsiGraph":
        """Relabel nodes so that new node i is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        e = inv[self.edges]
        e = np.sort(e, axis=1)
        pids = None if self.patch_ids is None else tuple(self.patch_ids[i] for i in perm)
        return WsiGraph(
            self.node_features[perm],
            e,
            tuple(self.node_coords[i] for i in perm),
            self.patient_id,
            pids,
        )


@dataclass(frozen=True, eq=False)
class MessageIndex:
    """Padded routing tables for message passing over both edge directions.

    ``nbr[v, j]`` is the j-th sender into node ``v`` (``mask`` marks real
    slots); a node without neighbours receives a single self-message.
    ``rev[u, i]`` lists the flat slots ``v * width + j`` fed by sender ``u``,
    padded with ``nbr.size`` (an extra zero row) so scatter-adds become a
    gather and a sum.
    """

    nbr: np.ndarray
    mask: np.ndarray
    rev: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.nbr.shape[0]

    @classmethod
    def from_edges(cls, edges: np.ndarray, m: int) -> "MessageIndex":
        if m == 0:
            raise EmptyGraphError("graph has no nodes")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        lonely = np.flatnonzero(np.bincount(dst, minlength=m) == 0)
        src = np.concatenate([src, lonely])
        dst = np.concatenate([dst, lonely])
        order = np.lexsort((src, dst))
        src, dst = src[order], dst[order]
        deg = np.bincount(dst, minlength=m)
        width = int(deg.max())
        slot = np.arange(len(dst)) - np.searchsorted(dst, dst)
        nbr = np.zeros((m, width), dtype=np.int64)
        mask = np.zeros((m, width), dtype=bool)
        nbr[dst, slot] = src
        mask[dst, slot] = True
        flat = dst * width + slot
        by_src = np.argsort(src, kind="stable")
        s_sorted = src[by_src]
        out_deg = np.bincount(src, minlength=m)
        rslot = np.arange(len(src)) - np.searchsorted(s_sorted, s_sorted)
        rev = np.full((m, int(out_deg.max())), nbr.size, dtype=np.int64)
        rev[s_sorted, rslot] = flat[by_src]
        return cls(nbr, mask, rev)


def _grid_units(xy: np.ndarray) -> np.ndarray:
    """Shift to the origin and divide by the common step of all coordinates."""
    xy = xy - xy.min(axis=0)
    step = 0
    for v in np.unique(xy):
        step = gcd(step, int(v))
        if step == 1:
            break
    return xy // step if step > 1 else xy


def _knn_one_slide(xy: np.ndarray, k: int, batch: int = 20000) -> np.ndarray:
    """Exact k-NN indices (local) for one slide via a uniform-grid hash.

    Cells are unit squares in grid units; a query looks at the (2r+1)^2
    block of cells around its own and is resolved once its k-th candidate
    distance is strictly below r + 1. Points sit on integer grid units, so
    everything outside the block is at distance >= r + 1. Unresolved
    queries retry with a wider block.
    """
    m = len(xy)
    k = min(k, m - 1)
    if k <= 0:
        return np.zeros((m, 0), dtype=np.int64)
    pts = _grid_units(xy)
    gx, gy = pts[:, 0], pts[:, 1]
    w, h = int(gx.max()) + 1, int(gy.max()) + 1
    cell = gy * w + gx
    order = np.argsort(cell, kind="stable")
    counts = np.bincount(cell, minlength=w * h)
    cap = int(counts.max())
    slot = np.arange(m) - np.searchsorted(cell[order], cell[order])
    table = np.full((h, w, cap), -1, dtype=np.int64)
    table[gy[order], gx[order], slot] = order

    result = np.empty((m, k), dtype=np.int64)
    pending = np.arange(m)
    r = 0
    while len(pending):
        r += 1
        full = r >= max(w, h)
        offs = np.arange(-r, r + 1)
        dy, dx = np.meshgrid(offs, offs, indexing="ij")
        dy, dx = dy.ravel(), dx.ravel()
        still = []
        for lo in range(0, len(pending), batch):
            q = pending[lo: lo + batch]
            cy = gy[q][:, None] + dy[None, :]
            cx = gx[q][:, None] + dx[None, :]
            inside = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            cand = table[np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)]  # (q, cells, cap)
            cand = np.where(inside[:, :, None], cand, -1).reshape(len(q), -1)
            if cand.shape[1] < k:  # small blocks of sparse cells hold fewer than k slots
                cand = np.pad(cand, ((0, 0), (0, k - cand.shape[1])), constant_values=-1)
            valid = (cand >= 0) & (cand != q[:, None])
            safe = np.where(valid, cand, 0)
            d2 = (gx[safe] - gx[q][:, None]) ** 2 + (gy[safe] - gy[q][:, None]) ** 2
            big = np.iinfo(np.int64).max
            d2 = np.where(valid, d2, big)
            idx = np.where(valid, cand, big)
            srt = np.lexsort((idx, d2), axis=-1)[:, :k]
            top = np.take_along_axis(cand, srt, axis=1)
            kth = np.take_along_axis(d2, srt[:, -1:], axis=1)[:, 0]
            done = (kth < (r + 1) ** 2) | full
            result[q[done]] = top[done]
            still.append(q[~done])
        pending = np.concatenate(still) if still else pending[:0]
    return result


def _assemble_edges(knn: np.ndarray) -> np.ndarray:
    m, k = knn.shape
    if k == 0:
        return np.zeros((0, 2), dtype=np.int64)
    rows = np.repeat(np.arange(m), k)
    cols = knn.ravel()
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    key = np.unique(lo * m + hi)
    return np.stack([key // m, key % m], axis=1)


def build_knn_graph(
    coords: PatchCoordinateSet,
    features: FeatureMatrix | np.ndarray,
    cfg: KnnConfig = KnnConfig(),
    patient_id: str = "",
) -> WsiGraph:
    """Symmetrised spatial k-NN graph; neighbours are searched within each slide.

    Ties in distance go to the smaller node index.
    """
    x = features.data if isinstance(features, FeatureMatrix) else np.asarray(features)
    m = len(coords)
    if x.shape[0] != m:
        raise ShapeError(f"{m} coordinates but {x.shape[0]} feature rows")
    if m == 0:
        raise EmptyGraphError("cannot build a graph with zero nodes")
    xy = coords.xy
    slides = np.array(coords.slide_ids, dtype=object)
    parts = []
    for sid in dict.fromkeys(coords.slide_ids):
        members = np.flatnonzero(slides == sid)
        local = _knn_one_slide(xy[members], cfg.k)
        if local.shape[1]:
            e = _assemble_edges(local)
            parts.append(members[e])
    edges = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    return WsiGraph(
        node_features=x,
        edges=edges,
        node_coords=tuple((s, int(a), int(b)) for (_, s, a, b) in coords.entries),
        patient_id=patient_id,
        patch_ids=tuple(int(p) for p in coords.patch_ids),
    )


def build_feature_knn_graph(graph: WsiGraph, cfg: KnnConfig = KnnConfig()) -> WsiGraph:
    """Baseline: k-NN in feature space instead of image space (brute force)."""
    x = np.asarray(graph.node_features, dtype=np.float64)
    m = len(x)
    k = min(cfg.k, m - 1)
    if k <= 0:
        return graph.with_edges(np.zeros((0, 2), dtype=np.int64))
    sq = (x * x).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2 * x @ x.T
    np.fill_diagonal(d2, np.inf)
    idx = np.broadcast_to(np.arange(m), (m, m))
    knn = np.lexsort((idx, d2), axis=-1)[:, :k]
    return graph.with_edges(_assemble_edges(knn))


def merge_patient_graph(subgraphs: list[WsiGraph]) -> WsiGraph:
    """Disjoint union of per-slide graphs belonging to one patient."""
    if not subgraphs:
        raise EmptyGraphError("no subgraphs to merge")
    pid = subgraphs[0].patient_id
    dim = subgraphs[0].feature_dim
    for g in subgraphs:
        if g.patient_id != pid:
            raise ShapeError(f"mixed patient ids {pid!r} and {g.patient_id!r}")
        if g.feature_dim != dim:
            raise ShapeError(f"mixed feature dims {dim} and {g.feature_dim}")
    if len(subgraphs) == 1:
        return subgraphs[0]
    offsets = np.cumsum([0] + [g.num_nodes for g in subgraphs[:-1]])
    edges = np.concatenate([g.edges + off for g, off in zip(subgraphs, offsets)])
    coords = tuple(c for g in subgraphs for c in g.node_coords)
    if all(g.patch_ids is not None for g in subgraphs):
        pids = tuple(p for g in subgraphs for p in g.patch_ids)
    else:
        pids = None
    return WsiGraph(np.concatenate([g.node_features for g in subgraphs]), edges, coords, pid, pids)


def hop_neighborhood(graph: WsiGraph, node: int, hops: int) -> set[int]:
    if not 0 <= node < graph.num_nodes:
        raise IndexError(f"node {node} out of range for {graph.num_nodes} nodes")
    adj = graph.neighbors()
    seen = {node}
    frontier = deque([(node, 0)])
    while frontier:
        v, d = frontier.popleft()
        if d == hops:
            continue
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                frontier.append((u, d + 1))
    return seen


def degree_histogram(graph: WsiGraph) -> dict[int, int]:
    return dict(sorted(Counter(graph.degrees().tolist()).items()))


def write_edges(graph: WsiGraph, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["src", "dst"])
    w.writerows(graph.edges.tolist())
    atomic_write_text(path, buf.getvalue())


def read_edges(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["src", "dst"]:
            raise FormatError(f"{path}: expected header src,dst")
        try:
            rows = [(int(a), int(b)) for a, b in reader]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 2)
