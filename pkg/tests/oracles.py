"""Slow, obviously-correct reference implementations shared by the tests."""

from fractions import Fraction

import numpy as np


def knn_edges_bruteforce(entries, k):
    """All-pairs k-NN per slide, ties to the smaller index, symmetrised; sorted (src, dst) list."""
    edges = set()
    for i, (_, si, xi, yi) in enumerate(entries):
        cands = sorted(
            ((xi - xj) ** 2 + (yi - yj) ** 2, j)
            for j, (_, sj, xj, yj) in enumerate(entries)
            if j != i and sj == si
        )
        for _, j in cands[:k]:
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)


def cindex_bruteforce(times, risks, censored):
    num = den = Fraction(0)
    n = len(times)
    for i in range(n):
        if censored[i]:
            continue
        for j in range(n):
            if times[i] < times[j]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1
                elif risks[i] == risks[j]:
                    num += Fraction(1, 2)
    return None if den == 0 else float(num / den)


def otsu_bruteforce(values):
    """Exhaustive scan of w0 * w1 * (mu0 - mu1)^2 with rationals; first max wins."""
    v = [int(x) for x in np.ravel(values)]
    n = len(v)
    best_t, best = None, None
    for t in range(256):
        lo = [x for x in v if x <= t]
        hi = [x for x in v if x > t]
        if not lo or not hi:
            continue
        w0, w1 = Fraction(len(lo), n), Fraction(len(hi), n)
        mu0, mu1 = Fraction(sum(lo), len(lo)), Fraction(sum(hi), len(hi))
        score = w0 * w1 * (mu0 - mu1) ** 2
        if best is None or score > best:
            best, best_t = score, t
    return best_t


def random_point_set(rng, m, patch=256):
    """Random distinct grid cells on one to three slides, dense or sparse."""
    n_slides = int(rng.integers(1, 4))
    side = int(np.ceil(np.sqrt(m))) * int(rng.choice([1, 3]))
    cells = rng.choice(side * side, size=m, replace=False)
    slides = rng.integers(n_slides, size=m)
    return [(i, f"s{slides[i]}", int(c % side) * patch, int(c // side) * patch) for i, c in enumerate(cells)]


def knn_edges_dense(entries, k):
    """Vectorised all-pairs version of :func:`knn_edges_bruteforce` for a few thousand points."""
    m = len(entries)
    xy = np.array([(x, y) for _, _, x, y in entries], dtype=np.int64)
    slide = np.array([s for _, s, _, _ in entries])
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
    big = np.iinfo(np.int64).max
    d2[slide[:, None] != slide[None, :]] = big
    np.fill_diagonal(d2, big)
    idx = np.broadcast_to(np.arange(m), (m, m))
    order = np.lexsort((idx, d2), axis=-1)
    edges = set()
    for i in range(m):
        for j in order[i, :k]:
            if d2[i, j] == big:
                break
            edges.add((min(i, int(j)), max(i, int(j))))
    return sorted(edges)
