"""Synthetic cohorts whose risk depends only on spatial context.

Every patient is an ``grid_side x grid_side`` patch grid. Phenotype 0 ("A")
and phenotype 1 ("B") appear in the same numbers regardless of risk class;
high-risk patients have some A patch touching a B patch (8-connectivity),
low-risk patients keep every A at Chebyshev distance >= 3 from every B.
A bag-level model that ignores adjacency therefore sees identically
distributed inputs in both classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SpecError
from .formats import FeatureMatrix, PatchCoordinateSet, SurvivalLabel

PHENO_A, PHENO_B = 0, 1
MIN_SEPARATION = 3


@dataclass(frozen=True)
class SyntheticSpec:
    n_patients: int = 200
    grid_side: int = 8
    n_phenotypes: int = 4
    feature_dim: int = 64
    noise_sigma: float = 0.1
    context_rule: str = "high risk iff a phenotype-0 patch touches a phenotype-1 patch"
    seed: int = 0
    patch_size: int = 256
    high_risk_mean: float = 12.0
    low_risk_mean: float = 48.0
    censor_prob: float = 0.25

    def __post_init__(self):
        if self.n_phenotypes < 2:
            raise SpecError("n_phenotypes must be >= 2")
        if self.grid_side < 3:
            raise SpecError("grid_side must be >= 3")
        if not self.noise_sigma > 0:
            raise SpecError("noise_sigma must be > 0")
        if self.n_patients < 1 or self.feature_dim < 1:
            raise SpecError("n_patients and feature_dim must be positive")

    @property
    def motif_count_range(self) -> tuple[int, int]:
        """Inclusive range from which the A and B patch counts are drawn."""
        cells = self.grid_side**2
        lo = max(1, cells // 16)
        return lo, max(lo, cells // 10)


@dataclass
class SyntheticPatient:
    coords: PatchCoordinateSet
    features: FeatureMatrix
    label: SurvivalLabel
    high_risk: bool
    phenotypes: np.ndarray = field(repr=False)  # (grid_side, grid_side) ints


def _chebyshev_halo(mask: np.ndarray, radius: int) -> np.ndarray:
    g = mask.shape[0]
    out = np.zeros_like(mask)
    for r, c in zip(*np.nonzero(mask)):
        out[max(0, r - radius): min(g, r + radius + 1), max(0, c - radius): min(g, c + radius + 1)] = True
    return out


def _grow_blob(rng, n: int, allowed: np.ndarray, start: tuple[int, int]):
    """Random 4-connected blob of ``n`` allowed cells containing ``start``."""
    g = allowed.shape[0]
    blob = np.zeros_like(allowed)
    blob[start] = True
    members = [start]
    while len(members) < n:
        frontier = set()
        for r, c in members:
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < g and 0 <= cc < g and allowed[rr, cc] and not blob[rr, cc]:
                    frontier.add((rr, cc))
        if not frontier:
            return None
        nxt = sorted(frontier)[rng.integers(len(frontier))]
        blob[nxt] = True
        members.append(nxt)
    return blob


def _fallback_layout(g: int, n_a: int, n_b: int):
    flat = np.zeros(g * g, dtype=bool)
    a = flat.copy()
    a[:n_a] = True
    b = flat.copy()
    b[g * g - n_b:] = True
    return a.reshape(g, g), b.reshape(g, g)


def _check_separable(spec: SyntheticSpec) -> None:
    hi = spec.motif_count_range[1]
    a, b = _fallback_layout(spec.grid_side, hi, hi)
    if np.any(_chebyshev_halo(a, MIN_SEPARATION - 1) & b):
        raise SpecError(
            f"grid_side={spec.grid_side} cannot keep {hi} A and {hi} B patches "
            f"at Chebyshev distance >= {MIN_SEPARATION}"
        )


def _place_motif(rng, g: int, n_a: int, n_b: int, adjacent: bool):
    everywhere = np.ones((g, g), dtype=bool)
    for _ in range(200):
        start = tuple(int(v) for v in rng.integers(g, size=2))
        a = _grow_blob(rng, n_a, everywhere, start)
        if a is None:
            continue
        if adjacent:
            allowed = ~a
            seeds = np.argwhere(_chebyshev_halo(a, 1) & allowed)
        else:
            allowed = ~_chebyshev_halo(a, MIN_SEPARATION - 1)
            seeds = np.argwhere(allowed)
        if len(seeds) == 0:
            continue
        b_start = tuple(int(v) for v in seeds[rng.integers(len(seeds))])
        b = _grow_blob(rng, n_b, allowed, b_start)
        if b is not None:
            return a, b
    if adjacent:
        raise SpecError("could not place an adjacent A/B motif")
    return _fallback_layout(g, n_a, n_b)


def _centroids(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC3]))
    c = rng.standard_normal((spec.n_phenotypes, spec.feature_dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def generate_synthetic_cohort(spec: SyntheticSpec) -> list[SyntheticPatient]:
    """Deterministic planted-context cohort; half the patients are high risk."""
    _check_separable(spec)
    g = spec.grid_side
    centroids = _centroids(spec)
    root = np.random.SeedSequence(spec.seed)
    cohort_rng = np.random.default_rng(root.spawn(1)[0])
    risk = np.zeros(spec.n_patients, dtype=bool)
    risk[: spec.n_patients // 2] = True
    risk = cohort_rng.permutation(risk)
    lo, hi = spec.motif_count_range
    patients = []
    for i, child in enumerate(root.spawn(spec.n_patients + 1)[1:]):
        rng = np.random.default_rng(child)
        high = bool(risk[i])
        # counts are drawn before and independently of the risk class
        n_a, n_b = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        a, b = _place_motif(rng, g, n_a, n_b, adjacent=high)
        pheno = np.full((g, g), -1, dtype=np.int64)
        rest = ~(a | b)
        if spec.n_phenotypes > 2:
            pheno[rest] = rng.integers(2, spec.n_phenotypes, size=int(rest.sum()))
        pheno[a] = PHENO_A
        pheno[b] = PHENO_B
        base = np.where(pheno.ravel()[:, None] >= 0, centroids[np.maximum(pheno.ravel(), 0)], 0.0)
        feats = base + spec.noise_sigma * rng.standard_normal((g * g, spec.feature_dim))

        mean = spec.high_risk_mean if high else spec.low_risk_mean
        t = float(rng.exponential(mean))
        censored = bool(rng.random() < spec.censor_prob)
        if censored:
            t = float(rng.uniform(0.0, t))

        pid = f"P{i:04d}"
        slide = f"{pid}-S0"
        rows, cols = np.divmod(np.arange(g * g), g)
        entries = [
            (j, slide, int(c) * spec.patch_size, int(r) * spec.patch_size)
            for j, (r, c) in enumerate(zip(rows, cols))
        ]
        patients.append(
            SyntheticPatient(
                coords=PatchCoordinateSet(entries, spec.patch_size),
                features=FeatureMatrix(feats.astype(np.float32)),
                label=SurvivalLabel(pid, t, censored),
                high_risk=high,
                phenotypes=pheno,
            )
        )
    return patients
