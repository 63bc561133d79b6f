"""Discrete-time survival loss and the evaluation statistics used on folds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .errors import NumericalError, UndefinedMetricError
from .ingest.formats import SurvivalLabel


@dataclass(frozen=True)
class BinBoundaries:
    upper_edges: tuple[float, ...]  # strictly increasing, last is +inf

    def __post_init__(self):
        e = self.upper_edges
        if not e or e[-1] != math.inf:
            raise ValueError("last bin edge must be +inf")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"bin edges must be strictly increasing: {e}")

    @property
    def n_bins(self) -> int:
        return len(self.upper_edges)

    @classmethod
    def from_training(cls, labels: list[SurvivalLabel], n_bins: int = 4) -> "BinBoundaries":
        """Quantile edges of the uncensored event times."""
        times = np.array([lab.time for lab in labels if not lab.censored])
        if times.size == 0:
            raise ValueError("no uncensored training times to place bin edges")
        inner = np.quantile(times, np.arange(1, n_bins) / n_bins) if n_bins > 1 else []
        edges = tuple(float(v) for v in inner) + (math.inf,)
        return cls(edges)


@dataclass(frozen=True)
class RiskPrediction:
    patient_id: str
    risk: float
    time: float
    censored: bool


def bin_index(time: float, boundaries: BinBoundaries) -> int:
    """Index of the first upper edge >= time."""
    for i, edge in enumerate(boundaries.upper_edges):
        if time <= edge:
            return i
    return boundaries.n_bins - 1


def assign_bins(labels: list[SurvivalLabel], boundaries: BinBoundaries) -> list[SurvivalLabel]:
    return [
        SurvivalLabel(lab.patient_id, lab.time, lab.censored, bin_index(lab.time, boundaries))
        for lab in labels
    ]


def survival_nll(hazards, bin: int, censored: bool):
    """Negative log-likelihood of one discrete-time observation.

    Uncensored: the event happens in ``bin`` after surviving the earlier bins.
    Censored: the subject survives through ``bin``. Accepts a tensor (keeps
    the graph for backprop) or a plain array (returns a float).
    """
    plain = not isinstance(hazards, nn.Tensor)
    h = nn.Tensor(hazards) if plain else hazards
    n = h.shape[1]
    if not 0 <= bin < n:
        raise IndexError(f"bin {bin} outside [0, {n})")
    if np.any(h.data <= 0) or np.any(h.data >= 1):
        raise NumericalError("hazards must lie strictly inside (0, 1)")
    event = np.zeros((1, n))
    survived = np.zeros((1, n))
    if censored:
        survived[0, : bin + 1] = 1.0
    else:
        survived[0, :bin] = 1.0
        event[0, bin] = 1.0
    ll = nn.add(
        nn.sum_all(nn.mul(nn.log(h), nn.Tensor(event))),
        nn.sum_all(nn.mul(nn.log(nn.sub(nn.Tensor(np.ones((1, n))), h)), nn.Tensor(survived))),
    )
    loss = nn.scale(ll, -1.0)
    return loss.item() if plain else loss


def concordance_index(preds: list[RiskPrediction]) -> float:
    """Harrell's c: pairs with T_i < T_j and i uncensored; risk ties count 1/2."""
    t = np.array([p.time for p in preds], dtype=np.float64)
    r = np.array([p.risk for p in preds], dtype=np.float64)
    event = ~np.array([p.censored for p in preds], dtype=bool)
    comparable = (t[:, None] < t[None, :]) & event[:, None]
    n = int(comparable.sum())
    if n == 0:
        raise UndefinedMetricError("no comparable pairs; c-index is undefined")
    higher = (r[:, None] > r[None, :]) & comparable
    tied = (r[:, None] == r[None, :]) & comparable
    return float((higher.sum() + 0.5 * tied.sum()) / n)


@dataclass(frozen=True)
class KaplanMeier:
    """Right-continuous product-limit curve; S = 1 before ``times[0]``."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t: float) -> float:
        i = np.searchsorted(self.times, t, side="right")
        return 1.0 if i == 0 else float(self.survival[i - 1])

    def steps(self) -> list[tuple[float, float]]:
        return [(0.0, 1.0)] + list(zip(self.times.tolist(), self.survival.tolist()))


def _event_table(labels: list[SurvivalLabel]):
    t = np.array([lab.time for lab in labels], dtype=np.float64)
    e = ~np.array([lab.censored for lab in labels], dtype=bool)
    times = np.unique(t[e])
    # at equal times events come before censorings: a censored subject at t
    # is still at risk for an event at t
    at_risk = (t[None, :] >= times[:, None]).sum(axis=1)
    deaths = ((t[None, :] == times[:, None]) & e[None, :]).sum(axis=1)
    return times, at_risk, deaths


def kaplan_meier(labels: list[SurvivalLabel]) -> KaplanMeier:
    times, at_risk, deaths = _event_table(labels)
    surv = np.cumprod(1.0 - deaths / at_risk) if len(times) else np.zeros(0)
    return KaplanMeier(times, surv, at_risk, deaths)


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(1000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularised upper incomplete gamma Q(a, x)."""
    if x < 0 or a <= 0:
        raise ValueError("gamma_q needs a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def chi2_sf(x: float, df: int = 1) -> float:
    return gamma_q(df / 2.0, x / 2.0)


@dataclass(frozen=True)
class LogrankResult:
    chi_square: float
    p_value: float
    observed_a: float
    expected_a: float
    variance: float


def logrank_test(group_a: list[SurvivalLabel], group_b: list[SurvivalLabel]) -> LogrankResult:
    if not group_a or not group_b:
        raise UndefinedMetricError("logrank test needs two non-empty groups")
    pooled = list(group_a) + list(group_b)
    times, n, d = _event_table(pooled)
    if len(times) == 0:
        raise UndefinedMetricError("logrank test needs at least one event")
    ta = np.array([lab.time for lab in group_a])
    ea = ~np.array([lab.censored for lab in group_a], dtype=bool)
    n_a = (ta[None, :] >= times[:, None]).sum(axis=1)
    d_a = ((ta[None, :] == times[:, None]) & ea[None, :]).sum(axis=1)
    expected = d * n_a / n
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(n > 1, d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1), 0.0)
    o, e, v = float(d_a.sum()), float(expected.sum()), float(var.sum())
    if v <= 0:
        chi = 0.0
    else:
        chi = (o - e) ** 2 / v
    p = max(chi2_sf(chi, 1), math.ulp(0.0))  # keep p inside (0, 1] on underflow
    return LogrankResult(chi, p, o, e, v)


@dataclass(frozen=True)
class Stratification:
    low: list[RiskPrediction]
    high: list[RiskPrediction]
    threshold: float
    degenerate: bool  # every prediction tied at the median


def stratify_by_median(preds: list[RiskPrediction]) -> Stratification:
    """Median split of pooled risks; values equal to the median go low."""
    if len(preds) < 2:
        raise UndefinedMetricError("stratification needs at least two predictions")
    risks = np.array([p.risk for p in preds])
    med = float(np.median(risks))
    low = [p for p in preds if p.risk <= med]
    high = [p for p in preds if p.risk > med]
    return Stratification(low, high, med, degenerate=not high)


def to_labels(preds: list[RiskPrediction]) -> list[SurvivalLabel]:
    return [SurvivalLabel(p.patient_id, p.time, p.censored) for p in preds]
