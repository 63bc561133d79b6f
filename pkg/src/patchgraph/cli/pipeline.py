"""Cohort loading, fold splitting, training and evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import nn_core as nn
from ..errors import ConfigError, DataError, TrainingError, UndefinedMetricError
from ..ingest.formats import (
    SurvivalLabel,
    atomic_write_text,
    read_coordinates,
    read_feature_matrix,
    read_labels,
    write_coordinates,
    write_feature_matrix,
    write_labels,
)
from ..ingest.synthetic import SyntheticPatient
from ..patch_gcn import GcnModel, ModelConfig
from ..survival import (
    BinBoundaries,
    RiskPrediction,
    assign_bins,
    concordance_index,
    survival_nll,
)
from ..wsi_graph import (
    KnnConfig,
    WsiGraph,
    build_feature_knn_graph,
    build_knn_graph,
    read_edges,
)
from .config import RunConfig

log = logging.getLogger(__name__)


@dataclass
class PatientRecord:
    label: SurvivalLabel
    graph: WsiGraph

    @property
    def patient_id(self) -> str:
        return self.label.patient_id


# ---------------------------------------------------------------- cohort I/O

def write_cohort(patients: list[SyntheticPatient], root) -> None:
    root = Path(root)
    for p in patients:
        pid = p.label.patient_id
        write_coordinates(p.coords, root / "coords" / f"{pid}.csv")
        write_feature_matrix(p.features, root / "features" / f"{pid}.fmat")
    write_labels([p.label for p in patients], root / "labels.csv")
    truth = "patient_id,high_risk\n" + "".join(
        f"{p.label.patient_id},{int(p.high_risk)}\n" for p in patients
    )
    atomic_write_text(root / "truth.csv", truth)


def build_patient_graph(coords, features, cfg: RunConfig, patient_id: str) -> WsiGraph:
    graph = build_knn_graph(coords, features, KnnConfig(cfg.k), patient_id=patient_id)
    if cfg.feature_space_edges:
        graph = build_feature_knn_graph(graph, KnnConfig(cfg.k))
    return graph


def load_patient(root, label: SurvivalLabel, cfg: RunConfig) -> PatientRecord:
    root = Path(root)
    pid = label.patient_id
    try:
        coords = read_coordinates(root / "coords" / f"{pid}.csv", cfg.patch_size)
        feats = read_feature_matrix(root / "features" / f"{pid}.fmat")
    except FileNotFoundError as exc:
        raise DataError(f"patient {pid}: missing file {exc.filename}") from None
    if feats.rows != len(coords):
        raise DataError(f"patient {pid}: {feats.rows} feature rows for {len(coords)} patches")
    edge_file = root / "graphs" / f"{pid}.edges.csv"
    if edge_file.exists() and not cfg.feature_space_edges:
        graph = WsiGraph(
            feats.data,
            read_edges(edge_file),
            tuple((s, x, y) for (_, s, x, y) in coords.entries),
            pid,
            tuple(int(i) for i in coords.patch_ids),
        )
    else:
        graph = build_patient_graph(coords, feats, cfg, pid)
    return PatientRecord(label, graph)


def load_cohort(root, cfg: RunConfig) -> list[PatientRecord]:
    root = Path(root)
    try:
        labels = read_labels(root / "labels.csv")
    except FileNotFoundError:
        raise DataError(f"{root}: labels.csv not found") from None
    return [load_patient(root, lab, cfg) for lab in labels]


def records_from_synthetic(patients: list[SyntheticPatient], cfg: RunConfig) -> list[PatientRecord]:
    return [
        PatientRecord(p.label, build_patient_graph(p.coords, p.features, cfg, p.label.patient_id))
        for p in patients
    ]


# ---------------------------------------------------------------- folds

def make_folds(patient_ids: list[str], folds: int, seed: int) -> dict[str, int]:
    """Seeded shuffle, then round-robin fold assignment."""
    ids = sorted(patient_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids")
    if len(ids) < folds:
        raise ConfigError(f"folds: {len(ids)} patients cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[j]: i % folds for i, j in enumerate(order)}


def split_records(records, assignment: dict[str, int], fold: int):
    train = [r for r in records if assignment[r.patient_id] != fold]
    val = [r for r in records if assignment[r.patient_id] == fold]
    return train, val


# ---------------------------------------------------------------- training

def model_config(cfg: RunConfig, d_feat: int) -> ModelConfig:
    return ModelConfig(
        d_feat=d_feat,
        d_model=cfg.d_model,
        d_attn=cfg.d_attn,
        n_layers=cfg.effective_layers,
        n_bins=cfg.n_bins,
        gated_attention=cfg.gated_attention,
        dense_include_input=cfg.dense_include_input,
    )


def _fold_seed(seed: int, fold: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, fold, stream])


@dataclass
class TrainedFold:
    fold: int
    model: GcnModel
    bins: BinBoundaries
    losses: list[float]


def train_fold(cfg: RunConfig, train: list[PatientRecord], fold: int = 0) -> TrainedFold:
    """Batch size 1 with gradient accumulation; partial windows flush at epoch end."""
    if not train:
        raise ConfigError("training fold is empty")
    labels = [r.label for r in train]
    if all(lab.censored for lab in labels):
        raise ConfigError(f"fold {fold}: every training patient is censored")
    try:
        bins = BinBoundaries.from_training(labels, cfg.n_bins)
    except ValueError as exc:
        raise ConfigError(f"fold {fold}: {exc}") from None
    binned = assign_bins(labels, bins)
    model_seed = int(_fold_seed(cfg.seed, fold, 0).generate_state(1)[0])
    model = GcnModel(model_config(cfg, train[0].graph.feature_dim), seed=model_seed)
    params = model.parameters()
    state = nn.AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(_fold_seed(cfg.seed, fold, 1))
    losses = []
    for epoch in range(cfg.epochs):
        total, pending = 0.0, 0
        for idx in rng.permutation(len(train)):
            lab = binned[idx]
            trace = model.forward(train[idx].graph)
            loss = survival_nll(trace.hazards, lab.bin, lab.censored)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"fold {fold} epoch {epoch}: non-finite loss for patient {lab.patient_id}"
                )
            loss.backward()
            total += value
            pending += 1
            if pending == cfg.accumulation_steps:
                nn.adam_step(params, state, pending)
                pending = 0
        if pending:
            nn.adam_step(params, state, pending)
        losses.append(total / len(train))
        log.info("fold %d epoch %d loss %.4f", fold, epoch, losses[-1])
    return TrainedFold(fold, model, bins, losses)


def predict(model: GcnModel, records: list[PatientRecord]) -> list[RiskPrediction]:
    with nn.no_grad():
        return [
            RiskPrediction(r.patient_id, model.forward(r.graph).risk, r.label.time, r.label.censored)
            for r in records
        ]


@dataclass
class FoldResult:
    fold: int
    c_index: float
    predictions: list[RiskPrediction]


def evaluate_fold(model: GcnModel, val: list[PatientRecord], fold: int = 0) -> FoldResult:
    preds = predict(model, val)
    try:
        c = concordance_index(preds)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(f"fold {fold}: {exc}") from None
    return FoldResult(fold, c, preds)


def _limit_threads() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _train_job(args):
    cfg, train, fold = args
    return train_fold(cfg, train, fold)


def _train_and_eval(args):
    cfg, train, val, fold = args
    trained = train_fold(cfg, train, fold)
    return trained, evaluate_fold(trained.model, val, fold)


def _map(cfg: RunConfig, fn, jobs: list) -> list:
    if cfg.workers > 1 and len(jobs) > 1:
        _limit_threads()
        ctx = multiprocessing.get_context("spawn")  # children read the thread limits at import
        with ProcessPoolExecutor(min(cfg.workers, len(jobs)), mp_context=ctx) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def train_folds(cfg: RunConfig, records, assignment: dict[str, int], folds: list[int]) -> list[TrainedFold]:
    """Train the listed folds; they run in parallel when workers > 1."""
    jobs = [(cfg, split_records(records, assignment, f)[0], f) for f in folds]
    return _map(cfg, _train_job, jobs)


def run_folds(cfg: RunConfig, records: list[PatientRecord], assignment: dict[str, int]):
    """Train and evaluate every fold; returns (TrainedFold, FoldResult) pairs."""
    jobs = [(cfg, *split_records(records, assignment, f), f) for f in range(cfg.folds)]
    return _map(cfg, _train_and_eval, jobs)


# ---------------------------------------------------------------- artifacts

def save_fold(out_dir, trained: TrainedFold, cfg: RunConfig) -> None:
    fold_dir = Path(out_dir) / f"fold{trained.fold}"
    hyper = trained.model.hyperparams()
    hyper["bins"] = [e if math.isfinite(e) else "inf" for e in trained.bins.upper_edges]
    hyper["run"] = cfg.to_dict()
    nn.save_checkpoint(fold_dir / "model.ckpt", trained.model.state_dict(), hyper)
    atomic_write_text(fold_dir / "losses.json", json.dumps(trained.losses) + "\n")


def load_fold_model(out_dir, fold: int) -> GcnModel:
    path = Path(out_dir) / f"fold{fold}" / "model.ckpt"
    if not path.exists():
        raise DataError(f"checkpoint {path} not found; run `train` first")
    state, hyper = nn.load_checkpoint(path)
    model = GcnModel(ModelConfig(**hyper["model"]), seed=hyper.get("seed", 0))
    model.load_state_dict(state)
    return model


def write_predictions(results: list[FoldResult], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "fold", "risk", "time", "censored"])
    for res in results:
        for p in res.predictions:
            w.writerow([p.patient_id, res.fold, repr(p.risk), repr(p.time), int(p.censored)])
    atomic_write_text(path, buf.getvalue())


def read_predictions(path) -> list[tuple[int, RiskPrediction]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["patient_id", "fold", "risk", "time", "censored"]:
            raise DataError(f"{path}: expected header patient_id,fold,risk,time,censored")
        return [
            (
                int(r["fold"]),
                RiskPrediction(r["patient_id"], float(r["risk"]), float(r["time"]), r["censored"] == "1"),
            )
            for r in reader
        ]


def metrics_report(results: list[FoldResult], cfg: RunConfig) -> dict:
    cs = np.array([r.c_index for r in results])
    return {
        "per_fold": [
            {"fold": r.fold, "c_index": r.c_index, "n_val": len(r.predictions)} for r in results
        ],
        "mean_c_index": float(cs.mean()),
        "std_c_index": float(cs.std()),
        "config_echo": cfg.to_dict(),
        "seed": cfg.seed,
    }


def write_metrics(report: dict, path) -> None:
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
