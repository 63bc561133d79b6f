"""``patchgraph <subcommand> --config run.json [--key value ...]``

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import gradcheck
from .. import nn_core as nn
from ..errors import DataError, NumericalError, PatchGraphError, UsageError
from ..ingest.formats import atomic_write_text, write_coordinates
from ..ingest.raster import Raster, read_raster, segment_to_coordinates, write_raster
from ..ingest.synthetic import SyntheticSpec, generate_synthetic_cohort
from ..survival import kaplan_meier, logrank_test, stratify_by_median, to_labels
from ..wsi_graph import degree_histogram, write_edges
from . import pipeline as pl
from .config import RunConfig, load_config, parse_overrides

log = logging.getLogger("patchgraph")

COMMANDS = (
    "synth", "segment", "build-graph", "train", "eval",
    "stratify", "attention", "gradcheck", "graph-info",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="patchgraph",
        description="Patch graphs, context-aware GCN survival models and their evaluation.",
        epilog="Any RunConfig field can be overridden with --field value.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="JSON RunConfig file")
    parser.add_argument("--quiet", action="store_true", help="only print warnings")
    return parser


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig) -> dict:
    spec = SyntheticSpec(
        n_patients=cfg.n_patients, grid_side=cfg.grid_side, n_phenotypes=cfg.n_phenotypes,
        feature_dim=cfg.feature_dim, noise_sigma=cfg.noise_sigma, seed=cfg.seed,
        patch_size=cfg.patch_size,
    )
    patients = generate_synthetic_cohort(spec)
    pl.write_cohort(patients, cfg.data_dir)
    high = sum(p.high_risk for p in patients)
    return {"patients": len(patients), "high_risk": high, "data_dir": cfg.data_dir}


def cmd_segment(cfg: RunConfig) -> dict:
    if not cfg.raster:
        raise UsageError("segment needs --raster PATH")
    try:
        raster = read_raster(cfg.raster)
    except FileNotFoundError:
        raise DataError(f"raster {cfg.raster} not found") from None
    coords = segment_to_coordinates(
        raster, cfg.patch_size, cfg.downsample_factor, cfg.min_foreground_fraction, cfg.slide_id
    )
    out = Path(cfg.output_dir) / f"{cfg.slide_id}.coords.csv"
    write_coordinates(coords, out)
    return {"patches": len(coords), "coords": str(out)}


def cmd_build_graph(cfg: RunConfig) -> dict:
    records = _records(cfg)
    for r in records:
        write_edges(r.graph, Path(cfg.data_dir) / "graphs" / f"{r.patient_id}.edges.csv")
    return {"graphs": len(records), "edges": int(sum(r.graph.num_edges for r in records))}


def _records(cfg: RunConfig):
    records = pl.load_cohort(cfg.data_dir, cfg)
    if cfg.patient:
        records = [r for r in records if r.patient_id == cfg.patient]
        if not records:
            raise DataError(f"patient {cfg.patient!r} not in {cfg.data_dir}/labels.csv")
    return records


def _fold_ids(cfg: RunConfig) -> list[int]:
    if cfg.fold >= cfg.folds:
        raise UsageError(f"fold: {cfg.fold} outside [0, {cfg.folds})")
    return [cfg.fold] if cfg.fold >= 0 else list(range(cfg.folds))


def cmd_train(cfg: RunConfig) -> dict:
    records = pl.load_cohort(cfg.data_dir, cfg)
    assignment = pl.make_folds([r.patient_id for r in records], cfg.folds, cfg.seed)
    out = Path(cfg.output_dir)
    atomic_write_text(out / "folds.json", json.dumps(assignment, indent=2, sort_keys=True) + "\n")
    trained = pl.train_folds(cfg, records, assignment, _fold_ids(cfg))
    for t in trained:
        pl.save_fold(out, t, cfg)
    return {"folds": [t.fold for t in trained], "final_loss": [t.losses[-1] for t in trained if t.losses]}


def _assignment(cfg: RunConfig) -> dict[str, int]:
    path = Path(cfg.output_dir) / "folds.json"
    if not path.exists():
        raise DataError(f"{path} not found; run `train` first")
    return json.loads(path.read_text())


def cmd_eval(cfg: RunConfig) -> dict:
    records = pl.load_cohort(cfg.data_dir, cfg)
    assignment = _assignment(cfg)
    missing = [r.patient_id for r in records if r.patient_id not in assignment]
    if missing:
        raise DataError(f"patients {missing[:3]} have no fold in folds.json")
    results = []
    for f in _fold_ids(cfg):
        model = pl.load_fold_model(cfg.output_dir, f)
        _, val = pl.split_records(records, assignment, f)
        results.append(pl.evaluate_fold(model, val, f))
    out = Path(cfg.output_dir)
    pl.write_predictions(results, cfg.predictions or out / "predictions.csv")
    report = pl.metrics_report(results, cfg)
    pl.write_metrics(report, out / "metrics.json")
    return {"mean_c_index": report["mean_c_index"], "std_c_index": report["std_c_index"]}


def km_svg(curves: dict[str, list[tuple[float, float]]], p_value: float,
           width: int = 480, height: int = 320) -> str:
    """Step plot of survival curves; x is time, y is S(t) in [0, 1]."""
    pad = 40
    t_max = max((t for pts in curves.values() for t, _ in pts), default=1.0) or 1.0
    sx = lambda t: pad + (width - 2 * pad) * t / t_max
    sy = lambda s: height - pad - (height - 2 * pad) * s
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width - pad}" y="{pad - 10}" text-anchor="end" font-size="12">'
        f"logrank p = {p_value:.3g}</text>",
    ]
    for i, (name, pts) in enumerate(curves.items()):
        d, prev = [], 1.0
        for t, s in pts:
            d.append(f"L{sx(t):.2f},{sy(prev):.2f} L{sx(t):.2f},{sy(s):.2f}")
            prev = s
        d.append(f"L{sx(t_max):.2f},{sy(prev):.2f}")
        colour = colours[i % len(colours)]
        parts.append(
            f'<path d="M{sx(0):.2f},{sy(1):.2f} {" ".join(d)}" fill="none" stroke="{colour}"/>'
        )
        parts.append(
            f'<text x="{pad + 8}" y="{height - pad - 8 - 14 * i}" font-size="12" fill="{colour}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_stratify(cfg: RunConfig) -> dict:
    path = Path(cfg.predictions or Path(cfg.output_dir) / "predictions.csv")
    if not path.exists():
        raise DataError(f"predictions file {path} not found; run `eval` first")
    preds = [p for _, p in pl.read_predictions(path)]
    split = stratify_by_median(preds)
    if split.degenerate:
        raise NumericalError("every predicted risk equals the median; no high-risk group")
    groups = {"low_risk": to_labels(split.low), "high_risk": to_labels(split.high)}
    test = logrank_test(groups["low_risk"], groups["high_risk"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "time", "survival", "at_risk", "events"])
    curves = {}
    for name, labels in groups.items():
        km = kaplan_meier(labels)
        curves[name] = list(zip(km.times.tolist(), km.survival.tolist()))
        for row in zip(km.times, km.survival, km.at_risk, km.events):
            w.writerow([name, repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])
    out = Path(cfg.output_dir) / "stratify"
    atomic_write_text(out / "km.csv", buf.getvalue())
    atomic_write_text(out / "km.svg", km_svg(curves, test.p_value))
    result = {
        "chi_square": test.chi_square,
        "p_value": test.p_value,
        "threshold": split.threshold,
        "n_low": len(split.low),
        "n_high": len(split.high),
        "observed_low": test.observed_a,
        "expected_low": test.expected_a,
    }
    atomic_write_text(out / "logrank.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    return {"p_value": test.p_value, "n_low": len(split.low), "n_high": len(split.high)}


def attention_heatmaps(graph, attention: np.ndarray, patch_size: int) -> dict[str, Raster]:
    """One grayscale raster per slide, a pixel per grid cell, scaled to the max weight."""
    top = float(attention.max())
    maps = {}
    for slide in sorted({s for s, _, _ in graph.node_coords}):
        nodes = [(i, x // patch_size, y // patch_size)
                 for i, (s, x, y) in enumerate(graph.node_coords) if s == slide]
        img = np.zeros((max(r for _, _, r in nodes) + 1, max(c for _, c, _ in nodes) + 1), np.uint8)
        for i, c, r in nodes:
            img[r, c] = int(round(255 * attention[i] / top)) if top > 0 else 0
        maps[slide] = Raster(img)
    return maps


def cmd_attention(cfg: RunConfig) -> dict:
    if not cfg.patient:
        raise UsageError("attention needs --patient ID")
    (record,) = _records(cfg)
    fold = cfg.fold
    if fold < 0:
        fold = _assignment(cfg).get(record.patient_id, 0)
    model = pl.load_fold_model(cfg.output_dir, fold)
    with nn.no_grad():
        trace = model.forward(record.graph)
    att = trace.attention.data.ravel()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patch_id", "slide_id", "x", "y", "attention"])
    for pid, (s, x, y), a in zip(record.graph.patch_ids, record.graph.node_coords, att):
        w.writerow([pid, s, x, y, repr(float(a))])
    out = Path(cfg.output_dir) / "attention"
    pid = record.patient_id
    atomic_write_text(out / f"{pid}.csv", buf.getvalue())
    for slide, img in attention_heatmaps(record.graph, att, cfg.patch_size).items():
        write_raster(img, out / f"{pid}.{slide}.pgm")
    return {"patient": pid, "fold": fold, "patches": len(att), "risk": trace.risk}


def cmd_gradcheck(cfg: RunConfig) -> dict:
    report = gradcheck.run_suite()
    for line in report.lines():
        print(line)
    if not report.passed:
        raise NumericalError("gradient check failed")
    return {"max_primitive_error": report.max_primitive_error,
            "max_model_error": report.max_model_error}


def cmd_graph_info(cfg: RunConfig) -> dict:
    info = {}
    for r in _records(cfg):
        g = r.graph
        info[r.patient_id] = {
            "nodes": g.num_nodes,
            "edges": g.num_edges,
            "degree_histogram": {str(k): v for k, v in sorted(degree_histogram(g).items())},
        }
    return info


HANDLERS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "stratify": cmd_stratify,
    "attention": cmd_attention,
    "gradcheck": cmd_gradcheck,
    "graph-info": cmd_graph_info,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        logging.basicConfig(
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = load_config(args.config, parse_overrides(rest))
        result = HANDLERS[args.command](cfg)
    except PatchGraphError as exc:
        print(f"patchgraph: error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
