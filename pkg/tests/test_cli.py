import json

import numpy as np
import pytest

from patchgraph import gradcheck, nn_core as nn
from patchgraph.cli import pipeline as pl
from patchgraph.cli.config import RunConfig, load_config, parse_overrides
from patchgraph.cli.main import main
from patchgraph.errors import ConfigError, DataError, UsageError
from patchgraph.ingest.formats import SurvivalLabel
from patchgraph.ingest.synthetic import SyntheticSpec, generate_synthetic_cohort
from patchgraph.patch_gcn import GcnModel

TINY = dict(d_model=8, d_attn=8, n_layers=2, epochs=2, accumulation_steps=4, folds=2)


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic_cohort(SyntheticSpec(n_patients=24, grid_side=6, feature_dim=8, seed=2))


@pytest.fixture(scope="module")
def records(cohort):
    return pl.records_from_synthetic(cohort, RunConfig(**TINY))


# ---------------------------------------------------------------- config

def test_defaults():
    cfg = RunConfig()
    assert (cfg.k, cfg.n_layers, cfg.d_model, cfg.n_bins) == (8, 4, 128, 4)
    assert (cfg.learning_rate, cfg.weight_decay, cfg.epochs) == (2e-4, 1e-5, 20)
    assert (cfg.accumulation_steps, cfg.folds) == (32, 5)


@pytest.mark.parametrize("field,value", [("folds", 1), ("accumulation_steps", 0), ("k", 0), ("workers", 0)])
def test_config_invariants_name_the_field(field, value):
    with pytest.raises(ConfigError, match=field):
        RunConfig(**{field: value})


def test_overrides():
    got = parse_overrides(["--learning-rate", "1e-3", "--zero_layers=true", "--folds", "3"])
    assert got == {"learning_rate": 1e-3, "zero_layers": True, "folds": 3}
    with pytest.raises(UsageError, match="--bogus"):
        parse_overrides(["--bogus", "1"])
    with pytest.raises(UsageError):
        parse_overrides(["--folds"])
    with pytest.raises(ConfigError, match="folds"):
        parse_overrides(["--folds", "many"])


def test_load_config_file(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"seed": 4, "epochs": 3}))
    cfg = load_config(tmp_path / "run.json", {"epochs": 5})
    assert (cfg.seed, cfg.epochs) == (4, 5)
    (tmp_path / "bad.json").write_text(json.dumps({"lr": 1}))
    with pytest.raises(ConfigError, match="lr"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


# ---------------------------------------------------------------- folds

def test_make_folds_partition():
    ids = [f"p{i}" for i in range(10)]
    a = pl.make_folds(ids, 5, 0)
    assert sorted(a) == sorted(ids)
    assert np.bincount(list(a.values())).tolist() == [2] * 5
    assert a == pl.make_folds(ids, 5, 0)
    assert a != pl.make_folds(ids, 5, 1)


@pytest.mark.parametrize("n", [5, 11, 23, 200])
def test_fold_sizes_differ_by_at_most_one(n):
    sizes = np.bincount(list(pl.make_folds([str(i) for i in range(n)], 5, 3).values()))
    assert sizes.max() - sizes.min() <= 1


def test_make_folds_errors():
    with pytest.raises(ConfigError):
        pl.make_folds(["a", "b"], 5, 0)
    with pytest.raises(DataError):
        pl.make_folds(["a", "a", "b"], 2, 0)


# ---------------------------------------------------------------- training

def test_zero_learning_rate_keeps_parameters(records):
    cfg = RunConfig(**{**TINY, "learning_rate": 0.0, "weight_decay": 0.0})
    trained = pl.train_fold(cfg, records, 0)
    fresh = GcnModel(trained.model.config, seed=trained.model.seed)
    for k, v in fresh.state_dict().items():
        assert np.array_equal(v, trained.model.params[k].data)


def test_training_is_deterministic(records):
    cfg = RunConfig(**TINY)
    a, b = pl.train_fold(cfg, records, 1), pl.train_fold(cfg, records, 1)
    assert a.losses == b.losses
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)


def test_all_censored_fold_is_config_error(records):
    censored = [pl.PatientRecord(SurvivalLabel(r.patient_id, r.label.time, True), r.graph) for r in records]
    with pytest.raises(ConfigError, match="censored"):
        pl.train_fold(RunConfig(**TINY), censored, 0)


def test_first_update_equals_summed_gradient_step(records):
    """One window of 32 single-patient passes equals one step on the summed loss."""
    train = records[:20]
    cfg = RunConfig(**{**TINY, "epochs": 1, "accumulation_steps": 32})  # 20 < 32: one flush at epoch end
    trained = pl.train_fold(cfg, train, 0)

    model = GcnModel(trained.model.config, seed=trained.model.seed)
    bins = pl.BinBoundaries.from_training([r.label for r in train], cfg.n_bins)
    binned = pl.assign_bins([r.label for r in train], bins)
    total = None
    for rec, lab in zip(train, binned):
        loss = pl.survival_nll(model.forward(rec.graph).hazards, lab.bin, lab.censored)
        total = loss if total is None else nn.add(total, loss)
    total.backward()
    nn.adam_step(model.parameters(), nn.AdamState(cfg.learning_rate, cfg.weight_decay), len(train))
    for k, p in model.params.items():
        assert np.abs(p.data - trained.model.params[k].data).max() < 1e-12


def test_zero_layer_ablation_is_edge_invariant(records):
    cfg = RunConfig(**{**TINY, "zero_layers": True})
    model = pl.train_fold(cfg, records, 0).model
    rng = np.random.default_rng(0)
    for rec in records[:5]:
        g = rec.graph
        shuffled = np.sort(rng.permutation(g.num_nodes)[g.edges], axis=1)
        shuffled = np.unique(shuffled[shuffled[:, 0] != shuffled[:, 1]], axis=0)
        assert abs(model.forward(g).risk - model.forward(g.with_edges(shuffled)).risk) < 1e-9


def test_untrained_model_is_near_chance():
    cohort = generate_synthetic_cohort(SyntheticSpec(n_patients=60, grid_side=6, feature_dim=8, seed=5))
    cfg = RunConfig(d_model=16, d_attn=16)
    recs = pl.records_from_synthetic(cohort, cfg)
    cs = []
    for seed in range(20):
        model = GcnModel(pl.model_config(cfg, 8), seed=seed)
        cs.append(pl.evaluate_fold(model, recs).c_index)
    assert abs(np.mean(cs) - 0.5) <= 0.1


def test_predictions_and_metrics_schema(records, tmp_path):
    cfg = RunConfig(**TINY)
    assignment = pl.make_folds([r.patient_id for r in records], cfg.folds, cfg.seed)
    results = [res for _, res in pl.run_folds(cfg, records, assignment)]
    pl.write_predictions(results, tmp_path / "p.csv")
    rows = pl.read_predictions(tmp_path / "p.csv")
    assert len(rows) == len(records)
    assert sum(len(r.predictions) for r in results) == len(records)
    report = pl.metrics_report(results, cfg)
    assert set(report) == {"per_fold", "mean_c_index", "std_c_index", "config_echo", "seed"}
    assert [set(f) for f in report["per_fold"]] == [{"fold", "c_index", "n_val"}] * 2
    assert report["std_c_index"] == pytest.approx(np.std([r.c_index for r in results]))


# ---------------------------------------------------------------- command line

def _run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "run"
    common = ["--data_dir", data, "--output_dir", out, "--quiet"]
    opts = [x for k, v in TINY.items() for x in (f"--{k}", v)]
    assert _run("synth", *common, "--n_patients", 20, "--grid_side", 5, "--feature_dim", 8) == 0
    assert _run("train", *common, *opts) == 0
    assert _run("eval", *common, *opts) == 0
    return root, common, opts


def test_cli_train_eval_outputs(cli_run):
    root, _, _ = cli_run
    metrics = json.loads((root / "run" / "metrics.json").read_text())
    assert len(metrics["per_fold"]) == 2
    assert {"mean_c_index", "std_c_index"} <= set(metrics)
    lines = (root / "run" / "predictions.csv").read_text().splitlines()
    assert lines[0] == "patient_id,fold,risk,time,censored" and len(lines) == 21


def test_cli_stratify_and_attention(cli_run):
    root, common, opts = cli_run
    assert _run("stratify", *common) == 0
    res = json.loads((root / "run" / "stratify" / "logrank.json").read_text())
    assert 0 < res["p_value"] <= 1 and res["n_low"] + res["n_high"] == 20
    assert (root / "run" / "stratify" / "km.svg").read_text().startswith("<svg")
    assert _run("attention", *common, "--patient", "P0002") == 0
    rows = (root / "run" / "attention" / "P0002.csv").read_text().splitlines()
    assert rows[0] == "patch_id,slide_id,x,y,attention" and len(rows) == 26
    assert sum(float(r.split(",")[-1]) for r in rows[1:]) == pytest.approx(1.0)
    pgm = (root / "run" / "attention" / "P0002.P0002-S0.pgm").read_bytes()
    assert pgm.startswith(b"P5\n5 5\n255\n") and max(pgm[-25:]) == 255


def test_cli_graph_tools(cli_run, capsys):
    root, common, _ = cli_run
    assert _run("graph-info", *common, "--patient", "P0001") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["P0001"]["nodes"] == 25
    assert _run("build-graph", *common) == 0
    assert (root / "data" / "graphs" / "P0001.edges.csv").exists()


def test_cli_exit_codes(cli_run, tmp_path):
    _, common, _ = cli_run
    assert _run("train", "--nope", 1) == 1
    assert _run("train", "--folds", 1) == 1
    assert _run("frobnicate") == 1
    assert _run("eval", "--data_dir", tmp_path / "nothing") == 2
    assert _run("attention", *common) == 1
    assert _run("segment", "--raster", tmp_path / "none.pgm") == 2


def test_cli_stratify_degenerate_is_numerical(tmp_path):
    (tmp_path / "p.csv").write_text("patient_id,fold,risk,time,censored\na,0,1.0,3.0,0\nb,0,1.0,4.0,0\n")
    assert _run("stratify", "--predictions", tmp_path / "p.csv", "--output_dir", tmp_path) == 3


def test_cli_gradcheck_reports(monkeypatch, capsys):
    monkeypatch.setattr(gradcheck, "run_suite", lambda: gradcheck.GradcheckReport({"x": 1e-9}, [1e-8]))
    assert _run("gradcheck") == 0
    assert "PASS" in capsys.readouterr().out
    monkeypatch.setattr(gradcheck, "run_suite", lambda: gradcheck.GradcheckReport({"x": 1e-3}, [1e-8]))
    assert _run("gradcheck") == 3


def test_cli_segment(tmp_path):
    from patchgraph.ingest.raster import Raster, write_raster

    v = np.full((32, 32), 10, np.uint8)
    v[:16, :16] = 200
    write_raster(Raster(v), tmp_path / "s.pgm")
    assert _run("segment", "--raster", tmp_path / "s.pgm", "--output_dir", tmp_path, "--slide_id", "A") == 0
    lines = (tmp_path / "A.coords.csv").read_text().splitlines()
    assert lines[1:] == ["0,A,0,0", "1,A,256,0", "2,A,0,256", "3,A,256,256"]
