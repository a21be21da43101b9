"""Harness and CLI behavior: configs, determinism, selection, artifacts."""

import json
import os

import numpy as np
import pytest

from graphshift.autodiff import Tensor
from graphshift.cli import main
from graphshift.errors import ConfigError, TrainingDivergedError
from graphshift.genmetrics import (
    analyze,
    read_feature_csv,
    read_logits_csv,
    report_to_json,
)
from graphshift.graphdata import generate_dataset, load_bundle
from graphshift.harness import (
    aggregate_runs,
    config_from_dict,
    extract_features,
    render_table,
    resolved_config_dict,
    run_seed_grid,
    run_training,
)

TINY = {
    "dataset": {"kind": "motif", "shift": "basis", "n_per_split": 20},
    "backbone": {"kind": "vgin", "num_layers": 2, "hidden_width": 8,
                 "dropout": 0.0},
    "dg": {"algorithm": "erm"},
    "seed": 11,
    "max_epochs": 2,
    "batch_size": 8,
}


def tiny_raw(**overrides):
    raw = json.loads(json.dumps(TINY))
    raw.update(overrides)
    return raw


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("tiny") / "run")
    cfg = config_from_dict(tiny_raw(), out_override=out)
    return run_training(cfg)


# -------------------------------------------------------------- configuration


def test_config_defaults_are_resolved():
    cfg = config_from_dict(tiny_raw())
    resolved = resolved_config_dict(cfg)
    assert resolved["learning_rate"] == 1e-3
    assert resolved["eval_every"] == 1
    assert resolved["dataset"]["seed"] == 11  # inherited from experiment seed
    assert resolved["backbone"]["rw_mode"] == "auto"
    assert resolved["dg"]["penalty_weight"] == 1.0


def test_config_seed_required():
    raw = tiny_raw()
    del raw["seed"]
    with pytest.raises(ConfigError) as err:
        config_from_dict(raw)
    assert err.value.path == "seed"


def test_config_unknown_key_named():
    with pytest.raises(ConfigError) as err:
        config_from_dict(tiny_raw(learning_rte=0.1))
    assert err.value.path == "learning_rte"


def test_config_unknown_dg_key_named():
    with pytest.raises(ConfigError) as err:
        config_from_dict(tiny_raw(dg={"algorithm": "erm", "beta": 2}))
    assert err.value.path == "dg.beta"


def test_config_bad_backbone_enum_named():
    with pytest.raises(ConfigError) as err:
        config_from_dict(tiny_raw(backbone={"kind": "transformer"}))
    assert err.value.path == "backbone.kind"


def test_config_bad_optimizer_values():
    with pytest.raises(ConfigError) as err:
        config_from_dict(tiny_raw(batch_size=0))
    assert err.value.path == "batch_size"
    with pytest.raises(ConfigError) as err:
        config_from_dict(tiny_raw(max_epochs=-1))
    assert err.value.path == "max_epochs"


def test_config_overrides_win():
    cfg = config_from_dict(tiny_raw(), seed_override=99, out_override="/x/y")
    assert cfg.seed == 99
    assert cfg.dataset["seed"] == 99
    assert cfg.out_dir == "/x/y"


# ------------------------------------------------------------------- training


def test_run_artifacts_exist(tiny_run):
    for path in (tiny_run.checkpoint_path, tiny_run.log_path,
                 tiny_run.id_feature_path, tiny_run.ood_feature_path,
                 tiny_run.report_path):
        assert os.path.exists(path)
    assert os.path.exists(os.path.join(tiny_run.out_dir,
                                       "config.resolved.json"))


def test_rerun_is_byte_identical(tmp_path, tiny_run):
    out2 = str(tmp_path / "again")
    cfg = config_from_dict(tiny_raw(), out_override=out2)
    again = run_training(cfg)
    for a, b in (
        (tiny_run.report_path, again.report_path),
        (tiny_run.id_feature_path, again.id_feature_path),
        (tiny_run.ood_feature_path, again.ood_feature_path),
        (tiny_run.log_path, again.log_path),
    ):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()


def test_selection_invariant(tiny_run):
    rows = [json.loads(line) for line in open(tiny_run.log_path)]
    accs = [r["id_val_accuracy"] for r in rows if "id_val_accuracy" in r]
    assert tiny_run.best_id_val_accuracy == max(accs)
    with open(tiny_run.checkpoint_path) as fh:
        manifest = json.load(fh)
    assert manifest["id_val_accuracy"] == max(accs)
    # ties keep the earliest epoch
    first_best = min(r["epoch"] for r in rows
                     if r.get("id_val_accuracy") == max(accs))
    assert manifest["epoch"] == first_best == tiny_run.best_epoch


def test_report_recomputable_from_stored_artifacts(tiny_run):
    id_fm = read_feature_csv(tiny_run.id_feature_path)
    ood_fm = read_feature_csv(tiny_run.ood_feature_path)
    _, _, id_logits = read_logits_csv(tiny_run.id_feature_path[:-4]
                                      + ".logits.csv")
    _, _, ood_logits = read_logits_csv(tiny_run.ood_feature_path[:-4]
                                       + ".logits.csv")
    report = analyze(id_fm, ood_fm, id_logits=id_logits,
                     ood_logits=ood_logits)
    with open(tiny_run.report_path) as fh:
        assert fh.read() == report_to_json(report)


def test_zero_epochs_uses_untrained_model(tmp_path):
    raw = tiny_raw(max_epochs=0, dataset={"kind": "motif", "shift": "basis",
                                          "n_per_split": 60})
    cfg = config_from_dict(raw, out_override=str(tmp_path / "zero"))
    artifacts = run_training(cfg)
    assert artifacts.best_epoch == 0
    report = json.loads(open(artifacts.report_path).read())
    # chance level for 3 balanced classes, wide net for sampling noise
    assert 10.0 < report["id_accuracy"] < 60.0


def test_nan_loss_aborts_with_diagnostic(tmp_path, monkeypatch):
    def bad_loss(state, model, output, labels, domain_ids, rng):
        return Tensor(float("nan"))

    monkeypatch.setattr("graphshift.harness.training_loss", bad_loss)
    cfg = config_from_dict(tiny_raw(), out_override=str(tmp_path / "nan"))
    with pytest.raises(TrainingDivergedError) as err:
        run_training(cfg)
    assert "epoch 1" in str(err.value)


def test_resolved_config_written(tiny_run):
    with open(os.path.join(tiny_run.out_dir, "config.resolved.json")) as fh:
        resolved = json.load(fh)
    # no hidden defaults: the dump carries every effective value
    assert resolved["weight_decay"] == 0.0
    assert resolved["backbone"]["num_heads"] == 4
    assert resolved["dg"]["algorithm"] == "erm"


# ----------------------------------------------------------------- extraction


def test_extract_features_row_count_and_order(tiny_run):
    from graphshift.backbones import load_checkpoint

    model, _ = load_checkpoint(tiny_run.checkpoint_path)
    bundle = generate_dataset(json.loads(open(os.path.join(
        tiny_run.out_dir, "config.resolved.json")).read())["dataset"])
    fm, logits = extract_features(model, bundle.id_test, "id_test")
    assert fm.rows.shape[0] == len(bundle.id_test) == logits.shape[0]
    np.testing.assert_array_equal(fm.labels,
                                  [g.label for g in bundle.id_test])


def test_extract_features_repeatable(tiny_run):
    from graphshift.backbones import load_checkpoint

    model, _ = load_checkpoint(tiny_run.checkpoint_path)
    bundle = generate_dataset(json.loads(open(os.path.join(
        tiny_run.out_dir, "config.resolved.json")).read())["dataset"])
    fm1, lg1 = extract_features(model, bundle.id_test, "id_test")
    fm2, lg2 = extract_features(model, bundle.id_test, "id_test")
    np.testing.assert_array_equal(fm1.rows, fm2.rows)
    np.testing.assert_array_equal(lg1, lg2)


def test_extract_features_duplicated_graph(tiny_run):
    from graphshift.backbones import load_checkpoint

    model, _ = load_checkpoint(tiny_run.checkpoint_path)
    bundle = generate_dataset(json.loads(open(os.path.join(
        tiny_run.out_dir, "config.resolved.json")).read())["dataset"])
    g = bundle.id_test[0]
    fm, _ = extract_features(model, [g, g], "id_test")
    np.testing.assert_allclose(fm.rows[0], fm.rows[1], atol=1e-12)


# ------------------------------------------------------------------ seed grid


def test_seed_grid_sequential_vs_parallel(tmp_path):
    raw = tiny_raw(max_epochs=1, dataset={"kind": "motif", "shift": "basis",
                                          "n_per_split": 12})
    seq_dirs = run_seed_grid(raw, [1, 2], str(tmp_path / "seq"), parallel=1)
    par_dirs = run_seed_grid(raw, [1, 2], str(tmp_path / "par"), parallel=2)
    assert len(seq_dirs) == len(par_dirs) == 2
    for a, b in zip(seq_dirs, par_dirs):
        with open(os.path.join(a, "report.json"), "rb") as fa, \
             open(os.path.join(b, "report.json"), "rb") as fb:
            assert fa.read() == fb.read()


def test_seed_grid_seeds_differ(tmp_path):
    raw = tiny_raw(max_epochs=1, dataset={"kind": "motif", "shift": "basis",
                                          "n_per_split": 12})
    dirs = run_seed_grid(raw, [5, 6], str(tmp_path / "grid"))
    reports = [open(os.path.join(d, "report.json")).read() for d in dirs]
    assert reports[0] != reports[1]


# ---------------------------------------------------------------- aggregation


def fake_run_dir(tmp_path, name, algo, kind, report_fields):
    d = tmp_path / name
    d.mkdir()
    base = {"id_accuracy": None, "ood_accuracy": None, "gap": None,
            "silhouette": None, "mmd_squared": None}
    base.update(report_fields)
    (d / "report.json").write_text(json.dumps(base))
    (d / "config.resolved.json").write_text(json.dumps(
        {"dg": {"algorithm": algo}, "backbone": {"kind": kind}}))
    return str(d)


def test_aggregate_runs_means(tmp_path):
    d1 = fake_run_dir(tmp_path, "a", "erm", "gps",
                      {"ood_accuracy": 80.0, "gap": 10.0, "mmd_squared": 0.2})
    d2 = fake_run_dir(tmp_path, "b", "erm", "gps",
                      {"ood_accuracy": 90.0, "gap": 20.0, "mmd_squared": 0.4})
    d3 = fake_run_dir(tmp_path, "c", "irm", "vgin", {"ood_accuracy": 50.0})
    rows = aggregate_runs([d1, d2, d3])
    assert len(rows) == 2
    erm = next(r for r in rows if r["algorithm"] == "erm")
    assert erm["n_runs"] == 2
    assert erm["ood_accuracy"] == 85.0
    assert erm["gap"] == 15.0
    assert abs(erm["mmd_squared"] - 0.3) < 1e-12
    assert erm["silhouette"] is None  # absent everywhere stays absent


def test_render_table_layout(tmp_path):
    d = fake_run_dir(tmp_path, "a", "erm", "gps", {"ood_accuracy": 80.0})
    text = render_table(aggregate_runs([d]))
    lines = text.splitlines()
    assert lines[0].startswith("algorithm")
    assert "n/a" in lines[2]
    assert "80.0000" in lines[2]


# ----------------------------------------------------------------------- cli


def write_config(tmp_path, raw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return str(path)


def test_cli_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as err:
        main(["train", "--help"])
    assert err.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_cli_unknown_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as err:
        main(["train", "--nope"])
    assert err.value.code == 2


def test_cli_invalid_enum_names_key(tmp_path, capsys):
    cfg = write_config(tmp_path, tiny_raw(dg={"algorithm": "sgd"}))
    code = main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 2
    assert "dg.algorithm" in capsys.readouterr().err


def test_cli_unreadable_config(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "missing.json")])
    assert code == 1
    assert "missing.json" in capsys.readouterr().err


def test_cli_generate_roundtrips(tmp_path, capsys):
    cfg = write_config(tmp_path, tiny_raw())
    out = str(tmp_path / "data")
    assert main(["generate", "--config", cfg, "--out", out]) == 0
    bundle = load_bundle(os.path.join(out, "dataset.jsonl"))
    assert len(bundle.train) == 20
    assert "dataset.jsonl" in capsys.readouterr().out


def test_cli_analyze_matches_run_report(tiny_run, tmp_path, capsys):
    out = str(tmp_path / "an")
    code = main(["analyze", tiny_run.id_feature_path,
                 tiny_run.ood_feature_path, "--out", out])
    assert code == 0
    with open(os.path.join(out, "report.json"), "rb") as fa, \
         open(tiny_run.report_path, "rb") as fb:
        assert fa.read() == fb.read()


def test_cli_analyze_bad_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("split,label,f0\nid_test,0,oops\n")
    code = main(["analyze", str(bad), str(bad)])
    assert code == 1
    assert "bad.csv" in capsys.readouterr().err


def test_cli_project_writes_coords(tiny_run, tmp_path, capsys):
    out = str(tmp_path / "proj")
    assert main(["project", tiny_run.id_feature_path, "--out", out]) == 0
    path = os.path.join(out, "id_test.coords.csv")
    with open(path) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "split,label,p0,p1"
    assert len(lines) - 1 == read_feature_csv(
        tiny_run.id_feature_path).rows.shape[0]


def test_cli_report_prints_table(tiny_run, capsys):
    assert main(["report", tiny_run.out_dir]) == 0
    out = capsys.readouterr().out
    assert "algorithm" in out and "erm" in out


def test_cli_out_env_var(tiny_run, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GRAPHSHIFT_OUT", str(tmp_path / "envout"))
    assert main(["analyze", tiny_run.id_feature_path,
                 tiny_run.ood_feature_path]) == 0
    assert os.path.exists(tmp_path / "envout" / "report.json")
