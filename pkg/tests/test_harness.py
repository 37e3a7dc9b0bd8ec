import json
import logging
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from gradclust import config as cfgmod
from gradclust.cli import EXIT_CONFIG, EXIT_NUMERIC, main
from gradclust.config import ConfigError, ExperimentConfig
from gradclust.data import gen_two_blobs
from gradclust.harness import (OUT_ENV, SWEEP_COLUMNS, SweepSpec, demo_fig1, emit_plots, run_sweep,
                               run_trajectory)
from gradclust.metrics import ReportRow, aggregate_tail, format_rows
from gradclust.model import LayerSpec, Model, per_example_gradients
from gradclust.numerics import NumericalError, RngStream

SVG = "{http://www.w3.org/2000/svg}"


def quick(**changes):
    base = {"trainer.steps": 200, "schedule.log_every": 50, "schedule.refit_every": 100, "schedule.draws": 20}
    base.update(changes)
    return cfgmod.override(ExperimentConfig().validate(), **base)


DIVERGENT = {"trainer.lr": 10.0, "trainer.weight_decay": 1.0, "trainer.steps": 400}


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError, match="unknown keys"):
        cfgmod.from_dict({"trainer": {"lr": 0.1, "lrr": 1}})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"estimators": ["sgb", "magic"]})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"schedule": {"n_clusters": 10**6}})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"trainer": {"batch_size": 150}})  # sg2b needs 2B <= N
    with pytest.raises(ConfigError):
        cfgmod.override(ExperimentConfig(), **{"trainer.nope": 1})


def test_config_file_round_trip(tmp_path):
    cfg = quick(seed=7)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfgmod.to_dict(cfg)))
    assert cfgmod.load(p) == cfg
    assert cfg.n_clusters == cfg.trainer.batch_size


def test_full_gradient_roster_reports_zero_variance():
    res = run_trajectory(quick(estimators=["full"]))
    assert res.rows and all(r.avg_var == 0.0 and r.norm_var == 0.0 for r in res.rows)


def test_row_count_matches_schedule():
    for steps, every in ((200, 50), (230, 50), (120, 7)):
        cfg = quick(**{"trainer.steps": steps, "schedule.log_every": every})
        res = run_trajectory(cfg)
        assert len(res.rows) == (steps // every) * len(cfg.estimators)


def test_e_g2_is_shared_across_estimators():
    res = run_trajectory(quick())
    for step in {r.step for r in res.rows}:
        assert len({r.e_g2 for r in res.rows if r.step == step}) == 1


def test_runs_are_byte_identical(tmp_path):
    run_trajectory(quick(), tmp_path / "a")
    run_trajectory(quick(), tmp_path / "b")
    for name in ("reports.csv", "config.json", "trajectory.json", "plots/avg_var.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert sorted(p.name for p in (tmp_path / "a" / "clusters").iterdir()) == ["step0000050.json",
                                                                               "step0000100.json",
                                                                               "step0000200.json"]


def test_estimator_numbers_do_not_depend_on_roster():
    full = run_trajectory(quick())
    part = run_trajectory(quick(estimators=["gc", "sgb"]))
    for name in ("sgb", "gc"):
        assert np.array_equal(full.series(name), part.series(name))


def test_cluster_export_contents(tmp_path):
    run_trajectory(quick(), tmp_path)
    doc = json.loads((tmp_path / "clusters" / "step0000100.json").read_text())
    assert len(doc["assignments"]) == 200 and sum(doc["sizes"]) == 200
    # initial objective followed by one entry per round
    assert len(doc["trace"]) == 1 + 10 and doc["trace"][0] == doc["initial_objective"]
    assert doc["objective"] <= doc["initial_objective"]


def test_gc_beats_sgb_after_refit_with_heavy_duplication():
    base = cfgmod.override(ExperimentConfig().validate(),
                           **{"dataset.duplicates": {"n_distinct": 5, "fraction": 0.9}})
    wins = total = 0
    for seed in range(5):
        for snap in run_trajectory(cfgmod.override(base, seed=seed)).snapshots:
            if snap.refit:
                total += 1
                wins += snap.avg_var["gc"] < snap.avg_var["sgb"]
    assert wins >= 0.95 * total


def test_divergence_leaves_failure_marker(tmp_path):
    with pytest.raises(NumericalError):
        run_trajectory(quick(**DIVERGENT), tmp_path)
    assert "non-finite" in (tmp_path / "FAILED").read_text()
    assert (tmp_path / "reports.csv").exists() and (tmp_path / "config.json").exists()


def test_single_point_sweep_equals_trajectory_aggregate(tmp_path):
    spec = SweepSpec(quick(), seeds=(3,))
    res = run_sweep(spec, out_dir=tmp_path)
    traj = run_trajectory(cfgmod.override(quick(), seed=3))
    for name in spec.base.estimators:
        mean, mx = aggregate_tail(traj.series(name), 0.7)
        assert res.value(name) == mean and res.value(name, "max") == mx
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS) and len(lines) == 1 + 4 * 2


def test_sweep_marks_failed_points_and_continues():
    spec = SweepSpec(quick(**DIVERGENT), lr=(0.01, 10.0), seeds=(0, 1))
    rows = run_sweep(spec).table()
    status = {r["lr"]: r["status"] for r in rows}
    assert status == {0.01: "ok", 10.0: "failed"}
    assert all(np.isnan(r["avg_var"]) for r in rows if r["lr"] == 10.0)
    assert all(r["seeds"] == 2 for r in rows if r["lr"] == 0.01)


def test_sweep_spec_from_dict():
    spec = SweepSpec.from_dict({"base": {"trainer": {"steps": 100}}, "axes": {"overparam": [0.5, 2], "seeds": [0, 1]}})
    assert len(spec.points()) == 2 and spec.seeds == (0, 1)
    assert spec.config_for(2, None, None, 1).dataset.n_train == 100
    for bad in ({"axes": {"width": [1]}}, {"axes": {"lr": []}}, {"grid": 1}):
        with pytest.raises(ConfigError):
            SweepSpec.from_dict(bad)


def test_demo_margin_points_share_a_cluster():
    res = demo_fig1(steps=3)
    d = gen_two_blobs(20, 3.0, 4, RngStream(0).child("blobs"))
    assert len(res.margin) == 4
    for step in range(3):
        m = Model((LayerSpec.fc(2, 1, "identity", bias=False),), np.array(res.weights[step]), "logistic")
        g = per_example_gradients(m, d.features[res.margin], d.labels[res.margin])
        assert np.max(np.linalg.norm(g[:, None] - g[None], axis=2)) < 1e-6
        assert len({res.assignments[step][i] for i in res.margin}) == 1


def test_demo_single_cluster_draws_one_color():
    res = demo_fig1(K=1, steps=2)
    for step in range(2):
        assert set(res.assignments[step]) == {0}
        root = ET.fromstring(res.svgs[step])
        assert len(root.findall(f"{SVG}polyline[@class='predicted']")) == 1


def test_demo_k1_predicted_weights_equal_gd_weights(monkeypatch):
    import gradclust.harness as h

    seen = []
    real = h.cluster_scatter

    def spy(points, labels, assignments, boundary, predicted, lr, step):
        seen.append(np.array(predicted[0]))
        return real(points, labels, assignments, boundary, predicted, lr, step)

    monkeypatch.setattr(h, "cluster_scatter", spy)
    res = demo_fig1(K=1, steps=3, lr=0.5)
    for step in range(2):
        assert np.allclose(seen[step], res.weights[step + 1], rtol=0, atol=1e-12)


def test_demo_svg_is_well_formed(tmp_path):
    res = demo_fig1(K=4, steps=2, lr=0.25, out_dir=tmp_path)
    for step, svg in enumerate(res.svgs):
        root = ET.parse(tmp_path / f"fig1_step{step}.svg").getroot()
        assert len(root.findall(f"{SVG}polyline")) == 1 + 4
        meta = json.loads(root.find(f"{SVG}metadata").text)
        assert meta["lr"] == 0.25 and meta["step"] == step
    trace = json.loads((tmp_path / "assignments.json").read_text())
    assert trace["lr"] == 0.25 and len(trace["assignments"]) == 2


def write_rows(path, rows):
    path.write_text(format_rows(rows))
    return path


def test_plots_are_deterministic_and_skip_empty_series(tmp_path, caplog):
    rows = [ReportRow(50 * i, e, v, 1.0, v, 10) for i in range(1, 8)
            for e, v in (("sgb", 10.0 ** -i), ("full", 0.0))]
    csv = write_rows(tmp_path / "r.csv", rows)
    with caplog.at_level(logging.WARNING):
        a = emit_plots([csv], tmp_path / "a")
    b = emit_plots([csv], tmp_path / "b")
    assert [p.name for p in a] == ["avg_var.svg", "norm_var.svg"]
    assert a[0].read_bytes() == b[0].read_bytes()
    assert "full" in caplog.text
    root = ET.parse(a[0]).getroot()
    assert [p.get("data-name") for p in root.findall(f"{SVG}polyline")] == ["sgb"]

    only_zero = write_rows(tmp_path / "z.csv", [r for r in rows if r.estimator == "full"])
    assert emit_plots([only_zero], tmp_path / "c") == []


def test_plot_ticks_sit_on_decades(tmp_path):
    rows = [ReportRow(50 * i, "sgb", v, 1.0, v, 10) for i, v in enumerate(np.logspace(-8, -2, 7), 1)]
    out = emit_plots([write_rows(tmp_path / "r.csv", rows)], tmp_path, window=1)
    labels = [t.text for t in ET.parse(out[0]).getroot().findall(f"{SVG}text") if t.text.startswith("1e")]
    assert labels == [f"1e{e}" for e in range(-8, -1)]


def test_plot_rejects_malformed_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("step,estimator,avg_var,e_g2,norm_var,draws\n50,sgb,1,1,1,10\n100,sgb\n")
    with pytest.raises(Exception, match="row 3"):
        emit_plots([bad], tmp_path)


def write_config(path, cfg):
    path.write_text(json.dumps(cfgmod.to_dict(cfg)))
    return str(path)


def test_cli_run_and_plot(tmp_path):
    conf = write_config(tmp_path / "c.json", quick())
    assert main(["run", "--config", conf, "--seed", "2", "--out", str(tmp_path / "r")]) == 0
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["seed"] == 2 and (tmp_path / "r" / "run.log").exists()
    assert main(["plot", str(tmp_path / "r" / "reports.csv"), "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "avg_var.svg").exists()


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"trainer": {"learning_rate": 0.1}}')
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["sweep", "--out", str(tmp_path / "y")]) == EXIT_CONFIG
    conf = write_config(tmp_path / "d.json", quick(**DIVERGENT))
    assert main(["run", "--config", conf, "--out", str(tmp_path / "z")]) == EXIT_NUMERIC
    assert (tmp_path / "z" / "FAILED").exists()


def test_cli_default_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    opts = tmp_path / "demo.json"
    opts.write_text('{"steps": 1, "K": 2}')
    assert main(["demo-fig1", "--config", str(opts)]) == 0
    assert (tmp_path / "demo-fig1" / "fig1_step0.svg").exists()
    assert main(["gen-data", "--seed", "4"]) == 0
    assert (tmp_path / "data-seed4" / "train.gcds").exists()


def test_cli_sweep(tmp_path):
    doc = {"base": cfgmod.to_dict(quick()), "axes": {"overparam": [1, 2], "seeds": [0]}}
    (tmp_path / "s.json").write_text(json.dumps(doc))
    assert main(["sweep", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 4 * 2
    assert (tmp_path / "o" / "plots" / "mean_avg_var.svg").exists()
