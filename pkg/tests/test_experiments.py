import json
from dataclasses import replace

import numpy as np
import pytest

from ddbsense import experiments
from ddbsense.config import AttackerSpec, ExperimentConfig
from ddbsense.experiments import Context, ExperimentReport


def small(**kw):
    base = dict(train_size=1500, test_size=2500, observation_size=1500, comparison_size=100)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def cfg():
    return small()


@pytest.fixture(scope="module")
def ctx(cfg):
    return Context(cfg)


def test_seed_streams():
    a = experiments.derive_seed(0, "train")
    assert a == experiments.derive_seed(0, "train")
    assert a != experiments.derive_seed(0, "test")
    assert a != experiments.derive_seed(1, "train")
    assert experiments.derive_seed(0, "test", 0) != experiments.derive_seed(0, "test", 1)


def test_pipeline_row_contents(cfg, ctx):
    report = experiments.run_pipeline(cfg, ctx)
    (row,) = report.rows
    m = row["metrics"]
    assert 0 <= m["detection_rate"] <= 1 and 0 <= m["false_alarm_rate"] <= 1
    assert 0 <= m["attack_success_rate"] <= 1
    assert m["groups"] == cfg.test_size // cfg.group_size
    assert m["attacked_slots"] == cfg.test_size
    assert 0.99 * cfg.train_size <= m["baseline_size"] <= cfg.train_size
    assert row["config"] == cfg.to_dict() and row["config_hash"] == cfg.hash()
    assert report.meta["config_hash"] == cfg.hash() and report.meta["floor_slack"] == 0.0
    assert "train" in report.timings


def test_zero_ratio_detection_equals_false_alarm(cfg, ctx):
    c = replace(cfg, attacker=replace(cfg.attacker, ratio=0.0))
    m = experiments.run_pipeline(c, ctx).rows[0]["metrics"]
    assert m["detection_rate"] == m["false_alarm_rate"]
    assert m["attacked_slots"] == 0


def test_zero_alpha_gives_zero_rates(cfg, ctx):
    m = experiments.run_pipeline(replace(cfg, alpha=0.0), ctx).rows[0]["metrics"]
    assert m["detection_rate"] == 0.0 and m["false_alarm_rate"] == 0.0


def test_sweeps_cover_their_grids(cfg, ctx):
    occ = experiments.run_occurrence_sweep(cfg, ratios=(0.2, 0.6), sizes=(10, 50), ctx=ctx)
    got = {(r["params"]["group_size"], r["params"]["ratio"]) for r in occ.rows}
    assert got == {(10, 0.2), (10, 0.6), (50, 0.2), (50, 0.6)}
    gs = experiments.run_group_size_sweep(cfg, sizes=(5, 25), ctx=ctx)
    assert [r["params"]["group_size"] for r in gs.rows] == [5, 25]
    mc = experiments.run_malicious_count_sweep(cfg, m_values=(3, 10), ctx=ctx)
    assert [r["params"]["m"] for r in mc.rows] == [3, 10]
    al = experiments.run_alpha_sweep(cfg, alphas=(0.001, 0.1), ctx=ctx)
    assert [r["params"]["alpha"] for r in al.rows] == [0.001, 0.1]
    for report in (occ, gs, mc, al):
        for row in report.rows:
            rebuilt = ExperimentConfig(scenario=cfg.scenario, attacker=AttackerSpec(**row["config"]["attacker"]),
                                       **{k: v for k, v in row["config"].items() if k not in ("scenario", "attacker")})
            assert rebuilt.hash() == row["config_hash"]


def test_attacked_sets_nest_across_ratios(cfg, ctx):
    rows = experiments.run_occurrence_sweep(cfg, ratios=(0.1, 0.5, 1.0), sizes=(25,), ctx=ctx).rows
    slots = [r["metrics"]["attacked_slots"] for r in rows]
    assert slots == sorted(slots) and slots[-1] == cfg.test_size


def test_false_alarm_within_bound_under_alpha(cfg, ctx):
    rows = experiments.run_alpha_sweep(cfg, ctx=ctx).rows
    fa = [r["metrics"]["false_alarm_rate"] for r in rows]
    assert experiments.monotone(fa, tol=0.0, inversions=0)


def test_location_sets():
    cfg = ExperimentConfig()
    sets = experiments.default_location_sets(cfg)
    assert len(sets) == 5 and all(len(s) == 4 for s in sets)
    experiments.validate_location_sets(sets, 20)
    assert sets == experiments.default_location_sets(cfg)
    with pytest.raises(ValueError, match="overlaps"):
        experiments.validate_location_sets([(1, 2), (2, 3)], 20)
    with pytest.raises(ValueError):
        experiments.validate_location_sets([(0, 1)], 20)
    with pytest.raises(ValueError):
        experiments.default_location_sets(cfg, count=6)


def test_location_sweep(cfg, ctx):
    report = experiments.run_location_sweep(cfg, [(1, 2, 3, 4), (9, 10, 11, 12)], ctx=ctx)
    assert [r["params"]["location_group"] for r in report.rows] == [1, 2]
    assert [r["params"]["ratio"] for r in report.rows] == [experiments.LOCATION_RATIO] * 2
    assert "spearman_success_detection" in report.meta


def test_method_comparison_counters(cfg, ctx):
    report = experiments.run_method_comparison(cfg, methods=("lrt", "deepfool"), ctx=ctx)
    rows = {r["params"]["ddb_method"]: r["metrics"] for r in report.rows}
    assert rows["lrt"]["gradient_evals_per_iteration"] == 0
    assert rows["lrt"]["forward_evals_per_iteration"] >= 1
    assert rows["deepfool"]["gradient_evals_per_iteration"] >= 1
    assert "seconds" in report.timings["methods"]["lrt"]
    assert "seconds" not in json.dumps(report.to_dict())


def test_unknown_sweep(cfg):
    with pytest.raises(ValueError):
        experiments.run_sweep("nope", cfg)


def test_scaled_meta():
    cfg = small().scaled(0.5)
    report = experiments.run_pipeline(cfg)
    assert report.meta["floor_slack"] == 0.05 and report.meta["scale"] == 0.5


def test_reports_are_deterministic(cfg):
    a = experiments.run_pipeline(cfg)
    b = experiments.run_pipeline(cfg)
    assert experiments.report_json(a) == experiments.report_json(b)
    assert experiments.report_csv(a) == experiments.report_csv(b)


def test_csv_round_trip(tmp_path, cfg, ctx):
    report = experiments.run_alpha_sweep(cfg, alphas=(0.01, 0.05), ctx=ctx)
    path = tmp_path / "r.csv"
    experiments.emit_report(report, "csv", path)
    rows = experiments.read_report_csv(path)
    n_metrics = len(report.rows[0]["metrics"])
    assert len(rows) == 2 * n_metrics
    header = list(rows[0])
    assert header[:3] == ["sweep", "point", "config_hash"] and header[-2:] == ["metric", "value"]
    assert set(report.rows[0]["params"]) <= set(header)
    got = {(r["point"], r["metric"]): r["value"] for r in rows}
    assert float(got[("1", "false_alarm_rate")]) == report.rows[1]["metrics"]["false_alarm_rate"]
    first = path.read_bytes()
    experiments.emit_report(report, "csv", path)
    assert path.read_bytes() == first


def test_json_round_trip(tmp_path, cfg, ctx):
    report = experiments.run_pipeline(cfg, ctx)
    path = tmp_path / "r.json"
    experiments.emit_report(report, "json", path)
    back = json.loads(path.read_text())
    assert back["rows"] == json.loads(json.dumps(report.rows))
    assert back["meta"]["config_hash"] == cfg.hash()


def test_monotone_helper():
    assert experiments.monotone([0.1, 0.2, 0.3])
    assert experiments.monotone([0.1, 0.3, 0.29, 0.5])
    assert not experiments.monotone([0.1, 0.3, 0.2])
    assert not experiments.monotone([0.3, 0.29, 0.4, 0.39])
    assert experiments.monotone([0.5, 0.5])


def fake(sweep, rows, **meta):
    return ExperimentReport(sweep, [{"params": p, "metrics": m} for p, m in rows], meta)


def test_check_report_pipeline_and_slack():
    rep = fake("pipeline", [({}, {"detection_rate": 0.87, "false_alarm_rate": 0.01})])
    assert not all(ok for _, ok, _ in experiments.check_report(rep))
    rep.meta["floor_slack"] = 0.05
    assert all(ok for _, ok, _ in experiments.check_report(rep))


def test_check_report_alpha():
    rows = [({"alpha": a}, {"detection_rate": d, "false_alarm_rate": f})
            for a, d, f in [(0.001, 0.9, 0.001), (0.01, 0.95, 0.01), (0.1, 0.99, 0.08)]]
    assert all(ok for _, ok, _ in experiments.check_report(fake("alpha", rows)))
    rows[0] = ({"alpha": 0.001}, {"detection_rate": 0.9, "false_alarm_rate": 0.02})
    assert not all(ok for _, ok, _ in experiments.check_report(fake("alpha", rows)))
