import csv
import glob
import math

import numpy as np
import pytest

import oracles
from comma_workbench.errors import ConfigError, ProvenanceError, StatisticsError, UsageError
from comma_workbench.harness.records import RunRecord, harmonic_mean, load_record
from comma_workbench.harness.training import TrainConfig, reference_bank, train
from comma_workbench.objectives import ReferencePromptBank
from comma_workbench.workbench import (
    REPORT_HEADER, AnalysisRow, SweepSpec, analyze, correlation, distance_profile, emit_report, parse_values,
    read_report, read_series, run_sweep, summary_from_records,
)


# --------------------------------------------------------------------------- correlation


def test_correlation_of_affine_relation_is_exactly_one():
    xs = np.random.default_rng(0).normal(size=12)
    assert correlation(xs, 2 * xs + 1) == (1.0, 1.0)
    assert correlation(xs, 0.3 * xs - 7) == (1.0, 1.0)


def test_correlation_of_negation_is_minus_one():
    xs = [0.1, 0.5, 0.2, 0.9]
    assert correlation(xs, [-x for x in xs]) == (-1.0, -1.0)


@pytest.mark.parametrize("seed", range(3))
def test_correlation_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    xs, ys = rng.normal(size=10), rng.normal(size=10)
    p, s = correlation(xs, ys)
    assert p == pytest.approx(oracles.pearson(list(xs), list(ys)), abs=1e-12)
    assert s == pytest.approx(oracles.spearman(list(xs), list(ys)), abs=1e-12)


def test_spearman_with_ties_matches_oracle():
    xs, ys = [1, 2, 2, 3, 5], [3, 1, 4, 1, 5]
    assert correlation(xs, ys)[1] == pytest.approx(oracles.spearman(xs, ys), abs=1e-12)


@pytest.mark.parametrize("xs,ys", [([1, 1, 1], [1, 2, 3]), ([1, 2], [2, 1]), ([1, 2, 3], [1, 2])])
def test_correlation_degenerate(xs, ys):
    with pytest.raises(StatisticsError):
        correlation(xs, ys)


# --------------------------------------------------------------------------- distance profile


def _record_with_prompts(text_prompts, checksum="abc", novel=60.0):
    cfg = TrainConfig(strategy="coop_text" if len(text_prompts) == 1 else "deep_independent", kd=False,
                      prompt_depth=len(text_prompts))
    state = {f"text.{i}": np.asarray(p).tolist() for i, p in enumerate(text_prompts)}
    if cfg.strategy == "deep_independent":
        state.update({f"vision.{i}": np.zeros((len(text_prompts[0]), 32)).tolist() for i in range(len(text_prompts))})
    return RunRecord(config=cfg.as_dict(), seed=0, backbone_checksum=checksum, prompt_checkpoint=state,
                     accuracy={"base": 90.0, "novel": novel, "hm": harmonic_mean(90.0, novel)})


def test_distance_zero_when_prompts_equal_reference():
    refs = [np.linspace(1, 2, 24), np.linspace(-1, 3, 24)]
    bank = ReferencePromptBank(refs, (1,), (1,), "abc")
    rows = distance_profile(_record_with_prompts([np.tile(r, (2, 1)) for r in refs]), bank)
    assert [r.layer for r in rows] == [0, 1]
    assert all(r.distance == pytest.approx(0.0, abs=1e-15) for r in rows)


def test_distance_hand_computed_two_layers():
    rng = np.random.default_rng(1)
    refs = [rng.normal(size=24) for _ in range(2)]
    prompts = [rng.normal(size=(2, 24)) for _ in range(2)]
    bank = ReferencePromptBank(refs, (1,), (1,), "abc")
    rows = distance_profile(_record_with_prompts(prompts, novel=55.0), bank, baseline_novel=70.0)
    for r, p, ref in zip(rows, prompts, refs):
        assert r.distance == pytest.approx(1.0 - oracles.cosine(p.mean(axis=0), ref), abs=1e-12)
        assert r.delta_acc == pytest.approx(15.0, abs=1e-12)


def test_distance_opposite_is_two():
    ref = np.ones(24)
    rows = distance_profile(_record_with_prompts([-np.ones((2, 24))]), ReferencePromptBank([ref], (1,), (1,), "abc"))
    assert rows[0].distance == pytest.approx(2.0, abs=1e-15)


def test_distance_provenance_checked():
    bank = ReferencePromptBank([np.ones(24)], (1,), (1,), "other")
    with pytest.raises(ProvenanceError):
        distance_profile(_record_with_prompts([np.ones((2, 24))]), bank)


def test_analysis_row_range():
    with pytest.raises(StatisticsError):
        AnalysisRow(0, 2.5, 0.0)


# --------------------------------------------------------------------------- sweeps (fast fake runner)


def fake_runner(cfg: TrainConfig) -> RunRecord:
    rng = np.random.default_rng([cfg.seed, int(1000 * cfg.kd_weight), cfg.kd_layers, cfg.prompt_depth])
    base, novel = rng.uniform(50, 100, 2)
    return RunRecord(config=cfg.as_dict(), seed=cfg.seed,
                     accuracy={"base": base, "novel": novel, "hm": harmonic_mean(base, novel)})


def test_lambda_sweep_emits_one_row_per_value(tmp_path):
    spec = SweepSpec("lambda", [0.5, 1.0, 2.0], seeds_per_cell=2)
    result = run_sweep(spec, tmp_path, runner=fake_runner)
    with open(result.summary_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert len(glob.glob(str(tmp_path / "*.json"))) == 6


def test_argmax_matches_manual_scan(tmp_path):
    result = run_sweep(SweepSpec("S", [0, 1, 2, 3], seeds_per_cell=3), tmp_path, runner=fake_runner)
    with open(result.summary_path) as fh:
        rows = list(csv.DictReader(fh))
    manual = max(range(len(rows)), key=lambda i: float(rows[i]["hm_mean"]))
    assert rows[manual]["best"] == "1"
    assert sum(r["best"] == "1" for r in rows) == 1
    assert result.cells[result.best].value == int(rows[manual]["value"])


def test_summary_recomputable_from_records(tmp_path):
    result = run_sweep(SweepSpec("S", [0, 2, 4], seeds_per_cell=3), tmp_path, runner=fake_runner)
    records = [load_record(p) for p in result.record_paths]
    again = summary_from_records(records, "S")
    with open(result.summary_path) as fh:
        for row in csv.DictReader(fh):
            for key in ("base", "novel", "hm"):
                mean, std = again[int(row["value"])][key]
                assert abs(float(row[f"{key}_mean"]) - mean) <= 1e-12
                assert abs(float(row[f"{key}_std"]) - std) <= 1e-12


def test_sweep_survives_failing_cells(tmp_path):
    def flaky(cfg):
        if cfg.kd_layers == 1:
            raise RuntimeError("boom")
        return fake_runner(cfg)

    result = run_sweep(SweepSpec("S", [0, 1, 7, 2]), tmp_path, runner=flaky)
    rows = result.rows()
    assert [r["failed"] for r in rows] == [0, 1, 1, 0]
    assert "boom" in rows[1]["error"] and "7" in rows[2]["error"]
    assert math.isnan(rows[1]["hm_mean"])


def test_sweep_curve_file(tmp_path):
    run_sweep(SweepSpec("S", list(range(7))), tmp_path, runner=fake_runner)
    (label, pts), = read_series(tmp_path / "curve_hm_vs_S.dat")
    assert pts.shape == (7, 4) and pts[:, 0].tolist() == list(range(7))


def test_sweep_spec_validation():
    with pytest.raises(ConfigError):
        SweepSpec("temperature", [1])
    with pytest.raises(ConfigError):
        SweepSpec("S", [])
    with pytest.raises(ConfigError):
        SweepSpec("S", [1], seeds_per_cell=0)
    assert parse_values("λ", "0.5, 1,2") == [0.5, 1.0, 2.0]
    assert parse_values("strategy", "comma,none") == ["comma", "none"]
    with pytest.raises(ConfigError):
        parse_values("J", "x")


# --------------------------------------------------------------------------- reports


def _fake_records(n=5):
    return [fake_runner(TrainConfig(seed=i, kd_layers=i % 3)) for i in range(n)]


def test_report_row_count_and_exact_reload(tmp_path):
    recs = _fake_records()
    paths = emit_report(recs, tmp_path)
    rows = read_report(paths["csv"])
    assert len(rows) == len(recs)
    assert tuple(open(paths["csv"]).readline().strip().split(",")) == REPORT_HEADER
    got = sorted((r["seed"], r["base"], r["novel"], r["hm"]) for r in rows)
    want = sorted((r.seed, r.accuracy["base"], r.accuracy["novel"], r.accuracy["hm"]) for r in recs)
    assert got == want


def test_report_is_order_independent(tmp_path):
    recs = _fake_records()
    a = open(emit_report(recs, tmp_path / "a")["csv"]).read()
    b = open(emit_report(recs[::-1], tmp_path / "b")["csv"]).read()
    assert a == b


def test_report_needs_records(tmp_path):
    with pytest.raises(UsageError):
        emit_report([], tmp_path)


def test_fig3_has_one_series_per_layer(tmp_path):
    analysis = [AnalysisRow(s, 0.1 * s + 0.01 * k, float(k)) for s in range(4) for k in range(3)]
    paths = emit_report(_fake_records(2), tmp_path, analysis=analysis)
    series = read_series(paths["fig3"])
    assert len(series) == 4
    assert all(pts.shape == (3, 2) for _, pts in series)


# --------------------------------------------------------------------------- analysis on real runs


def test_analyze_real_runs(tmp_path):
    records = [train(TrainConfig(seed=s, epochs=1, test_per_class=4, strategy=strat, kd=strat != "none"))[0]
               for s, strat in [(0, "comma"), (1, "comma"), (2, "deep_independent"), (0, "none")]]
    rows, table = analyze(records)
    assert {r.layer for r in rows} == set(range(6))
    assert len(rows) == 3 * 6
    assert all(0.0 <= r.distance <= 2.0 for r in rows)
    assert [t["points"] for t in table] == [3] * 6
    for t in table:
        assert math.isnan(t["pearson"]) or -1.0 <= t["pearson"] <= 1.0


def test_bank_provenance_from_real_run():
    record, model = train(TrainConfig(epochs=0, test_per_class=2))
    bank = reference_bank(model.backbone, model.dataset)
    rows = distance_profile(record, bank)
    assert len(rows) == 6
    np.testing.assert_allclose([r.distance for r in rows], record.prompt_distances, atol=1e-12)
