import json

import pytest

from pvl.harness import config
from pvl.harness.experiments import (
    EXPERIMENTS,
    ExperimentError,
    calibrate_mini2_factor,
    determinism_model,
    exp_gateway,
    exp_mini1,
    exp_mini2,
    exp_model_change,
    exp_plan_persistence,
    exp_prefill_equivalence,
    exp_serving_transfer,
    random_transcript,
    rejudge,
    run_experiment,
    run_suite,
)
from pvl.harness.report import REPORT_SCHEMA, line_chart, scatter_chart
from pvl.model import build_random_model
from pvl.planted import planted_model


def test_thresholds_cover_every_experiment():
    data = config.load_thresholds()
    for section in ("prefill_equivalence", "mini1", "mini2", "gateway", "pca", "streams", "cloud"):
        assert section in data
    with pytest.raises(KeyError):
        config.thresholds_for("nope")
    with pytest.raises(KeyError):
        config.script("nope", planted_model().vocab)


def test_prefill_equivalence_and_perturbed_control():
    ok = exp_prefill_equivalence(1, 1, 32)
    assert ok.passed and ok.metrics["max_abs_diff_parallel"] == 0.0
    bad = exp_prefill_equivalence(1, 1, 32, perturb=True)
    assert not bad.passed and bad.metrics["max_abs_diff_sequential"] > 0
    with pytest.raises(ExperimentError):
        exp_prefill_equivalence(1, 1, 1)


def test_serving_transfer_no_mismatches():
    m = determinism_model(2)
    rep = exp_serving_transfer(m, random_transcript(m, 2, 12), (6, 18), 16)
    assert rep.passed
    assert rep.metrics["mismatches_transfer"] == 0 and rep.metrics["mismatches_prefill"] == 0


def test_serving_transfer_detects_foreign_prefill():
    m = determinism_model(2)
    other = determinism_model(3)
    rep = exp_serving_transfer(m, random_transcript(m, 2, 12), (6,), 16, prefill_model=other)
    assert rep.metrics["mismatches_prefill"] > 0 and not rep.passed


def test_model_change(planted, plan_script):
    alt = planted_model("plan-divergent")
    rep = exp_model_change(planted, alt, plan_script)
    assert rep.metrics["endings_differ"] == 1
    same = exp_model_change(planted, planted, plan_script)
    assert same.metrics["divergence"] == 0.0 and same.metrics["endings_differ"] == 0 and not same.passed
    with pytest.raises(ExperimentError):
        exp_model_change(planted, build_random_model(), plan_script)


def test_mini1(planted, drift, tmp_path):
    rep = exp_mini1(planted, drift, out_dir=tmp_path)
    assert rep.passed
    assert rep.metrics["max_user_delta"] <= 1e-9
    assert rep.metrics["min_capped_assistant_projection"] >= rep.thresholds["tau"]
    assert (tmp_path / "mini1.json").exists()
    assert any(p.suffix == ".svg" for p in tmp_path.iterdir())
    assert any(p.suffix == ".csv" for p in tmp_path.iterdir())


def test_mini2_and_identity_control(planted, aura):
    rep = exp_mini2(planted, aura)
    assert rep.passed and rep.metrics["identity_flips_greedy"] == 10
    assert rep.metrics["battery_score_before"] < 0 < rep.metrics["battery_score_after"]
    control = exp_mini2(planted, aura, factor=1.0)
    assert control.metrics["identity_flips_greedy"] == 0 and not control.passed
    with pytest.raises(ExperimentError):
        exp_mini2(planted, aura, factor=0.0)


def test_mini2_stored_factor_within_calibrated_boundary(planted, aura):
    boundary = calibrate_mini2_factor(planted, aura)
    assert config.thresholds_for("mini2")["factor"] <= boundary


def test_gateway_and_zero_alpha(planted):
    rep = exp_gateway(planted)
    assert rep.passed
    assert rep.metrics["pre_flip_rate@2.0"] == 1.0 and rep.metrics["post_flip_rate@2.0"] == 0.0
    zero = exp_gateway(planted, alphas=[0.0])
    assert zero.metrics["pre_flip_rate@0.0"] == 0.0 and zero.passed


def test_plan_persistence(planted, plan_script):
    rep = exp_plan_persistence(planted, plan_script)
    assert rep.passed and rep.metrics["ending_changed_after_zeroing"] == 1


def test_plan_without_trigger_fails(planted):
    rep = exp_plan_persistence(planted, config.script("plan_no_trigger", planted.vocab))
    assert rep.metrics["trigger_found"] == 0 and not rep.passed


def test_reports_rejudge_and_schema(planted, drift):
    rep = exp_mini1(planted, drift)
    doc = json.loads(rep.to_json())
    assert doc["schema"] == REPORT_SCHEMA and doc["pass"] == rejudge(doc)
    doc["thresholds"]["tau"] = 1e9
    assert rejudge(doc) is False


def test_fixed_clock_reports_are_byte_identical(monkeypatch, tmp_path):
    monkeypatch.setenv("PVL_FIXED_CLOCK", "1")
    a = run_experiment("prefill-equivalence", 3, tmp_path / "a")
    b = run_experiment("prefill-equivalence", 3, tmp_path / "b")
    assert a.to_json() == b.to_json()
    assert (tmp_path / "a" / "prefill-equivalence.json").read_bytes() == (tmp_path / "b" / "prefill-equivalence.json").read_bytes()


def test_parallel_suite_matches_sequential(monkeypatch):
    monkeypatch.setenv("PVL_FIXED_CLOCK", "1")
    ids = ("prefill-equivalence", "serving-transfer")
    assert run_suite(ids, 0, parallel=True) == run_suite(ids, 0)


def test_every_default_experiment_passes():
    for eid in EXPERIMENTS:
        assert run_experiment(eid).passed, eid
    with pytest.raises(KeyError):
        run_experiment("nope")


def test_svg_writers():
    svg = line_chart({"a": ([0, 1, 2], [1.0, 0.5, float("nan")])}, "t", hlines=[0.1])
    assert svg.startswith("<svg") and "polyline" in svg
    svg = scatter_chart(["x", "y"], [0.0, 1.0], [0.0, 0.0], groups=["g", "h"])
    assert svg.count("<circle") == 2
