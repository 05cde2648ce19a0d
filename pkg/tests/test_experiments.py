"""Experiment runners: schemas, determinism, and small end-to-end runs."""

import json
import os

import numpy as np
import pytest

from bqlab.experiments import (
    ExperimentConfig,
    observed_order,
    run,
    run_bracket_check,
    run_energy_audit,
    run_lyapunov,
    run_span_check,
    student_ci_halfwidth,
)


def test_observed_order_floor_aware():
    assert observed_order([1e-12, 1e-12, 1e-12], [1e-3, 5e-4, 2.5e-4], 1e-10) == float("inf")
    order = observed_order([4e-4, 1e-4, 2.5e-5], [1e-3, 5e-4, 2.5e-4], 1e-12)
    assert order == pytest.approx(2.0, abs=0.01)


def test_student_ci():
    vals = np.array([1.0, 1.1, 0.9, 1.05, 0.95])
    hw = student_ci_halfwidth(vals)
    assert 0.05 < hw < 0.3
    assert student_ci_halfwidth(np.array([1.0])) == float("inf")


def test_lyapunov_small_schema(tmp_path):
    cfg = ExperimentConfig(
        kind="lyapunov", n=32, dt=2.5e-3, horizon=2.0, burn_in=0.5,
        ensemble=2, master_seed=5, out=str(tmp_path / "lyap"),
        options={"sample_stride": 100, "sweep": False},
    )
    run(cfg)
    csv = open(tmp_path / "lyap" / "lyapunov.csv").read().splitlines()
    assert csv[0] == "seed,g_scale,alpha_scale,t,log_norm_growth,projective_average"
    assert len(csv) > 2
    doc = json.load(open(tmp_path / "lyap" / "summary.json"))
    reg = doc["regimes"][0]
    assert len(reg["per_seed_qr"]) == 2
    assert "lambda_qr_ci" in reg and "estimators_agree" in reg


def test_bracket_check_schema(tmp_path):
    cfg = ExperimentConfig(
        kind="bracket-check", n=32, master_seed=1, out=str(tmp_path / "br"),
        options={"jmax": 2, "states": 2},
    )
    run(cfg)
    doc = json.load(open(tmp_path / "br" / "summary.json"))
    assert all(row["max_rel_err_y"] < 1e-6 for row in doc["table"])
    assert all(z["coeff_err"] == 0.0 for z in doc["z_sigma"])


def test_span_check_runner(tmp_path):
    cfg = ExperimentConfig(
        kind="span-check", n=32, dt=2.5e-3, horizon=0.5, ensemble=2,
        master_seed=3, out=str(tmp_path / "span"), options={"n_two_point": 2},
    )
    run(cfg)
    doc = json.load(open(tmp_path / "span" / "summary.json"))
    for kind in ("two_point", "tangent", "jacobian"):
        assert doc["summary"][kind]["all_positive"]


def test_energy_audit_runner(tmp_path):
    cfg = ExperimentConfig(
        kind="energy-audit", n=32, dt=2.5e-3, horizon=5.0, master_seed=2,
        out=str(tmp_path / "energy"),
        options={"decay_seeds": 2, "ou_seeds": 16, "ou_horizon": 1.0},
    )
    run(cfg)
    doc = json.load(open(tmp_path / "energy" / "summary.json"))
    assert doc["decay_all_monotone"]
    assert doc["decay_worst_ratio"] <= 1 + 1e-6
    assert doc["ou_within_3sigma"]


def test_control_demo_runner(tmp_path):
    cfg = ExperimentConfig(
        kind="control-demo", n=32, master_seed=4, out=str(tmp_path / "ctl"),
        options={"cases": 1, "matrix_M": float(np.e)},
    )
    run(cfg)
    doc = json.load(open(tmp_path / "ctl" / "summary.json"))
    case = doc["cases"][0]
    assert case["position_error"] < 1e-6 and case["angle_error"] < 1e-6
    assert doc["matrix"]["A_norm"] == pytest.approx(np.e, rel=1e-6)
    # emitted plans are replayable documents
    assert case["plan"]["stages"][0]["kind"] == "shear_x1"
