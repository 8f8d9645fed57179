import json

import numpy as np
import pytest

from slqsdp.errors import ConfigError, StageError
from slqsdp.experiments import (
    PRESETS,
    ExperimentConfig,
    ExperimentReport,
    derive_seed,
    load_config,
    load_report,
    preset_document,
    reports_match,
    run_compare,
    run_experiment,
    run_reproduce,
    write_run,
)

from conftest import GOLDEN, random_instance


@pytest.mark.parametrize("name", ["example1", "example2"])
def test_preset_matches_golden(name):
    golden = json.loads((GOLDEN / f"{name}.json").read_text())
    assert json.loads(json.dumps(preset_document(name))) == golden


def test_preset_sizes():
    assert (PRESETS["example1"].published_l, PRESETS["example1"].N) == (100000, 10)
    assert (PRESETS["example2"].published_l, PRESETS["example2"].N) == (100, 9)
    assert ExperimentConfig.from_preset("example1").l == 1000
    assert ExperimentConfig.from_preset("example1", paper_scale=True).l == 100000
    assert ExperimentConfig.from_preset("example2", paper_scale=True).l == 100


def test_preset_reference_values():
    assert PRESETS["example1"].error == 3.3123e-4
    assert PRESETS["example2"].error == 1.4306e-4
    # each printed entry is rounded to 4 decimals, so each entry of the difference
    # is off by at most 1e-4 and the norm by at most 1e-4 * sqrt(entries)
    for p in PRESETS.values():
        D = np.array(p.L_star) - np.array(p.L_hat)
        assert abs(np.linalg.norm(D) - p.error) <= 1e-4 * np.sqrt(D.size)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_preset("example3")


@pytest.mark.parametrize("bad", [{"mode": "x"}, {"l": 0}, {"trace_mode": "x"}, {"form": "x"},
                                 {"seed": -1}, {"r": 1.5}, {"gap_tol": 0.0}])
def test_config_validation(bad):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_preset("example2", **bad)
    assert info.value.exit_code == 2


def test_config_file_roundtrip(tmp_path):
    (tmp_path / "inst.json").write_text(json.dumps(preset_document("example2")))
    (tmp_path / "cfg.json").write_text(json.dumps({"instance_file": "inst.json", "l": 20, "N": 9, "seed": 4}))
    cfg = load_config(tmp_path / "cfg.json")
    assert cfg.l == 20 and cfg.instance == preset_document("example2")
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"preset": "example2", "horizon": 3})


def test_derive_seed_stable():
    assert derive_seed(0, 0) == derive_seed(0, 0)
    assert len({derive_seed(7, k) for k in range(50)}) == 50
    assert 0 <= derive_seed(2**64 - 1, 3) < 2**64


def test_dare_mode_report():
    rep = run_experiment(ExperimentConfig.from_preset("example2", mode="dare")).report
    assert rep.frobenius_error == 0.0 and rep.admissible
    assert rep.rho_open == pytest.approx(1.1267, abs=5e-5)
    assert rep.J_star == pytest.approx(125.97565821460528, rel=1e-10)
    assert rep.J_hat == pytest.approx(rep.J_star, rel=1e-8)


def test_model_based_mode_example2():
    rep = run_experiment(ExperimentConfig.from_preset("example2", mode="model-based")).report
    assert rep.frobenius_error <= 1e-5
    assert rep.solver["status"] == "optimal"


def test_report_error_recomputes():
    rep = run_experiment(ExperimentConfig.from_preset("example2", seed=3)).report
    assert abs(rep.recomputed_error() - rep.frobenius_error) <= 1e-12
    assert rep.reference["frobenius_error"] == 1.4306e-4
    back = ExperimentReport.from_dict(json.loads(rep.to_json()))
    assert reports_match(back, rep, tol=0.0)


def test_reproducible_report():
    cfg = ExperimentConfig.from_preset("example2", seed=11)
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a.batch.equals(b.batch)
    assert reports_match(a.report, b.report)
    assert a.report.L_hat == b.report.L_hat


def test_reports_match_detects_change():
    rep = run_experiment(ExperimentConfig.from_preset("example2", mode="dare")).report
    other = ExperimentReport.from_dict(json.loads(rep.to_json()))
    other.L_hat[0][0] += 1e-6
    assert not reports_match(rep, other)


def test_stage_error_names_stage():
    with pytest.raises(StageError) as info:
        run_experiment(ExperimentConfig.from_preset("example2", N=7))
    assert info.value.stage == "rank-check"
    assert info.value.exit_code == 3


def test_precondition_stage():
    doc = {"A": [[0.5, 0.0], [0.0, 2.0]], "B": [[1.0], [0.0]], "Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[1.0]],
           "r": 0.8, "Sigma": [[0.0, 0.0], [0.0, 0.0]], "mu0": [0.0, 0.0], "Sigma0": [[1.0, 0.0], [0.0, 1.0]]}
    with pytest.raises(StageError) as info:
        run_experiment(ExperimentConfig(instance=doc, mode="dare"))
    assert info.value.exit_code == 5


def test_write_run_outputs(tmp_path):
    res = run_experiment(ExperimentConfig.from_preset("example2", seed=2))
    files = write_run(res, tmp_path)
    assert set(files) == {p.name for p in tmp_path.iterdir()}
    rows = (tmp_path / "trajectory_average.csv").read_text().splitlines()
    assert rows[0] == "phase,k,x1,x2,x3,x4"
    phases = {r.split(",")[0] for r in rows[1:]}
    assert phases == {"collect", "closed-loop"}
    assert len(rows) == 1 + (9 + 1) + (20 + 1)
    rep = load_report(tmp_path / "report.json")
    assert rep.files == files
    src = (tmp_path / "plot_trajectory_average.py").read_text()
    assert "trajectory_average.csv" in src
    compile(src, "plot", "exec")


def test_reproduce_multi_seed(tmp_path):
    study = run_reproduce("example2", {"l": 30}, seeds=3, out=tmp_path, workers=2)
    assert study.seeds == [derive_seed(0, k) for k in range(3)]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["runs"] == 3
    assert summary["median_frobenius_error"] == pytest.approx(float(np.median(summary["frobenius_errors"])))
    for k in range(3):
        assert (tmp_path / f"run_{k}" / "report.json").exists()
    # workers do not change results
    serial = run_reproduce("example2", {"l": 30}, seeds=3)
    for a, b in zip(study.reports, serial.reports):
        assert reports_match(a, b)


def test_compare_self_zero():
    rep = run_experiment(ExperimentConfig.from_preset("example2", seed=5)).report
    doc = run_compare(rep, rep)
    assert doc["max_abs_delta"] == 0.0 and doc["flags"] == []


def test_compare_model_based_vs_dare():
    a = run_experiment(ExperimentConfig.from_preset("example2", mode="dare")).report
    b = run_experiment(ExperimentConfig.from_preset("example2", mode="model-based")).report
    doc = run_compare(a, b)
    assert doc["max_abs_delta"] <= 1e-5


def test_compare_model_free_flags_none():
    a = run_experiment(ExperimentConfig.from_preset("example2", mode="model-based")).report
    b = run_experiment(ExperimentConfig.from_preset("example2", seed=8)).report
    assert run_compare(a, b)["flags"] == []


def test_compare_refuses_mismatch():
    a = run_experiment(ExperimentConfig.from_preset("example2", mode="dare")).report
    b = run_experiment(ExperimentConfig.from_preset("example1", mode="dare")).report
    with pytest.raises(ConfigError):
        run_compare(a, b)


def test_sigma_zero_keeps_data():
    a = run_experiment(ExperimentConfig.from_preset("example2", seed=4))
    b = run_experiment(ExperimentConfig.from_preset("example2", seed=4, sigma_zero=True))
    assert a.batch.equals(b.batch)
    assert b.report.admissible


def test_inline_instance_model_free():
    rng = np.random.default_rng(3)
    inst = random_instance(rng, 2, 1, sigma=0.0)
    cfg = ExperimentConfig(instance=inst.to_dict(), l=3, N=4, seed=1)
    rep = run_experiment(cfg).report
    assert rep.frobenius_error <= 1e-5
