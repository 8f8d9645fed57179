import json
import shutil
import subprocess
import sys

import pytest

from slqsdp.cli import main
from slqsdp.experiments import preset_document

from conftest import FIXTURES


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_dare_preset(capsys, tmp_path):
    code, out, _ = _run(capsys, "dare", "--preset", "example2", "--out", str(tmp_path))
    assert code == 0
    doc = json.loads(out)
    assert doc["rho_open"] == pytest.approx(1.1267, abs=5e-5)
    assert doc["zero_gain_admissible"] is False
    assert (tmp_path / "riccati.json").exists()


def test_model_based_report(capsys):
    code, out, _ = _run(capsys, "model-based", "--preset", "example2")
    assert code == 0 and json.loads(out)["frobenius_error"] <= 1e-5


def test_collect_then_model_free(capsys, tmp_path):
    d = tmp_path / "data"
    code, out, _ = _run(capsys, "collect", "--preset", "example2", "--l", "20", "--seed", "3", "--out", str(d))
    assert code == 0 and json.loads(out)["rank_check"] is True
    code, out, _ = _run(capsys, "model-free", "--preset", "example2", "--data", str(d), "--out", str(tmp_path / "r"))
    assert code == 0
    rep = json.loads(out)
    assert rep["admissible"] and rep["dataset_fingerprint"] == json.loads((d / "manifest.json").read_text())["fingerprint"]
    assert (tmp_path / "r" / "trajectory_average.csv").exists()


def test_model_free_fixture(capsys):
    code, out, _ = _run(capsys, "model-free", "--preset", "example2", "--data", str(FIXTURES / "example2_small"))
    assert code == 0 and json.loads(out)["dataset_fingerprint"] == "4af6f80070a8b36b"


def test_reproduce_seeds(capsys, tmp_path):
    code, out, _ = _run(capsys, "reproduce", "example2", "--seeds", "2", "--l", "30", "--out", str(tmp_path))
    assert code == 0
    assert json.loads(out)["runs"] == 2
    assert (tmp_path / "summary.json").exists() and (tmp_path / "run_1" / "report.json").exists()


def test_reproduce_model_based(capsys):
    code, out, _ = _run(capsys, "reproduce", "example2", "--mode", "model-based")
    assert code == 0 and json.loads(out)["frobenius_error"] <= 1e-5


def test_compare(capsys, tmp_path):
    _run(capsys, "reproduce", "example2", "--mode", "dare", "--out", str(tmp_path / "a"))
    _run(capsys, "reproduce", "example2", "--mode", "model-based", "--out", str(tmp_path / "b"))
    code, out, _ = _run(capsys, "compare", str(tmp_path / "a" / "report.json"), str(tmp_path / "b" / "report.json"))
    assert code == 0 and json.loads(out)["max_abs_delta"] <= 1e-5


def test_compare_mismatch_exit_2(capsys, tmp_path):
    _run(capsys, "reproduce", "example2", "--mode", "dare", "--out", str(tmp_path / "a"))
    _run(capsys, "reproduce", "example1", "--mode", "dare", "--out", str(tmp_path / "b"))
    code, _, err = _run(capsys, "compare", str(tmp_path / "a" / "report.json"), str(tmp_path / "b" / "report.json"))
    assert code == 2 and "different instances" in err


def test_exit_config_error(capsys):
    assert _run(capsys, "model-free", "--preset", "example2", "--trace-mode", "bogus")[0] == 2
    assert _run(capsys, "dare")[0] == 2


def test_exit_missing_config_file(capsys, tmp_path):
    assert _run(capsys, "dare", "--config", str(tmp_path / "none.json"))[0] == 2


def test_exit_short_horizon(capsys):
    code, _, err = _run(capsys, "model-free", "--preset", "example2", "--N", "7")
    assert code == 3 and "rank-check" in err


def test_exit_no_probing(capsys):
    assert _run(capsys, "model-free", "--preset", "example2", "--probe-std", "0")[0] == 3


def test_exit_corrupt_dataset(capsys, tmp_path):
    d = tmp_path / "d"
    shutil.copytree(FIXTURES / "example2_small", d)
    blob = bytearray((d / "batch.bin").read_bytes())
    blob[64] ^= 1
    (d / "batch.bin").write_bytes(bytes(blob))
    assert _run(capsys, "model-free", "--preset", "example2", "--data", str(d))[0] == 3


def test_exit_solver(capsys):
    # the summed form is unbounded on example 1 with the certificate tie-break
    code, _, err = _run(capsys, "model-free", "--preset", "example1", "--form", "aggregated", "--l", "200")
    assert code == 4 and "solve" in err


def test_exit_precondition(capsys, tmp_path):
    doc = preset_document("example2")
    doc["A"] = [[0.5, 0, 0, 0], [0, 2.0, 0, 0], [0, 0, 0.5, 0], [0, 0, 0, 0.5]]
    doc["B"] = [[1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
    path = tmp_path / "inst.json"
    path.write_text(json.dumps(doc))
    assert _run(capsys, "dare", "--instance", str(path))[0] == 5


def test_config_file(capsys, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"preset": "example2", "mode": "dare"}))
    code, out, _ = _run(capsys, "model-based", "--config", str(path))
    assert code == 0 and json.loads(out)["mode"] == "model-based"


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "slqsdp.cli", "dare", "--preset", "example2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "residual" in proc.stdout
