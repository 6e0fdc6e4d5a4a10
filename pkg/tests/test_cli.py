import json
import subprocess
import sys

import numpy as np
import pytest

from lipbsoc.cli import ConfigError, RunConfig, main
from lipbsoc.io import read_columns, read_trace

PULSE = ["--set", "soc_low=0.9", "--set", "rest_s=60"]


@pytest.fixture(scope="module")
def pulse_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pulse")
    assert main(["simulate", "--seed", "1", "--out", str(out), *PULSE]) == 0
    return out


@pytest.fixture(scope="module")
def fitted_dir(tmp_path_factory, pulse_dir):
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit", "--out", str(out), "--set", f"input={pulse_dir / 'trace.csv'}"]) == 0
    return out


def test_simulate_outputs_are_reproducible(pulse_dir, tmp_path):
    assert main(["simulate", "--seed", "1", "--out", str(tmp_path), *PULSE]) == 0
    for name in ("trace.csv", "truth.csv", "soc_truth.csv", "config.sha256", "config.ini"):
        assert (tmp_path / name).read_bytes() == (pulse_dir / name).read_bytes()
    assert main(["simulate", "--seed", "2", "--out", str(tmp_path / "b"), *PULSE]) == 0
    assert (tmp_path / "b" / "trace.csv").read_bytes() != (pulse_dir / "trace.csv").read_bytes()


def test_config_echo_and_hash(pulse_dir):
    text = (pulse_dir / "config.ini").read_text()
    assert "soc_low = 0.9" in text and "seed = 1" in text
    import hashlib
    digest = (pulse_dir / "config.sha256").read_text().strip()
    assert digest == hashlib.sha256(text.encode()).hexdigest()
    report = json.loads((pulse_dir / "simulate_report.json").read_text())
    assert report["config_sha256"] == digest


def test_drive_cycle_trace(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--set", "profile=drive_cycle",
                 "--set", "soc_low=0.9"]) == 0
    tr = read_trace(tmp_path / "trace.csv")
    assert tr.current_a.min() < 0 < tr.current_a.max()
    np.testing.assert_array_equal(np.diff(tr.time_s), 1.0)


def test_validate_metrics_recomputable(tmp_path, pulse_dir, fitted_dir):
    assert main(["validate", "--out", str(tmp_path),
                 "--set", f"params={fitted_dir / 'params.json'}",
                 "--set", f"input={pulse_dir / 'truth.csv'}",
                 "--set", "family=filter_state"]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    resid = read_columns(tmp_path / "residual.csv")["residual_v"]
    assert metrics["rms_mv"] == pytest.approx(1e3 * np.sqrt(np.mean(resid ** 2)), rel=1e-9)
    assert metrics["family"] == "filter_state" and metrics["n_samples"] == resid.size
    overlay = read_columns(tmp_path / "overlay.csv")
    np.testing.assert_allclose(overlay["v_true"] - overlay["v_pred"], resid, atol=1e-15)


def test_fit_is_deterministic(tmp_path, pulse_dir, fitted_dir):
    assert main(["fit", "--out", str(tmp_path), "--set", f"input={pulse_dir / 'trace.csv'}"]) == 0
    assert (tmp_path / "params.json").read_bytes() == (fitted_dir / "params.json").read_bytes()


def test_soc_summary(tmp_path, pulse_dir, fitted_dir):
    assert main(["soc", "--out", str(tmp_path), "--set", f"params={fitted_dir / 'params.json'}",
                 "--set", f"input={pulse_dir / 'trace.csv'}",
                 "--set", f"soc_truth={pulse_dir / 'soc_truth.csv'}", "--set", "soc0=0.7"]) == 0
    summary = json.loads((tmp_path / "soc_summary.json").read_text())
    assert 0.0 <= summary["coverage_3sigma"] <= 1.0
    est = read_columns(tmp_path / "soc_estimate.csv")
    assert set(est) == {"time_s", "soc", "sigma", "innovation_v"}
    assert np.all((est["soc"] >= 0) & (est["soc"] <= 1))


def test_sweep_single_kernel_count(tmp_path, pulse_dir):
    assert main(["sweep-kernels", "--out", str(tmp_path), "--set", "n_kernels=3",
                 "--set", f"input={pulse_dir / 'trace.csv'}",
                 "--set", f"validation={pulse_dir / 'truth.csv'}"]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "n_kernels,rms_mv" and len(lines) == 2 and lines[1].startswith("3,")


def test_rbf_fit_writes_one_file_per_kernel_count(tmp_path, pulse_dir):
    assert main(["fit", "--out", str(tmp_path), "--set", "family=rbf",
                 "--set", "n_kernels=1,2,3,4", "--set", "rbf_passes=1",
                 "--set", f"input={pulse_dir / 'trace.csv'}"]) == 0
    assert sorted(p.name for p in tmp_path.glob("params_rbf_*.json")) == \
        [f"params_rbf_{n}.json" for n in (1, 2, 3, 4)]
    assert not (tmp_path / "params.json").exists()


def test_missing_input_is_io_error(tmp_path):
    assert main(["fit", "--out", str(tmp_path), "--set", f"input={tmp_path / 'none.csv'}"]) == 3


@pytest.mark.parametrize("item", ["bogus=1", "cell.bogus=1", "nosuch.rate_c=1", "rate_c=fast",
                                  "rate_c"])
def test_bad_overrides_are_config_errors(tmp_path, item):
    assert main(["simulate", "--out", str(tmp_path), "--set", item]) == 2


def test_unknown_ini_section(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[plant]\nseed = 1\n")
    assert main(["simulate", "--out", str(tmp_path), "--config", str(ini)]) == 2


def test_ini_and_override_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[cell]\nnominal_capacity_ah = 4\n[simulate]\nrate_c = 2\nsoc_low = 0.5\n")
    cfg = RunConfig.load("simulate", ini, ["rate_c=3", "cell.eta_charge=0.99"])
    assert cfg["rate_c"] == 3.0 and cfg["soc_low"] == 0.5
    assert cfg.cell.nominal_capacity_ah == 4.0 and cfg.cell.eta_charge == 0.99


def test_hash_ignores_output_directory():
    a = RunConfig.load("simulate", out="x")
    b = RunConfig.load("simulate", out="y")
    assert a.sha256 == b.sha256
    assert RunConfig.load("simulate", seed=1).sha256 != a.sha256
    with pytest.raises(ConfigError):
        RunConfig.load("simulate", seed=-1)


def test_family_mismatch(tmp_path, pulse_dir, fitted_dir):
    assert main(["validate", "--out", str(tmp_path),
                 "--set", f"params={fitted_dir / 'params.json'}",
                 "--set", f"input={pulse_dir / 'truth.csv'}", "--set", "family=rbf"]) == 4


def test_single_level_scheduled_fit_reports_empty_bins(tmp_path, pulse_dir):
    assert main(["fit", "--out", str(tmp_path), "--set", "family=scheduled",
                 "--set", f"input={pulse_dir / 'trace.csv'}"]) == 14


def test_discharge_only_combined_fit_is_rank_deficient(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--out", str(sim), "--set", "profile=constant",
                 "--set", "duration_s=600"]) == 0
    assert main(["fit", "--out", str(tmp_path / "fit"), "--set", "family=combined",
                 "--set", f"input={sim / 'trace.csv'}"]) == 12


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lipbsoc", "simulate", "--out", str(tmp_path),
                           "--set", "bogus=1"], capture_output=True, text=True)
    assert proc.returncode == 2 and "unknown key" in proc.stderr
