#!/usr/bin/env python3
"""
End-to-end tests for the crn-hierarchy command line: exit codes, artifacts and
metadata.json.
"""

import csv
import json
import sys
import os
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pytest

from src.main import main
from src.utils.config import OUTPUT_ENV_VAR

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
NETWORKS = os.path.join(ROOT, "networks")
CONFIGS = os.path.join(ROOT, "configs")


@pytest.fixture(autouse=True)
def _no_env_output(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV_VAR, raising=False)


def _metadata(out) -> dict:
    with open(os.path.join(out, "metadata.json"), encoding="utf-8") as f:
        return json.load(f)


def _csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


# ============================================================
# analyze
# ============================================================


def test_analyze_balanced_network(tmp_path):
    """Detailed balance holds: exit 0 with the certificate on disk"""
    code = main(["analyze", "--network", os.path.join(NETWORKS, "two_pair.net"), "--out", str(tmp_path)])
    assert code == 0
    with open(tmp_path / "detailed_balance.json", encoding="utf-8") as f:
        report = json.load(f)
    assert report["holds"] is True
    meta = _metadata(tmp_path)
    assert meta["command"] == "analyze"
    assert meta["detailed_balance"] is True
    assert meta["error"] is None
    assert meta["audits"]["n_W"] == 1
    assert "numpy" in meta["versions"]
    assert set(meta["artifacts"]) == {"detailed_balance.json", "stoichiometry.json"}
    assert "detailed balance: holds" in meta["messages"]


def test_analyze_unbalanced_network_exits_2(tmp_path, capsys):
    """A refuted Wegscheider condition exits 2 and reports the joint steady state"""
    code = main(["analyze", "--network", os.path.join(NETWORKS, "two_pair_unbalanced.net"), "--out", str(tmp_path)])
    assert code == 2
    meta = _metadata(tmp_path)
    assert meta["detailed_balance"] is False
    assert meta["audits"]["joint_steady_state"] == pytest.approx([2.0], rel=1e-8)
    assert "detailed balance: fails" in capsys.readouterr().out


def test_analyze_malformed_network_exits_1(tmp_path):
    """Parse errors exit 1 and still write metadata"""
    code = main(["analyze", "--network", os.path.join(NETWORKS, "malformed.net"), "--out", str(tmp_path)])
    assert code == 1
    meta = _metadata(tmp_path)
    assert "line 2" in meta["error"]
    assert meta["error_kind"] == "NetworkParseError"


def test_missing_network_file_exits_1(tmp_path):
    """IO errors are reported, not raised"""
    code = main(["analyze", "--network", str(tmp_path / "absent.net"), "--out", str(tmp_path)])
    assert code == 1


def test_usage_errors_exit_1(capsys):
    """Unknown or missing subcommands are usage errors"""
    assert main([]) == 1
    assert main(["explode"]) == 1
    assert "crn-hierarchy:" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    """CRN_OUTPUT_DIR is used when --out is absent"""
    target = tmp_path / "env_out"
    monkeypatch.setenv(OUTPUT_ENV_VAR, str(target))
    assert main(["analyze", "--network", os.path.join(NETWORKS, "birth_death.net")]) == 0
    assert (target / "metadata.json").exists()


# ============================================================
# simulate
# ============================================================


def test_simulate_rre_is_deterministic(tmp_path):
    """Identical runs write byte-identical trajectories"""
    config = os.path.join(CONFIGS, "default.ini")
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", config, "--out", str(first)]) == 0
    assert main(["simulate", "--config", config, "--out", str(second)]) == 0
    data_a = (first / "trajectory.csv").read_bytes()
    assert data_a == (second / "trajectory.csv").read_bytes()
    header, rows = _csv(first / "trajectory.csv")
    assert header == ["t", "c_X", "E", "dissipation"]
    assert len(rows) == 31
    meta = _metadata(first)
    assert meta["model"] == "rre"
    assert meta["audits"]["max_energy_increase"] <= 1e-12


def test_simulate_network_from_command_line(tmp_path):
    """A [simulate] section without network runs when --network supplies it"""
    config = tmp_path / "no_network.ini"
    config.write_text("[simulate]\nmodel = rre\nt_end = 1\noutputs = 11\n", encoding="utf-8")
    out = tmp_path / "out"
    network = os.path.join(NETWORKS, "birth_death.net")
    code = main(["simulate", "--config", str(config), "--network", network, "--out", str(out)])
    assert code == 0
    header, rows = _csv(out / "trajectory.csv")
    assert header[0] == "t"
    assert len(rows) == 11


def test_simulate_without_any_network_exits_1(tmp_path):
    """No network in the section and no --network is a configuration error"""
    config = tmp_path / "no_network.ini"
    config.write_text("[simulate]\nmodel = rre\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(config), "--out", str(out)]) == 1
    assert "needs a network" in _metadata(out)["error"]


def test_simulate_cme_writes_distributions(tmp_path):
    """The CME run writes distributions and moments and keeps mass"""
    code = main(
        [
            "simulate",
            "--config",
            os.path.join(CONFIGS, "default.ini"),
            "--model",
            "cme",
            "--out",
            str(tmp_path),
        ]
    )
    assert code == 0
    header, rows = _csv(tmp_path / "moments.csv")
    assert header == ["t", "mean_X", "var_X"]
    assert float(rows[0][1]) == pytest.approx(2.0, rel=1e-8)
    assert _metadata(tmp_path)["audits"]["mass_loss"] < 1e-9


def test_simulate_unknown_model_exits_1(tmp_path):
    """Unknown model tags are domain errors"""
    code = main(
        ["simulate", "--config", os.path.join(CONFIGS, "default.ini"), "--model", "sde", "--out", str(tmp_path)]
    )
    assert code == 1
    assert "unknown model tag" in _metadata(tmp_path)["error"]


def test_simulate_fpe_cle(tmp_path):
    """The CLE finite-volume run keeps mass"""
    assert main(["simulate", "--config", os.path.join(CONFIGS, "fpe_cle.ini"), "--out", str(tmp_path)]) == 0
    audits = _metadata(tmp_path)["audits"]
    assert audits["mass_drift"] < 1e-10
    assert audits["stationarity_residual"] < 1e-10
    assert (tmp_path / "fpe_density.csv").exists()


def test_simulate_cm_rr(tmp_path):
    """βc1 + c2 is conserved through the CLI path"""
    assert main(["simulate", "--config", os.path.join(CONFIGS, "hybrid_cm_rr.ini"), "--out", str(tmp_path)]) == 0
    assert _metadata(tmp_path)["audits"]["conserved_drift"] < 1e-8
    header, rows = _csv(tmp_path / "hybrid_cm_rr.csv")
    assert header == ["t", "c1", "c2", "beta_c1_plus_c2", "energy"]
    assert len(rows) == 51


def test_simulate_merged(tmp_path):
    """Merged model: mass kept, equilibrium stationary, two-section snapshot"""
    assert main(["simulate", "--config", os.path.join(CONFIGS, "hybrid_merged.ini"), "--out", str(tmp_path)]) == 0
    audits = _metadata(tmp_path)["audits"]
    assert audits["mass_drift"] < 1e-10
    assert audits["stationarity_residual"] < 1e-8
    _, rows = _csv(tmp_path / "merged_snapshot.csv")
    sections = [row[0] for row in rows]
    assert sections[0] == "discrete"
    assert sections[-1] == "continuous"
    assert sections.count("discrete") == 20


# ============================================================
# compare, converge, audit
# ============================================================


def test_compare_writes_summary(tmp_path):
    """Four models per time point and a JSON summary"""
    assert main(["compare", "--config", os.path.join(CONFIGS, "default.ini"), "--out", str(tmp_path)]) == 0
    header, rows = _csv(tmp_path / "comparison.csv")
    assert header == ["t", "model", "mean", "variance"]
    assert len(rows) == 4 * 31
    with open(tmp_path / "comparison_summary.json", encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["max_relative_mean_error"]["fp_cle"] < 1e-6


def test_converge_writes_table(tmp_path):
    """The V-sweep writes one row per volume and the entropy-bound fit"""
    config = tmp_path / "converge.ini"
    config.write_text(
        "[converge]\n"
        f"network = {os.path.join(NETWORKS, 'dimerization.net')}\n"
        "V_list = 25, 50, 100\n"
        "c0 = 2.0\n"
        "bound_V_list = 50, 100\n",
        encoding="utf-8",
    )
    out = tmp_path / "out"
    assert main(["converge", "--config", str(config), "--out", str(out)]) == 0
    header, rows = _csv(out / "convergence.csv")
    assert header == ["V", "mean_err", "energy_err", "slope_estimate"]
    assert len(rows) == 3
    audits = _metadata(out)["audits"]
    assert audits["mean_error_decreasing"] is True
    assert (out / "entropy_bound.csv").exists()


def test_audit_runs(tmp_path):
    """CME entropy decreases and the Liouville identity closes"""
    assert main(["audit", "--config", os.path.join(CONFIGS, "default.ini"), "--out", str(tmp_path), "--seed", "3"]) == 0
    meta = _metadata(tmp_path)
    assert meta["seed"] == 3
    assert meta["audits"]["cme_entropy_monotone"] is True
    assert meta["audits"]["liouville_max_residual"] < 1e-6


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
