import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from pooledweights.cli import main


def write_fixture(path, seed=0, n=240, K=3, permute_outcome=False, far=False):
    rng = np.random.default_rng(seed)
    g = np.array([f"s{k}" for k in np.arange(n) % K])
    x = rng.normal(size=(n, 2))
    w = (rng.random(n) < 0.3) | (np.arange(n) < K)
    w[K : 2 * K] = False
    x[w] = 0.2 + 0.8 * x[w]
    if far:
        x[w, 1] += 40.0
    y = x @ [1.0, -0.5] + 0.8 * w + rng.normal(size=n)
    if permute_outcome:
        y = y[np.random.default_rng(99).permutation(n)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["y", "w", "g", "age", "score"])
        for i in range(n):
            out.writerow([repr(float(y[i])), int(w[i]), g[i], repr(float(x[i, 0])), repr(float(x[i, 1]))])
    return path


@pytest.fixture
def data(tmp_path):
    return write_fixture(tmp_path / "data.csv")


def run(*argv):
    return main([str(a) for a in argv])


class TestWeights:
    def test_outputs_and_balance(self, data, tmp_path):
        out = tmp_path / "w"
        assert run("weights", "--input", data, "--out", out, "--lambda", 100) == 0
        for name in ("weights.json", "balance.json", "balance.csv", "overlap.json", "overlap.csv",
                     "features.json", "manifest.json"):
            assert (out / name).exists(), name
        bal = json.loads((out / "balance.json").read_text())
        assert max(bal["global"].values()) <= 1e-6
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "converged" and manifest["config"]["input"] == "data.csv"
        assert len(manifest["config_hash"]) == 64

    def test_rerun_is_byte_identical(self, data, tmp_path):
        run("weights", "--input", data, "--out", tmp_path / "a")
        run("weights", "--input", data, "--out", tmp_path / "b")
        for name in ("weights.json", "balance.csv", "overlap.json", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_outcome_permutation_leaves_weights_unchanged(self, tmp_path):
        a = write_fixture(tmp_path / "a.csv")
        b = write_fixture(tmp_path / "b.csv", permute_outcome=True)
        assert a.read_bytes() != b.read_bytes()
        run("weights", "--input", a, "--out", tmp_path / "oa")
        run("weights", "--input", b, "--out", tmp_path / "ob")
        for name in ("weights.json", "balance.json", "overlap.json", "features.json"):
            assert (tmp_path / "oa" / name).read_bytes() == (tmp_path / "ob" / name).read_bytes()

    def test_infeasible_exits_2(self, tmp_path):
        path = write_fixture(tmp_path / "far.csv", far=True)
        out = tmp_path / "o"
        assert run("weights", "--input", path, "--out", out) == 2
        report = json.loads((out / "infeasible.json").read_text())
        assert report["feature"] == "score"

    def test_usage_and_io_errors_exit_1(self, data, tmp_path, capsys):
        assert run("weights", "--input", tmp_path / "missing.csv", "--out", tmp_path / "o") == 1
        assert run("weights", "--input", data, "--out", tmp_path / "o", "--pooling", "bogus") == 1
        assert run("bogus-command") == 1
        schema = json.dumps({"covariates": ["g"]})
        assert run("weights", "--input", data, "--out", tmp_path / "o", "--schema", schema) == 1
        assert "error" in capsys.readouterr().err


class TestEstimate:
    def test_grouping_and_overall(self, data, tmp_path):
        grouping = tmp_path / "groups.json"
        grouping.write_text(json.dumps({"all": {"s0": "one", "s1": "one", "s2": "one"},
                                        "ident": {"s0": "s0", "s1": "s1", "s2": "s2"}}))
        out = tmp_path / "e"
        assert run("estimate", "--input", data, "--out", out, "--grouping", grouping) == 0
        rows = json.loads((out / "estimates.json").read_text())["rows"]
        strata = {r["group"]: r for r in rows if r["level"] == "stratum"}
        ident = {r["group"]: r for r in rows if r["level"] == "ident"}
        for lab, r in strata.items():
            assert ident[lab]["tau"] == r["tau"]
        (all_row,) = [r for r in rows if r["level"] == "all"]
        overall = rows[-1]
        n1 = np.array([r["n1"] for r in strata.values()], float)
        taus = np.array([r["tau"] for r in strata.values()])
        assert all_row["tau"] == pytest.approx(overall["tau"], abs=1e-14)
        assert overall["tau"] == pytest.approx(float(n1 @ taus / n1.sum()), abs=1e-14)

    def test_weights_file_route_matches_inline(self, data, tmp_path):
        run("weights", "--input", data, "--out", tmp_path / "w")
        run("estimate", "--input", data, "--out", tmp_path / "a", "--weights", tmp_path / "w" / "weights.json")
        run("estimate", "--input", data, "--out", tmp_path / "b")
        a = json.loads((tmp_path / "a" / "estimates.json").read_text())
        b = json.loads((tmp_path / "b" / "estimates.json").read_text())
        assert a == b

    def test_unknown_stratum_in_grouping(self, data, tmp_path):
        grouping = tmp_path / "bad.csv"
        grouping.write_text("stratum,group\ns0,a\ns1,a\ns2,b\nzz,b\n")
        assert run("estimate", "--input", data, "--out", tmp_path / "e", "--grouping", grouping) == 1

    @pytest.mark.parametrize("extra", [
        ["--estimator", "ipw_full_interaction"],
        ["--estimator", "ipw_fixed_effects", "--raw-odds"],
        ["--estimator", "regression"],
        ["--augment", "ridge"],
    ])
    def test_other_estimators(self, data, tmp_path, extra):
        out = tmp_path / "e"
        assert run("estimate", "--input", data, "--out", out, *extra) == 0
        header = (out / "estimates.csv").read_text().splitlines()[0]
        assert header == "level,group,n1,mu1,mu0,tau,se"


class TestOtherCommands:
    def test_sweep_three_rows(self, data, tmp_path):
        out = tmp_path / "s"
        assert run("sweep", "--input", data, "--out", out, "--grid", "1,1e4,1e8") == 0
        lines = (out / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 4

    def test_sensitivity_at_one_matches_estimate(self, data, tmp_path):
        run("estimate", "--input", data, "--out", tmp_path / "e")
        overall = json.loads((tmp_path / "e" / "estimates.json").read_text())["rows"][-1]["tau"]
        out = tmp_path / "s"
        code = run("sensitivity", "--input", data, "--out", out, "--sens-lambda", "1,1.5", "--bootstrap", 50,
                   "--target", "stratum:s0", "--target", "stratum:s1", "--breakdown-grid", "1,1.2,1.5,2",
                   "--delta-grid", "0.1,0.2")
        assert code == 0
        report = json.loads((out / "sensitivity.json").read_text())
        assert len(report["bounds"]) == 4 and len(report["differences"]) == 2
        assert set(report["breakdown"]) == {"stratum=s0", "stratum=s1"}
        run("sensitivity", "--input", data, "--out", tmp_path / "s2", "--bootstrap", 20)
        b = json.loads((tmp_path / "s2" / "sensitivity.json").read_text())["bounds"][0]
        assert b["tau_min"] == pytest.approx(overall, abs=1e-10)
        assert b["tau_max"] == pytest.approx(overall, abs=1e-10)

    def test_sensitivity_bad_target(self, data, tmp_path):
        assert run("sensitivity", "--input", data, "--out", tmp_path / "s", "--target", "region:x",
                   "--bootstrap", 5) == 1

    def test_simulate_smoke(self, tmp_path):
        out = tmp_path / "sim"
        assert run("simulate", "--out", out, "--n", 500, "--d", 10, "--G", 3, "--m", 2, "--records") == 0
        metrics = (out / "simulation.csv").read_text().splitlines()
        assert metrics[0] == "estimator,metric,value"
        assert (out / "records.csv").exists()

    def test_console_entry_point(self, data, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "pooledweights.cli", "weights", "--input", str(data),
                               "--out", str(tmp_path / "w")], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
