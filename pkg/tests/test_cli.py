"""End-to-end CLI behaviour through click's test runner."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from tlmma_sar.cli import main
from tlmma_sar.spatial import build_grid_weights, row_normalize

TINY_YAML = """\
n0: 36
K: 3
n_source: 25
p: 4
s: 2
H: 2
informative_count: 2
method: mle
replications: 3
base_seed: 7
"""


@pytest.fixture
def runner():
    return CliRunner()


def _write_config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(TINY_YAML)
    return path


def _write_grid_csv(tmp_path, n, name="w.csv"):
    W = build_grid_weights(n, "horizontal")
    path = tmp_path / name
    np.savetxt(path, W.entries, delimiter=",", fmt="%.1f")
    return path


def _write_sar_csv(tmp_path, name, n, p, seed, rho=0.4):
    W = row_normalize(build_grid_weights(n, "horizontal"))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = np.arange(1, p + 1, dtype=float)
    y = np.linalg.solve(np.eye(n) - rho * W.entries, X @ beta + rng.standard_normal(n))
    path = tmp_path / name
    header = "y," + ",".join(f"x{j}" for j in range(1, p + 1))
    np.savetxt(path, np.column_stack([y, X]), delimiter=",", header=header,
               comments="", fmt="%.17g")
    return path


class TestSimulate:
    def test_outputs_and_schema(self, runner, tmp_path):
        config = _write_config(tmp_path)
        out = tmp_path / "out"
        result = runner.invoke(main, ["simulate", "--config", str(config),
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        report = json.loads((out / "report.json").read_text())
        assert report["schema_version"] == 1
        assert report["replications_done"] == 3
        lines = (out / "replications.csv").read_text().splitlines()
        assert lines[0] == "seed,method,mse_delta,mse_mu"
        assert len(lines) == 1 + 3 * 3     # three methods per replication
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "simulate"

    def test_seed_override_changes_results(self, runner, tmp_path):
        config = _write_config(tmp_path)
        runs = {}
        for name, extra in [("a", []), ("b", ["--seed", "99"])]:
            out = tmp_path / name
            result = runner.invoke(main, ["simulate", "--config", str(config),
                                          "--out", str(out), *extra])
            assert result.exit_code == 0, result.output
            runs[name] = (out / "replications.csv").read_text()
        assert runs["a"] != runs["b"]

    def test_bad_config_key_fails_cleanly(self, runner, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("n0: 36\nbogus: 1\n")
        result = runner.invoke(main, ["simulate", "--config", str(path),
                                      "--out", str(tmp_path / "out")])
        assert result.exit_code != 0
        assert "bogus" in result.output


class TestWeightsTable:
    def test_header_and_rows(self, runner, tmp_path):
        out = tmp_path / "table.csv"
        result = runner.invoke(main, [
            "weights-table", "--out", str(out), "--method", "mle",
            "--n-values", "100", "--replications", "2", "--seed", "5"])
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[0] == "n,nu_hat,w0,w1,w2,w3,w4,w5,w6"
        assert len(lines) == 2
        fields = lines[1].split(",")
        assert fields[0] == "100"
        weights = np.array([float(v) for v in fields[2:]])
        assert weights.sum() == pytest.approx(1.0, abs=1e-5)

    def test_bad_n_values(self, runner, tmp_path):
        result = runner.invoke(main, ["weights-table", "--out",
                                      str(tmp_path / "t.csv"), "--n-values", "abc"])
        assert result.exit_code != 0


class TestFitPredict:
    def test_round_trip(self, runner, tmp_path):
        n, p = 25, 2
        target = _write_sar_csv(tmp_path, "target.csv", n, p, seed=1)
        source = _write_sar_csv(tmp_path, "source.csv", n, p, seed=2, rho=0.35)
        w_csv = _write_grid_csv(tmp_path, n)
        fit_json = tmp_path / "fit.json"
        result = runner.invoke(main, [
            "fit", "--target", str(target), "--target-weights", str(w_csv),
            "--source", str(source), "--source-weights", str(w_csv),
            "--method", "mle", "--out", str(fit_json)])
        assert result.exit_code == 0, result.output
        payload = json.loads(fit_json.read_text())
        assert len(payload["candidates"]) == 2
        weights = np.array(payload["weights"])
        assert weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert payload["kkt_residual"] < 1e-8

        x_new = tmp_path / "x_new.csv"
        rng = np.random.default_rng(3)
        np.savetxt(x_new, rng.standard_normal((n, p)), delimiter=",",
                   header="x1,x2", comments="")
        out_csv = tmp_path / "mu.csv"
        result = runner.invoke(main, [
            "predict", "--fit", str(fit_json), "--x-new", str(x_new),
            "--weights-file", str(w_csv), "--out", str(out_csv)])
        assert result.exit_code == 0, result.output
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "mu_hat"
        assert len(lines) == n + 1

    def test_unpaired_source_weights(self, runner, tmp_path):
        n, p = 25, 2
        target = _write_sar_csv(tmp_path, "target.csv", n, p, seed=1)
        source = _write_sar_csv(tmp_path, "source.csv", n, p, seed=2)
        w_csv = _write_grid_csv(tmp_path, n)
        result = runner.invoke(main, [
            "fit", "--target", str(target), "--target-weights", str(w_csv),
            "--source", str(source), "--out", str(tmp_path / "fit.json")])
        assert result.exit_code != 0
        assert "paired" in result.output

    def test_covariate_count_mismatch(self, runner, tmp_path):
        target = _write_sar_csv(tmp_path, "target.csv", 25, 2, seed=1)
        source = _write_sar_csv(tmp_path, "source.csv", 25, 3, seed=2)
        w_csv = _write_grid_csv(tmp_path, 25)
        result = runner.invoke(main, [
            "fit", "--target", str(target), "--target-weights", str(w_csv),
            "--source", str(source), "--source-weights", str(w_csv),
            "--out", str(tmp_path / "fit.json")])
        assert result.exit_code != 0
        assert "mismatch" in result.output


class TestVerify:
    def test_identity_suite_passes(self, runner):
        result = runner.invoke(main, ["verify", "--suite", "identity", "--quick"])
        assert result.exit_code == 0, result.output
        assert "FAIL" not in result.output

    def test_unknown_suite_rejected(self, runner):
        result = runner.invoke(main, ["verify", "--suite", "nope"])
        assert result.exit_code != 0
