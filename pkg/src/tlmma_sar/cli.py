"""Command-line interface: simulation campaigns, data fitting, prediction, verification."""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import threadpoolctl
import yaml

from tlmma_sar import averaging, influence, simulation, verify
from tlmma_sar.estimators import (
    MLE,
    TSLS,
    build_instruments,
    fit_2sls,
    fit_mle,
    load_dataset_csv,
)
from tlmma_sar.spatial import load_weight_matrix

SCHEMA_VERSION = 1


def _fail(message: str):
    raise click.ClickException(message)


def _write_manifest(out_dir: Path, command: str, payload: dict):
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **payload,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _load_config(path: str) -> simulation.SimulationConfig:
    cfg_path = Path(path)
    if not cfg_path.exists():
        _fail(f"config file not found: {path}")
    try:
        payload = yaml.safe_load(cfg_path.read_text()) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark else ""
        _fail(f"invalid config {path}{where}: {exc}")
    if not isinstance(payload, dict):
        _fail(f"invalid config {path}: expected a key-value document")
    try:
        return simulation.config_from_dict(payload)
    except Exception as exc:
        _fail(f"invalid config {path}: {exc}")


_BLAS_LIMIT = None


@click.group()
def main():
    """TLMMA-SAR: parameter transfer for spatial autoregressive models."""
    # The matrices here are small (n <= a few hundred); multithreaded BLAS
    # only adds synchronization overhead, and the simulation commands already
    # parallelize across replications.
    global _BLAS_LIMIT
    _BLAS_LIMIT = threadpoolctl.threadpool_limits(limits=1)


@main.command("simulate")
@click.option("--config", "config_path", required=True, type=str, help="YAML config file.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override base_seed.")
@click.option("--method", type=click.Choice([MLE, TSLS]), default=None,
              help="Override estimation method.")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--quick", is_flag=True, help="Scale replication count down for CI.")
def cmd_simulate(config_path, out_dir, seed, method, threads, quick):
    """Run a simulation campaign: per-replication CSV plus aggregated JSON report."""
    config = _load_config(config_path)
    overrides = {"threads": threads}
    if seed is not None:
        overrides["base_seed"] = seed
    if method is not None:
        overrides["method"] = method
    if quick:
        overrides["replications"] = min(config.replications, 5)
    config = replace(config, **overrides)

    t0 = time.perf_counter()
    report = simulation.run_experiment(config)
    elapsed = time.perf_counter() - t0

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "replications.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "method", "mse_delta", "mse_mu"])
        for res in report.results:
            for m in (simulation.TLMMA, simulation.TARGET_ONLY, simulation.UNIFORM):
                writer.writerow([res.seed, m,
                                 f"{res.mse_delta[m]:.12g}", f"{res.mse_mu[m]:.12g}"])
    json_path = out / "report.json"
    json_path.write_text(json.dumps({
        "schema_version": SCHEMA_VERSION,
        "config": simulation.config_to_dict(config),
        "replications_done": report.replications_done,
        "failures": list(report.failures),
        "summaries": report.summaries,
        "averaged_weights": report.averaged_weights.tolist(),
    }, indent=2) + "\n")
    _write_manifest(out, "simulate", {
        "config_path": str(config_path),
        "resolved_seed": config.base_seed,
        "outputs": [str(csv_path), str(json_path)],
        "wall_clock_seconds": elapsed,
    })
    click.echo(f"wrote {csv_path} and {json_path} "
               f"({report.replications_done} replications, {elapsed:.1f}s)")


@main.command("weights-table")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--method", type=click.Choice([MLE, TSLS]), default=MLE, show_default=True)
@click.option("--n-values", default="100,225,400", show_default=True,
              help="Comma-separated sample sizes (perfect squares).")
@click.option("--replications", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=321, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--quick", is_flag=True, help="Two small n values, few replications.")
def cmd_weights_table(out_path, method, n_values, replications, seed, threads, quick):
    """Reproduce the weight-consistency table (n, nu-hat, w0..w6)."""
    if quick:
        ns, replications = [100, 225], min(replications, 5)
    else:
        try:
            ns = [int(v) for v in n_values.split(",") if v.strip()]
        except ValueError:
            _fail(f"bad --n-values {n_values!r}")
    t0 = time.perf_counter()
    try:
        rows = simulation.weight_consistency_experiment(
            ns, method, replications=replications, base_seed=seed, threads=threads)
    except Exception as exc:
        _fail(str(exc))
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "nu_hat", "w0", "w1", "w2", "w3", "w4", "w5", "w6"])
        for row in rows:
            writer.writerow([row.n, f"{row.nu_hat:.6f}"]
                            + [f"{w:.6f}" for w in row.weights])
    _write_manifest(out.parent, "weights-table", {
        "method": method, "n_values": ns, "replications": replications,
        "resolved_seed": seed, "outputs": [str(out)],
        "wall_clock_seconds": time.perf_counter() - t0,
    })
    click.echo(f"wrote {out}")


@main.command("fit")
@click.option("--target", "target_csv", required=True, type=str)
@click.option("--target-weights", required=True, type=str)
@click.option("--source", "sources", multiple=True, type=str,
              help="Source dataset CSV (repeatable, paired with --source-weights).")
@click.option("--source-weights", "source_weights", multiple=True, type=str)
@click.option("--method", type=click.Choice([MLE, TSLS]), default=MLE, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_fit(target_csv, target_weights, sources, source_weights, method, out_path):
    """Fit TLMMA-SAR on user data and write the fit/weights JSON."""
    if len(sources) != len(source_weights):
        _fail(f"{len(sources)} --source files but {len(source_weights)} "
              "--source-weights files; they must be paired")
    try:
        datasets = []
        for data_path, w_path in [(target_csv, target_weights),
                                  *zip(sources, source_weights)]:
            probe = np.loadtxt(data_path, delimiter=",", skiprows=1, ndmin=2)
            W = load_weight_matrix(w_path, n=probe.shape[0])
            datasets.append(load_dataset_csv(data_path, W))
    except Exception as exc:
        _fail(str(exc))
    p0 = datasets[0].p
    for path, data in zip([target_csv, *sources], datasets):
        if data.p != p0:
            _fail(f"covariate count mismatch: {target_csv} has p={p0} "
                  f"but {path} has p={data.p}")
    try:
        fits, target_instruments = [], None
        for k, data in enumerate(datasets):
            if method == MLE:
                fits.append(fit_mle(data))
            else:
                instruments = build_instruments(data)
                fits.append(fit_2sls(data, instruments))
                if k == 0:
                    target_instruments = instruments
        cands = averaging.candidate_predictions(fits, datasets[0])
        pen = influence.penalty(fits[0], datasets[0], target_instruments)
        sol = averaging.solve_weights(cands, pen)
    except Exception as exc:
        _fail(str(exc))
    payload = {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "candidates": [
            {"index": k, "source": str(path), "beta": fit.beta.tolist(),
             "rho": fit.rho, "sigma2": fit.sigma2,
             "inadmissible_rho": fit.inadmissible_rho}
            for k, (path, fit) in enumerate(zip([target_csv, *sources], fits))
        ],
        "weights": sol.weights.tolist(),
        "criterion_value": sol.criterion_value,
        "kkt_residual": sol.kkt_residual,
        "penalty_trace_j_omega": pen.trace_JOmega,
        "dropped": [{"index": k, "reason": reason} for k, reason in sol.dropped],
    }
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n")
    click.echo(f"wrote {out}")


@main.command("predict")
@click.option("--fit", "fit_json", required=True, type=str, help="Fit JSON from 'fit'.")
@click.option("--x-new", "x_new_csv", required=True, type=str,
              help="CSV of new covariates (header row, no y column).")
@click.option("--weights-file", "w0_path", required=True, type=str,
              help="Target weight-matrix file (edge list or CSV).")
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_predict(fit_json, x_new_csv, w0_path, out_path):
    """Out-of-sample TLMMA prediction on a fresh design for the same region."""
    try:
        payload = json.loads(Path(fit_json).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _fail(f"cannot read fit file {fit_json}: {exc}")
    try:
        X_new = np.loadtxt(x_new_csv, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        _fail(f"cannot read {x_new_csv}: {exc}")
    try:
        W0 = load_weight_matrix(w0_path, n=X_new.shape[0])
    except Exception as exc:
        _fail(f"X_new must have n0 rows matching the target region weights "
              f"(same-region constraint): {exc}")
    weights = np.asarray(payload["weights"], dtype=float)
    mu = np.zeros(X_new.shape[0])
    for cand, w in zip(payload["candidates"], weights):
        if w == 0.0:
            continue
        S = np.eye(W0.n) - float(cand["rho"]) * W0.entries
        mu += w * np.linalg.solve(S, X_new @ np.asarray(cand["beta"]))
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mu_hat"])
        for v in mu:
            writer.writerow([f"{v:.12g}"])
    click.echo(f"wrote {out}")


@main.command("verify")
@click.option("--suite", "suites", multiple=True,
              type=click.Choice(sorted(verify.SUITES)),
              help="Run only the named suites (repeatable; default all).")
@click.option("--quick", is_flag=True, help="Reduced instance counts.")
def cmd_verify(suites, quick):
    """Run the built-in verification suites and print a pass/fail table."""
    results = verify.run_suites(suites or None, quick=quick)
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        failed += not res.passed
        click.echo(f"[{status}] {res.suite:10s} {res.name:30s} {res.detail}")
    click.echo(f"{len(results) - failed}/{len(results)} checks passed")
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()
