"""Built-in verification suites: FD Jacobian, QP brute force, unbiasedness, identities."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from tlmma_sar import averaging, influence, simulation
from tlmma_sar.estimators import (
    MLE,
    TSLS,
    Dataset,
    build_instruments,
    fit_2sls,
    fit_mle,
)
from tlmma_sar.spatial import build_grid_weights, row_normalize


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str


def _sar_instance(n: int, p: int, seed: int, rho: float = 0.4):
    W = row_normalize(build_grid_weights(n, "horizontal"))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = rng.standard_normal(p)
    S = np.eye(n) - rho * W.entries
    y = np.linalg.solve(S, X @ beta + rng.standard_normal(n))
    return Dataset(X=X, y=y, W=W)


def jacobian_suite(quick: bool = False, trace_perturbation: float = 0.0):
    """Analytic vs finite-difference Jacobian traces on seeded small instances.

    ``trace_perturbation`` multiplies the analytic trace by (1 + eps); a
    nonzero value is a fault-injection self-test and must fail the suite.
    """
    sizes = [(25, 2), (36, 3)] if quick else [(25, 2), (25, 3), (36, 2), (36, 3), (49, 3)]
    seeds = [0, 1] if quick else [0, 1, 2, 3]
    out = []
    for (n, p), seed in itertools.product(sizes, seeds):
        data = _sar_instance(n, p, seed)
        fd_mle = influence.jacobian_trace_fd(MLE, data)
        fit = fit_mle(data)
        analytic = influence.jacobian_trace_mle(fit, data) * (1.0 + trace_perturbation)
        rel = abs(analytic - fd_mle) / (1.0 + abs(analytic))
        out.append(CheckResult(
            "jacobian", f"mle n={n} p={p} seed={seed}", rel < 1e-3,
            f"analytic={analytic:.6f} fd={fd_mle:.6f} rel={rel:.2e}"))
        instruments = build_instruments(data)
        fit2 = fit_2sls(data, instruments)
        analytic2 = influence.jacobian_trace_2sls(fit2, data, instruments)
        analytic2 *= (1.0 + trace_perturbation)
        fd_2sls = influence.jacobian_trace_fd(TSLS, data)
        rel2 = abs(analytic2 - fd_2sls) / (1.0 + abs(analytic2))
        out.append(CheckResult(
            "jacobian", f"2sls n={n} p={p} seed={seed}", rel2 < 1e-4,
            f"analytic={analytic2:.6f} fd={fd_2sls:.6f} rel={rel2:.2e}"))
    return out


def brute_force_simplex(Q: np.ndarray, d: np.ndarray, step: float = 1e-3) -> float:
    """Exhaustive grid search of w'Qw + d'w over the K=2 simplex."""
    assert Q.shape[0] == 3
    grid = np.arange(0.0, 1.0 + step / 2, step)
    w0, w1 = np.meshgrid(grid, grid, indexing="ij")
    w0, w1 = w0.ravel(), w1.ravel()
    keep = w0 + w1 <= 1.0 + step / 2
    W = np.column_stack([w0[keep], w1[keep], 1.0 - w0[keep] - w1[keep]])
    np.clip(W, 0.0, None, out=W)
    values = np.einsum("ij,jk,ik->i", W, Q, W) + W @ d
    return float(values.min())


def qp_suite(quick: bool = False):
    """Solver objective vs brute force, plus the three analytic instances."""
    out = []
    analytic = [
        (np.eye(2), np.zeros(2), np.array([0.5, 0.5]), 0.5),
        (np.diag([1.0, 2.0]), np.zeros(2), np.array([2 / 3, 1 / 3]), 2 / 3),
        (np.eye(2), np.array([-4.0, 0.0]), np.array([1.0, 0.0]), -3.0),
    ]
    for i, (Q, d, w_star, v_star) in enumerate(analytic):
        sol = averaging.solve_simplex_qp(averaging.CriterionProblem(D=np.zeros((0, 2)),
                                                                   d=d, Q=Q))
        ok = (np.max(np.abs(sol.retained_weights - w_star)) < 1e-8
              and abs(sol.criterion_value - v_star) < 1e-8)
        out.append(CheckResult("qp", f"analytic instance {i}", ok,
                               f"w={sol.retained_weights} value={sol.criterion_value:.10f}"))
    rng = np.random.default_rng(7)
    n_random = 10 if quick else 50
    for i in range(n_random):
        A = rng.standard_normal((4, 3))
        Q = A.T @ A
        d = np.concatenate([rng.standard_normal(1) * 2, np.zeros(2)])
        sol = averaging.solve_simplex_qp(averaging.CriterionProblem(D=np.zeros((0, 3)),
                                                                   d=d, Q=Q))
        ref = brute_force_simplex(Q, d)
        gap = sol.criterion_value - ref
        out.append(CheckResult("qp", f"random psd {i}", gap < 1e-6,
                               f"solver={sol.criterion_value:.8f} grid={ref:.8f}"))
    return out


def unbiasedness_suite(quick: bool = False, n0: int = 64, p: int = 3,
                   draws: int | None = None, seed: int = 11):
    """Monte Carlo unbiasedness of the known-Omega criterion.

    Fixed X and W across draws; over fresh normal error draws the mean of
    C(w) must match the mean of L(w) + tr(Omega0) within 3 MC standard errors.
    """
    draws = draws if draws is not None else (400 if quick else 2000)
    rng = np.random.default_rng(seed)
    W = row_normalize(build_grid_weights(n0, "horizontal"))
    rho_true = 0.4
    K = 2
    X_list = [rng.standard_normal((n0, p)) for _ in range(K + 1)]
    beta_list = [np.array([1.0, 1.0, 0.5]),
                 np.array([1.0, 1.0, 0.5]),
                 np.array([1.0, 0.5, 0.0])][: K + 1]
    S = np.eye(n0) - rho_true * W.entries
    Sinv = scipy.linalg.inv(S)
    omega_true = Sinv @ Sinv.T
    tr_omega = float(np.trace(omega_true))
    mu_target = Sinv @ (X_list[0] @ beta_list[0])
    omegas = [np.array([1.0, 0.0, 0.0]),
              np.full(3, 1.0 / 3.0),
              np.array([0.7, 0.2, 0.1])]
    gaps = np.zeros((draws, len(omegas)))
    for r in range(draws):
        fits = []
        target_data = None
        for k in range(K + 1):
            eps = rng.standard_normal(n0)
            y = Sinv @ (X_list[k] @ beta_list[k] + eps)
            data = Dataset(X=X_list[k], y=y, W=W)
            fits.append(fit_mle(data))
            if k == 0:
                target_data = data
        cands = averaging.candidate_predictions(fits, target_data)
        tj = influence.trace_j_omega(fits[0], target_data, omega_true)
        for j, w in enumerate(omegas):
            c = averaging.criterion_known_omega(cands, omega_true, w,
                                                trace_j_omega_true=tj)
            mu_w = cands.predictions @ w
            loss = float((mu_w - mu_target) @ (mu_w - mu_target))
            gaps[r, j] = c - loss - tr_omega
    out = []
    labels = ["e0", "uniform", "(0.7,0.2,0.1)"]
    for j, label in enumerate(labels):
        mean_gap = float(np.mean(gaps[:, j]))
        se = float(np.std(gaps[:, j], ddof=1) / np.sqrt(draws))
        out.append(CheckResult(
            "unbiasedness", f"omega={label}", abs(mean_gap) <= 3.0 * se,
            f"mean gap={mean_gap:.4f} (3 MC se = {3 * se:.4f}, draws={draws})"))
    return out


def identity_suite(quick: bool = False):
    """Quadratic-form vs direct criterion evaluation on random simplex points."""
    out = []
    n_points = 20 if quick else 100
    for method in (MLE, TSLS):
        data = _sar_instance(49, 3, seed=5)
        source = _sar_instance(49, 3, seed=6, rho=0.3)
        if method == MLE:
            fits = [fit_mle(data), fit_mle(source)]
            instruments = None
        else:
            instruments = build_instruments(data)
            fits = [fit_2sls(data, instruments),
                    fit_2sls(source, build_instruments(source))]
        # source candidate predicted on the target design
        cands = averaging.candidate_predictions(fits, data)
        pen = influence.penalty(fits[0], data, instruments)
        prob = averaging.assemble_criterion(cands, pen)
        rng = np.random.default_rng(17)
        worst = 0.0
        for _ in range(n_points):
            w = rng.dirichlet(np.ones(len(cands.retained)))
            quad = averaging.evaluate_criterion(prob, w)
            direct = averaging.evaluate_criterion_direct(cands, pen, w)
            worst = max(worst, abs(quad - direct) / (1.0 + abs(direct)))
        out.append(CheckResult("identity", f"criterion identity ({method})",
                               worst < 1e-8, f"worst rel gap={worst:.2e}"))
    return out


SUITES = {
    "jacobian": jacobian_suite,
    "qp": qp_suite,
    "unbiasedness": unbiasedness_suite,
    "identity": identity_suite,
}


def run_suites(names=None, quick: bool = False):
    names = list(names) if names else list(SUITES)
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; available: {sorted(SUITES)}")
        results.extend(SUITES[name](quick=quick))
    return results
