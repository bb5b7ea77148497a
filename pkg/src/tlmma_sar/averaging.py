"""Candidate assembly, the Mallows-type criterion, and simplex-constrained weights."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from tlmma_sar.estimators import Dataset, SarFit
from tlmma_sar.influence import PenaltyReport, trace_j_omega
from tlmma_sar.spatial import WeightMatrix

_SIMPLEX_TOL = 1e-10
_DEFAULT_KKT_TOL = 1e-8
_MAX_QP_ITER = 200_000


class AveragingError(ValueError):
    """Raised for invalid candidate sets or failed weight solves."""


@dataclass(frozen=True)
class CandidateSet:
    """Retained candidate fits and their predictions on the target design.

    ``predictions`` has one column per retained candidate, in candidate
    order (target first); dropped candidates are recorded with reasons.
    """

    fits: tuple
    target_data: Dataset
    predictions: np.ndarray
    retained: tuple
    dropped: tuple

    @property
    def n_candidates(self) -> int:
        return len(self.fits)


@dataclass(frozen=True)
class CriterionProblem:
    """Quadratic form of the criterion: C(w) = w'D'Dw + d'w over retained candidates."""

    D: np.ndarray
    d: np.ndarray
    Q: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.Q is None:
            object.__setattr__(self, "Q", self.D.T @ self.D)


@dataclass(frozen=True)
class AveragingSolution:
    """Simplex weights, criterion value, and diagnostics of one TLMMA solve."""

    weights: np.ndarray          # full-length, zeros at dropped candidates
    retained_weights: np.ndarray
    criterion_value: float
    kkt_residual: float
    retained: tuple
    dropped: tuple
    nu_hat: float | None = None


def candidate_predictions(fits, target_data: Dataset) -> CandidateSet:
    """Predictions (I - rho-hat_k W0)^{-1} X0 beta-hat_k for each retained candidate.

    Candidates whose rho-hat is flagged inadmissible or makes the target
    filter numerically singular are dropped with a warning; dropping the
    target candidate (index 0) is fatal.
    """
    fits = tuple(fits)
    if not fits:
        raise AveragingError("need at least the target candidate")
    W0 = target_data.W
    lo, hi = W0.admissible_interval()
    p = target_data.p
    retained, dropped, cols = [], [], []
    for k, fit in enumerate(fits):
        if fit.beta.size != p:
            raise AveragingError(
                f"candidate {k} has p={fit.beta.size}, target design has p={p}")
        if fit.inadmissible_rho or not (lo < fit.rho < hi):
            dropped.append((k, f"rho-hat {fit.rho:.6g} outside admissible interval"))
            continue
        S = np.eye(W0.n) - fit.rho * W0.entries
        try:
            col = np.linalg.solve(S, target_data.X @ fit.beta)
        except np.linalg.LinAlgError:
            dropped.append((k, f"I - rho-hat W0 singular at rho-hat {fit.rho:.6g}"))
            continue
        if not np.all(np.isfinite(col)):
            dropped.append((k, f"I - rho-hat W0 numerically singular at rho-hat {fit.rho:.6g}"))
            continue
        retained.append(k)
        cols.append(col)
    if 0 not in retained:
        raise AveragingError("target candidate dropped: transfer without a target model "
                             "is undefined")
    for k, reason in dropped:
        warnings.warn(f"candidate {k} dropped: {reason}", stacklevel=2)
    return CandidateSet(
        fits=fits,
        target_data=target_data,
        predictions=np.column_stack(cols),
        retained=tuple(retained),
        dropped=tuple(dropped),
    )


def assemble_criterion(cands: CandidateSet, pen: PenaltyReport) -> CriterionProblem:
    """Residual matrix D and penalty vector d of the quadratic criterion."""
    if pen.method != cands.fits[0].method:
        raise AveragingError(
            f"penalty computed under {pen.method!r} but candidates use "
            f"{cands.fits[0].method!r}")
    y0 = cands.target_data.y
    D = y0[:, None] - cands.predictions
    d = np.zeros(len(cands.retained))
    d[0] = 2.0 * pen.trace_JOmega
    return CriterionProblem(D=D, d=d)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    cond = u + (1.0 - css) / idx > 0
    k = idx[cond][-1]
    tau = (1.0 - css[k - 1]) / k
    return np.maximum(v + tau, 0.0)


def solve_simplex_qp(prob: CriterionProblem, tol: float = _DEFAULT_KKT_TOL,
                     max_iter: int = _MAX_QP_ITER) -> AveragingSolution:
    """Minimize w'Qw + d'w over the simplex by accelerated projected gradient.

    Terminates on a projected-KKT residual below ``tol``; cold-started at
    the uniform vector.  PSD-degenerate Q is fine (any minimizer accepted).
    """
    Q, d = prob.Q, prob.d
    m = Q.shape[0]
    eigmax = float(scipy.linalg.eigvalsh(Q)[-1]) if m > 1 else float(Q[0, 0])
    L = max(2.0 * eigmax, 1e-12)
    step = 1.0 / L
    w = np.full(m, 1.0 / m)
    z = w.copy()
    t = 1.0
    residual = np.inf
    for _ in range(max_iter):
        grad = 2.0 * (Q @ z) + d
        w_next = project_simplex(z - step * grad)
        grad_w = 2.0 * (Q @ w_next) + d
        residual = float(np.max(np.abs(w_next - project_simplex(w_next - grad_w))))
        if residual < tol:
            w = w_next
            break
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = w_next + ((t - 1.0) / t_next) * (w_next - w)
        # restart acceleration on objective increase (PSD-robust)
        if (w_next - w) @ grad > 0:
            z = w_next
            t_next = 1.0
        w, t = w_next, t_next
    else:
        raise AveragingError(
            f"QP iteration cap reached with KKT residual {residual:.3g} "
            f"(best objective {float(w @ Q @ w + d @ w):.6g})")
    w = np.clip(w, 0.0, None)
    w = w / w.sum()
    value = float(w @ Q @ w + d @ w)
    return AveragingSolution(
        weights=w, retained_weights=w, criterion_value=value,
        kkt_residual=residual, retained=tuple(range(m)), dropped=())


def solve_weights(cands: CandidateSet, pen: PenaltyReport,
                  tol: float = _DEFAULT_KKT_TOL) -> AveragingSolution:
    """End-to-end weight selection: criterion assembly, QP solve, scatter to full length."""
    prob = assemble_criterion(cands, pen)
    sol = solve_simplex_qp(prob, tol=tol)
    full = np.zeros(cands.n_candidates)
    full[list(cands.retained)] = sol.retained_weights
    return AveragingSolution(
        weights=full, retained_weights=sol.retained_weights,
        criterion_value=sol.criterion_value, kkt_residual=sol.kkt_residual,
        retained=cands.retained, dropped=cands.dropped)


def _check_simplex(omega: np.ndarray):
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < -_SIMPLEX_TOL) or abs(omega.sum() - 1.0) > _SIMPLEX_TOL:
        raise AveragingError(f"weights {omega} are not on the probability simplex")
    return omega


def evaluate_criterion(prob: CriterionProblem, omega: np.ndarray) -> float:
    """C(w) = w'Qw + d'w for a simplex point w."""
    omega = _check_simplex(omega)
    return float(omega @ prob.Q @ omega + prob.d @ omega)


def evaluate_criterion_direct(cands: CandidateSet, pen: PenaltyReport,
                              omega: np.ndarray) -> float:
    """||y0 - mu-hat(w)||^2 + 2 w_0 tr{J Omega0-hat}, evaluated without the Q form."""
    omega = _check_simplex(omega)
    mu = cands.predictions @ omega
    resid = cands.target_data.y - mu
    return float(resid @ resid) + 2.0 * omega[0] * pen.trace_JOmega


def criterion_known_omega(cands: CandidateSet, omega_true: np.ndarray,
                          omega: np.ndarray, instruments=None,
                          trace_j_omega_true: float | None = None) -> float:
    """The infeasible criterion C(w) with the true error covariance Omega0.

    Used to verify unbiasedness by Monte Carlo; ``trace_j_omega_true`` may
    be supplied to avoid recomputing tr{J Omega0} across weight vectors.
    """
    omega = _check_simplex(omega)
    omega_true = np.asarray(omega_true, dtype=float)
    if not np.allclose(omega_true, omega_true.T, atol=1e-9):
        raise AveragingError("true Omega0 must be symmetric")
    if trace_j_omega_true is None:
        target_fit = cands.fits[0]
        trace_j_omega_true = trace_j_omega(
            target_fit, cands.target_data, omega_true, instruments)
    mu = cands.predictions @ omega
    resid = cands.target_data.y - mu
    return float(resid @ resid) + 2.0 * omega[0] * trace_j_omega_true


def tlmma_predict(sol: AveragingSolution, fits, X_new: np.ndarray,
                  W0: WeightMatrix) -> np.ndarray:
    """Out-of-sample averaged prediction sum_k w_k (I - rho-hat_k W0)^{-1} X_new beta-hat_k.

    The same-region constraint requires X_new to have exactly n0 rows.
    """
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if X_new.shape[0] != W0.n:
        raise AveragingError(
            f"X_new has {X_new.shape[0]} rows but the same-region constraint "
            f"requires n0={W0.n}")
    fits = tuple(fits)
    out = np.zeros(W0.n)
    eye = np.eye(W0.n)
    for k, weight in zip(sol.retained, sol.weights[list(sol.retained)]):
        if weight == 0.0:
            continue
        fit = fits[k]
        S = eye - fit.rho * W0.entries
        out += weight * np.linalg.solve(S, X_new @ fit.beta)
    return out


def nu_hat(sol: AveragingSolution, informative) -> float:
    """Total weight assigned to the supplied informative candidate indices."""
    informative = sorted(set(int(i) for i in informative))
    if informative and not (0 <= min(informative) and max(informative) < sol.weights.size):
        raise AveragingError(f"informative indices {informative} out of range")
    return float(sol.weights[informative].sum())
