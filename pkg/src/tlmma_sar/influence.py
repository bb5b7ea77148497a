"""The Mallows penalty: trace of the target prediction Jacobian times Omega0.

The Jacobian d mu-hat / dy' is taken as a total derivative through both
beta-hat and rho-hat.  Everything here has a finite-difference twin
(:func:`jacobian_trace_fd`) used as the verification oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from tlmma_sar.estimators import (
    MLE,
    TSLS,
    Dataset,
    EstimationError,
    InstrumentSet,
    SarFit,
    _ProfileWork,
    build_instruments,
    fit_2sls,
    fit_mle,
    fitted_mean,
)
from tlmma_sar.spatial import WeightMatrix

_EXPLICIT_JACOBIAN_CAP = 256
_FD_REFIT_CAP = 256
_SCORE_TOL_SCALE = 1e-6


class InfluenceError(ValueError):
    """Raised when an analytic derivative is degenerate or inconsistent."""


@dataclass(frozen=True)
class PenaltyReport:
    """Traces entering the Mallows penalty for one target fit."""

    trace_J: float
    trace_JOmega: float
    omega_hat: np.ndarray
    method: str


def omega_hat(fit: SarFit, W: WeightMatrix) -> np.ndarray:
    """Plug-in error covariance sigma2-hat * S0^{-1} S0^{-T}."""
    S = np.eye(W.n) - fit.rho * W.entries
    try:
        Sinv = scipy.linalg.inv(S)
    except scipy.linalg.LinAlgError as exc:
        raise InfluenceError(f"I - rho*W singular at rho={fit.rho}") from exc
    omega = fit.sigma2 * (Sinv @ Sinv.T)
    return 0.5 * (omega + omega.T)


class _MleDerivWork:
    """Shared pieces for the MLE rho-gradient and Jacobian trace."""

    def __init__(self, fit: SarFit, data: Dataset):
        if fit.method != MLE:
            raise InfluenceError(f"expected an MLE fit, got {fit.method!r}")
        self.fit = fit
        self.data = data
        self.work = _ProfileWork(data)
        n = data.n
        score = self.work.score(fit.rho)
        if abs(score) > _SCORE_TOL_SCALE * n * n:
            raise InfluenceError(
                f"first-order condition violated at rho-hat: |score|={abs(score):.3g}"
            )
        self.S = np.eye(n) - fit.rho * data.W.entries
        self.lu = scipy.linalg.lu_factor(self.S)
        lam = data.W.eigenvalues()
        self.tr_sinv_w = float(np.sum(lam / (1.0 - fit.rho * lam)).real)
        self.tr_sinv_w_sq = float(np.sum((lam / (1.0 - fit.rho * lam)) ** 2).real)

    def solve(self, v: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self.lu, v)

    def annihilate(self, v: np.ndarray) -> np.ndarray:
        """Apply A = I - X(X'X)^{-1}X'."""
        coef, *_ = np.linalg.lstsq(self.data.X, v, rcond=None)
        return v - self.data.X @ coef

    def project(self, v: np.ndarray) -> np.ndarray:
        """Apply P0 = X(X'X)^{-1}X'."""
        coef, *_ = np.linalg.lstsq(self.data.X, v, rcond=None)
        return self.data.X @ coef

    def rho_gradient(self) -> np.ndarray:
        data, fit = self.data, self.fit
        n = data.n
        W = data.W.entries
        y = data.y
        Wy = self.work.Wy
        Ay = self.work.Ay
        AWy = self.work.AWy
        Sy = y - fit.rho * Wy
        ASy = Ay - fit.rho * AWy
        # numerator [n(W'A + AW - 2 rho W'AW) - 2 tr(S^{-1}W) S'AS] y
        num = n * (W.T @ Ay + AWy - 2.0 * fit.rho * (W.T @ AWy))
        num -= 2.0 * self.tr_sinv_w * (ASy - fit.rho * (W.T @ ASy))
        # implicit-function denominator -dF/drho of the score F; the sign of
        # the tr(S^{-1}WS^{-1}W) term follows the derivation validated by the
        # finite-difference oracle
        den = (
            n * float(Wy @ AWy)
            + float(ASy @ ASy) * self.tr_sinv_w_sq
            - 2.0 * self.tr_sinv_w * float(Wy @ ASy)
        )
        floor = 1e-10 * n * n * (1.0 + float(y @ y))
        if abs(den) <= floor:
            raise InfluenceError("degenerate score curvature in the rho-hat gradient")
        return num / den

    def dp_drho_y(self) -> np.ndarray:
        """(dP0-hat/drho) y with P0-hat = S^{-1} P0 S."""
        y = self.data.y
        W = self.data.W.entries
        Sy = self.S @ y
        t = self.solve(W @ self.solve(self.project(Sy)))
        v = self.solve(self.project(W @ y))
        return t - v


def drho_dy_mle(fit: SarFit, data: Dataset) -> np.ndarray:
    """Gradient of the MLE rho-hat with respect to y, at the fitted values."""
    return _MleDerivWork(fit, data).rho_gradient()


def jacobian_trace_mle(fit: SarFit, data: Dataset) -> float:
    """tr{d mu-hat / dy'} = tr(P0-hat) + (drho/dy')(dP0-hat/drho) y under MLE."""
    work = _MleDerivWork(fit, data)
    return float(data.p) + float(work.rho_gradient() @ work.dp_drho_y())


class _TslsDerivWork:
    """Shared pieces for the 2SLS delta-gradient and Jacobian trace."""

    def __init__(self, fit: SarFit, data: Dataset, instruments: InstrumentSet):
        if fit.method != TSLS:
            raise InfluenceError(f"expected a 2SLS fit, got {fit.method!r}")
        self.fit = fit
        self.data = data
        self.instruments = instruments
        n = data.n
        W = data.W.entries
        y = data.y
        Wy = W @ y
        Z = np.column_stack([data.X, Wy])
        QZ = instruments.apply_projector(Z)
        self.M = Z.T @ QZ
        self.QX = QZ[:, :-1]
        self.Qy = instruments.apply_projector(y)
        self.QWy = QZ[:, -1]
        self.G = W.T @ self.QX            # n x p, rows [W'QX]_i
        self.v = W.T @ self.QWy           # n-vector, [W'QWy]_i
        self.S = np.eye(n) - fit.rho * W
        self.lu = scipy.linalg.lu_factor(self.S)

    def solve(self, v: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self.lu, v)

    def ddelta_dy(self) -> np.ndarray:
        data, fit = self.data, self.fit
        W = data.W.entries
        p = data.p
        # column i of d(Z'QZ)/dy_i applied to delta-hat:
        #   ( rho-hat [W'QX]_i' ; [W'QX]_i beta-hat + 2 rho-hat [W'QWy]_i )
        first = np.empty((p + 1, data.n))
        first[:p] = fit.rho * self.G.T
        first[p] = self.G @ fit.beta + 2.0 * fit.rho * self.v
        second = np.empty((p + 1, data.n))
        second[:p] = self.QX.T
        second[p] = W.T @ self.Qy + self.QWy
        try:
            return scipy.linalg.solve(self.M, second - first, assume_a="sym")
        except scipy.linalg.LinAlgError as exc:
            raise InfluenceError("Z'QZ is singular") from exc

    def jacobian_trace(self, ddelta: np.ndarray | None = None,
                       zero_rho_gradient: bool = False) -> float:
        """tr[S^{-1}{W S^{-1} X beta-hat (drho/dy') + X (dbeta/dy')}].

        ``zero_rho_gradient`` isolates the beta-route term for structural tests.
        """
        if ddelta is None:
            ddelta = self.ddelta_dy()
        data, fit = self.data, self.fit
        dbeta = ddelta[:-1]
        drho = ddelta[-1]
        SinvX = self.solve(data.X)
        total = float(np.sum(dbeta.T * SinvX))
        if not zero_rho_gradient:
            c = self.solve(data.W.entries @ self.solve(data.X @ fit.beta))
            total += float(drho @ c)
        return total


def ddelta_dy_2sls(fit: SarFit, data: Dataset, instruments: InstrumentSet) -> np.ndarray:
    """Full (p+1) x n derivative of the 2SLS delta-hat with respect to y."""
    return _TslsDerivWork(fit, data, instruments).ddelta_dy()


def jacobian_trace_2sls(fit: SarFit, data: Dataset, instruments: InstrumentSet) -> float:
    """tr{d mu-hat / dy'} under 2SLS, via the chain rule through (beta-hat, rho-hat)."""
    return _TslsDerivWork(fit, data, instruments).jacobian_trace()


def jacobian_matrix(fit: SarFit, data: Dataset,
                    instruments: InstrumentSet | None = None) -> np.ndarray:
    """The explicit n x n Jacobian d mu-hat / dy' (test/cross-check path)."""
    if data.n > _EXPLICIT_JACOBIAN_CAP:
        raise InfluenceError(f"explicit Jacobian capped at n={_EXPLICIT_JACOBIAN_CAP}")
    if fit.method == MLE:
        work = _MleDerivWork(fit, data)
        # P0-hat = S^{-1} P0 S, assembled columnwise
        P0S = work.project(work.S)
        Phat = work.solve(P0S)
        return Phat + np.outer(work.dp_drho_y(), work.rho_gradient())
    if instruments is None:
        raise InfluenceError("2SLS Jacobian needs the instrument set")
    work = _TslsDerivWork(fit, data, instruments)
    ddelta = work.ddelta_dy()
    dbeta, drho = ddelta[:-1], ddelta[-1]
    inner = (data.W.entries @ work.solve(data.X @ fit.beta))[:, None] * drho[None, :]
    inner = inner + data.X @ dbeta
    return work.solve(inner)


def trace_j_omega(fit: SarFit, data: Dataset, omega: np.ndarray,
                  instruments: InstrumentSet | None = None,
                  explicit: bool | None = None) -> float:
    """tr{(d mu-hat / dy') Omega} for a given PSD matrix Omega.

    The structured path never materializes the Jacobian; ``explicit=True``
    forces the dense cross-check path (n <= 256).
    """
    if explicit is None:
        explicit = False
    if explicit:
        J = jacobian_matrix(fit, data, instruments)
        return float(np.trace(J @ omega))
    if fit.method == MLE:
        work = _MleDerivWork(fit, data)
        # tr{S^{-1} P0 S Omega} = tr{(X'X)^{-1} X' S Omega S^{-1} X}
        C1 = work.solve(data.X)
        C2 = work.S @ (omega @ C1)
        coef, *_ = np.linalg.lstsq(data.X, C2, rcond=None)
        term1 = float(np.trace(coef))
        term2 = float(work.rho_gradient() @ (omega @ work.dp_drho_y()))
        return term1 + term2
    if instruments is None:
        raise InfluenceError("2SLS trace needs the instrument set")
    work = _TslsDerivWork(fit, data, instruments)
    ddelta = work.ddelta_dy()
    dbeta, drho = ddelta[:-1], ddelta[-1]
    SinvX = work.solve(data.X)
    term1 = float(np.sum(dbeta.T * (omega @ SinvX)))
    c = work.solve(data.W.entries @ work.solve(data.X @ fit.beta))
    term2 = float(drho @ (omega @ c))
    return term1 + term2


def penalty(fit: SarFit, data: Dataset,
            instruments: InstrumentSet | None = None,
            explicit: bool | None = None) -> PenaltyReport:
    """Assemble the penalty traces tr{J} and tr{J Omega0-hat} for a target fit."""
    omega = omega_hat(fit, data.W)
    if fit.method == MLE:
        tj = jacobian_trace_mle(fit, data)
    else:
        if instruments is None:
            instruments = build_instruments(data)
        tj = jacobian_trace_2sls(fit, data, instruments)
    tjo = trace_j_omega(fit, data, omega, instruments, explicit=explicit)
    return PenaltyReport(trace_J=tj, trace_JOmega=tjo, omega_hat=omega, method=fit.method)


def _default_refit(method: str):
    if method == MLE:
        return fit_mle
    return lambda d: fit_2sls(d, build_instruments(d))


def jacobian_trace_fd(refit, data: Dataset, step_scale: float = 1e-5) -> float:
    """Central finite-difference estimate of tr{d mu-hat / dy'}.

    ``refit`` maps a Dataset to a SarFit; the per-coordinate step is
    step_scale*(1 + |y_i|).  Requires 2n refits, so guarded at n <= 256.
    """
    if data.n > _FD_REFIT_CAP:
        raise InfluenceError(f"finite-difference trace capped at n={_FD_REFIT_CAP}")
    if isinstance(refit, str):
        refit = _default_refit(refit)
    total = 0.0
    y = data.y
    for i in range(data.n):
        h = step_scale * (1.0 + abs(y[i]))
        mu = []
        for sign in (1.0, -1.0):
            y_pert = y.copy()
            y_pert[i] += sign * h
            pert = Dataset(X=data.X, y=y_pert, W=data.W, label=data.label)
            try:
                fit = refit(pert)
            except Exception as exc:
                raise InfluenceError(f"refit failed at coordinate {i}: {exc}") from exc
            mu.append(fitted_mean(fit, pert)[i])
        total += (mu[0] - mu[1]) / (2.0 * h)
    return total
