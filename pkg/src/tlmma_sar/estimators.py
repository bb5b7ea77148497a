"""SAR model fitting by concentrated maximum likelihood and 2SLS."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize_scalar

from tlmma_sar.spatial import WeightMatrix, log_det_from_eigs

MLE = "mle"
TSLS = "2sls"

_RHO_XATOL = 1e-10
_GRID_POINTS = 50


class EstimationError(ValueError):
    """Raised when a SAR fit cannot be computed."""


@dataclass(frozen=True)
class Dataset:
    """Design matrix X (n x p), response y (n,), and a normalized weight matrix."""

    X: np.ndarray
    y: np.ndarray
    W: WeightMatrix
    label: str = ""

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise EstimationError("dataset entries must be finite")
        if X.shape[0] != y.size:
            raise EstimationError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if X.shape[0] != self.W.n:
            raise EstimationError(
                f"X has {X.shape[0]} rows but weight matrix is {self.W.n}x{self.W.n}"
            )
        if X.shape[0] <= X.shape[1]:
            raise EstimationError(f"need n > p, got n={X.shape[0]}, p={X.shape[1]}")
        X = X.copy()
        X.setflags(write=False)
        y = y.copy()
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SarFit:
    """Estimated SAR parameters (beta, rho, sigma2) with method tag."""

    beta: np.ndarray
    rho: float
    sigma2: float
    method: str
    inadmissible_rho: bool = False
    dataset_ref: str = ""

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).ravel().copy()
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def delta(self) -> np.ndarray:
        """The stacked parameter vector (beta', rho)'."""
        return np.concatenate([self.beta, [self.rho]])


@dataclass(frozen=True)
class InstrumentSet:
    """Instrument matrix H and its projector, applied through a thin QR factor."""

    H: np.ndarray
    q_factor: np.ndarray = field(repr=False)

    def apply_projector(self, v: np.ndarray) -> np.ndarray:
        """Compute Q v = H (H'H)^{-1} H' v."""
        return self.q_factor @ (self.q_factor.T @ v)

    def projector(self) -> np.ndarray:
        """The explicit n x n projector matrix (fine at the scales used here)."""
        return self.q_factor @ self.q_factor.T


def _check_full_column_rank(M: np.ndarray, what: str):
    rank = np.linalg.matrix_rank(M)
    if rank < M.shape[1]:
        # identify dependent columns via pivoted QR for the error message
        _, _, piv = scipy.linalg.qr(M, mode="economic", pivoting=True)
        offending = sorted(int(c) for c in piv[rank:])
        raise EstimationError(f"{what} is rank-deficient (rank {rank} < {M.shape[1]}); "
                              f"dependent columns: {offending}")


class _ProfileWork:
    """Cached quantities for the concentrated SAR log-likelihood.

    With A the annihilator of X, the profiled residual norm
    ||A S(rho) y||^2 = ||Ay||^2 - 2 rho (Ay)'(AWy) + rho^2 ||AWy||^2
    is quadratic in rho, so each likelihood evaluation costs O(n) once
    Ay, AWy, and the eigenvalues of W are known.
    """

    def __init__(self, data: Dataset):
        _check_full_column_rank(data.X, "design matrix X")
        self.data = data
        self.Wy = data.W.entries @ data.y
        # annihilate via least squares rather than forming A explicitly
        coef, *_ = np.linalg.lstsq(data.X, np.column_stack([data.y, self.Wy]), rcond=None)
        resid = np.column_stack([data.y, self.Wy]) - data.X @ coef
        self.Ay = resid[:, 0]
        self.AWy = resid[:, 1]
        self.aa = float(self.Ay @ self.Ay)
        self.ab = float(self.Ay @ self.AWy)
        self.bb = float(self.AWy @ self.AWy)

    def residual_norm2(self, rho: float) -> float:
        return max(self.aa - 2.0 * rho * self.ab + rho * rho * self.bb, 0.0)

    def loglik(self, rho: float) -> float:
        q = self.residual_norm2(rho)
        if q == 0.0:
            return math.inf
        n = self.data.n
        return -0.5 * n * math.log(q) + log_det_from_eigs(self.data.W, rho)

    def score(self, rho: float) -> float:
        """First-order condition n y'W'A(I - rho W)y - tr(S^{-1}W) ||ASy||^2."""
        n = self.data.n
        lam = self.data.W.eigenvalues()
        tr_sinv_w = float(np.sum(lam / (1.0 - rho * lam)).real)
        return n * (self.ab - rho * self.bb) - tr_sinv_w * self.residual_norm2(rho)

    def score_derivative(self, rho: float) -> float:
        n = self.data.n
        lam = self.data.W.eigenvalues()
        ratio = lam / (1.0 - rho * lam)
        tr_sinv_w = float(np.sum(ratio).real)
        tr_sinv_w_sq = float(np.sum(ratio * ratio).real)
        return (-n * self.bb - tr_sinv_w_sq * self.residual_norm2(rho)
                + 2.0 * tr_sinv_w * (self.ab - rho * self.bb))


def concentrated_loglik(rho: float, data: Dataset) -> float:
    """Profiled SAR log-likelihood in rho, up to an additive constant.

    Returns ``math.inf`` as a sentinel when the profiled residual vanishes
    (exactly interpolating data).
    """
    lo, hi = data.W.admissible_interval()
    if not (lo < rho < hi):
        raise EstimationError(f"rho={rho} outside admissible interval ({lo:.6g}, {hi:.6g})")
    return _ProfileWork(data).loglik(rho)


def mle_closed_forms(rho: float, data: Dataset) -> tuple[np.ndarray, float]:
    """beta-hat and sigma2-hat at a fixed rho (the profiling closed forms)."""
    Sy = data.y - rho * (data.W.entries @ data.y)
    beta, *_ = np.linalg.lstsq(data.X, Sy, rcond=None)
    resid = Sy - data.X @ beta
    return beta, float(resid @ resid) / data.n


def fit_mle(data: Dataset) -> SarFit:
    """Fit a SAR model by maximizing the concentrated log-likelihood over rho.

    A coarse grid pre-scan guards against local maxima; the winning bracket
    is refined by bounded scalar minimization to 1e-10 in rho.
    """
    work = _ProfileWork(data)
    lo, hi = data.W.admissible_interval()
    margin = 1e-6 * (hi - lo)
    grid = np.linspace(lo + margin, hi - margin, _GRID_POINTS)
    values = np.array([work.loglik(r) for r in grid])
    if not np.any(np.isfinite(values) | np.isposinf(values)):
        raise EstimationError("concentrated likelihood non-finite on the entire pre-scan grid")
    best = int(np.argmax(values))
    bl = grid[max(best - 1, 0)]
    bh = grid[min(best + 1, len(grid) - 1)]
    def neg_loglik(r):
        v = work.loglik(r)
        # the +inf sentinel (interpolating data) must stay finite for the
        # scalar minimizer's interpolation arithmetic
        return -v if math.isfinite(v) else -1e300

    res = minimize_scalar(
        neg_loglik, bounds=(bl, bh), method="bounded",
        options={"xatol": _RHO_XATOL},
    )
    rho_hat = float(res.x)
    if work.loglik(rho_hat) < values[best]:
        rho_hat = float(grid[best])
    # Newton polish of the score root; the bounded refinement above leaves
    # optimizer-level noise in rho-hat that the influence module's
    # finite-difference oracle would otherwise see
    if work.residual_norm2(rho_hat) > 0.0:
        for _ in range(4):
            fp = work.score_derivative(rho_hat)
            if fp == 0.0:
                break
            step = work.score(rho_hat) / fp
            cand = rho_hat - step
            if not (lo < cand < hi) or work.loglik(cand) < work.loglik(rho_hat) - 1e-9:
                break
            rho_hat = cand
            if abs(step) < 1e-14:
                break
    beta_hat, sigma2 = mle_closed_forms(rho_hat, data)
    # interpolation detection is relative to the profiled residual at rho=0
    if work.residual_norm2(rho_hat) <= 1e-12 * work.aa:
        warnings.warn("exactly interpolating data: sigma2-hat is ~0", stacklevel=2)
    return SarFit(beta=beta_hat, rho=rho_hat, sigma2=sigma2, method=MLE,
                  dataset_ref=data.label)


def mle_score(fit: SarFit, data: Dataset) -> float:
    """Residual of the MLE first-order condition at the fitted rho."""
    return _ProfileWork(data).score(fit.rho)


def build_instruments(data: Dataset) -> InstrumentSet:
    """Instruments H = (X, WX) for the endogenous spatial lag, with QR projector."""
    H = np.column_stack([data.X, data.W.entries @ data.X])
    _check_full_column_rank(H, "instrument matrix H = (X, WX)")
    q_factor, _ = np.linalg.qr(H)
    return InstrumentSet(H=H, q_factor=q_factor)


def fit_2sls(data: Dataset, instruments: InstrumentSet | None = None) -> SarFit:
    """Fit a SAR model by two-stage least squares with Z = (X, Wy).

    A rho-hat outside the admissible interval is flagged, not clamped;
    downstream candidate screening decides its fate.
    """
    if instruments is None:
        instruments = build_instruments(data)
    Wy = data.W.entries @ data.y
    Z = np.column_stack([data.X, Wy])
    QZ = instruments.apply_projector(Z)
    M = Z.T @ QZ
    rhs = QZ.T @ data.y
    try:
        delta = scipy.linalg.solve(M, rhs, assume_a="sym")
    except scipy.linalg.LinAlgError as exc:
        raise EstimationError("Z'QZ is singular") from exc
    if not np.all(np.isfinite(delta)):
        raise EstimationError("Z'QZ is numerically singular")
    beta, rho = delta[:-1], float(delta[-1])
    resid = data.y - rho * Wy - data.X @ beta
    sigma2 = float(resid @ resid) / data.n
    lo, hi = data.W.admissible_interval()
    inadmissible = not (lo < rho < hi)
    return SarFit(beta=beta, rho=rho, sigma2=sigma2, method=TSLS,
                  inadmissible_rho=inadmissible, dataset_ref=data.label)


def residual_variance(fit: SarFit, data: Dataset) -> float:
    """sigma2-hat recomputed from a fit: ||A S y||^2/n (MLE) or the 2SLS residual form."""
    Wy = data.W.entries @ data.y
    if fit.method == MLE:
        Sy = data.y - fit.rho * Wy
        coef, *_ = np.linalg.lstsq(data.X, Sy, rcond=None)
        resid = Sy - data.X @ coef
    else:
        resid = data.y - fit.rho * Wy - data.X @ fit.beta
    return float(resid @ resid) / data.n


def fitted_mean(fit: SarFit, data: Dataset) -> np.ndarray:
    """In-sample reduced-form mean (I - rho-hat W)^{-1} X beta-hat."""
    S = np.eye(data.n) - fit.rho * data.W.entries
    return np.linalg.solve(S, data.X @ fit.beta)


def load_dataset_csv(path, W: WeightMatrix, label: str = "") -> Dataset:
    """Read a dataset CSV: header row, first column y, remaining columns covariates.

    Row order must match the weight-matrix index order.
    """
    import csv

    with open(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EstimationError(f"{path}: empty file") from None
        if not header or header[0].strip().lower() != "y":
            raise EstimationError(f"{path}: first column must be 'y', got {header[:1]}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise EstimationError(f"{path}: row {lineno} has {len(row)} fields, "
                                      f"expected {len(header)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise EstimationError(f"{path}: row {lineno} is malformed") from exc
    values = np.array(rows)
    return Dataset(X=values[:, 1:], y=values[:, 0], W=W, label=label or str(path))
