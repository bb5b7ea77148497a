"""Dense spatial weight matrices and the spatial filter I - rho*W.

All objects are immutable after construction; matrices are stored densely
(problem sizes here stay around n <= 1024).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

RHO_BOUND = 0.999
_SINGULAR_FLOOR = 1e-10


class SpatialError(ValueError):
    """Raised for invalid weight matrices or singular spatial filters."""


@dataclass(frozen=True)
class WeightMatrix:
    """An n x n spatial weight matrix with zero diagonal.

    Parameters
    ----------
    entries : ndarray
        Dense non-negative matrix with zero diagonal.
    normalized : bool
        True when each nonzero row sums to one.
    """

    entries: np.ndarray
    normalized: bool = False
    # lazily computed eigenvalues of W, shared by log-det and trace formulas
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise SpatialError(f"weight matrix must be square, got shape {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise SpatialError("weight matrix entries must be finite")
        if np.any(entries < 0):
            raise SpatialError("weight matrix entries must be non-negative")
        if np.any(np.abs(np.diag(entries)) > 0):
            raise SpatialError("weight matrix diagonal must be zero")
        if self.normalized:
            sums = entries.sum(axis=1)
            bad = (sums > 0) & (np.abs(sums - 1.0) > 1e-12)
            if np.any(bad):
                raise SpatialError("normalized flag set but some nonzero rows do not sum to 1")
        entries = entries.copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of W (possibly complex), computed once and cached."""
        if "eig" not in self._cache:
            self._cache["eig"] = np.linalg.eigvals(self.entries)
        return self._cache["eig"]

    def admissible_interval(self) -> tuple[float, float]:
        """Open interval of rho values for which I - rho*W is kept nonsingular.

        Row-normalized matrices have spectral radius 1, so the interval is
        fixed at (-0.999, 0.999).  Raw matrices use reciprocal extreme real
        eigenvalues, shrunk by the same safety factor.
        """
        if self.normalized:
            return (-RHO_BOUND, RHO_BOUND)
        lam = self.eigenvalues().real
        lam_max = lam.max() if lam.size else 0.0
        lam_min = lam.min() if lam.size else 0.0
        hi = RHO_BOUND / lam_max if lam_max > 0 else math.inf
        lo = RHO_BOUND / lam_min if lam_min < 0 else -math.inf
        return (lo, hi)


@dataclass(frozen=True)
class SpatialFilter:
    """The filter S(rho) = I - rho*W with an invertibility certificate."""

    rho: float
    base: WeightMatrix
    matrix: np.ndarray
    min_singular_value: float


def build_grid_weights(n: int, direction: str) -> WeightMatrix:
    """Adjacency weights for units placed row-major on a sqrt(n) x sqrt(n) grid.

    ``horizontal`` links each unit to its left/right neighbours, ``vertical``
    to its top/bottom neighbours; links are symmetric with weight 1.
    """
    m = math.isqrt(int(n))
    if m * m != n or m < 2:
        raise SpatialError(f"grid size {n} is not a perfect square with side >= 2")
    if direction not in ("horizontal", "vertical"):
        raise SpatialError(f"unknown direction {direction!r}")
    W = np.zeros((n, n))
    for i in range(n):
        row, col = divmod(i, m)
        if direction == "horizontal":
            if col + 1 < m:
                W[i, i + 1] = 1.0
                W[i + 1, i] = 1.0
        else:
            if row + 1 < m:
                W[i, i + m] = 1.0
                W[i + m, i] = 1.0
    return WeightMatrix(W, normalized=False)


def row_normalize(W: WeightMatrix) -> WeightMatrix:
    """Divide each row by its sum; all-zero rows (isolated units) stay zero."""
    entries = np.array(W.entries, dtype=float)
    sums = entries.sum(axis=1)
    nz = sums > 0
    entries[nz] = entries[nz] / sums[nz, None]
    return WeightMatrix(entries, normalized=True)


def weights_from_edge_list(n: int, edges, symmetric: bool = True) -> WeightMatrix:
    """Build a raw weight matrix from 1-based (i, j[, w]) edge tuples."""
    W = np.zeros((n, n))
    for edge in edges:
        if len(edge) == 2:
            i, j = edge
            w = 1.0
        else:
            i, j, w = edge
        if not (1 <= i <= n and 1 <= j <= n):
            raise SpatialError(f"edge ({i}, {j}) out of range for n={n}")
        if i == j:
            raise SpatialError(f"self-loop at unit {i} is not allowed")
        W[i - 1, j - 1] = w
        if symmetric:
            W[j - 1, i - 1] = w
    return WeightMatrix(W, normalized=False)


def spatial_filter(W: WeightMatrix, rho: float) -> SpatialFilter:
    """Form S = I - rho*W, certifying invertibility at construction."""
    lo, hi = W.admissible_interval()
    if not (lo < rho < hi):
        raise SpatialError(f"rho={rho} outside admissible interval ({lo:.6g}, {hi:.6g})")
    S = np.eye(W.n) - rho * W.entries
    smin = float(np.linalg.svd(S, compute_uv=False)[-1]) if W.n else 1.0
    if smin <= _SINGULAR_FLOOR:
        raise SpatialError(f"spatial filter numerically singular at rho={rho}")
    return SpatialFilter(rho=float(rho), base=W, matrix=S, min_singular_value=smin)


def reduced_form_mean(filt: SpatialFilter, X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Solve S*mu = X*beta for the reduced-form mean mu."""
    rhs = np.asarray(X) @ np.asarray(beta)
    try:
        return np.linalg.solve(filt.matrix, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - certified at build
        raise SpatialError(f"singular spatial filter at rho={filt.rho}") from exc


def log_det_filter(filt: SpatialFilter) -> float:
    """Sign-aware log|det S| from a pivoted LU factorization."""
    sign, logdet = np.linalg.slogdet(filt.matrix)
    if sign == 0:
        raise SpatialError(f"zero determinant at rho={filt.rho}")
    return float(logdet)


def log_det_from_eigs(W: WeightMatrix, rho: float) -> float:
    """log|det(I - rho*W)| via the cached eigenvalues of W.

    Equivalent to :func:`log_det_filter` but O(n) per rho once the
    eigenvalues are known, which makes profile-likelihood scans cheap.
    """
    factors = np.abs(1.0 - rho * W.eigenvalues())
    if np.any(factors <= 0):
        raise SpatialError(f"zero determinant at rho={rho}")
    return float(np.sum(np.log(factors)))


def read_edge_list(path, n: int, symmetric: bool = True) -> WeightMatrix:
    """Read a whitespace-separated ``i j [w]`` edge-list file (1-based, # comments)."""
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise SpatialError(f"{path}:{lineno}: expected 'i j [w]', got {line!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError as exc:
                raise SpatialError(f"{path}:{lineno}: malformed edge {line!r}") from exc
            edges.append((i, j, w))
    return weights_from_edge_list(n, edges, symmetric=symmetric)


def read_matrix_csv(path) -> WeightMatrix:
    """Read a dense weight matrix stored as n rows of comma-separated reals."""
    entries = np.loadtxt(path, delimiter=",", ndmin=2)
    return WeightMatrix(entries, normalized=False)


def load_weight_matrix(path, n: int | None = None, normalize: bool = True) -> WeightMatrix:
    """Load a weight matrix from a ``.csv`` dense file or an edge-list file."""
    path = str(path)
    if path.endswith(".csv"):
        W = read_matrix_csv(path)
        if n is not None and W.n != n:
            raise SpatialError(f"{path}: weight matrix is {W.n}x{W.n}, expected n={n}")
    else:
        if n is None:
            raise SpatialError(f"{path}: edge-list format needs the number of units")
        W = read_edge_list(path, n)
    return row_normalize(W) if normalize else W
