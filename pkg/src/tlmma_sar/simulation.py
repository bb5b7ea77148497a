"""Monte Carlo harness: data-generating processes, scenarios, metrics, replications."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.linalg

from tlmma_sar import averaging, influence
from tlmma_sar.estimators import (
    MLE,
    TSLS,
    Dataset,
    SarFit,
    build_instruments,
    fit_2sls,
    fit_mle,
)
from tlmma_sar.spatial import WeightMatrix, build_grid_weights, row_normalize

SCENARIO_ALL_CORRECT = "all_correct"
SCENARIO_SOURCE_PARTIAL = "source_partial_misspec"
SCENARIO_TARGET_AND_SOURCE = "target_and_source_misspec"
_SCENARIOS = (SCENARIO_ALL_CORRECT, SCENARIO_SOURCE_PARTIAL, SCENARIO_TARGET_AND_SOURCE)

TLMMA = "tlmma"
TARGET_ONLY = "target_only"
UNIFORM = "uniform"


class SimulationError(ValueError):
    """Raised for invalid simulation configurations."""


def _require_square(n: int, what: str):
    if math.isqrt(n) ** 2 != n:
        raise SimulationError(f"{what}={n} must be a perfect square for the grid DGP")


@dataclass(frozen=True)
class SimulationConfig:
    """Configuration for the grid-based Monte Carlo design."""

    n0: int = 256
    K: int = 20
    n_source: int = 100
    p: int = 20
    s: int = 3
    H: int = 5
    rho0: float = 0.4
    informative_count: int = 10       # |A|, sources 1..|A| are informative
    scenario: str = SCENARIO_ALL_CORRECT
    informative_shift: float = 0.05
    noninformative_shift: float = 2.0
    # when set, non-informative sources instead offset every coordinate of
    # (beta', rho)' by this amount (the weight-consistency design)
    delta_offset: float | None = None
    method: str = TSLS
    replications: int = 100
    base_seed: int = 20240814
    threads: int = 1

    def __post_init__(self):
        if self.scenario not in _SCENARIOS:
            raise SimulationError(f"unknown scenario {self.scenario!r}")
        if self.method not in (MLE, TSLS):
            raise SimulationError(f"unknown method {self.method!r}")
        if not (0 < self.s <= self.p and 0 < self.H <= self.p):
            raise SimulationError("need 0 < s <= p and 0 < H <= p")
        if not (0 <= self.informative_count <= self.K):
            raise SimulationError("informative_count must lie in [0, K]")
        if self.replications < 1:
            raise SimulationError("need at least one replication")
        _require_square(self.n0, "n0")
        _require_square(self.n_source, "n_source")

    @property
    def informative_set(self) -> frozenset:
        return frozenset(range(1, self.informative_count + 1))

    @property
    def beta0(self) -> np.ndarray:
        return np.concatenate([np.ones(self.s), np.zeros(self.p - self.s)])


@dataclass(frozen=True)
class Population:
    """A generated dataset plus the DGP truth retained for metric computation."""

    dataset: Dataset
    rho_true: float
    beta_true: np.ndarray
    w_gen: WeightMatrix
    misspecified: bool


@dataclass(frozen=True)
class ReplicationResult:
    """Per-replication metrics for TLMMA and the baseline comparators."""

    seed: int
    mse_delta: dict
    mse_mu: dict
    weights: np.ndarray
    nu_hat: float | None
    criterion_opt: float
    criterion_target_only: float
    dropped: tuple


@dataclass(frozen=True)
class SimulationReport:
    """Aggregated summaries over replications."""

    config: SimulationConfig
    replications_done: int
    failures: tuple
    summaries: dict                # method -> metric -> {mean, median, q25, q75}
    averaged_weights: np.ndarray
    averaged_nu_hat: float | None
    results: tuple


def make_parameters(config: SimulationConfig, k: int, rng: np.random.Generator):
    """True (rho_k, beta_k) per the informative/non-informative perturbation rules."""
    beta = config.beta0.copy()
    if k == 0:
        return config.rho0, beta
    if k in config.informative_set:
        coords = rng.choice(config.p, size=config.H, replace=False)
        beta[coords] -= config.informative_shift
        return config.rho0, beta
    if config.delta_offset is not None:
        return config.rho0 + config.delta_offset, beta + config.delta_offset
    coords = rng.choice(config.p, size=config.p // 2, replace=False)
    beta[coords] -= config.noninformative_shift
    return -config.rho0, beta


# weight matrices are shared across replications so the eigenvalue cache
# (used by the MLE profile likelihood) is computed once per size
_GRID_CACHE: dict = {}


def _grid(n: int, direction: str) -> WeightMatrix:
    key = (n, direction)
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = row_normalize(build_grid_weights(n, direction))
    return _GRID_CACHE[key]


def _is_misspecified(config: SimulationConfig, k: int) -> bool:
    if config.scenario == SCENARIO_ALL_CORRECT:
        return False
    if k == 0:
        return config.scenario == SCENARIO_TARGET_AND_SOURCE
    return k % 2 == 0    # even-numbered sources are misspecified


def generate_population(config: SimulationConfig, k: int,
                        rng: np.random.Generator,
                        zero_noise: bool = False) -> Population:
    """Draw one population: X ~ N(0, I_p), y from the (possibly misspecified) SAR DGP.

    The fitting weight matrix is always the assumed horizontal grid; a
    misspecified DGP generates y through the vertical grid instead.
    """
    n = config.n0 if k == 0 else config.n_source
    rho, beta = make_parameters(config, k, rng)
    misspec = _is_misspecified(config, k)
    W_fit = _grid(n, "horizontal")
    W_gen = _grid(n, "vertical") if misspec else W_fit
    X = rng.standard_normal((n, config.p))
    eps = np.zeros(n) if zero_noise else rng.standard_normal(n)
    S = np.eye(n) - rho * W_gen.entries
    y = np.linalg.solve(S, X @ beta + eps)
    data = Dataset(X=X, y=y, W=W_fit, label=f"sim-k{k}")
    return Population(dataset=data, rho_true=rho, beta_true=beta,
                      w_gen=W_gen, misspecified=misspec)


def mse_delta(delta_tilde: np.ndarray, delta_true: np.ndarray) -> float:
    """Squared parameter error ||delta-tilde - delta||^2 (not divided by n)."""
    delta_tilde = np.asarray(delta_tilde, dtype=float)
    delta_true = np.asarray(delta_true, dtype=float)
    if delta_tilde.shape != delta_true.shape:
        raise SimulationError(f"shape mismatch {delta_tilde.shape} vs {delta_true.shape}")
    diff = delta_tilde - delta_true
    return float(diff @ diff)


def mse_mu(mu_hat: np.ndarray, mu_true: np.ndarray, n0: int) -> float:
    """Averaged squared prediction error ||mu-hat - mu||^2 / n0."""
    mu_hat = np.asarray(mu_hat, dtype=float)
    mu_true = np.asarray(mu_true, dtype=float)
    if mu_hat.shape != mu_true.shape:
        raise SimulationError(f"shape mismatch {mu_hat.shape} vs {mu_true.shape}")
    diff = mu_hat - mu_true
    return float(diff @ diff) / n0


def _fit(method: str, data: Dataset):
    if method == MLE:
        return fit_mle(data), None
    instruments = build_instruments(data)
    return fit_2sls(data, instruments), instruments


def run_replication(config: SimulationConfig, seed: int,
                    informative_for_nu=None) -> ReplicationResult:
    """One seeded replication: generate, fit, average, and score all methods."""
    root = np.random.SeedSequence(entropy=config.base_seed, spawn_key=(seed,))
    streams = [np.random.default_rng(s) for s in root.spawn(config.K + 2)]
    pops = [generate_population(config, k, streams[k]) for k in range(config.K + 1)]
    target = pops[0]
    fits = []
    target_instruments = None
    for k, pop in enumerate(pops):
        fit, instruments = _fit(config.method, pop.dataset)
        fits.append(fit)
        if k == 0:
            target_instruments = instruments
    cands = averaging.candidate_predictions(fits, target.dataset)
    pen = influence.penalty(fits[0], target.dataset, target_instruments)
    sol = averaging.solve_weights(cands, pen)
    prob = averaging.assemble_criterion(cands, pen)

    e0 = np.zeros(len(cands.retained))
    e0[0] = 1.0
    crit_target = averaging.evaluate_criterion(prob, e0)

    # fresh X_new for out-of-sample prediction; truth uses the DGP weights
    rng_new = streams[config.K + 1]
    X_new = rng_new.standard_normal((config.n0, config.p))
    S_true = np.eye(config.n0) - target.rho_true * target.w_gen.entries
    mu_new_true = np.linalg.solve(S_true, X_new @ target.beta_true)
    delta_true = np.concatenate([target.beta_true, [target.rho_true]])

    deltas = np.stack([f.delta for f in fits])

    def scored(weights_full: np.ndarray):
        sol_like = averaging.AveragingSolution(
            weights=weights_full, retained_weights=weights_full[list(cands.retained)],
            criterion_value=math.nan, kkt_residual=math.nan,
            retained=cands.retained, dropped=cands.dropped)
        mu_new = averaging.tlmma_predict(sol_like, fits, X_new, target.dataset.W)
        delta_tilde = weights_full @ deltas
        return (mse_delta(delta_tilde, delta_true),
                mse_mu(mu_new, mu_new_true, config.n0))

    w_target = np.zeros(config.K + 1)
    w_target[0] = 1.0
    w_uniform = np.zeros(config.K + 1)
    w_uniform[list(cands.retained)] = 1.0 / len(cands.retained)

    md, mm = {}, {}
    md[TLMMA], mm[TLMMA] = scored(sol.weights)
    md[TARGET_ONLY], mm[TARGET_ONLY] = scored(w_target)
    md[UNIFORM], mm[UNIFORM] = scored(w_uniform)

    nu = None
    if informative_for_nu is not None:
        nu = averaging.nu_hat(sol, informative_for_nu)
    return ReplicationResult(
        seed=seed, mse_delta=md, mse_mu=mm, weights=sol.weights, nu_hat=nu,
        criterion_opt=sol.criterion_value, criterion_target_only=crit_target,
        dropped=cands.dropped)


def _summary(values: np.ndarray) -> dict:
    q25, med, q75 = np.percentile(values, [25, 50, 75])
    return {"mean": float(np.mean(values)), "median": float(med),
            "q25": float(q25), "q75": float(q75)}


def run_experiment(config: SimulationConfig, informative_for_nu=None) -> SimulationReport:
    """Run ``config.replications`` seeded replications and aggregate by seed order."""
    seeds = list(range(config.replications))
    # warm the shared weight-matrix eigenvalue cache before any parallel work
    for n in {config.n0, config.n_source}:
        _grid(n, "horizontal").eigenvalues()
        _grid(n, "vertical")

    def one(seed):
        try:
            return seed, run_replication(config, seed, informative_for_nu), None
        except Exception as exc:
            return seed, None, f"{type(exc).__name__}: {exc}"

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(one, seeds))
    else:
        outcomes = [one(seed) for seed in seeds]
    outcomes.sort(key=lambda item: item[0])

    results = tuple(r for _, r, err in outcomes if err is None)
    failures = tuple((seed, err) for seed, _, err in outcomes if err is not None)
    if not results:
        raise SimulationError(f"all replications failed: {failures[:3]}")

    summaries = {}
    for method in (TLMMA, TARGET_ONLY, UNIFORM):
        summaries[method] = {
            "mse_delta": _summary(np.array([r.mse_delta[method] for r in results])),
            "mse_mu": _summary(np.array([r.mse_mu[method] for r in results])),
        }
    averaged_weights = np.mean(np.stack([r.weights for r in results]), axis=0)
    nus = [r.nu_hat for r in results if r.nu_hat is not None]
    averaged_nu = float(np.mean(nus)) if nus else None
    return SimulationReport(
        config=config, replications_done=len(results), failures=failures,
        summaries=summaries, averaged_weights=averaged_weights,
        averaged_nu_hat=averaged_nu, results=results)


@dataclass(frozen=True)
class WeightConsistencyRow:
    """One row of the weight-consistency table: n, averaged nu-hat, averaged weights."""

    n: int
    nu_hat: float
    weights: np.ndarray


def weight_consistency_config(n: int, method: str, replications: int = 100,
                              base_seed: int = 321) -> SimulationConfig:
    """Design of the weight-consistency experiment: K=6, all models correct.

    Sources 1..3 share the target parameters exactly; sources 4..6 offset
    every coordinate of (beta', rho)' by 0.1.  All sample sizes equal n.
    """
    return SimulationConfig(
        n0=n, K=6, n_source=n, p=20, s=3, H=5, rho0=0.4,
        informative_count=3, scenario=SCENARIO_ALL_CORRECT,
        informative_shift=0.0, delta_offset=0.1,
        method=method, replications=replications, base_seed=base_seed)


def weight_consistency_experiment(n_values, method: str, replications: int = 100,
                                  base_seed: int = 321, threads: int = 1):
    """Averaged nu-hat over candidates {0,1,2,3} and averaged weights per n."""
    rows = []
    for n in n_values:
        config = weight_consistency_config(n, method, replications, base_seed)
        config = replace(config, threads=threads)
        report = run_experiment(config, informative_for_nu=(0, 1, 2, 3))
        rows.append(WeightConsistencyRow(
            n=n, nu_hat=report.averaged_nu_hat, weights=report.averaged_weights))
    return rows


def config_to_dict(config: SimulationConfig) -> dict:
    return asdict(config)


def config_from_dict(payload: dict) -> SimulationConfig:
    known = {f for f in SimulationConfig.__dataclass_fields__}
    unknown = set(payload) - known
    if unknown:
        raise SimulationError(f"unknown config keys: {sorted(unknown)}")
    return SimulationConfig(**payload)
