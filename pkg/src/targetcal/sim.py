"""Scenario generators, the Monte Carlo experiment runner, metric
computation, and the true-effect oracle.

Replicate seeds are derived from (master seed, scenario, n, replicate index)
with a SplitMix64 fold feeding numpy's counter-based Philox generator, so a
campaign is reproducible across machines and independent of worker count or
execution order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, build_balance_matrix, target_moments
from .errors import ConfigError, DegenerateDrawError, NonFiniteError, TargetcalError
from .estimators import FUSION_ONLY, EstimatorKind
from .glm import expit
from .inference import estimate_with_ci

RNG_ALGORITHM = "numpy Philox4x64-10, SplitMix64-derived keys"

_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(*components) -> int:
    """Fold integer/string components into a 64-bit Philox key."""
    state = 0
    for comp in components:
        if isinstance(comp, str):
            for byte in comp.encode("utf-8"):
                state = _mix64(state ^ byte)
        else:
            state = _mix64(state ^ (int(comp) & _MASK64))
    return state


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass(frozen=True)
class LinearModel:
    """Intercept-plus-slopes linear form evaluated on x or u columns."""

    coef: tuple
    basis: str  # "x" or "u"

    def evaluate(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        mat = x if self.basis == "x" else u
        coef = np.asarray(self.coef, dtype=float)
        return coef[0] + mat @ coef[1:]


@dataclass(frozen=True)
class ScenarioSpec:
    """Generative models for one simulation scenario.

    mu1 = mu0 + tilt everywhere; the tilt never depends on the sample, so
    the target-population effect is E[tilt | s=0]. The outcome noise is
    homoscedastic normal with sd ``outcome_sd``.
    """

    id: str
    rho: LinearModel
    pi_study: LinearModel
    pi_target: LinearModel
    mu0_study: LinearModel
    mu0_target: LinearModel
    tilt: LinearModel
    outcome_sd: float = 1.0
    covariate_dim: int = 4


def _scenario_table() -> dict[str, ScenarioSpec]:
    rho_mild_x = LinearModel((0.5, -0.5, 0.5, -0.5, 0.5), "x")
    rho_mild_u = LinearModel((0.5, -0.5, 0.5, -0.5, 0.5), "u")
    rho_steep_x = LinearModel((2.0, -2.0, 2.0, -2.0, 2.0), "x")
    pi_mild_x = LinearModel((0.0, 0.5, -0.5, 0.5, -0.5), "x")
    pi_mild_u = LinearModel((0.0, 0.5, -0.5, 0.5, -0.5), "u")
    pi_steep_x = LinearModel((0.0, 2.0, -2.0, 2.0, -2.0), "x")
    pi_const = LinearModel((-0.5, 0.0, 0.0, 0.0, 0.0), "x")
    mu_base_x = LinearModel((2.0, -3.0, -1.0, 1.0, 3.0), "x")
    mu_base_u = LinearModel((2.0, -3.0, -1.0, 1.0, 3.0), "u")
    mu_alt_x = LinearModel((0.0, 2.0, -2.0, -2.0, 2.0), "x")
    mu_alt_u = LinearModel((0.0, 2.0, -2.0, -2.0, 2.0), "u")
    tilt_x = LinearModel((-2.0, -1.0, 3.0, -3.0, 1.0), "x")
    tilt_u = LinearModel((-2.0, -1.0, 3.0, -3.0, 1.0), "u")

    return {
        "A": ScenarioSpec("A", rho_mild_x, pi_mild_x, pi_mild_x,
                          mu_base_x, mu_base_x, tilt_x),
        "B": ScenarioSpec("B", rho_steep_x, pi_mild_x, pi_mild_x,
                          mu_base_u, mu_base_u, tilt_u),
        "C": ScenarioSpec("C", rho_mild_x, pi_steep_x, pi_steep_x,
                          mu_base_u, mu_base_u, tilt_u),
        "D": ScenarioSpec("D", rho_mild_u, pi_mild_u, pi_mild_u,
                          mu_base_x, mu_alt_x, tilt_x),
        "E": ScenarioSpec("E", rho_mild_x, pi_mild_x, pi_const,
                          mu_base_u, mu_base_u, tilt_u),
        "F": ScenarioSpec("F", rho_mild_x, pi_mild_x, pi_const,
                          mu_base_x, mu_alt_x, tilt_x),
        "G": ScenarioSpec("G", rho_mild_u, pi_mild_u, pi_const,
                          mu_base_x, mu_alt_x, tilt_x),
        "H": ScenarioSpec("H", rho_mild_x, pi_mild_x, pi_const,
                          mu_base_u, mu_alt_u, tilt_u),
    }


SCENARIOS = _scenario_table()

# Population moments of the raw misspecification transforms, used by the
# optional population-constant standardization. U1 is lognormal(0, 1/2); U2's
# variance is E[(1+e^X)^-2] by Gauss quadrature; U3 = log|X X'| has mean
# -(euler_gamma + log 2) and variance pi^2/4; U4 is 2 * chi-square(1).
U_POPULATION_MEAN = (1.2840254166877414, 0.0, -1.2703628454614782, 2.0)
U_POPULATION_VAR = (1.0695605577589171, 0.29337903585809294, 2.4674011002723395, 8.0)


def transform_u(x: np.ndarray, standardize: str = "empirical") -> np.ndarray:
    """Misspecification transforms of the covariates, standardized columns.

    ``standardize`` is "empirical" (each column centered and scaled by the
    generated dataset's own moments) or "population" (fixed constants).
    """
    x = np.asarray(x, dtype=float)
    prod = np.abs(x[:, 1] * x[:, 2])
    if np.any(prod == 0.0):
        raise NonFiniteError("log|x2*x3| undefined for a zero product")
    u = np.column_stack(
        [
            np.exp((x[:, 0] + x[:, 3]) / 2.0),
            x[:, 1] / (1.0 + np.exp(x[:, 0])),
            np.log(prod),
            (x[:, 2] + x[:, 3]) ** 2,
        ]
    )
    if not np.isfinite(u).all():
        raise NonFiniteError("misspecification transform produced non-finite values")
    if standardize == "empirical":
        mean = u.mean(axis=0)
        sd = u.std(axis=0)
        if np.any(sd == 0.0):
            raise NonFiniteError("degenerate transform column (zero variance)")
    elif standardize == "population":
        mean = np.asarray(U_POPULATION_MEAN)
        sd = np.sqrt(np.asarray(U_POPULATION_VAR))
    else:
        raise ConfigError(f"unknown standardization '{standardize}'")
    return (u - mean) / sd


def generate(
    scenario: ScenarioSpec,
    n: int,
    seed: int,
    u_standardize: str = "empirical",
) -> Dataset:
    """Draw a fusion-mode dataset from the scenario's generative models.

    Draw order is fixed: covariates, sample uniforms, treatment uniforms,
    control noise, treated noise. Raises DegenerateDrawError when a sample or
    a within-sample arm comes up empty.
    """
    if n < 2:
        raise ConfigError("need n >= 2")
    rng = _rng(seed)
    x = rng.standard_normal((n, scenario.covariate_dim))
    u = transform_u(x, u_standardize)
    s = (rng.random(n) < expit(scenario.rho.evaluate(x, u))).astype(np.int8)
    pi_lin = np.where(
        s == 1,
        scenario.pi_study.evaluate(x, u),
        scenario.pi_target.evaluate(x, u),
    )
    z = (rng.random(n) < expit(pi_lin)).astype(float)
    mu0 = np.where(
        s == 1,
        scenario.mu0_study.evaluate(x, u),
        scenario.mu0_target.evaluate(x, u),
    )
    tilt = scenario.tilt.evaluate(x, u)
    y0 = mu0 + scenario.outcome_sd * rng.standard_normal(n)
    y1 = mu0 + tilt + scenario.outcome_sd * rng.standard_normal(n)
    y = z * y1 + (1.0 - z) * y0
    for sample in (0, 1):
        mask = s == sample
        if not mask.any():
            raise DegenerateDrawError(f"sample s={sample} came up empty")
        for arm in (0.0, 1.0):
            if not np.any(z[mask] == arm):
                raise DegenerateDrawError(f"sample s={sample} has an empty arm z={int(arm)}")
    return Dataset.fusion(s, z, y, x)


def true_tau(
    scenario: ScenarioSpec,
    oracle_n: int = 10_000_000,
    seed: int = 0,
    chunk: int = 1_000_000,
    u_standardize: str = "empirical",
) -> float:
    """Monte Carlo oracle for the target-population effect E[tilt | s=0].

    Simulates directly from the generative models in chunks (each chunk
    standardizes its transforms like one generated dataset); no outcome noise
    enters because the per-unit effect is the noise-free tilt.
    """
    total = 0.0
    count = 0
    drawn = 0
    idx = 0
    while drawn < oracle_n:
        size = min(chunk, oracle_n - drawn)
        rng = _rng(derive_seed(seed, "true-tau", scenario.id, idx))
        x = rng.standard_normal((size, scenario.covariate_dim))
        u = transform_u(x, u_standardize)
        s = rng.random(size) < expit(scenario.rho.evaluate(x, u))
        tilt = scenario.tilt.evaluate(x, u)
        total += float(tilt[~s].sum())
        count += int((~s).sum())
        drawn += size
        idx += 1
    if count == 0:
        raise DegenerateDrawError("oracle produced no target-sample units")
    return total / count


@dataclass
class ReplicateResult:
    scenario: str
    n: int
    kind: str
    rep: int
    seed: int
    tau_hat: float = math.nan
    se: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    failed: bool = False
    error: str = ""


@dataclass
class MetricsRow:
    scenario: str
    n: int
    kind: str
    tau0: float
    bias: float
    rmse: float
    coverage: float
    n_ok: int
    n_failed: int


@dataclass
class MetricsTable:
    rows: list
    config: dict
    replicates: list = field(default_factory=list)

    def row(self, scenario: str, n: int, kind: str) -> MetricsRow:
        for r in self.rows:
            if (r.scenario, r.n, r.kind) == (scenario, n, kind):
                return r
        raise KeyError((scenario, n, kind))


@dataclass
class RunnerConfig:
    scenarios: tuple = ("A",)
    ns: tuple = (500,)
    reps: int = 10
    kinds: tuple = (EstimatorKind.CAL_T,)
    seed: int = 0
    workers: int = 1
    level: float = 0.95
    u_standardize: str = "empirical"
    oracle_n: int = 2_000_000
    tau0_overrides: dict = field(default_factory=dict)
    max_redraws: int = 10
    keep_replicates: bool = False

    def validate(self) -> None:
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not self.scenarios:
            raise ConfigError("no scenarios requested")
        for sid in self.scenarios:
            if sid not in SCENARIOS:
                raise ConfigError(f"unknown scenario '{sid}'")
        if not self.kinds:
            raise ConfigError("no estimators requested")
        if any(n < 2 for n in self.ns):
            raise ConfigError("sample sizes must be >= 2")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("confidence level must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _evaluate_replicate(task: tuple) -> list:
    """Generate one replicate and run every requested estimator on it."""
    scenario_id, n, rep, master_seed, kind_values, level, u_mode, max_redraws = task
    scenario = SCENARIOS[scenario_id]
    results = []
    dataset = None
    seed = 0
    for attempt in range(max_redraws):
        seed = derive_seed(master_seed, scenario_id, n, rep, attempt)
        try:
            dataset = generate(scenario, n, seed, u_standardize=u_mode)
            break
        except DegenerateDrawError:
            continue
    if dataset is None:
        return [
            ReplicateResult(scenario_id, n, kv, rep, seed, failed=True,
                            error="degenerate draw after redraws")
            for kv in kind_values
        ]
    c = build_balance_matrix(dataset)
    theta0 = target_moments(c, dataset.s)
    transport_view = dataset.to_transport()
    for kv in kind_values:
        kind = EstimatorKind(kv)
        view = dataset if kind in FUSION_ONLY else transport_view
        try:
            report = estimate_with_ci(view, c, theta0, kind, level=level)
            results.append(
                ReplicateResult(
                    scenario_id, n, kv, rep, seed,
                    tau_hat=report.tau_hat, se=report.se,
                    ci_low=report.ci_low, ci_high=report.ci_high,
                )
            )
        except TargetcalError as exc:
            results.append(
                ReplicateResult(scenario_id, n, kv, rep, seed, failed=True,
                                error=f"{type(exc).__name__}: {exc}")
            )
    return results


def run_experiment(config: RunnerConfig) -> MetricsTable:
    """Run the Monte Carlo campaign and aggregate bias, RMSE, and coverage.

    Deterministic for a given config and seed regardless of worker count:
    replicate seeds depend only on (seed, scenario, n, rep), and aggregation
    follows replicate order.
    """
    config.validate()
    kind_values = tuple(
        k.value if isinstance(k, EstimatorKind) else str(k) for k in config.kinds
    )
    tau0s = {}
    for sid in config.scenarios:
        if sid in config.tau0_overrides:
            tau0s[sid] = float(config.tau0_overrides[sid])
        else:
            tau0s[sid] = true_tau(
                SCENARIOS[sid], oracle_n=config.oracle_n,
                seed=config.seed, u_standardize=config.u_standardize,
            )

    tasks = [
        (sid, n, rep, config.seed, kind_values, config.level,
         config.u_standardize, config.max_redraws)
        for sid in config.scenarios
        for n in config.ns
        for rep in range(config.reps)
    ]
    if config.workers > 1 and len(tasks) > 1:
        chunksize = max(1, len(tasks) // (config.workers * 8))
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            batches = list(pool.map(_evaluate_replicate, tasks, chunksize=chunksize))
    else:
        batches = [_evaluate_replicate(t) for t in tasks]
    replicates = [r for batch in batches for r in batch]

    rows = []
    for sid in config.scenarios:
        for n in config.ns:
            for kv in kind_values:
                cell = [
                    r for r in replicates
                    if (r.scenario, r.n, r.kind) == (sid, n, kv)
                ]
                ok = [r for r in cell if not r.failed and math.isfinite(r.tau_hat)]
                tau0 = tau0s[sid]
                if ok:
                    taus = np.array([r.tau_hat for r in ok])
                    bias = float(taus.mean() - tau0)
                    rmse = float(np.sqrt(np.mean((taus - tau0) ** 2)))
                    covered = [
                        (r.ci_low <= tau0 <= r.ci_high)
                        for r in ok
                        if math.isfinite(r.se)
                    ]
                    coverage = float(np.mean(covered)) if covered else math.nan
                else:
                    bias = rmse = coverage = math.nan
                rows.append(
                    MetricsRow(
                        scenario=sid, n=n, kind=kv, tau0=tau0,
                        bias=bias, rmse=rmse, coverage=coverage,
                        n_ok=len(ok), n_failed=len(cell) - len(ok),
                    )
                )
    echo = {
        "scenarios": list(config.scenarios),
        "ns": list(config.ns),
        "reps": config.reps,
        "estimators": list(kind_values),
        "seed": config.seed,
        "workers": config.workers,
        "level": config.level,
        "u_standardize": config.u_standardize,
        "oracle_n": config.oracle_n,
        "rng": RNG_ALGORITHM,
        "tau0": {k: tau0s[k] for k in config.scenarios},
    }
    return MetricsTable(
        rows=rows,
        config=echo,
        replicates=replicates if config.keep_replicates else [],
    )
