"""Variance estimation and confidence intervals.

The calibration estimators get an M-estimation sandwich built from the
stacked estimating equations of (target moments, dual vectors, effect); the
augmented and TMLE estimators get a plug-in influence-function variance.
Duals enter the stack in the (gamma, delta) parameterization, where the unit
weight is exp(-z c'delta - c'gamma); the solver's (lambda, gamma_joint)
vectors convert via gamma = gamma_joint - lambda, delta = 2 lambda, which
leaves the weights unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import BalanceMatrix, Dataset, TargetMoments
from .errors import (
    InvalidLevelError,
    MissingComponentsError,
    SingularJacobianError,
)
from .estimators import EstimatorKind, TauEstimate
from .solver import DualSolution


@dataclass(frozen=True)
class VarianceReport:
    se: float
    ci_low: float
    ci_high: float
    method: str
    level: float


def normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF (Wichura's AS 241 rational approximation)."""
    if not 0.0 < p < 1.0:
        raise InvalidLevelError("quantile argument must lie in (0, 1)")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r = r - 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r = r - 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0 else val


def confidence_interval(tau_hat: float, se: float, level: float) -> tuple[float, float]:
    """Symmetric normal-quantile interval tau_hat +/- z * se."""
    if not 0.0 < level < 1.0:
        raise InvalidLevelError("confidence level must lie in (0, 1)")
    if se < 0:
        raise InvalidLevelError("standard error must be nonnegative")
    zq = normal_quantile(0.5 + level / 2.0)
    return tau_hat - zq * se, tau_hat + zq * se


def convert_dual(eta: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Map a joint dual [lambda, gamma_joint] to (gamma, delta)."""
    lam, gamma_joint = eta[:m], eta[m:]
    return gamma_joint - lam, 2.0 * lam


def _app_weights(cmat: np.ndarray, z: np.ndarray, gamma: np.ndarray,
                 delta: np.ndarray) -> np.ndarray:
    return np.exp(-(cmat @ gamma) - z * (cmat @ delta))


def transport_system(
    cmat: np.ndarray,
    s: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    nu: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked per-unit residuals and summed analytic Jacobian, transport case.

    Parameter vector nu = (theta0, gamma, delta, tau), length 3m + 1. Rows of
    the residual matrix: target-moment block, sampling-constraint block,
    arm-constraint block, effect equation. All blocks vanish exactly at the
    fitted parameters because they restate the solver's converged
    constraints.
    """
    n, m = cmat.shape
    theta0 = nu[:m]
    gamma = nu[m:2 * m]
    delta = nu[2 * m:3 * m]
    tau = nu[3 * m]
    s = np.asarray(s, dtype=float)
    z = np.where(s == 1, z, 0.0)
    y = np.where(s == 1, y, 0.0)

    p = _app_weights(cmat, z, gamma, delta) * s
    zp = z * p
    n1 = s.sum()
    n0 = n - n1

    k = 3 * m + 1
    psi = np.zeros((n, k))
    psi[:, :m] = (1.0 - s)[:, None] * (cmat - theta0)
    psi[:, m:2 * m] = p[:, None] * cmat - np.outer(s, theta0)
    psi[:, 2 * m:3 * m] = zp[:, None] * cmat - np.outer(s, theta0 / 2.0)
    contrast = (2.0 * z - 1.0) * y - z * tau
    psi[:, 3 * m] = p * contrast

    M = cmat.T @ (cmat * p[:, None])
    T = cmat.T @ (cmat * zp[:, None])
    eye = np.eye(m)
    A = np.zeros((k, k))
    A[:m, :m] = -n0 * eye
    A[m:2 * m, :m] = -n1 * eye
    A[m:2 * m, m:2 * m] = -M
    A[m:2 * m, 2 * m:3 * m] = -T
    A[2 * m:3 * m, :m] = -(n1 / 2.0) * eye
    A[2 * m:3 * m, m:2 * m] = -T
    A[2 * m:3 * m, 2 * m:3 * m] = -T
    A[3 * m, m:2 * m] = -(p * contrast) @ cmat
    A[3 * m, 2 * m:3 * m] = -(zp * (y - tau)) @ cmat
    A[3 * m, 3 * m] = -zp.sum()
    return psi, A


def fusion_system(
    cmat: np.ndarray,
    s: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    nu: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked residuals and summed Jacobian for the data-fusion case.

    Parameter vector nu = (theta0, gamma0, gamma1, delta0, delta1, tau),
    length 5m + 1; the effect equation runs over all units.
    """
    n, m = cmat.shape
    theta0 = nu[:m]
    gamma = {0: nu[m:2 * m], 1: nu[2 * m:3 * m]}
    delta = {0: nu[3 * m:4 * m], 1: nu[4 * m:5 * m]}
    tau = nu[5 * m]
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)

    ind = {0: (s == 0).astype(float), 1: s}
    p = np.zeros(n)
    for g in (0, 1):
        p += ind[g] * _app_weights(cmat, z, gamma[g], delta[g])
    zp = z * p
    counts = {g: ind[g].sum() for g in (0, 1)}

    k = 5 * m + 1
    psi = np.zeros((n, k))
    psi[:, :m] = ind[0][:, None] * (cmat - theta0)
    for g, lo in ((0, m), (1, 2 * m)):
        pg = ind[g] * p
        psi[:, lo:lo + m] = pg[:, None] * cmat - np.outer(ind[g], theta0)
    for g, lo in ((0, 3 * m), (1, 4 * m)):
        zpg = ind[g] * zp
        psi[:, lo:lo + m] = zpg[:, None] * cmat - np.outer(ind[g], theta0 / 2.0)
    contrast = (2.0 * z - 1.0) * y - z * tau
    psi[:, 5 * m] = p * contrast

    eye = np.eye(m)
    A = np.zeros((k, k))
    A[:m, :m] = -counts[0] * eye
    for g in (0, 1):
        pg = ind[g] * p
        zpg = ind[g] * zp
        Mg = cmat.T @ (cmat * pg[:, None])
        Tg = cmat.T @ (cmat * zpg[:, None])
        z_lo = m + g * m
        x_lo = 3 * m + g * m
        A[z_lo:z_lo + m, :m] = -counts[g] * eye
        A[z_lo:z_lo + m, z_lo:z_lo + m] = -Mg
        A[z_lo:z_lo + m, x_lo:x_lo + m] = -Tg
        A[x_lo:x_lo + m, :m] = -(counts[g] / 2.0) * eye
        A[x_lo:x_lo + m, z_lo:z_lo + m] = -Tg
        A[x_lo:x_lo + m, x_lo:x_lo + m] = -Tg
        A[5 * m, z_lo:z_lo + m] = -(pg * contrast) @ cmat
        A[5 * m, x_lo:x_lo + m] = -(zpg * (y - tau)) @ cmat
    A[5 * m, 5 * m] = -zp.sum()
    return psi, A


def _sandwich(psi: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Var(nu_hat) = A^-1 (psi' psi) A^-T for summed Jacobian A."""
    bread_t = np.linalg.solve(A, psi.T)  # A^-1 psi'
    cov = bread_t @ bread_t.T
    return 0.5 * (cov + cov.T)


def _check_solvable(A: np.ndarray) -> None:
    if not np.isfinite(A).all():
        raise SingularJacobianError("Jacobian contains non-finite entries")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularJacobianError(f"Jacobian is numerically singular (cond {cond:.2e})")


def sandwich_variance_transport(
    dataset: Dataset,
    c: BalanceMatrix,
    dual: DualSolution,
    tau_hat: float,
    level: float = 0.95,
) -> VarianceReport:
    """Robust variance for the transport calibration estimator (3m+1 stack)."""
    m = c.m
    theta0 = TargetMoments(c.c[dataset.s == 0].mean(axis=0)).theta0
    gamma, delta = convert_dual(dual.eta, m)
    nu = np.concatenate([theta0, gamma, delta, [tau_hat]])
    psi, A = transport_system(c.c, dataset.s, dataset.z, dataset.y, nu)
    _check_solvable(A)
    cov = _sandwich(psi, A)
    se = math.sqrt(max(cov[-1, -1], 0.0))
    low, high = confidence_interval(tau_hat, se, level)
    return VarianceReport(se=se, ci_low=low, ci_high=high, method="sandwich", level=level)


def sandwich_variance_fusion(
    dataset: Dataset,
    c: BalanceMatrix,
    dual_target: DualSolution,
    dual_study: DualSolution,
    tau_hat: float,
    level: float = 0.95,
) -> VarianceReport:
    """Robust variance for the data-fusion calibration estimator (5m+1 stack)."""
    m = c.m
    theta0 = TargetMoments(c.c[dataset.s == 0].mean(axis=0)).theta0
    gamma0, delta0 = convert_dual(dual_target.eta, m)
    gamma1, delta1 = convert_dual(dual_study.eta, m)
    nu = np.concatenate([theta0, gamma0, gamma1, delta0, delta1, [tau_hat]])
    psi, A = fusion_system(c.c, dataset.s, dataset.z, dataset.y, nu)
    _check_solvable(A)
    cov = _sandwich(psi, A)
    se = math.sqrt(max(cov[-1, -1], 0.0))
    low, high = confidence_interval(tau_hat, se, level)
    return VarianceReport(se=se, ci_low=low, ci_high=high, method="sandwich", level=level)


def influence_variance(
    kind: EstimatorKind,
    dataset: Dataset,
    q: np.ndarray | None,
    pi: np.ndarray | None,
    mu1: np.ndarray | None,
    mu0: np.ndarray | None,
    tau_hat: float,
    level: float = 0.95,
) -> VarianceReport:
    """Plug-in influence-function variance for the augmented and TMLE paths.

    Study units contribute the weighted residual contrast scaled by n/n1;
    target units contribute the centered model contrast scaled by n/n0. The
    construction is an approximation (it takes the nuisance fits as fixed)
    and empirically errs conservative when models are misspecified.
    """
    if kind not in (EstimatorKind.AUG_T, EstimatorKind.AUG_F, EstimatorKind.TMLE):
        raise MissingComponentsError(f"influence variance not defined for {kind}")
    for name, comp in (("q", q), ("pi", pi), ("mu1", mu1), ("mu0", mu0)):
        if comp is None:
            raise MissingComponentsError(f"missing component '{name}' for {kind.value}")
    s = dataset.s
    study = s == 1
    target = s == 0
    n, n1, n0 = dataset.n, dataset.n_study, dataset.n_target
    z = dataset.observed_z(study)
    y = dataset.observed_y(study)
    resid = z * (y - mu1[study]) / pi[study] - (1.0 - z) * (y - mu0[study]) / (1.0 - pi[study])
    d = np.zeros(n)
    d[study] = (n / n1) * q[study] * resid
    d[target] = (n / n0) * (mu1[target] - mu0[target] - tau_hat)
    se = math.sqrt(float(np.mean(d ** 2)) / n)
    low, high = confidence_interval(tau_hat, se, level)
    return VarianceReport(se=se, ci_low=low, ci_high=high, method="influence", level=level)


def _welch_variance(y1: np.ndarray, y0: np.ndarray) -> float:
    v1 = y1.var(ddof=1) / len(y1) if len(y1) > 1 else 0.0
    v0 = y0.var(ddof=1) / len(y0) if len(y0) > 1 else 0.0
    return v1 + v0


def _weighted_welch_variance(y: np.ndarray, z: np.ndarray, w: np.ndarray) -> float:
    out = 0.0
    for arm in (0, 1):
        mask = z == arm
        wa, ya = w[mask], y[mask]
        mean = np.average(ya, weights=wa)
        var = np.average((ya - mean) ** 2, weights=wa)
        ess = wa.sum() ** 2 / np.sum(wa ** 2)
        out += var / max(ess - 1.0, 1.0)
    return out


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with its interval and the underlying components."""

    tau_hat: float
    se: float
    ci_low: float
    ci_high: float
    kind: EstimatorKind
    method: str
    level: float
    estimate: TauEstimate


def estimate_with_ci(
    dataset: Dataset,
    c: BalanceMatrix,
    theta0,
    kind: EstimatorKind,
    level: float = 0.95,
    sample_selector: str | None = None,
) -> EstimateReport:
    """Compute a point estimate and the matching variance for its kind.

    Calibration estimators get the M-estimation sandwich; augmented and TMLE
    estimators the plug-in influence variance; the benchmark estimators a
    descriptive approximation.
    """
    from .estimators import compute_tau

    est = compute_tau(dataset, c, theta0, kind, sample_selector=sample_selector)
    if kind is EstimatorKind.CAL_T:
        report = sandwich_variance_transport(dataset, c, est.nuisance["dual"],
                                             est.tau_hat, level)
    elif kind is EstimatorKind.CAL_F:
        report = sandwich_variance_fusion(dataset, c, est.nuisance["dual_target"],
                                          est.nuisance["dual_study"], est.tau_hat, level)
    elif kind in (EstimatorKind.AUG_T, EstimatorKind.AUG_F):
        report = influence_variance(kind, dataset, est.weights_used,
                                    est.nuisance["pi"], est.nuisance["mu1"],
                                    est.nuisance["mu0"], est.tau_hat, level)
    elif kind is EstimatorKind.TMLE:
        rho = est.nuisance["rho"]
        q_tmle = (dataset.n_study / dataset.n_target) * (1.0 - rho) / rho
        report = influence_variance(kind, dataset, q_tmle, est.nuisance["pi"],
                                    est.nuisance["eta1"], est.nuisance["eta0"],
                                    est.tau_hat, level)
    else:
        report = descriptive_variance(est, dataset, c, level)
    return EstimateReport(
        tau_hat=est.tau_hat,
        se=report.se,
        ci_low=report.ci_low,
        ci_high=report.ci_high,
        kind=kind,
        method=report.method,
        level=level,
        estimate=est,
    )


def descriptive_variance(estimate: TauEstimate, dataset: Dataset,
                         c: BalanceMatrix, level: float = 0.95) -> VarianceReport:
    """Approximate SEs for the benchmark estimators.

    UNADJ uses the Welch two-sample variance; CBPS a weighted Welch variance
    on effective sample sizes; GCOMP the outcome-regression delta method with
    HC0 coefficient covariances. All labeled method="influence" since they
    are plug-in influence approximations outside the sandwich stack.
    """
    kind = estimate.kind
    if kind is EstimatorKind.UNADJ:
        z, y = estimate.nuisance["z"], estimate.nuisance["y"]
        var = _welch_variance(y[z == 1], y[z == 0])
    elif kind is EstimatorKind.CBPS:
        z, y = estimate.nuisance["z"], estimate.nuisance["y"]
        w = estimate.weights_used
        var = _weighted_welch_variance(y, z, w)
    elif kind is EstimatorKind.GCOMP:
        target = dataset.s == 0
        study = dataset.s == 1
        cbar = c.c[target].mean(axis=0)
        z = dataset.observed_z(study)
        y = dataset.observed_y(study)
        var = 0.0
        for arm, key in ((0, "fit0"), (1, "fit1")):
            mask = z == arm
            design = c.c[study][mask]
            resid = y[mask] - design @ estimate.nuisance[key].coefficients
            xtx_inv = np.linalg.inv(design.T @ design)
            meat = design.T @ (design * (resid ** 2)[:, None])
            cov_beta = xtx_inv @ meat @ xtx_inv
            var += float(cbar @ cov_beta @ cbar)
        contrast = estimate.nuisance["mu1"][target] - estimate.nuisance["mu0"][target]
        var += float(np.sum((contrast - estimate.tau_hat) ** 2)) / dataset.n_target ** 2
    else:
        raise MissingComponentsError(f"no descriptive variance for {kind}")
    se = math.sqrt(max(var, 0.0))
    low, high = confidence_interval(estimate.tau_hat, se, level)
    return VarianceReport(se=se, ci_low=low, ci_high=high, method="influence", level=level)
