"""Data generation with known ground truth, and Monte Carlo experiments.

The generator draws a fixed covariate design once per (config, seed) and
then redraws only the residuals per replication, from independent streams
of a counter-based Philox generator, so results are reproducible and
independent of how replications are scheduled across workers.

Responses are Gaussian with the exact conditional moment structure of the
model: mean ``mu(x' beta0)``, variance ``mu'(x' beta0)``, and a common
correlation matrix shared by all individuals.  For non-linear links this
is a moment-matched continuous surrogate rather than genuinely discrete
data (the model only constrains the first two conditional moments).
"""

import multiprocessing
from dataclasses import dataclass

import numpy as np

from .correlation import (
    AdaptiveCorrelation,
    FixedCorrelation,
    IdentityCorrelation,
    structured_correlation,
)
from .estimator import (
    EstimatingFunctionContext,
    estimating_function,
    estimating_jacobian,
    fit,
    independence_fit,
)
from .linalg import spd_sqrt
from .model import LongitudinalDataset, get_link

__all__ = [
    "GeneratorConfig",
    "true_correlation",
    "covariate_design",
    "generate_dataset",
    "MethodSummary",
    "MCSummary",
    "IdentityCheckResult",
    "ConsistencyRow",
    "ConsistencyTrace",
    "efficiency_comparison",
    "consistency_trace",
    "quasi_score_identity_check",
    "residual_quadratic_check",
    "estimating_function_mean_check",
    "variance_se",
    "paired_variance_diff_se",
]

_MIN_REPS = 10


@dataclass(frozen=True, eq=False)
class GeneratorConfig:
    """Ground-truth description of a simulated longitudinal population."""

    n: int
    m: int
    p: int
    beta0: np.ndarray
    link: str = "linear"
    correlation: str = "exchangeable"
    corr_param: float = 0.0
    corr_matrix: np.ndarray | None = None
    covariates: object = "uniform"
    seed: int = 0
    dependence: tuple | None = None

    def __post_init__(self):
        beta0 = np.asarray(self.beta0, dtype=float)
        if beta0.shape != (self.p,):
            raise ValueError(f"beta0 must have shape ({self.p},); got {beta0.shape}")
        object.__setattr__(self, "beta0", beta0)
        get_link(self.link)
        if min(self.n, self.m, self.p) < 1:
            raise ValueError("n, m, p must all be at least 1")
        if not 0 <= int(self.seed) < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")
        if self.corr_matrix is not None:
            object.__setattr__(
                self, "corr_matrix", np.asarray(self.corr_matrix, dtype=float)
            )
        true_correlation(self)  # validates structure/parameter/SPD early
        if not isinstance(self.covariates, str):
            x = np.asarray(self.covariates, dtype=float)
            if x.shape != (self.n, self.m, self.p):
                raise ValueError(
                    f"fixed design must have shape ({self.n}, {self.m}, {self.p})"
                )
            object.__setattr__(self, "covariates", x)
        elif self.covariates != "uniform":
            raise ValueError("covariates must be 'uniform' or an (n, m, p) array")

    @property
    def response_surrogate(self) -> str | None:
        return None if self.link == "linear" else "gaussian-moment-matched"

    def with_n(self, n: int) -> "GeneratorConfig":
        cov = self.covariates
        if not isinstance(cov, str):
            cov = cov[:n]
        return GeneratorConfig(
            n=n,
            m=self.m,
            p=self.p,
            beta0=self.beta0,
            link=self.link,
            correlation=self.correlation,
            corr_param=self.corr_param,
            corr_matrix=self.corr_matrix,
            covariates=cov,
            seed=self.seed,
            dependence=self.dependence,
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "p": self.p,
            "beta0": [float(v) for v in self.beta0],
            "link": self.link,
            "correlation": self.correlation,
            "corr_param": float(self.corr_param),
            "corr_matrix": None
            if self.corr_matrix is None
            else [[float(v) for v in row] for row in self.corr_matrix],
            "covariates": "uniform"
            if isinstance(self.covariates, str)
            else "fixed-design",
            "seed": int(self.seed),
            "dependence": None if self.dependence is None else list(self.dependence),
            "response_surrogate": self.response_surrogate,
        }


def _rng(seed: int, stream: int) -> np.random.Generator:
    # Counter-based and splittable: distinct (seed, stream) pairs give
    # independent streams regardless of scheduling.
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) + int(stream)))


def true_correlation(config: GeneratorConfig) -> np.ndarray:
    """The common within-individual correlation matrix of the generator."""
    if config.correlation == "custom":
        if config.corr_matrix is None:
            raise ValueError("correlation='custom' requires corr_matrix")
        mat = np.asarray(config.corr_matrix, dtype=float)
        if mat.shape != (config.m, config.m):
            raise ValueError(f"corr_matrix must be ({config.m}, {config.m})")
        spd_sqrt(mat)  # raises if not SPD
        return mat
    if config.correlation == "identity":
        return np.eye(config.m)
    return structured_correlation(config.correlation, config.corr_param, config.m)


def covariate_design(config: GeneratorConfig) -> np.ndarray:
    """The fixed (n, m, p) design: user-supplied, or i.i.d. uniform on
    [-1, 1] drawn once from the config's covariate stream."""
    if not isinstance(config.covariates, str):
        return np.asarray(config.covariates, dtype=float)
    rng = _rng(config.seed, 0)
    return rng.uniform(-1.0, 1.0, size=(config.n, config.m, config.p))


def generate_dataset(config: GeneratorConfig, replication: int = 0) -> LongitudinalDataset:
    """Draw one dataset: covariates are fixed, residuals are Gaussian with
    covariance ``A^(1/2) R A^(1/2)`` per individual.

    The optional ``dependence=(rho, strength)`` mode multiplies each
    individual's residual by a scale driven by an AR(1) recursion over the
    *previous* individuals' noise.  The scale is measurable with respect to
    the past, so residuals remain conditionally mean zero (the martingale
    structure the estimators rely on) while the conditional variance is
    deliberately inflated, i.e. the variance model is misspecified on
    purpose.  Use it to smoke-test root consistency, not for the moment
    identities.
    """
    link = get_link(config.link)
    x = covariate_design(config)
    corr = true_correlation(config)
    rhalf = spd_sqrt(corr)
    rng = _rng(config.seed, int(replication) + 1)
    z = rng.standard_normal((config.n, config.m))
    eps = z @ rhalf  # row i is R^(1/2) z_i (symmetric square root)
    if config.dependence is not None:
        rho, strength = config.dependence
        scale = np.empty(config.n)
        drive = z.sum(axis=1) / np.sqrt(config.m)
        h = 0.0
        for i in range(config.n):
            scale[i] = np.sqrt(1.0 + strength * h * h)
            h = rho * h + np.sqrt(max(0.0, 1.0 - rho * rho)) * drive[i]
        eps = scale[:, None] * eps
    eta = x @ config.beta0
    mu = link.mu(eta)
    sigma = np.sqrt(link.dmu(eta))
    return LongitudinalDataset(x, mu + sigma * eps)


def _method_model(method, dataset, link, config, gee_matrix):
    if method == "indep":
        return IdentityCorrelation(dataset.m)
    if method == "gee":
        return FixedCorrelation(gee_matrix)
    if method == "oracle":
        return FixedCorrelation(true_correlation(config))
    if method == "aqs":
        return AdaptiveCorrelation(dataset, link)
    raise ValueError(f"unknown model {method!r}")


def _resolve_gee_matrix(config, gee_correlation):
    if gee_correlation is None:
        return true_correlation(config)
    if isinstance(gee_correlation, tuple):
        structure, param = gee_correlation
        return structured_correlation(structure, param, config.m)
    return np.asarray(gee_correlation, dtype=float)


def _pmap(func, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    ctx = multiprocessing.get_context("fork")
    chunk = max(1, len(items) // (workers * 4))
    with ctx.Pool(processes=workers) as pool:
        return pool.map(func, items, chunksize=chunk)


@dataclass
class MethodSummary:
    method: str
    reps_requested: int
    reps_used: int
    excluded: int
    mean: np.ndarray
    bias: np.ndarray
    cov: np.ndarray
    var: np.ndarray
    median_err: float
    coverage: np.ndarray
    convergence_rate: float
    estimates: np.ndarray


@dataclass
class MCSummary:
    config: GeneratorConfig
    reps: int
    methods: dict

    def variance_table(self) -> list[tuple]:
        rows = []
        for name, summary in self.methods.items():
            for k, v in enumerate(summary.var):
                rows.append((name, k, float(v)))
        return rows


def _efficiency_worker(args):
    config, rep, methods, gee_matrix, ci_level = args
    dataset = generate_dataset(config, replication=rep)
    link = get_link(config.link)
    pilot = independence_fit(dataset, link)
    out = {}
    for method in methods:
        try:
            if method == "oracle":
                res = fit(
                    dataset,
                    link,
                    "gee",
                    gee_correlation=true_correlation(config),
                    ci_level=ci_level,
                )
            elif method == "gee":
                res = fit(
                    dataset, link, "gee", gee_correlation=gee_matrix, ci_level=ci_level
                )
            elif method == "indep":
                res = pilot
            else:
                res = fit(dataset, link, method, pilot=pilot, ci_level=ci_level)
            hit = None
            if res.ci_model is not None:
                hit = (res.ci_model[:, 0] <= config.beta0) & (
                    config.beta0 <= res.ci_model[:, 1]
                )
            out[method] = (res.beta, bool(res.converged), hit)
        except Exception:  # noqa: BLE001 - counted as an excluded replication
            out[method] = (None, False, None)
    return out


def efficiency_comparison(
    config: GeneratorConfig,
    methods=("indep", "gee", "ple", "aqs", "oracle"),
    reps: int = 1000,
    gee_correlation=None,
    ci_level: float = 0.95,
    workers: int = 1,
    max_excluded_fraction: float = 0.05,
) -> MCSummary:
    """Fit every method on the same replicated datasets and summarize.

    ``gee_correlation`` is the (possibly misspecified) fixed matrix for the
    ``gee`` method, given as a matrix or ``(structure, param)``; it
    defaults to the true correlation.  ``oracle`` always uses the true
    correlation and is the efficiency floor.  Replications where a method
    failed to converge are excluded from that method's summaries and
    counted; more than ``max_excluded_fraction`` of them is an error.
    """
    if reps < _MIN_REPS:
        raise ValueError(f"reps must be at least {_MIN_REPS}")
    gee_matrix = _resolve_gee_matrix(config, gee_correlation)
    args = [(config, rep, tuple(methods), gee_matrix, ci_level) for rep in range(reps)]
    rows = _pmap(_efficiency_worker, args, workers)

    summaries = {}
    for method in methods:
        betas, hits = [], []
        excluded = 0
        for row in rows:
            beta, converged, hit = row[method]
            if beta is None or not converged:
                excluded += 1
                continue
            betas.append(beta)
            hits.append(hit)
        if excluded > max_excluded_fraction * reps:
            raise RuntimeError(
                f"method {method!r}: {excluded}/{reps} replications excluded "
                f"(> {max_excluded_fraction:.0%}); experiment aborted"
            )
        est = np.asarray(betas)
        errs = np.linalg.norm(est - config.beta0, axis=1)
        hit_arr = np.asarray([h for h in hits if h is not None], dtype=float)
        coverage = (
            hit_arr.mean(axis=0) if hit_arr.size else np.full(config.p, np.nan)
        )
        summaries[method] = MethodSummary(
            method=method,
            reps_requested=reps,
            reps_used=len(betas),
            excluded=excluded,
            mean=est.mean(axis=0),
            bias=est.mean(axis=0) - config.beta0,
            cov=np.cov(est, rowvar=False, ddof=1),
            var=est.var(axis=0, ddof=1),
            median_err=float(np.median(errs)),
            coverage=coverage,
            convergence_rate=1.0 - excluded / reps,
            estimates=est,
        )
    return MCSummary(config=config, reps=reps, methods=summaries)


@dataclass
class ConsistencyRow:
    n: int
    reps_used: int
    excluded: int
    median_err: float
    q90_err: float
    slln_median: float


@dataclass
class ConsistencyTrace:
    method: str
    delta: float
    rows: list


def _consistency_worker(args):
    config, rep, n_grid, method, gee_matrix = args
    dataset = generate_dataset(config, replication=rep)
    link = get_link(config.link)
    out = []
    for n in n_grid:
        sub = dataset.prefix(n)
        # Independence estimating function at the truth, for the growth statistic.
        eta = sub.covariates @ config.beta0
        g0 = np.einsum("nmp,nm->p", sub.covariates, sub.responses - link.mu(eta))
        try:
            if method == "gee":
                res = fit(sub, link, "gee", gee_correlation=gee_matrix)
            elif method == "oracle":
                res = fit(sub, link, "gee", gee_correlation=true_correlation(config))
            else:
                res = fit(sub, link, method)
            err = float(np.linalg.norm(res.beta - config.beta0))
            out.append((err, bool(res.converged), g0))
        except Exception:  # noqa: BLE001
            out.append((np.nan, False, g0))
    return out


def consistency_trace(
    config: GeneratorConfig,
    n_grid,
    method: str = "aqs",
    reps: int = 200,
    delta: float = 0.1,
    gee_correlation=None,
    workers: int = 1,
) -> ConsistencyTrace:
    """Error quantiles of one method along an increasing n-grid.

    Each replication draws a single dataset at ``max(n_grid)`` and fits the
    prefixes (common random numbers across grid points).  Alongside the
    error quantiles, each grid point reports the median over replications
    of the martingale-growth statistic: the norm of the independence
    estimating function at the truth divided by the largest eigenvalue of
    its Monte Carlo covariance raised to ``1/2 + delta``.
    """
    n_grid = sorted(int(n) for n in n_grid)
    if n_grid[-1] > config.n:
        raise ValueError(f"grid maximum {n_grid[-1]} exceeds config n = {config.n}")
    gee_matrix = _resolve_gee_matrix(config, gee_correlation)
    args = [(config, rep, tuple(n_grid), method, gee_matrix) for rep in range(reps)]
    rows = _pmap(_consistency_worker, args, workers)

    out = []
    for j, n in enumerate(n_grid):
        errs = np.asarray([r[j][0] for r in rows])
        conv = np.asarray([r[j][1] for r in rows])
        gvecs = np.asarray([r[j][2] for r in rows])
        used = errs[conv & np.isfinite(errs)]
        cov_g = np.cov(gvecs, rowvar=False, ddof=1)
        cov_g = np.atleast_2d(cov_g)
        lam_max = float(np.linalg.eigvalsh(cov_g)[-1])
        slln = np.linalg.norm(gvecs, axis=1) / lam_max ** (0.5 + delta)
        out.append(
            ConsistencyRow(
                n=n,
                reps_used=int(used.size),
                excluded=int(reps - used.size),
                median_err=float(np.median(used)) if used.size else np.nan,
                q90_err=float(np.quantile(used, 0.9)) if used.size else np.nan,
                slln_median=float(np.median(slln)),
            )
        )
    return ConsistencyTrace(method=method, delta=delta, rows=out)


@dataclass
class IdentityCheckResult:
    """Monte Carlo check of the quasi-score cross-moment identity.

    ``diff_mean`` estimates ``E[q g_opt'] - D_q`` entrywise (the identity
    says it vanishes), ``diff_se`` its Monte Carlo standard errors, and
    ``max_abs_z`` the worst entrywise |mean| / SE.  For the optimal family
    the same replications also compare ``E[q q']`` against the exactly
    computed covariance of the optimal estimating function.
    """

    family: str
    reps: int
    lhs_mean: np.ndarray
    rhs_mean: np.ndarray
    diff_mean: np.ndarray
    diff_se: np.ndarray
    max_abs_z: float
    exact_cov: np.ndarray | None = None
    cov_max_abs_z: float | None = None


def _identity_worker(args):
    config, rep, families, gee_matrix = args
    dataset = generate_dataset(config, replication=rep)
    link = get_link(config.link)
    corr = true_correlation(config)
    oracle_ctx = EstimatingFunctionContext(
        dataset=dataset, link=link, model=FixedCorrelation(corr)
    )
    g_opt = estimating_function(oracle_ctx, config.beta0)
    out = {"_g_opt": g_opt}
    for family in families:
        if family == "optimal":
            ctx = oracle_ctx
        else:
            model = _method_model(
                "indep" if family == "indep" else family, dataset, link, config, gee_matrix
            )
            ctx = EstimatingFunctionContext(dataset=dataset, link=link, model=model)
        q = estimating_function(ctx, config.beta0)
        d = estimating_jacobian(ctx, config.beta0).total
        out[family] = (q, d)
    return out


def quasi_score_identity_check(
    config: GeneratorConfig,
    families=("indep", "gee", "optimal"),
    reps: int = 2000,
    gee_correlation=None,
    workers: int = 1,
) -> list:
    """Check that each family's cross moment with the optimal estimating
    function equals its expected negative Jacobian, by simulation."""
    if reps < 2:
        raise ValueError("reps must be at least 2 for a standard error")
    gee_matrix = _resolve_gee_matrix(config, gee_correlation)
    args = [(config, rep, tuple(families), gee_matrix) for rep in range(reps)]
    rows = _pmap(_identity_worker, args, workers)

    link = get_link(config.link)
    corr = true_correlation(config)
    x = covariate_design(config)
    mu1 = link.dmu(x @ config.beta0)
    scaled_x = np.sqrt(mu1)[:, :, None] * x
    exact_cov_opt = np.einsum(
        "nmp,mk,nkq->pq", scaled_x, np.linalg.inv(corr), scaled_x
    )

    results = []
    for family in families:
        lhs = np.asarray([np.outer(r[family][0], r["_g_opt"]) for r in rows])
        rhs = np.asarray([r[family][1] for r in rows])
        diff = lhs - rhs
        diff_mean = diff.mean(axis=0)
        diff_se = diff.std(axis=0, ddof=1) / np.sqrt(reps)
        max_z = float(np.max(np.abs(diff_mean) / np.maximum(diff_se, 1e-300)))
        exact = cov_z = None
        if family == "optimal":
            qq = np.asarray([np.outer(r[family][0], r[family][0]) for r in rows])
            qq_mean = qq.mean(axis=0)
            qq_se = qq.std(axis=0, ddof=1) / np.sqrt(reps)
            exact = exact_cov_opt
            cov_z = float(
                np.max(np.abs(qq_mean - exact) / np.maximum(qq_se, 1e-300))
            )
        results.append(
            IdentityCheckResult(
                family=family,
                reps=reps,
                lhs_mean=lhs.mean(axis=0),
                rhs_mean=rhs.mean(axis=0),
                diff_mean=diff_mean,
                diff_se=diff_se,
                max_abs_z=max_z,
                exact_cov=exact,
                cov_max_abs_z=cov_z,
            )
        )
    return results


def residual_quadratic_check(config: GeneratorConfig, reps: int = 200):
    """Monte Carlo mean of the standardized residual quadratic form.

    The quadratic form of each individual's residual with the inverse
    variance matrix has expectation m (the trace of a unit-diagonal
    correlation matrix).  Returns ``(mean, se)`` pooled over individuals
    and replications.
    """
    link = get_link(config.link)
    chunks = []
    for rep in range(reps):
        ds = generate_dataset(config, replication=rep)
        eta = ds.covariates @ config.beta0
        resid = ds.responses - link.mu(eta)
        chunks.append(np.sum(resid * resid / link.dmu(eta), axis=1))
    values = np.concatenate(chunks)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def estimating_function_mean_check(
    config: GeneratorConfig, method: str, reps: int = 500, gee_correlation=None
):
    """MC mean and SE of the estimating function at the truth (should be 0)."""
    link = get_link(config.link)
    gee_matrix = _resolve_gee_matrix(config, gee_correlation)
    vals = np.empty((reps, config.p))
    for rep in range(reps):
        ds = generate_dataset(config, replication=rep)
        if method == "ple":
            pilot = independence_fit(ds, link)
            from .correlation import PilotCorrelation

            model = PilotCorrelation.from_pilot(ds, link, pilot)
        else:
            model = _method_model(method, ds, link, config, gee_matrix)
        ctx = EstimatingFunctionContext(dataset=ds, link=link, model=model)
        vals[rep] = estimating_function(ctx, config.beta0)
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / np.sqrt(reps)


def _loo_variances(a):
    n = a.shape[0]
    s1 = a.sum(axis=0)
    s2 = (a * a).sum(axis=0)
    mean_loo = (s1 - a) / (n - 1)
    return (s2 - a * a - (n - 1) * mean_loo**2) / (n - 2)


def variance_se(a) -> np.ndarray:
    """Jackknife standard error of the per-column sample variance."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] < 3:
        raise ValueError("need at least 3 samples")
    theta = _loo_variances(a)
    n = a.shape[0]
    return np.sqrt((n - 1) / n * ((theta - theta.mean(axis=0)) ** 2).sum(axis=0))


def paired_variance_diff_se(a, b) -> np.ndarray:
    """Jackknife SE of ``var(a) - var(b)`` over paired replications."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError("paired samples must have matching shapes")
    if a.shape[0] < 3:
        raise ValueError("need at least 3 samples")
    theta = _loo_variances(a) - _loo_variances(b)
    n = a.shape[0]
    return np.sqrt((n - 1) / n * ((theta - theta.mean(axis=0)) ** 2).sum(axis=0))
