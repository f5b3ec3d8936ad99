"""Estimating-equation evaluation and root finding.

The estimating function sums, over individuals, the covariate-weighted
standardized residuals with the inverse working correlation in the
middle.  Its exact negative Jacobian splits into a weight-curvature term
``h`` and residual-carried terms; for the adaptive strategy the latter
include the derivative of the inverse correlation matrix.  The solver is
a damped Newton iteration on the exact Jacobian, with a Fisher-scoring
fallback and optional multi-start for the adaptive equation (whose root
is selected as the converged one closest to the working-independence
estimate).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .correlation import (
    AdaptiveCorrelation,
    CorrelationModel,
    CorrelationSingularError,
    FixedCorrelation,
    IdentityCorrelation,
    PilotCorrelation,
    inverse_stack,
)
from .model import LinkDomainError, LinkFunction, LongitudinalDataset, get_link

__all__ = [
    "EstimatingFunctionContext",
    "FitResult",
    "JacobianDecomposition",
    "CovarianceEstimates",
    "RankDeficiencyError",
    "NonConvergedPilotError",
    "estimating_function",
    "estimating_jacobian",
    "newton_solve",
    "closed_form_linear",
    "covariance_estimates",
    "independence_fit",
    "fit",
]

_METHOD_TAGS = {"identity": "indep", "fixed": "gee", "ple": "ple", "aqs": "aqs"}


class RankDeficiencyError(np.linalg.LinAlgError):
    """The independence information matrix is (numerically) singular."""

    def __init__(self, lam_min):
        self.lam_min = float(lam_min)
        super().__init__(
            "design is rank deficient: min eigenvalue of the independence "
            f"information matrix is {self.lam_min:.3e}"
        )


class NonConvergedPilotError(RuntimeError):
    """The working-independence pilot fit did not converge."""


@dataclass(frozen=True)
class EstimatingFunctionContext:
    """Everything a solve needs, immutable for its duration."""

    dataset: LongitudinalDataset
    link: LinkFunction
    model: CorrelationModel
    tol_g: float = 1e-10
    max_iter: int = 100
    max_halvings: int = 30
    scoring: bool = False
    multistart: int = 0

    def __post_init__(self):
        if self.model.m != self.dataset.m:
            raise ValueError(
                f"correlation dimension {self.model.m} does not match m = {self.dataset.m}"
            )
        if isinstance(self.model, AdaptiveCorrelation):
            if self.model.dataset is not self.dataset and (
                self.model.dataset.covariates.shape != self.dataset.covariates.shape
                or not np.array_equal(
                    self.model.dataset.covariates, self.dataset.covariates
                )
                or not np.array_equal(
                    self.model.dataset.responses, self.dataset.responses
                )
            ):
                raise ValueError(
                    "adaptive correlation model is bound to a different dataset"
                )


@dataclass(frozen=True)
class JacobianDecomposition:
    """Exact negative Jacobian of the estimating function.

    ``total = h - b - e`` where ``h`` is the curvature of the weighted
    mean, ``b`` collects residual terms driven by the gap between a
    reference mean and the candidate mean, and ``e`` the terms driven by
    noise around the reference.  Without a reference parameter the two
    groups cannot be told apart from data, so everything residual-carried
    sits in ``b`` and ``split`` is False; only ``total`` is
    contract-bearing either way.
    """

    h: np.ndarray
    b: np.ndarray
    e: np.ndarray
    split: bool

    @property
    def total(self) -> np.ndarray:
        return self.h - self.b - self.e


@dataclass(frozen=True)
class CovarianceEstimates:
    h_hat: np.ndarray
    m_hat: np.ndarray
    se_model: np.ndarray
    se_sandwich: np.ndarray
    ci_level: float
    ci_model: np.ndarray
    ci_sandwich: np.ndarray


@dataclass
class FitResult:
    """Outcome of one estimating-equation solve."""

    beta: np.ndarray
    converged: bool
    iterations: int
    final_gnorm: float
    method: str
    message: str = ""
    ridge_events: int = 0
    fallback_count: int = 0
    h_hat: np.ndarray | None = None
    m_hat: np.ndarray | None = None
    se_model: np.ndarray | None = None
    se_sandwich: np.ndarray | None = None
    ci_level: float = 0.95
    ci_model: np.ndarray | None = None
    ci_sandwich: np.ndarray | None = None
    trace: list = field(default_factory=list)


class _Arrays:
    """Per-(beta) model quantities shared by the function and its Jacobian."""

    __slots__ = ("eta", "mu", "mu1", "sqrt_a", "resid", "sresid", "g1", "g2")

    def __init__(self, dataset, link, beta, derivatives=True):
        x = dataset.covariates
        self.eta = x @ beta
        self.mu = link.mu(self.eta)
        self.mu1 = link.dmu(self.eta)
        if np.any(self.mu1 <= 0.0):
            raise LinkDomainError(
                f"{link.name} link variance underflowed during evaluation"
            )
        self.sqrt_a = np.sqrt(self.mu1)
        self.resid = dataset.responses - self.mu
        self.sresid = self.resid / self.sqrt_a
        if derivatives:
            mu2 = link.d2mu(self.eta)
            self.g1 = mu2 / (2.0 * self.sqrt_a)
            self.g2 = -mu2 / (2.0 * self.mu1 * self.sqrt_a)
        else:
            self.g1 = self.g2 = None


def _evaluate(ctx, beta, jacobian=False, want_info=False, reference_beta=None):
    """Shared core: estimating function, optionally its exact Jacobian."""
    beta = np.asarray(beta, dtype=float)
    ds, link, model = ctx.dataset, ctx.link, ctx.model
    x = ds.covariates
    n, _, p = x.shape
    arr = _Arrays(ds, link, beta, derivatives=jacobian)
    q, info = inverse_stack(model, n, beta, want_info=want_info)
    qs = np.einsum("nmk,nk->nm", q, arr.sresid)
    g = np.einsum("nmp,nm,nm->p", x, arr.sqrt_a, qs)
    if not jacobian:
        return g, None, info

    scaled_x = arr.sqrt_a[:, :, None] * x
    h = np.einsum("nmp,nmk,nkq->pq", scaled_x, q, scaled_x)

    adaptive = isinstance(model, AdaptiveCorrelation)
    dstacks = (
        [model.derivative_stack(n, beta, l) for l in range(p)] if adaptive else None
    )

    def residual_terms(rvec):
        # Terms of the Jacobian that are linear in the residual slot rvec.
        srv = rvec / arr.sqrt_a
        u = np.einsum("nmk,nk->nm", q, srv)
        t1 = np.einsum("nmp,nm,nmq->pq", x, arr.g1 * u, x)
        t2 = np.einsum("nmp,nmk,nk,nkq->pq", scaled_x, q, arr.g2 * rvec, x)
        out = t1 + t2
        if adaptive:
            for l in range(p):
                w = np.einsum("nmk,nk->nm", dstacks[l], u)
                qw = np.einsum("nmk,nk->nm", q, w)
                out[:, l] -= np.einsum("nmp,nm,nm->p", x, arr.sqrt_a, qw)
        return out

    if reference_beta is None:
        b = residual_terms(arr.resid)
        e = np.zeros((p, p))
        split = False
    else:
        mu_ref = link.mu(x @ np.asarray(reference_beta, dtype=float))
        b = residual_terms(mu_ref - arr.mu)
        e = residual_terms(ds.responses - mu_ref)
        split = True
    return g, JacobianDecomposition(h=h, b=b, e=e, split=split), info


def estimating_function(ctx: EstimatingFunctionContext, beta) -> np.ndarray:
    """Value of the estimating function at ``beta``."""
    g, _, _ = _evaluate(ctx, beta)
    return g


def estimating_jacobian(
    ctx: EstimatingFunctionContext, beta, reference_beta=None
) -> JacobianDecomposition:
    """Exact negative Jacobian of the estimating function at ``beta``.

    With ``reference_beta`` (simulation use, where the generating
    parameter is known) the residual-carried terms are split into the
    drift and noise groups; otherwise the recombined total is computed
    directly from the observed responses.
    """
    _, jac, _ = _evaluate(ctx, beta, jacobian=True, reference_beta=reference_beta)
    return jac


def _weight_curvature(ctx, beta):
    """The curvature matrix ``h`` alone (Fisher-scoring iteration matrix)."""
    beta = np.asarray(beta, dtype=float)
    arr = _Arrays(ctx.dataset, ctx.link, beta, derivatives=False)
    q, _ = inverse_stack(ctx.model, ctx.dataset.n, beta, want_info=False)
    scaled_x = arr.sqrt_a[:, :, None] * ctx.dataset.covariates
    return np.einsum("nmp,nmk,nkq->pq", scaled_x, q, scaled_x)


def _independence_information(dataset, link, beta):
    arr = _Arrays(dataset, link, np.asarray(beta, dtype=float), derivatives=False)
    x = dataset.covariates
    return np.einsum("nmp,nm,nmq->pq", x, arr.mu1, x)


def _gnorm(g):
    return float(np.max(np.abs(g)))


def newton_solve(ctx: EstimatingFunctionContext, beta_init=None) -> FitResult:
    """Solve the estimating equation by damped Newton iteration.

    Convergence means the sup norm of the estimating function fell below
    ``tol_g * (1 + initial sup norm)``.  Each step solves the exact
    Jacobian system and backtracks by halving until the sup norm
    decreases; a singular Jacobian or an exhausted line search falls back
    to one Fisher-scoring step (curvature matrix only) before declaring
    non-convergence.  Never raises for non-convergence; a rank-deficient
    design raises :class:`RankDeficiencyError`.
    """
    method = _METHOD_TAGS.get(ctx.model.tag, ctx.model.tag)
    if beta_init is None:
        pilot = independence_fit(
            ctx.dataset, ctx.link, tol_g=ctx.tol_g, max_iter=ctx.max_iter
        )
        beta_init = pilot.beta
    beta_init = np.asarray(beta_init, dtype=float)

    lam_min_indep = float(
        np.linalg.eigvalsh(_independence_information(ctx.dataset, ctx.link, beta_init))[0]
    )
    if lam_min_indep <= 1e-12:
        raise RankDeficiencyError(lam_min_indep)

    if ctx.multistart > 0 and not ctx.model.beta_free:
        return _multistart_solve(ctx, beta_init)
    return _newton_from(ctx, beta_init, method)


def _newton_from(ctx, beta_init, method):
    beta = np.asarray(beta_init, dtype=float).copy()
    g, jac, _ = _evaluate(ctx, beta, jacobian=not ctx.scoring)
    gnorm = _gnorm(g)
    scale = 1.0 + gnorm
    target = ctx.tol_g * scale
    trace = [(gnorm, math.nan)]
    fallback = 0
    converged = gnorm <= target
    iterations = 0
    message = ""

    while not converged and iterations < ctx.max_iter:
        iterations += 1
        iteration_matrix = jac.total if (jac is not None) else _weight_curvature(ctx, beta)
        used_scoring = jac is None
        step = _try_step(ctx, beta, g, gnorm, iteration_matrix)
        if step is None and not used_scoring:
            # One scoring retry with the curvature matrix alone.
            fallback += 1
            step = _try_step(ctx, beta, g, gnorm, _weight_curvature(ctx, beta))
        if step is None:
            message = "line search failed to reduce the estimating function"
            break
        beta, g, gnorm, step_norm = step
        trace.append((gnorm, step_norm))
        converged = gnorm <= target
        if not converged:
            try:
                _, jac, _ = _evaluate(ctx, beta, jacobian=not ctx.scoring)
            except (LinkDomainError, CorrelationSingularError) as exc:
                message = f"jacobian evaluation failed: {exc}"
                break
    if not converged and not message:
        message = f"no convergence in {ctx.max_iter} iterations"

    result = FitResult(
        beta=beta,
        converged=bool(converged),
        iterations=iterations,
        final_gnorm=gnorm,
        method=method,
        message=message,
        fallback_count=fallback,
        trace=trace,
    )
    _attach_covariance(ctx, result)
    return result


def _try_step(ctx, beta, g, gnorm, iteration_matrix):
    """Backtracking line search along the Newton direction; None on failure."""
    try:
        delta = np.linalg.solve(iteration_matrix, g)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(delta)):
        return None
    step = 1.0
    for _ in range(ctx.max_halvings + 1):
        trial = beta + step * delta
        try:
            g_trial = estimating_function(ctx, trial)
            gn_trial = _gnorm(g_trial)
        except (LinkDomainError, CorrelationSingularError):
            step *= 0.5
            continue
        if gn_trial < gnorm:
            return trial, g_trial, gn_trial, float(np.linalg.norm(step * delta))
        step *= 0.5
    return None


def _multistart_solve(ctx, beta_indep):
    """Run Newton from the independence estimate plus perturbed seeds.

    Returns the converged root closest to the independence estimate; the
    plain run is returned if nothing converges.
    """
    method = _METHOD_TAGS[ctx.model.tag]
    runs = [_newton_from(ctx, beta_indep, method)]
    rng = np.random.default_rng(np.random.Philox(key=0x6EEF17))
    spread = 0.25 * (1.0 + float(np.max(np.abs(beta_indep))))
    for _ in range(ctx.multistart):
        start = beta_indep + spread * rng.standard_normal(beta_indep.shape)
        try:
            runs.append(_newton_from(ctx, start, method))
        except (LinkDomainError, CorrelationSingularError):
            continue
    converged = [r for r in runs if r.converged]
    if not converged:
        return runs[0]
    return min(converged, key=lambda r: float(np.linalg.norm(r.beta - beta_indep)))


def _attach_covariance(ctx, result, ci_level=0.95):
    try:
        cov = covariance_estimates(ctx, result.beta, ci_level=ci_level)
    except (np.linalg.LinAlgError, LinkDomainError, CorrelationSingularError):
        return
    result.h_hat = cov.h_hat
    result.m_hat = cov.m_hat
    result.se_model = cov.se_model
    result.se_sandwich = cov.se_sandwich
    result.ci_level = cov.ci_level
    result.ci_model = cov.ci_model
    result.ci_sandwich = cov.ci_sandwich
    try:
        _, info = inverse_stack(ctx.model, ctx.dataset.n, result.beta, want_info=True)
        result.ridge_events = info.ridge_events
    except CorrelationSingularError:
        pass


def covariance_estimates(
    ctx: EstimatingFunctionContext, beta_hat, ci_level: float = 0.95
) -> CovarianceEstimates:
    """Model-based and sandwich covariance estimates at a solution.

    The model-based covariance inverts the plug-in information matrix;
    the sandwich wraps the empirical middle (outer products of the
    weighted residual scores) between two such inverses, making it robust
    to a misspecified working correlation.  Confidence intervals are
    normal-quantile intervals on both scales.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    ds, link, model = ctx.dataset, ctx.link, ctx.model
    x = ds.covariates
    arr = _Arrays(ds, link, beta_hat, derivatives=False)
    q, _ = inverse_stack(model, ds.n, beta_hat, want_info=False)
    scaled_x = arr.sqrt_a[:, :, None] * x
    h_hat = np.einsum("nmp,nmk,nkq->pq", scaled_x, q, scaled_x)
    qs = np.einsum("nmk,nk->nm", q, arr.sresid)
    scores = np.einsum("nmp,nm->np", x, arr.sqrt_a * qs)
    m_hat = scores.T @ scores

    lam = np.linalg.eigvalsh(0.5 * (h_hat + h_hat.T))
    if lam[0] <= 0.0:
        raise np.linalg.LinAlgError(
            f"plug-in information matrix is singular (min eigenvalue {lam[0]:.3e})"
        )
    h_inv = np.linalg.inv(h_hat)
    cov_model = 0.5 * (h_inv + h_inv.T)
    cov_sandwich = h_inv @ m_hat @ h_inv
    se_model = np.sqrt(np.diag(cov_model))
    se_sandwich = np.sqrt(np.diag(cov_sandwich))
    z = float(norm.ppf(0.5 + 0.5 * ci_level))
    ci_model = np.column_stack([beta_hat - z * se_model, beta_hat + z * se_model])
    ci_sandwich = np.column_stack(
        [beta_hat - z * se_sandwich, beta_hat + z * se_sandwich]
    )
    return CovarianceEstimates(
        h_hat=h_hat,
        m_hat=m_hat,
        se_model=se_model,
        se_sandwich=se_sandwich,
        ci_level=ci_level,
        ci_model=ci_model,
        ci_sandwich=ci_sandwich,
    )


def closed_form_linear(ctx: EstimatingFunctionContext) -> FitResult:
    """Weighted-least-squares solution for the linear link.

    Only strategies whose matrices do not depend on beta admit a closed
    form; the adaptive equation does not and is rejected.
    """
    if ctx.link.name != "linear":
        raise ValueError("closed form requires the linear link")
    if not ctx.model.beta_free:
        raise ValueError(
            "the adaptive estimating equation has no closed-form root; use newton_solve"
        )
    ds = ctx.dataset
    x, y = ds.covariates, ds.responses
    q, info = inverse_stack(ctx.model, ds.n, np.zeros(ds.p), want_info=True)
    bread = np.einsum("nmp,nmk,nkq->pq", x, q, x)
    rhs = np.einsum("nmp,nmk,nk->p", x, q, y)
    lam = np.linalg.eigvalsh(0.5 * (bread + bread.T))
    if lam[0] <= 1e-12 * max(1.0, lam[-1]):
        raise RankDeficiencyError(lam[0])
    beta = np.linalg.solve(bread, rhs)
    g = estimating_function(ctx, beta)
    result = FitResult(
        beta=beta,
        converged=True,
        iterations=0,
        final_gnorm=_gnorm(g),
        method=_METHOD_TAGS.get(ctx.model.tag, ctx.model.tag),
        ridge_events=info.ridge_events if info else 0,
        trace=[(_gnorm(g), 0.0)],
    )
    _attach_covariance(ctx, result)
    return result


def independence_fit(dataset, link, tol_g=1e-10, max_iter=100) -> FitResult:
    """Working-independence fit: closed form for the linear link, Newton
    from zero otherwise."""
    link = get_link(link) if isinstance(link, str) else link
    ctx = EstimatingFunctionContext(
        dataset=dataset,
        link=link,
        model=IdentityCorrelation(dataset.m),
        tol_g=tol_g,
        max_iter=max_iter,
    )
    if link.name == "linear":
        return closed_form_linear(ctx)
    return newton_solve(ctx, beta_init=np.zeros(dataset.p))


def fit(
    dataset,
    link,
    method: str = "aqs",
    *,
    gee_correlation=None,
    pilot=None,
    ridge: bool = True,
    tol_g: float = 1e-10,
    max_iter: int = 100,
    scoring: bool = False,
    multistart: int = 0,
    solver: str = "auto",
    ci_level: float = 0.95,
) -> FitResult:
    """Fit the marginal model with one of the four strategies.

    ``method`` is one of ``indep``, ``gee`` (requires ``gee_correlation``,
    a fixed correlation matrix), ``ple`` (frozen at a working-independence
    pilot, or at ``pilot`` when supplied) and ``aqs`` (adaptive).
    ``solver="auto"`` uses the closed form where one exists (linear link,
    beta-free strategy) and Newton everywhere else.
    """
    link = get_link(link) if isinstance(link, str) else link
    pilot_result = None
    if method in ("ple", "aqs") and pilot is None:
        pilot_result = independence_fit(dataset, link, tol_g=tol_g, max_iter=max_iter)
        if not pilot_result.converged:
            raise NonConvergedPilotError(
                "working-independence pilot did not converge: "
                + pilot_result.message
            )
        pilot = pilot_result

    if method == "indep":
        model = IdentityCorrelation(dataset.m)
    elif method == "gee":
        if gee_correlation is None:
            raise ValueError("method='gee' requires gee_correlation")
        model = (
            gee_correlation
            if isinstance(gee_correlation, FixedCorrelation)
            else FixedCorrelation(gee_correlation)
        )
    elif method == "ple":
        model = PilotCorrelation.from_pilot(dataset, link, pilot, ridge=ridge)
    elif method == "aqs":
        model = AdaptiveCorrelation(dataset, link, ridge=ridge)
    else:
        raise ValueError(f"unknown method {method!r}")

    ctx = EstimatingFunctionContext(
        dataset=dataset,
        link=link,
        model=model,
        tol_g=tol_g,
        max_iter=max_iter,
        scoring=scoring,
        multistart=multistart,
    )
    use_closed = solver == "closed_form" or (
        solver == "auto" and link.name == "linear" and model.beta_free
    )
    if use_closed:
        result = closed_form_linear(ctx)
    else:
        init = np.asarray(getattr(pilot, "beta", pilot), dtype=float) if pilot is not None else None
        result = newton_solve(ctx, beta_init=init)
    if ci_level != 0.95:
        _attach_covariance(ctx, result, ci_level=ci_level)
    return result
