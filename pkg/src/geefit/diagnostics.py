"""Finite-sample regularity and optimality diagnostics.

These routines compute, on observed or simulated data, the quantities the
package's asymptotic guarantees are phrased in: eigenvalue growth of the
independence information matrix, leverage-type design constants,
ball-supremum smoothness measures of the link and of the working
correlation, and (in simulation, where the truth is known) the covariance
and information matrices of the competing estimating functions together
with their determinant ratios.

Ball suprema are approximated by sampling: the center, the 2p axis
boundary points, and a seeded batch of uniform points in the ball.  They
are therefore lower bounds on the true suprema; the sampling plan is
recorded in the result.
"""

from dataclasses import dataclass

import numpy as np

from .correlation import (
    AdaptiveCorrelation,
    FixedCorrelation,
    IdentityCorrelation,
    PilotCorrelation,
    inverse_stack,
)
from .estimator import covariance_estimates, independence_fit, EstimatingFunctionContext
from .model import get_link
from .simulation import (
    GeneratorConfig,
    covariate_design,
    generate_dataset,
    true_correlation,
    _pmap,
)

__all__ = [
    "h_indep",
    "RegularityConstants",
    "regularity_constants",
    "eta_slope",
    "HypothesisRow",
    "HypothesisCheckReport",
    "hypothesis_check",
    "OptimalityMatrices",
    "optimality_matrices_mc",
    "information_matrix",
]


def h_indep(dataset, beta, link) -> np.ndarray:
    """Independence information matrix: variance-weighted design cross-products."""
    beta = np.asarray(beta, dtype=float)
    x = dataset.covariates
    mu1 = link.dmu(x @ beta)
    return np.einsum("nmp,nm,nmq->pq", x, mu1, x)


@dataclass(frozen=True)
class RegularityConstants:
    """Finite-sample constants entering the consistency analysis.

    All ball suprema are sampled lower bounds over the ball of radius
    ``r`` around ``beta_center``; ``ball_samples`` random interior points
    plus the center and the 2p axis boundary points were used.
    """

    r: float
    delta: float
    ball_samples: int
    seed: int
    lam_min_indep: float
    lam_max_indep: float
    max_leverage: float          # worst design leverage against the information matrix
    leverage_scale: float        # lam_max_indep * max_leverage
    curvature_ratio_2: float     # sup |mu''/mu'|
    curvature_ratio_3: float     # sup |mu'''/mu'|
    variance_ratio_span: float   # sup |sqrt(mu'(b')/mu'(b)) - 1| over ball pairs
    inverse_drift_max: float     # sup lam_max of centered inverse-correlation drift
    inverse_drift_excess: float  # same minus identity
    correlation_derivative_max: float  # sup lam_max of the correlation derivative
    growth_threshold: float      # lam_max_indep ** (1/2 - delta)
    inverse_weight_bound: float  # m * max_i lam_max of the inverted correlation
    information_imbalance: float  # lam_max of (sandwich middle)^-1 @ information


def _ball_points(center, r, ball_samples, seed):
    center = np.asarray(center, dtype=float)
    p = center.size
    points = [center]
    for k in range(p):
        e = np.zeros(p)
        e[k] = r
        points.append(center + e)
        points.append(center - e)
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) + 0xBA11))
    for _ in range(ball_samples):
        v = rng.standard_normal(p)
        v /= np.linalg.norm(v)
        radius = r * rng.uniform() ** (1.0 / p)
        points.append(center + radius * v)
    return points


def regularity_constants(
    dataset,
    beta_center,
    link,
    model,
    r: float,
    delta: float = 0.1,
    ball_samples: int = 16,
    seed: int = 0,
) -> RegularityConstants:
    """Evaluate the regularity constants at ``beta_center`` with ball radius ``r``."""
    if r <= 0:
        raise ValueError("ball radius r must be positive")
    if ball_samples < 1:
        raise ValueError("ball_samples must be at least 1")
    link = get_link(link) if isinstance(link, str) else link
    beta_center = np.asarray(beta_center, dtype=float)
    x = dataset.covariates
    n = dataset.n

    h0 = h_indep(dataset, beta_center, link)
    lam = np.linalg.eigvalsh(h0)
    lam_min, lam_max = float(lam[0]), float(lam[-1])
    h0_inv = np.linalg.inv(h0)
    leverage = float(np.max(np.einsum("nmp,pq,nmq->nm", x, h0_inv, x)))
    leverage_scale = lam_max * leverage

    points = _ball_points(beta_center, r, ball_samples, seed)
    mu1_grid = []
    k2 = k3 = 0.0
    for b in points:
        eta = x @ b
        mu1 = link.dmu(eta)
        mu1_grid.append(mu1)
        k2 = max(k2, float(np.max(np.abs(link.d2mu(eta) / mu1))))
        k3 = max(k3, float(np.max(np.abs(link.d3mu(eta) / mu1))))
    eta_sup = 0.0
    for a in mu1_grid:
        for b in mu1_grid:
            eta_sup = max(eta_sup, float(np.max(np.abs(np.sqrt(b / a) - 1.0))))

    # Working-correlation drift over the ball, measured against the
    # center matrices (ridge policy applied consistently on both sides).
    raw_c = model.matrix_stack(n, beta_center)
    eps = model.ridge_epsilons(n)
    eff_c = raw_c + eps[:, None, None] * np.eye(model.m)
    w, v = np.linalg.eigh(eff_c)
    sqrt_c = (v * np.sqrt(w)[:, None, :]) @ np.swapaxes(v, 1, 2)
    pi_sup = 0.0
    rho_sup = 0.0
    q_sup = 0.0
    eye = np.eye(model.m)
    for b in points:
        q_stack, _ = inverse_stack(model, n, b, want_info=False)
        mid = sqrt_c @ q_stack @ sqrt_c
        lam_mid = np.linalg.eigvalsh(0.5 * (mid + np.swapaxes(mid, 1, 2)))
        pi_sup = max(pi_sup, float(lam_mid[:, -1].max()))
        lam_exc = np.linalg.eigvalsh(
            0.5 * (mid + np.swapaxes(mid, 1, 2)) - eye
        )
        rho_sup = max(rho_sup, float(lam_exc[:, -1].max()))
        if not model.beta_free:
            for l in range(dataset.p):
                d_stack = model.derivative_stack(n, b, l)
                lam_d = np.linalg.eigvalsh(0.5 * (d_stack + np.swapaxes(d_stack, 1, 2)))
                q_sup = max(q_sup, float(lam_d[:, -1].max()))

    q_center, _ = inverse_stack(model, n, beta_center, want_info=False)
    tau = dataset.m * float(np.linalg.eigvalsh(q_center)[:, -1].max())
    ctx = EstimatingFunctionContext(dataset=dataset, link=link, model=model)
    try:
        cov = covariance_estimates(ctx, beta_center)
        imbalance = float(
            np.max(np.abs(np.linalg.eigvals(np.linalg.solve(cov.m_hat, cov.h_hat))))
        )
    except np.linalg.LinAlgError:
        imbalance = np.nan

    return RegularityConstants(
        r=float(r),
        delta=float(delta),
        ball_samples=int(ball_samples),
        seed=int(seed),
        lam_min_indep=lam_min,
        lam_max_indep=lam_max,
        max_leverage=leverage,
        leverage_scale=leverage_scale,
        curvature_ratio_2=k2,
        curvature_ratio_3=k3,
        variance_ratio_span=eta_sup,
        inverse_drift_max=pi_sup,
        inverse_drift_excess=rho_sup,
        correlation_derivative_max=q_sup,
        growth_threshold=lam_max ** (0.5 - delta),
        inverse_weight_bound=tau,
        information_imbalance=imbalance,
    )


def eta_slope(
    dataset,
    beta_center,
    link,
    r_grid,
    ball_samples: int = 16,
    seed: int = 0,
):
    """Least-squares slope of the variance-ratio span against ``r * sqrt(a)``.

    For bounded designs and small radii the span grows at most linearly in
    ``r`` times the square root of the leverage scale ``a``; the fitted
    slope (through the origin) is that linearity constant.  Returns
    ``(slope, table)`` where the table rows are ``(r, span)``.
    """
    link = get_link(link) if isinstance(link, str) else link
    beta_center = np.asarray(beta_center, dtype=float)
    h0 = h_indep(dataset, beta_center, link)
    lam_max = float(np.linalg.eigvalsh(h0)[-1])
    h0_inv = np.linalg.inv(h0)
    x = dataset.covariates
    leverage = float(np.max(np.einsum("nmp,pq,nmq->nm", x, h0_inv, x)))
    scale = np.sqrt(lam_max * leverage)

    spans = []
    for r in r_grid:
        points = _ball_points(beta_center, float(r), ball_samples, seed)
        grids = [link.dmu(x @ b) for b in points]
        sup = 0.0
        for a in grids:
            for b in grids:
                sup = max(sup, float(np.max(np.abs(np.sqrt(b / a) - 1.0))))
        spans.append(sup)
    rs = np.asarray([float(r) for r in r_grid])
    spans = np.asarray(spans)
    design = rs * scale
    slope = float((design @ spans) / (design @ design))
    return slope, list(zip(rs.tolist(), spans.tolist()))


@dataclass(frozen=True)
class HypothesisRow:
    n: int
    lam_min: float
    lam_max: float
    growth_ratio: float       # lam_min / lam_max ** (1/2 + delta)
    weighted_lower_sum: float
    weighted_upper_sum: float
    sufficient_ratio: float   # weighted_lower_sum / weighted_upper_sum ** (1/2 + delta)
    rank_deficient: bool
    hypothesis_ok: bool


@dataclass(frozen=True)
class HypothesisCheckReport:
    delta: float
    c0: float
    domain_bound: float
    lam_min_monotone: bool
    rows: list


def _rank_one_extremes(x):
    """Per-observation smallest/largest eigenvalues of the rank-one x x'."""
    sq = np.einsum("nmp,nmp->nm", x, x)
    lam_max = sq
    lam_min = sq if x.shape[2] == 1 else np.zeros_like(sq)
    return lam_min, lam_max


def _sufficient_weights(link_name, norms, domain_bound):
    c = float(domain_bound)
    if link_name == "linear":
        return np.ones_like(norms), np.ones_like(norms)
    if link_name == "logistic":
        low = np.exp(-c * norms) / (1.0 + np.exp(c * norms))
        return low, np.ones_like(norms)
    if link_name == "log":
        b = np.exp(c * norms)
        return 1.0 / b, b
    if link_name == "probit":
        # Same construction: the normal density is decreasing in |u|, so its
        # value at the largest reachable predictor bounds the variance below.
        low = np.exp(-0.5 * (c * norms) ** 2) / np.sqrt(2.0 * np.pi)
        return low, np.full_like(norms, 1.0 / np.sqrt(2.0 * np.pi))
    raise ValueError(f"unknown link {link_name!r}")


def hypothesis_check(
    dataset,
    n_grid,
    beta,
    link,
    delta: float = 0.1,
    c0: float | None = None,
    domain_bound: float = 1.0,
) -> HypothesisCheckReport:
    """Eigenvalue-growth audit of the design along an increasing n-grid.

    For each grid point (a prefix of the dataset) the report gives the
    extreme eigenvalues of the independence information matrix, the growth
    ratio they must keep bounded below, and the link-specific weighted
    design sums that are sufficient for the growth condition when the
    parameter domain is bounded by ``domain_bound``.  ``c0`` defaults to
    the growth ratio at the first grid point.
    """
    link = get_link(link) if isinstance(link, str) else link
    beta = np.asarray(beta, dtype=float)
    n_grid = sorted(int(n) for n in n_grid)
    if n_grid[-1] > dataset.n:
        raise ValueError(f"grid maximum {n_grid[-1]} exceeds n = {dataset.n}")

    x = dataset.covariates
    norms = np.linalg.norm(x, axis=2)
    lam_min_obs, lam_max_obs = _rank_one_extremes(x)
    w_low, w_up = _sufficient_weights(link.name, norms, domain_bound)
    lower_terms = w_low * lam_min_obs
    upper_terms = w_up * lam_max_obs

    rows = []
    lam_min_seq = []
    for n in n_grid:
        sub = dataset.prefix(n)
        lam = np.linalg.eigvalsh(h_indep(sub, beta, link))
        lam_min, lam_max = float(lam[0]), float(lam[-1])
        lam_min_seq.append(lam_min)
        growth = lam_min / lam_max ** (0.5 + delta) if lam_max > 0 else np.nan
        low = float(lower_terms[:n].sum())
        up = float(upper_terms[:n].sum())
        suff = low / up ** (0.5 + delta) if up > 0 else np.nan
        rows.append(
            (n, lam_min, lam_max, growth, low, up, suff)
        )
    if c0 is None:
        c0 = rows[0][3]
    report_rows = [
        HypothesisRow(
            n=n,
            lam_min=lmin,
            lam_max=lmax,
            growth_ratio=growth,
            weighted_lower_sum=low,
            weighted_upper_sum=up,
            sufficient_ratio=suff,
            rank_deficient=bool(lmin <= 1e-12 * max(1.0, lmax)),
            hypothesis_ok=bool(lmin >= c0 * lmax ** (0.5 + delta) - 1e-12),
        )
        for (n, lmin, lmax, growth, low, up, suff) in rows
    ]
    monotone = all(
        b >= a - 1e-12 for a, b in zip(lam_min_seq, lam_min_seq[1:])
    )
    return HypothesisCheckReport(
        delta=float(delta),
        c0=float(c0),
        domain_bound=float(domain_bound),
        lam_min_monotone=monotone,
        rows=report_rows,
    )


@dataclass(frozen=True)
class OptimalityMatrices:
    """Information and covariance matrices of the competing equations.

    ``m_bar`` is the covariance of the optimal (true-correlation)
    estimating function, computed exactly.  ``h_star`` and ``m_star`` are
    the expected negative Jacobian and the covariance of the working
    estimating function; exact for strategies that do not look at the
    data, Monte Carlo averages otherwise.  The determinant ratios measure
    how close the working equation is to the optimal one.
    """

    model: str
    reps: int
    m_bar: np.ndarray
    h_star: np.ndarray
    m_star: np.ndarray
    h_indep: np.ndarray
    m_indep: np.ndarray
    det_ratio_h: float
    det_ratio_m: float
    det_ratio_h_se: float
    det_ratio_m_se: float
    low_reps_warning: bool


def _optimality_worker(args):
    config, rep, model_name = args
    link = get_link(config.link)
    dataset = generate_dataset(config, replication=rep)
    if model_name == "aqs":
        model = AdaptiveCorrelation(dataset, link)
    else:
        pilot = independence_fit(dataset, link)
        model = PilotCorrelation.from_pilot(dataset, link, pilot)
    q, _ = inverse_stack(model, dataset.n, config.beta0, want_info=False)
    x = dataset.covariates
    sa = np.sqrt(link.dmu(x @ config.beta0))
    t = sa[:, :, None] * x
    corr = true_correlation(config)
    h_rep = np.einsum("nmp,nmk,nkq->pq", t, q, t)
    qrq = q @ corr @ q
    m_rep = np.einsum("nmp,nmk,nkq->pq", t, qrq, t)
    return h_rep, m_rep


def _jackknife_det_ratio(mats, denom_det):
    mats = np.asarray(mats)
    reps = mats.shape[0]
    total = mats.sum(axis=0)
    full = float(np.linalg.det(total / reps) / denom_det)
    loo = np.empty(reps)
    for j in range(reps):
        loo[j] = np.linalg.det((total - mats[j]) / (reps - 1)) / denom_det
    se = float(np.sqrt((reps - 1) / reps * ((loo - loo.mean()) ** 2).sum()))
    return full, se


def optimality_matrices_mc(
    config: GeneratorConfig,
    model: str = "aqs",
    reps: int = 500,
    gee_correlation=None,
    workers: int = 1,
) -> OptimalityMatrices:
    """Assemble the optimality matrices for one working-correlation strategy.

    ``model`` is one of ``oracle`` (true correlation plugged in),
    ``identity``, ``gee`` (fixed matrix, possibly misspecified), ``ple``
    and ``aqs``.  The first three need no simulation: their inverse
    working correlations are deterministic.  The last two average the
    required inverse-correlation moments over ``reps`` simulated datasets
    with jackknife standard errors on the determinant ratios.
    """
    link = get_link(config.link)
    x = covariate_design(config)
    corr = true_correlation(config)
    corr_inv = np.linalg.inv(corr)
    mu1 = link.dmu(x @ config.beta0)
    t = np.sqrt(mu1)[:, :, None] * x

    m_bar = np.einsum("nmp,mk,nkq->pq", t, corr_inv, t)
    h_ind = np.einsum("nmp,nm,nmq->pq", x, mu1, x)
    m_ind = np.einsum("nmp,mk,nkq->pq", t, corr, t)
    det_m_bar = float(np.linalg.det(m_bar))

    if model in ("oracle", "identity", "gee"):
        if model == "oracle":
            q = corr_inv
        elif model == "identity":
            q = np.eye(config.m)
        else:
            from .simulation import _resolve_gee_matrix

            q = np.linalg.inv(_resolve_gee_matrix(config, gee_correlation))
        h_star = np.einsum("nmp,mk,nkq->pq", t, q, t)
        qrq = q @ corr @ q
        m_star = np.einsum("nmp,mk,nkq->pq", t, qrq, t)
        return OptimalityMatrices(
            model=model,
            reps=0,
            m_bar=m_bar,
            h_star=h_star,
            m_star=m_star,
            h_indep=h_ind,
            m_indep=m_ind,
            det_ratio_h=float(np.linalg.det(h_star) / det_m_bar),
            det_ratio_m=float(np.linalg.det(m_star) / det_m_bar),
            det_ratio_h_se=0.0,
            det_ratio_m_se=0.0,
            low_reps_warning=False,
        )

    if model not in ("aqs", "ple"):
        raise ValueError(f"unknown model {model!r}")
    if reps < 2:
        raise ValueError("reps must be at least 2 for the Monte Carlo models")
    rows = _pmap(
        _optimality_worker, [(config, rep, model) for rep in range(reps)], workers
    )
    h_reps = np.asarray([r[0] for r in rows])
    m_reps = np.asarray([r[1] for r in rows])
    ratio_h, se_h = _jackknife_det_ratio(h_reps, det_m_bar)
    ratio_m, se_m = _jackknife_det_ratio(m_reps, det_m_bar)
    return OptimalityMatrices(
        model=model,
        reps=reps,
        m_bar=m_bar,
        h_star=h_reps.mean(axis=0),
        m_star=m_reps.mean(axis=0),
        h_indep=h_ind,
        m_indep=m_ind,
        det_ratio_h=ratio_h,
        det_ratio_m=ratio_m,
        det_ratio_h_se=se_h,
        det_ratio_m_se=se_m,
        low_reps_warning=bool(reps < 100),
    )


def information_matrix(h, m):
    """Godambe-style information: ``h' m^-1 h`` and its inverse.

    ``m`` must be symmetric positive definite (it is a covariance); a
    singular ``m`` raises ``LinAlgError``.
    """
    h = np.asarray(h, dtype=float)
    m = np.asarray(m, dtype=float)
    lam = np.linalg.eigvalsh(0.5 * (m + m.T))
    if lam[0] <= 0.0:
        raise np.linalg.LinAlgError(
            f"covariance matrix is not positive definite (min eigenvalue {lam[0]:.3e})"
        )
    eff = h.T @ np.linalg.solve(m, h)
    eff = 0.5 * (eff + eff.T)
    return eff, np.linalg.inv(eff)
