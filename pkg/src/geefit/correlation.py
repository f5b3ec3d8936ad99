"""Working-correlation strategies for the estimating equations.

Four strategies are provided.  ``IdentityCorrelation`` ignores the
within-individual dependence.  ``FixedCorrelation`` plugs in a known
correlation matrix (exchangeable, AR(1) or user-supplied).
``PilotCorrelation`` freezes the prefix sample correlations of
standardized residuals evaluated at a pilot estimate, so the matrices do
not change during the solve.  ``AdaptiveCorrelation`` re-evaluates those
prefix sample correlations at every candidate parameter, which is what
makes the resulting estimating equation adaptive.

All strategies expose the matrix used for individual ``i`` (0-based),
which by construction depends only on the ``i`` individuals *before* it;
this is what keeps the estimating function a martingale.

Prefix sample averages over fewer individuals than the matrix dimension
are rank deficient, so inversion applies a prefix-decaying ridge
``eps_k = max(1e-6, m / k)``: large enough at small prefixes to keep the
weights bounded, decaying fast enough to leave the asymptotics untouched.
The raw (un-ridged) matrices are what the strategy *emits*; the ridge
enters only when inverting.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import eigh_range, is_correlation_matrix, symmetrize
from .model import LongitudinalDataset

__all__ = [
    "RIDGE_FLOOR",
    "SINGULAR_TOL",
    "CorrelationSingularError",
    "structured_correlation",
    "residual_correlation",
    "residual_correlation_derivative",
    "pilot_correlation_sequence",
    "inverse_derivative",
    "CorrelationModel",
    "IdentityCorrelation",
    "FixedCorrelation",
    "PilotCorrelation",
    "AdaptiveCorrelation",
    "working_correlation",
    "working_correlation_inverse",
    "inverse_stack",
    "InverseInfo",
    "StackInfo",
]

# Floor of the prefix-decaying ridge added to sample correlation matrices
# before inversion, and the eigenvalue threshold below which an un-ridged
# matrix is reported as singular.
RIDGE_FLOOR = 1e-6
SINGULAR_TOL = 1e-8


class CorrelationSingularError(np.linalg.LinAlgError):
    """A working correlation matrix was numerically singular.

    Carries the 0-based individual index whose equation needed the
    inverse, plus the offending smallest eigenvalue.
    """

    def __init__(self, index, lam_min):
        self.index = int(index)
        self.lam_min = float(lam_min)
        super().__init__(
            f"working correlation for individual {self.index} has "
            f"min eigenvalue {self.lam_min:.3e} < {SINGULAR_TOL:.0e} "
            "(enable the ridge or drop the offending prefix)"
        )


def structured_correlation(structure: str, alpha: float, m: int) -> np.ndarray:
    """Build an exchangeable or AR(1) correlation matrix.

    Exchangeable requires ``alpha`` in ``(-1/(m-1), 1)``; AR(1) requires
    ``|alpha| < 1``.  Out-of-range parameters raise ``ValueError``.
    """
    if m < 1:
        raise ValueError("matrix dimension must be at least 1")
    alpha = float(alpha)
    if structure == "exchangeable":
        low = -1.0 / (m - 1) if m > 1 else -np.inf
        if not low < alpha < 1.0:
            raise ValueError(
                f"exchangeable parameter {alpha} outside ({low:.4g}, 1)"
            )
        out = np.full((m, m), alpha)
        np.fill_diagonal(out, 1.0)
        return out
    if structure == "ar1":
        if not -1.0 < alpha < 1.0:
            raise ValueError(f"ar1 parameter {alpha} outside (-1, 1)")
        idx = np.arange(m)
        return alpha ** np.abs(idx[:, None] - idx[None, :])
    raise ValueError(f"unknown correlation structure {structure!r}")


def _std_residuals(dataset, beta, link, upto=None):
    """Standardized residuals of the first ``upto`` individuals, shape (k, m)."""
    k = dataset.n if upto is None else upto
    x = dataset.covariates[:k]
    eta = x @ np.asarray(beta, dtype=float)
    var = link.dmu(eta)
    if np.any(var <= 0.0):
        from .model import LinkDomainError

        raise LinkDomainError(
            f"{link.name} link variance underflowed while standardizing residuals"
        )
    return (dataset.responses[:k] - link.mu(eta)) / np.sqrt(var)


def residual_correlation(dataset, k: int, beta, link) -> np.ndarray:
    """Average outer product of the first ``k`` standardized residuals.

    ``k`` is the prefix length.  Prefixes of length 0 or 1 are degenerate
    and return the identity.  The result is symmetric PSD but (for small
    ``k``) need not have unit diagonal or full rank.
    """
    m = dataset.m
    if k < 0 or k > dataset.n:
        raise IndexError(f"prefix length {k} outside 0..{dataset.n}")
    if k < 2:
        return np.eye(m)
    s = _std_residuals(dataset, beta, link, upto=k)
    return (s.T @ s) / k


def residual_correlation_derivative(dataset, k: int, beta, link, l: int) -> np.ndarray:
    """Derivative of :func:`residual_correlation` in coordinate ``l`` of beta.

    Differentiates each standardized residual analytically (product and
    chain rule through the mean and the variance scaling); the result is
    symmetric.  Degenerate prefixes (k < 2) have zero derivative.
    """
    m = dataset.m
    if k < 0 or k > dataset.n:
        raise IndexError(f"prefix length {k} outside 0..{dataset.n}")
    if k < 2:
        return np.zeros((m, m))
    beta = np.asarray(beta, dtype=float)
    x = dataset.covariates[:k]
    eta = x @ beta
    mu1 = link.dmu(eta)
    mu2 = link.d2mu(eta)
    sqrt_a = np.sqrt(mu1)
    resid = dataset.responses[:k] - link.mu(eta)
    s = resid / sqrt_a
    g2 = -mu2 / (2.0 * mu1 * sqrt_a)
    xl = x[:, :, l]
    ds = g2 * xl * resid - sqrt_a * xl
    return (ds.T @ s + s.T @ ds) / k


def pilot_correlation_sequence(dataset, pilot_beta, link) -> np.ndarray:
    """All prefix sample correlations at a fixed pilot estimate.

    Returns an ``(n, m, m)`` stack whose entry ``k`` is
    :func:`residual_correlation` with prefix length ``k`` (identity for
    ``k < 2``), evaluated once at ``pilot_beta`` and immutable thereafter.
    """
    n, m = dataset.n, dataset.m
    seq = np.empty((n, m, m))
    seq[:min(2, n)] = np.eye(m)
    if n > 2:
        s = _std_residuals(dataset, pilot_beta, link)
        csum = np.cumsum(s[:, :, None] * s[:, None, :], axis=0)
        ks = np.arange(2, n, dtype=float)
        seq[2:] = csum[1 : n - 1] / ks[:, None, None]
    return seq


def inverse_derivative(rinv: np.ndarray, dr: np.ndarray) -> np.ndarray:
    """Derivative of a matrix inverse: ``-rinv @ dr @ rinv``."""
    return -rinv @ dr @ rinv


class CorrelationModel:
    """Base working-correlation strategy.

    ``matrix(i, beta)`` returns the matrix used in individual ``i``'s term
    of the estimating equation; it may depend only on individuals before
    ``i``.  Strategies whose matrices do not depend on beta advertise
    ``beta_free`` and have identically zero derivatives.
    """

    beta_free = True
    tag = "base"
    ridge = False

    @property
    def m(self) -> int:
        raise NotImplementedError

    def max_index(self) -> int | None:
        """Largest usable individual index + 1, or None when unbounded."""
        return None

    def matrix(self, i: int, beta) -> np.ndarray:
        raise NotImplementedError

    def matrix_stack(self, n: int, beta) -> np.ndarray:
        out = np.empty((n, self.m, self.m))
        for i in range(n):
            out[i] = self.matrix(i, beta)
        return out

    def derivative(self, i: int, beta, l: int) -> np.ndarray:
        return np.zeros((self.m, self.m))

    def derivative_stack(self, n: int, beta, l: int) -> np.ndarray | None:
        """Stack of per-individual derivative matrices, or None when zero."""
        return None

    def ridge_epsilons(self, n: int) -> np.ndarray:
        return np.zeros(n)

    def _check_index(self, i):
        if i < 0:
            raise IndexError(f"individual index {i} must be non-negative")
        upper = self.max_index()
        if upper is not None and i >= upper:
            raise IndexError(f"individual index {i} outside 0..{upper - 1}")


class IdentityCorrelation(CorrelationModel):
    """Working independence: the identity matrix for every individual."""

    tag = "identity"

    def __init__(self, m: int):
        self._m = int(m)

    @property
    def m(self) -> int:
        return self._m

    def matrix(self, i, beta):
        self._check_index(i)
        return np.eye(self._m)

    def matrix_stack(self, n, beta):
        return np.broadcast_to(np.eye(self._m), (n, self._m, self._m)).copy()


class FixedCorrelation(CorrelationModel):
    """A known correlation matrix shared by all individuals.

    The matrix must be a true correlation matrix (symmetric, unit
    diagonal, positive definite); anything else is rejected at
    construction rather than silently projected.
    """

    tag = "fixed"

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if not is_correlation_matrix(matrix):
            raise ValueError(
                "fixed working correlation must be symmetric positive definite "
                "with unit diagonal"
            )
        self._matrix = matrix

    @classmethod
    def structured(cls, structure: str, alpha: float, m: int) -> "FixedCorrelation":
        return cls(structured_correlation(structure, alpha, m))

    @property
    def m(self) -> int:
        return self._matrix.shape[0]

    @property
    def matrix_value(self) -> np.ndarray:
        return self._matrix.copy()

    def matrix(self, i, beta):
        self._check_index(i)
        return self._matrix.copy()

    def matrix_stack(self, n, beta):
        return np.broadcast_to(self._matrix, (n, self.m, self.m)).copy()


def _sample_ridge_epsilons(n, m, enabled):
    if not enabled or n == 0:
        return np.zeros(n)
    eps = np.zeros(n)
    if n > 2:
        ks = np.arange(2, n, dtype=float)
        eps[2:] = np.maximum(RIDGE_FLOOR, m / ks)
    return eps


class PilotCorrelation(CorrelationModel):
    """Prefix sample correlations frozen at a pilot estimate.

    Individual ``i`` uses the stored prefix-``i`` matrix, so nothing here
    depends on the parameter being solved for.
    """

    tag = "ple"

    def __init__(self, sequence, ridge: bool = True):
        sequence = np.asarray(sequence, dtype=float)
        if sequence.ndim != 3 or sequence.shape[1] != sequence.shape[2]:
            raise ValueError("sequence must have shape (n, m, m)")
        self._sequence = sequence
        self.ridge = bool(ridge)

    @classmethod
    def from_pilot(cls, dataset, link, pilot, ridge: bool = True) -> "PilotCorrelation":
        """Build the sequence from a pilot estimate.

        ``pilot`` may be a plain coefficient vector (trusted as-is) or a
        fit result; a fit result that did not converge is refused, since
        the frozen matrices are only meaningful for a consistent pilot.
        """
        beta = getattr(pilot, "beta", pilot)
        converged = getattr(pilot, "converged", True)
        if not converged:
            raise ValueError(
                "refusing to freeze correlations at a non-converged pilot estimate"
            )
        return cls(pilot_correlation_sequence(dataset, beta, link), ridge=ridge)

    @property
    def m(self) -> int:
        return self._sequence.shape[1]

    @property
    def sequence(self) -> np.ndarray:
        return self._sequence

    def max_index(self):
        return self._sequence.shape[0]

    def matrix(self, i, beta):
        self._check_index(i)
        return self._sequence[i].copy()

    def matrix_stack(self, n, beta):
        if n > self._sequence.shape[0]:
            raise IndexError(
                f"need {n} stored matrices but the pilot sequence has "
                f"{self._sequence.shape[0]}"
            )
        return self._sequence[:n].copy()

    def ridge_epsilons(self, n):
        return _sample_ridge_epsilons(n, self.m, self.ridge)


class AdaptiveCorrelation(CorrelationModel):
    """Prefix sample correlations re-evaluated at every candidate beta."""

    beta_free = False
    tag = "aqs"

    def __init__(self, dataset: LongitudinalDataset, link, ridge: bool = True):
        self.dataset = dataset
        self.link = link
        self.ridge = bool(ridge)

    @property
    def m(self) -> int:
        return self.dataset.m

    def max_index(self):
        # Prefix length n (all individuals) is still well defined.
        return self.dataset.n + 1

    def matrix(self, i, beta):
        self._check_index(i)
        return residual_correlation(self.dataset, i, beta, self.link)

    def matrix_stack(self, n, beta):
        if n > self.dataset.n + 1:
            raise IndexError(f"stack length {n} exceeds n+1 = {self.dataset.n + 1}")
        m = self.m
        out = np.empty((n, m, m))
        out[:min(2, n)] = np.eye(m)
        if n > 2:
            s = _std_residuals(self.dataset, beta, self.link, upto=n - 1)
            csum = np.cumsum(s[:, :, None] * s[:, None, :], axis=0)
            ks = np.arange(2, n, dtype=float)
            out[2:] = csum[1 : n - 1] / ks[:, None, None]
        return out

    def derivative(self, i, beta, l):
        self._check_index(i)
        return residual_correlation_derivative(self.dataset, i, beta, self.link, l)

    def derivative_stack(self, n, beta, l):
        if n > self.dataset.n + 1:
            raise IndexError(f"stack length {n} exceeds n+1 = {self.dataset.n + 1}")
        m = self.m
        out = np.zeros((n, m, m))
        if n > 2:
            beta = np.asarray(beta, dtype=float)
            x = self.dataset.covariates[: n - 1]
            eta = x @ beta
            mu1 = self.link.dmu(eta)
            mu2 = self.link.d2mu(eta)
            sqrt_a = np.sqrt(mu1)
            resid = self.dataset.responses[: n - 1] - self.link.mu(eta)
            s = resid / sqrt_a
            g2 = -mu2 / (2.0 * mu1 * sqrt_a)
            xl = x[:, :, l]
            ds = g2 * xl * resid - sqrt_a * xl
            cross = ds[:, :, None] * s[:, None, :]
            csum = np.cumsum(cross + np.swapaxes(cross, 1, 2), axis=0)
            ks = np.arange(2, n, dtype=float)
            out[2:] = csum[1 : n - 1] / ks[:, None, None]
        return out

    def ridge_epsilons(self, n):
        return _sample_ridge_epsilons(n, self.m, self.ridge)


@dataclass(frozen=True)
class InverseInfo:
    """Numerical record of one working-correlation inversion."""

    lam_min: float
    lam_max: float
    epsilon: float
    log10_condition: float
    ridged: bool


@dataclass(frozen=True)
class StackInfo:
    """Numerical record of a whole stack of inversions."""

    ridge_events: int
    lam_min: float
    lam_min_index: int


def working_correlation(model: CorrelationModel, i: int, beta) -> np.ndarray:
    """The raw (un-ridged) working correlation used for individual ``i``."""
    return model.matrix(i, beta)


def working_correlation_inverse(model: CorrelationModel, i: int, beta):
    """Invert the working correlation for individual ``i``.

    Returns ``(inverse, info)`` where the inverse is of the ridged matrix
    when the strategy ridges (sample-average strategies by default).
    Without a ridge, a smallest eigenvalue below ``SINGULAR_TOL`` raises
    :class:`CorrelationSingularError` naming the individual.
    """
    raw = model.matrix(i, beta)
    eps = float(model.ridge_epsilons(i + 1)[i])
    lam_min, lam_max = eigh_range(raw)
    effective = raw if eps == 0.0 else raw + eps * np.eye(model.m)
    eff_min = lam_min + eps
    eff_max = lam_max + eps
    if eff_min < SINGULAR_TOL:
        raise CorrelationSingularError(i, eff_min)
    inv = symmetrize(np.linalg.inv(effective))
    info = InverseInfo(
        lam_min=float(lam_min),
        lam_max=float(lam_max),
        epsilon=eps,
        log10_condition=float(np.log10(eff_max / eff_min)),
        ridged=bool(eps > 0.0 and lam_min < SINGULAR_TOL),
    )
    return inv, info


def inverse_stack(model: CorrelationModel, n: int, beta, want_info: bool = True):
    """Ridged inverses of the working correlations for individuals 0..n-1.

    The workhorse of the estimating-equation evaluation: one call builds
    all ``n`` matrices (vectorized prefix sums for the sample-average
    strategies), applies the ridge policy and inverts them batched.
    Returns ``(Q, StackInfo or None)``.
    """
    raw = model.matrix_stack(n, beta)
    eps = model.ridge_epsilons(n)
    need_check = isinstance(model, (PilotCorrelation, AdaptiveCorrelation)) and not model.ridge
    info = None
    if want_info or need_check:
        lam_min = np.linalg.eigvalsh(symmetrize(raw))[:, 0]
        eff_min = lam_min + eps
        bad = np.flatnonzero(eff_min < SINGULAR_TOL)
        if bad.size:
            raise CorrelationSingularError(bad[0], eff_min[bad[0]])
        events = int(np.count_nonzero((eps > 0.0) & (lam_min < SINGULAR_TOL)))
        worst = int(np.argmin(lam_min)) if n else 0
        info = StackInfo(
            ridge_events=events,
            lam_min=float(lam_min[worst]) if n else np.inf,
            lam_min_index=worst,
        )
    effective = raw
    if np.any(eps > 0.0):
        effective = raw + eps[:, None, None] * np.eye(model.m)
    try:
        q = np.linalg.inv(effective)
    except np.linalg.LinAlgError:
        lam_min = np.linalg.eigvalsh(symmetrize(effective))[:, 0]
        idx = int(np.argmin(lam_min))
        raise CorrelationSingularError(idx, lam_min[idx]) from None
    return symmetrize(q), info
