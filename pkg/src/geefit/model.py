"""Marginal model for balanced longitudinal data.

A dataset holds ``n`` individuals, each observed at ``m`` common times with
a ``p``-dimensional covariate vector per observation.  The model specifies
only the first two conditional moments of the response: the mean is
``mu(x' beta)`` for one of four link functions, and the variance is the
link derivative ``mu'(x' beta)`` (dispersion is fixed at 1).  Everything
else in the package is built from the quantities defined here.
"""

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

__all__ = [
    "DISPERSION",
    "LinkDomainError",
    "LinkFunction",
    "get_link",
    "link_eval",
    "LINK_NAMES",
    "DatasetFormatError",
    "LongitudinalDataset",
    "load_dataset_csv",
    "write_dataset_csv",
    "marginal_mean",
    "variance_matrix",
    "standardized_residual",
    "mean_jacobian",
]

# Dispersion of the conditional variance; the model fixes it at one and the
# package performs no dispersion estimation.
DISPERSION = 1.0

# Largest |linear predictor| accepted by exp-based links before evaluation
# errors out instead of silently overflowing/underflowing, and the tighter
# window for the normal-density-based probit derivatives.
_EXP_WINDOW = 700.0
_PROBIT_WINDOW = 37.0

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class LinkDomainError(ValueError):
    """Linear predictor outside the numerically safe window of a link."""


def _check_window(u, window, name):
    if window is not None and np.any(np.abs(u) > window):
        worst = float(np.max(np.abs(u)))
        raise LinkDomainError(
            f"{name} link evaluated at |u| = {worst:.3g} > {window:.0f}; "
            "refusing to overflow/underflow silently"
        )


@dataclass(frozen=True)
class LinkFunction:
    """A mean function together with its first three derivatives.

    The derivative is strictly positive on the safe window, which is what
    makes the conditional variance ``mu'(x' beta)`` usable as a variance.
    """

    name: str
    _d0: Callable = field(repr=False)
    _d1: Callable = field(repr=False)
    _d2: Callable = field(repr=False)
    _d3: Callable = field(repr=False)
    _window: float | None = field(default=None, repr=False)

    def _prep(self, u):
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise LinkDomainError(f"{self.name} link evaluated at non-finite input")
        _check_window(u, self._window, self.name)
        return u

    def mu(self, u):
        return self._d0(self._prep(u))

    def dmu(self, u):
        return self._d1(self._prep(u))

    def d2mu(self, u):
        return self._d2(self._prep(u))

    def d3mu(self, u):
        return self._d3(self._prep(u))

    def derivative(self, order: int):
        try:
            return (self.mu, self.dmu, self.d2mu, self.d3mu)[order]
        except IndexError:
            raise ValueError(f"derivative order must be 0..3, got {order}") from None


def _logistic(u):
    # Stable on both tails; sigma in (0, 1).
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def _logistic_d1(u):
    s = _logistic(u)
    return s * (1.0 - s)


def _logistic_d2(u):
    s = _logistic(u)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _logistic_d3(u):
    s = _logistic(u)
    return s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)


def _normal_pdf(u):
    return _INV_SQRT_2PI * np.exp(-0.5 * u * u)


_LINKS = {
    "linear": LinkFunction(
        "linear",
        lambda u: u + 0.0,
        lambda u: np.ones_like(u),
        lambda u: np.zeros_like(u),
        lambda u: np.zeros_like(u),
        None,
    ),
    "log": LinkFunction("log", np.exp, np.exp, np.exp, np.exp, _EXP_WINDOW),
    "logistic": LinkFunction(
        "logistic", _logistic, _logistic_d1, _logistic_d2, _logistic_d3, _EXP_WINDOW
    ),
    "probit": LinkFunction(
        "probit",
        ndtr,
        _normal_pdf,
        lambda u: -u * _normal_pdf(u),
        lambda u: (u * u - 1.0) * _normal_pdf(u),
        _PROBIT_WINDOW,
    ),
}

LINK_NAMES = tuple(_LINKS)


def get_link(name: str) -> LinkFunction:
    """Look up one of the four supported links by name."""
    try:
        return _LINKS[name]
    except KeyError:
        raise ValueError(
            f"unknown link {name!r}; expected one of {sorted(_LINKS)}"
        ) from None


def link_eval(link: LinkFunction, order: int, u):
    """Evaluate the mean function (order 0) or one of its derivatives (1..3)."""
    return link.derivative(order)(u)


class DatasetFormatError(ValueError):
    """Raised when a dataset file or array violates the balanced layout."""


@dataclass(frozen=True)
class LongitudinalDataset:
    """Balanced responses and covariates: ``covariates[i, j]`` is the
    p-vector observed for individual ``i`` at time ``j`` and
    ``responses[i, j]`` the matching response.
    """

    covariates: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float)
        y = np.asarray(self.responses, dtype=float)
        if x.ndim != 3:
            raise DatasetFormatError(
                f"covariates must have shape (n, m, p); got {x.shape}"
            )
        if y.ndim != 2 or y.shape != x.shape[:2]:
            raise DatasetFormatError(
                f"responses shape {y.shape} does not match covariates {x.shape[:2]}"
            )
        if min(x.shape) < 1:
            raise DatasetFormatError("n, m and p must all be at least 1")
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def m(self) -> int:
        return self.covariates.shape[1]

    @property
    def p(self) -> int:
        return self.covariates.shape[2]

    def prefix(self, n: int) -> "LongitudinalDataset":
        """The sub-dataset holding the first ``n`` individuals."""
        if not 1 <= n <= self.n:
            raise IndexError(f"prefix length {n} outside 1..{self.n}")
        return LongitudinalDataset(self.covariates[:n], self.responses[:n])

    def with_responses(self, responses) -> "LongitudinalDataset":
        """Same design, different responses (used by measurability tests)."""
        return LongitudinalDataset(self.covariates, responses)

    def _check_index(self, i: int):
        if not 0 <= i < self.n:
            raise IndexError(f"individual index {i} outside 0..{self.n - 1}")


def _fmt(value: float) -> str:
    return repr(float(value))


def write_dataset_csv(dataset: LongitudinalDataset, path) -> None:
    """Write ``subject,time,y,x1..xp`` rows, subjects 1..n and times 1..m."""
    header = ["subject", "time", "y"] + [f"x{k + 1}" for k in range(dataset.p)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            for j in range(dataset.m):
                row = [str(i + 1), str(j + 1), _fmt(dataset.responses[i, j])]
                row += [_fmt(v) for v in dataset.covariates[i, j]]
                writer.writerow(row)


def load_dataset_csv(path) -> LongitudinalDataset:
    """Load a ``subject,time,y,x1..xp`` file into a balanced dataset.

    The file must be sorted by (subject, time), every subject must
    contribute exactly the same number of rows, and all subjects must share
    the same time sequence.  Any violation raises
    :class:`DatasetFormatError` naming the offending row.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["subject", "time", "y"] or len(header) < 4:
            raise DatasetFormatError(
                f"{path}: header must be subject,time,y,x1,...,xp; got {header}"
            )
        p = len(header) - 3
        expected_x = [f"x{k + 1}" for k in range(p)]
        if header[3:] != expected_x:
            raise DatasetFormatError(
                f"{path}: covariate columns must be named {expected_x}; got {header[3:]}"
            )

        subjects: list[str] = []
        times_by_subject: dict[str, list[float]] = {}
        y_by_subject: dict[str, list[float]] = {}
        x_by_subject: dict[str, list[list[float]]] = {}
        prev_key = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + p:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {3 + p} fields, got {len(row)}"
                )
            subj = row[0].strip()
            try:
                t = float(row[1])
                y = float(row[2])
                xs = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            key = (subj, t)
            if prev_key is not None:
                if subj == prev_key[0] and t <= prev_key[1]:
                    raise DatasetFormatError(
                        f"{path}:{lineno}: rows not sorted by (subject, time)"
                    )
                if subj != prev_key[0] and subj in times_by_subject:
                    raise DatasetFormatError(
                        f"{path}:{lineno}: subject {subj!r} rows are not contiguous"
                    )
            prev_key = key
            if subj not in times_by_subject:
                subjects.append(subj)
                times_by_subject[subj] = []
                y_by_subject[subj] = []
                x_by_subject[subj] = []
            times_by_subject[subj].append(t)
            y_by_subject[subj].append(y)
            x_by_subject[subj].append(xs)

    if not subjects:
        raise DatasetFormatError(f"{path}: no data rows")
    ref_times = times_by_subject[subjects[0]]
    m = len(ref_times)
    for subj in subjects:
        times = times_by_subject[subj]
        if len(times) != m:
            raise DatasetFormatError(
                f"{path}: subject {subj!r} has {len(times)} rows, expected {m}"
            )
        if times != ref_times:
            raise DatasetFormatError(
                f"{path}: subject {subj!r} time grid {times} differs from "
                f"subject {subjects[0]!r} grid {ref_times}"
            )
    x = np.array([x_by_subject[s] for s in subjects], dtype=float)
    y = np.array([y_by_subject[s] for s in subjects], dtype=float)
    return LongitudinalDataset(x, y)


def marginal_mean(dataset, i, beta, link) -> np.ndarray:
    """Mean vector of individual ``i``: component ``j`` is ``mu(x_ij' beta)``."""
    dataset._check_index(i)
    return link.mu(dataset.covariates[i] @ np.asarray(beta, dtype=float))


def variance_matrix(dataset, i, beta, link) -> np.ndarray:
    """Diagonal conditional covariance of individual ``i`` (entries ``mu'``)."""
    dataset._check_index(i)
    var = link.dmu(dataset.covariates[i] @ np.asarray(beta, dtype=float))
    _require_positive_variance(var, link)
    return np.diag(var)


def standardized_residual(dataset, i, beta, link) -> np.ndarray:
    """Residual of individual ``i`` scaled to unit conditional variance."""
    dataset._check_index(i)
    eta = dataset.covariates[i] @ np.asarray(beta, dtype=float)
    var = link.dmu(eta)
    _require_positive_variance(var, link)
    return (dataset.responses[i] - link.mu(eta)) / np.sqrt(var)


def mean_jacobian(dataset, i, beta, link) -> np.ndarray:
    """Derivative of the mean vector in ``beta``: ``diag(mu') @ X_i``."""
    dataset._check_index(i)
    var = link.dmu(dataset.covariates[i] @ np.asarray(beta, dtype=float))
    return var[:, None] * dataset.covariates[i]


def _require_positive_variance(var, link):
    if np.any(var <= 0.0):
        raise LinkDomainError(
            f"{link.name} link variance underflowed to zero; the linear "
            "predictor is outside the usable range"
        )
