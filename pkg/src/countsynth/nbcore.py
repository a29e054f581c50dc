"""Probability computations for Poisson and negative-binomial event counts.

Counts follow a negative binomial distribution parameterized by an event
rate ``lambda`` per unit time, an exposure ``delta`` (so the per-patient
mean is ``m = delta * lambda``), and an overdispersion ``phi >= 0`` giving
variance ``m * (1 + phi * m)``; ``phi = 0`` recovers the Poisson model.

The module provides the building blocks used throughout the package:

* exact pmf evaluation (gamma-Poisson mixture form),
* the zero-outcome probability ``pi0`` and moments of the zero-truncated
  distribution,
* approximate log-likelihoods for arms reporting a total event count, a
  count of event-free patients (zeroes), or both,
* an exact joint pmf of (total, zeroes) by convolution, used as an oracle
  for the normal approximations,
* maximum-likelihood fitting of (rate, overdispersion) from raw counts.

All functions are pure; everything here is safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln

__all__ = [
    "NbParams",
    "TruncatedMoments",
    "AggregateObservation",
    "ImpossibleDataError",
    "DegenerateDataError",
    "nb_log_pmf",
    "zero_prob",
    "total_count_moments",
    "truncated_moments",
    "joint_log_lik",
    "total_only_log_lik",
    "zero_only_log_lik",
    "exact_joint_pmf",
    "mle_fit",
]

# Below this, (1 + phi*m)**(-1/phi) is evaluated by series to avoid the
# catastrophic cancellation in log1p(phi*m)/phi.
PHI_POISSON_THRESHOLD = 1e-8

LOG_2PI = math.log(2.0 * math.pi)


class ImpossibleDataError(ValueError):
    """Observed counts are impossible under any parameter value."""


class DegenerateDataError(ValueError):
    """Data carry no information on the requested parameter."""


@dataclass(frozen=True)
class NbParams:
    """Negative-binomial parameter triple.

    Attributes
    ----------
    rate : float
        Events per patient per unit time (``lambda``), > 0.
    overdispersion : float
        Excess-variance parameter (``phi``), >= 0; 0 means Poisson.
    exposure : float
        Observation time per patient (``delta``), > 0.
    """

    rate: float
    overdispersion: float
    exposure: float

    def __post_init__(self) -> None:
        for name in ("rate", "overdispersion", "exposure"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
        if self.rate <= 0.0:
            raise ValueError(f"rate must be > 0, got {self.rate}")
        if self.exposure <= 0.0:
            raise ValueError(f"exposure must be > 0, got {self.exposure}")
        if self.overdispersion < 0.0:
            raise ValueError(
                f"overdispersion must be >= 0, got {self.overdispersion}"
            )

    @property
    def mean(self) -> float:
        """Per-patient mean count ``m = delta * lambda``."""
        return self.exposure * self.rate

    @property
    def variance(self) -> float:
        """Per-patient count variance ``m * (1 + phi * m)`` (>= mean)."""
        m = self.mean
        return m * (1.0 + self.overdispersion * m)


class TruncatedMoments(NamedTuple):
    """Zero probability and conditional moments given a positive count."""

    zero_prob: float
    trunc_mean: float  # theta = E[X | X > 0]
    trunc_var: float  # sigma^2 = Var(X | X > 0)


@dataclass(frozen=True)
class AggregateObservation:
    """One study arm's published aggregate, in whichever format it came.

    At least one of ``total``, ``zeroes``, or the pair
    ``(rate_est, std_err)`` must be present.
    """

    n_patients: int
    total: int | None = None
    zeroes: int | None = None
    rate_est: float | None = None
    std_err: float | None = None

    def __post_init__(self) -> None:
        if self.n_patients < 1:
            raise ValueError(f"n_patients must be >= 1, got {self.n_patients}")
        has_se_pair = self.rate_est is not None and self.std_err is not None
        if self.total is None and self.zeroes is None and not has_se_pair:
            raise ValueError(
                "observation needs total, zeroes, or a (rate_est, std_err) pair"
            )
        if self.total is not None and self.total < 0:
            raise ValueError(f"total must be >= 0, got {self.total}")
        if self.zeroes is not None and not 0 <= self.zeroes <= self.n_patients:
            raise ValueError(
                f"zeroes must lie in [0, {self.n_patients}], got {self.zeroes}"
            )
        if self.rate_est is not None and self.rate_est <= 0.0:
            raise ValueError(f"rate_est must be > 0, got {self.rate_est}")
        if self.std_err is not None and self.std_err <= 0.0:
            raise ValueError(f"std_err must be > 0, got {self.std_err}")
        if (
            self.zeroes is not None
            and self.total is not None
            and self.zeroes == self.n_patients
            and self.total != 0
        ):
            raise ImpossibleDataError(
                "every patient event-free but total > 0 is impossible"
            )


# ---------------------------------------------------------------------------
# Vector-capable numeric kernels (shared with the hierarchical model).
# All take plain arrays of per-patient means `m` and overdispersions `phi`
# and broadcast like numpy ufuncs.


def _log_pi0(m, phi):
    """log P(X = 0) = -log(1 + phi*m)/phi, series-expanded for tiny phi."""
    m = np.asarray(m, dtype=float)
    phi = np.asarray(phi, dtype=float)
    small = phi < PHI_POISSON_THRESHOLD
    if not small.any():
        return -np.log1p(phi * m) / phi
    # Padding with 1.0 keeps the masked-out branch free of 0/0 warnings.
    phi_safe = np.where(small, 1.0, phi)
    exact = -np.log1p(phi_safe * m) / phi_safe
    series = -m + 0.5 * phi * m**2 - (phi**2) * m**3 / 3.0
    return np.where(small, series, exact)


def _log1m_from_log(log_p):
    """log(1 - exp(log_p)) for log_p < 0, stable at both ends."""
    return np.log(-np.expm1(log_p))


def _trunc_moments_arrays(m, phi):
    """(pi0, theta, sigma^2) of the zero-truncated distribution, vectorized.

    The conditional variance follows from E[X^2 | X>0] = E[X^2]/(1 - pi0):

        sigma^2 = theta - m^2 * ((1 + phi)*pi0 - phi) / (1 - pi0)^2

    which is valid for every phi >= 0 (at phi = 0 it reduces to the
    Poisson-case expression).
    """
    m = np.asarray(m, dtype=float)
    phi = np.asarray(phi, dtype=float)
    lp0 = _log_pi0(m, phi)
    pi0 = np.exp(lp0)
    one_minus = -np.expm1(lp0)  # 1 - pi0 without cancellation for small m
    theta = m / one_minus
    sigma_sq = theta - m**2 * ((1.0 + phi) * pi0 - phi) / one_minus**2
    return pi0, theta, sigma_sq


def _nb_log_pmf_arrays(x, m, phi):
    """NB log-pmf at integer x with mean m, overdispersion phi (arrays ok)."""
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    phi = np.asarray(phi, dtype=float)
    small = phi < PHI_POISSON_THRESHOLD
    phi_safe = np.where(small, 1.0, phi)
    r = 1.0 / phi_safe
    log_ratio = np.log1p(phi_safe * m)  # log(1/p) with p = 1/(1 + phi*m)
    nb = (
        gammaln(x + r)
        - gammaln(r)
        - gammaln(x + 1.0)
        - r * log_ratio
        + x * (np.log(phi_safe * m) - log_ratio)
    )
    poisson = x * np.log(m) - m - gammaln(x + 1.0)
    return np.where(small, poisson, nb)


def _binom_log_pmf(z, n, log_p, log_q):
    """Binomial log-pmf from precomputed log(p), log(1-p)."""
    z = np.asarray(z, dtype=float)
    n = np.asarray(n, dtype=float)
    return (
        gammaln(n + 1.0)
        - gammaln(z + 1.0)
        - gammaln(n - z + 1.0)
        + z * log_p
        + (n - z) * log_q
    )


def _normal_log_pdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - (x - mean) ** 2 / (2.0 * var)


# ---------------------------------------------------------------------------
# Public scalar API.


def _check_count(value: int, name: str, minimum: int = 0) -> int:
    if not isinstance(value, (int, np.integer)):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def nb_log_pmf(x: int, params: NbParams) -> float:
    """Log probability of observing ``x`` events for one patient.

    Uses the gamma-Poisson mixture form of the negative binomial; at
    ``overdispersion = 0`` this is exactly the Poisson log-pmf with mean
    ``exposure * rate``.
    """
    x = _check_count(x, "x")
    return float(_nb_log_pmf_arrays(x, params.mean, params.overdispersion))


def zero_prob(params: NbParams) -> float:
    """Probability of a zero count, ``(1 + phi*m)**(-1/phi)`` (``exp(-m)`` at phi=0)."""
    return float(np.exp(_log_pi0(params.mean, params.overdispersion)))


def total_count_moments(n: int, params: NbParams) -> tuple[float, float]:
    """Mean and variance of the total count over ``n`` independent patients."""
    n = _check_count(n, "n", minimum=1)
    m = params.mean
    return n * m, n * m * (1.0 + params.overdispersion * m)


def truncated_moments(params: NbParams) -> TruncatedMoments:
    """Moments of the count distribution conditional on at least one event.

    Returns
    -------
    TruncatedMoments
        ``zero_prob`` (pi0), ``trunc_mean`` (theta = m / (1 - pi0)) and
        ``trunc_var`` (the conditional variance sigma^2).
    """
    if params.mean <= 0.0:
        raise ValueError("truncation undefined for zero mean")
    pi0, theta, sigma_sq = _trunc_moments_arrays(
        params.mean, params.overdispersion
    )
    return TruncatedMoments(float(pi0), float(theta), float(sigma_sq))


def zero_only_log_lik(zeroes: int, n: int, params: NbParams) -> float:
    """Exact binomial log-likelihood of ``zeroes`` event-free patients out of ``n``."""
    n = _check_count(n, "n", minimum=1)
    zeroes = _check_count(zeroes, "zeroes")
    if zeroes > n:
        raise ValueError(f"zeroes must be <= n, got {zeroes} > {n}")
    lp0 = _log_pi0(params.mean, params.overdispersion)
    return float(_binom_log_pmf(zeroes, n, lp0, _log1m_from_log(lp0)))


def total_only_log_lik(total: int, n: int, params: NbParams) -> float:
    """Approximate log-likelihood of a total count over ``n`` patients.

    The total is a sum of ``n`` iid counts, treated as normal with the
    matched moments ``(n*m, n*m*(1 + phi*m))``.  The total enters as a
    continuous quantity; no continuity correction is applied, and
    :func:`exact_joint_pmf` quantifies the resulting error.
    """
    total = _check_count(total, "total")
    mean, var = total_count_moments(n, params)
    return float(_normal_log_pdf(total, mean, var))


def joint_log_lik(total: int, zeroes: int, n: int, params: NbParams) -> float:
    """Approximate joint log-likelihood of (total, zeroes) for one arm.

    Factorizes as ``p(t, z) = p(z) * p(t | z)``: the zero count is exactly
    Binomial(n, pi0), and conditional on ``z`` the total is a sum of
    ``n - z`` zero-truncated counts, approximated as normal with moments
    ``((n-z)*theta, (n-z)*sigma^2)``.

    When every patient is event-free (``zeroes = n``) the conditional
    factor degenerates to a point mass at zero: the function returns
    ``n * log(pi0)`` for ``total = 0`` and raises
    :class:`ImpossibleDataError` otherwise.
    """
    n = _check_count(n, "n", minimum=1)
    zeroes = _check_count(zeroes, "zeroes")
    total = _check_count(total, "total")
    if zeroes > n:
        raise ValueError(f"zeroes must be <= n, got {zeroes} > {n}")
    m = params.mean
    phi = params.overdispersion
    lp0 = _log_pi0(m, phi)
    if zeroes == n:
        if total != 0:
            raise ImpossibleDataError(
                f"zeroes = n = {n} forces total = 0, got total = {total}"
            )
        return float(n * lp0)
    pi0, theta, sigma_sq = _trunc_moments_arrays(m, phi)
    c = n - zeroes
    log_binom = _binom_log_pmf(zeroes, n, lp0, _log1m_from_log(lp0))
    return float(log_binom + _normal_log_pdf(total, c * theta, c * sigma_sq))


def exact_joint_pmf(
    n: int, params: NbParams, max_total: int
) -> np.ndarray:
    """Exact joint pmf table ``P(T = t, Z = z)`` for ``n`` patients.

    Conditions on the number of zeroes (an exact binomial factor) and
    convolves ``n - z`` copies of the zero-truncated pmf for the
    conditional distribution of the total.  Serves as the oracle against
    which the normal approximations in :func:`joint_log_lik` and
    :func:`total_only_log_lik` are measured.

    Parameters
    ----------
    n : int
        Number of patients; refused above 30 (convolution cost guard).
    params : NbParams
    max_total : int
        Largest total in the table.  Must leave an omitted tail mass
        below 1e-12, otherwise a ValueError is raised.

    Returns
    -------
    numpy.ndarray
        Shape ``(max_total + 1, n + 1)``; entry ``[t, z]`` is P(T=t, Z=z).
    """
    n = _check_count(n, "n", minimum=1)
    max_total = _check_count(max_total, "max_total", minimum=1)
    if n > 30:
        raise ValueError(
            f"n = {n} exceeds the n <= 30 cost guard for exact convolution"
        )
    m = params.mean
    phi = params.overdispersion
    lp0 = _log_pi0(m, phi)
    pi0 = float(np.exp(lp0))
    one_minus = float(-np.expm1(lp0))

    support = np.arange(max_total + 1)
    pmf = np.exp(_nb_log_pmf_arrays(support, m, phi))
    trunc = pmf / one_minus
    trunc[0] = 0.0
    # Truncate each summand's pmf once its cumulative mass reaches
    # 1 - 1e-14; the omitted convolution tail is then certifiably tiny.
    cut = int(np.searchsorted(np.cumsum(trunc), 1.0 - 1e-14))
    trunc[cut + 1 :] = 0.0

    log_binom = (
        gammaln(n + 1.0)
        - gammaln(support[: n + 1] + 1.0)
        - gammaln(n - support[: n + 1] + 1.0)
        + support[: n + 1] * lp0
        + (n - support[: n + 1]) * math.log(one_minus)
    )
    binom = np.exp(log_binom)

    table = np.zeros((max_total + 1, n + 1))
    table[0, n] = binom[n]  # z = n forces t = 0
    conv = np.array([1.0])
    for c in range(1, n + 1):
        conv = np.convolve(conv, trunc)[: max_total + 1]
        table[: conv.size, n - c] += binom[n - c] * conv

    omitted = 1.0 - float(table.sum())
    if omitted >= 1e-12:
        raise ValueError(
            f"max_total = {max_total} leaves tail mass {omitted:.2e} >= 1e-12; "
            "increase max_total"
        )
    return table


class MleFit(NamedTuple):
    """Result of :func:`mle_fit`."""

    rate: float
    overdispersion: float
    se_rate: float
    loglik: float


def _profile_loglik(counts: np.ndarray, mean: float, phi: float) -> float:
    return float(np.sum(_nb_log_pmf_arrays(counts, mean, phi)))


def mle_fit(counts: Sequence[int], exposure: float) -> MleFit:
    """Maximum-likelihood fit of (rate, overdispersion) from raw counts.

    With a common exposure per patient the rate MLE is exactly the sample
    mean divided by the exposure, for every value of the overdispersion;
    the fit therefore reduces to a one-dimensional search over ``log phi``
    of the profile log-likelihood.  When the unconstrained optimum drives
    ``phi`` below 1e-8 the fit collapses to the Poisson boundary
    (``overdispersion = 0``).

    Returns
    -------
    MleFit
        ``rate``, ``overdispersion``, ``se_rate`` (from the observed
        information at the optimum) and the attained ``loglik``.

    Raises
    ------
    DegenerateDataError
        If every count is zero (the rate MLE sits at the boundary and the
        observed information is singular).
    """
    from scipy.optimize import minimize_scalar

    arr = np.asarray(list(counts))
    if arr.size < 2:
        raise ValueError(f"need at least 2 counts, got {arr.size}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("counts must be integers")
    if np.any(arr < 0):
        raise ValueError("counts must be non-negative")
    if exposure <= 0.0 or not math.isfinite(exposure):
        raise ValueError(f"exposure must be positive, got {exposure}")
    if not np.any(arr):
        raise DegenerateDataError(
            "all counts are zero; the rate MLE is degenerate at the boundary"
        )
    counts_f = arr.astype(float)
    mean_hat = float(counts_f.mean())
    rate_hat = mean_hat / exposure

    log_phi_lo, log_phi_hi = math.log(1e-10), math.log(1e4)
    result = minimize_scalar(
        lambda lg: -_profile_loglik(counts_f, mean_hat, math.exp(lg)),
        bounds=(log_phi_lo, log_phi_hi),
        method="bounded",
        options={"xatol": 1e-10},
    )
    phi_hat = math.exp(result.x)
    if phi_hat < PHI_POISSON_THRESHOLD:
        phi_hat = 0.0
    loglik = _profile_loglik(counts_f, mean_hat, phi_hat)

    n = arr.size
    if phi_hat == 0.0:
        # Poisson information per patient: exposure / rate.
        se_rate = math.sqrt(rate_hat / (n * exposure))
    else:
        se_rate = _se_rate_observed_info(counts_f, exposure, rate_hat, phi_hat)
    return MleFit(rate_hat, phi_hat, se_rate, loglik)


def _se_rate_observed_info(
    counts: np.ndarray, exposure: float, rate: float, phi: float
) -> float:
    """SE of the rate from a finite-difference observed-information matrix."""

    def loglik(lam: float, ph: float) -> float:
        return _profile_loglik(counts, exposure * lam, ph)

    h_lam = 1e-5 * max(rate, 1e-3)
    h_phi = 1e-5 * max(phi, 1e-3)
    f0 = loglik(rate, phi)
    d2_lam = (loglik(rate + h_lam, phi) - 2 * f0 + loglik(rate - h_lam, phi)) / h_lam**2
    d2_phi = (loglik(rate, phi + h_phi) - 2 * f0 + loglik(rate, phi - h_phi)) / h_phi**2
    d2_mix = (
        loglik(rate + h_lam, phi + h_phi)
        - loglik(rate + h_lam, phi - h_phi)
        - loglik(rate - h_lam, phi + h_phi)
        + loglik(rate - h_lam, phi - h_phi)
    ) / (4.0 * h_lam * h_phi)
    info = -np.array([[d2_lam, d2_mix], [d2_mix, d2_phi]])
    cov = np.linalg.inv(info)
    return float(math.sqrt(cov[0, 0]))
