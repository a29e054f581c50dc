"""Classical random-effects pooling and odds-ratio / rate-ratio algebra.

The comparator works on log rate ratios with delta-method standard
errors.  Two between-study variance estimators are provided: the
DerSimonian-Laird moment estimator and restricted maximum likelihood
(the default of the standard R tooling for this kind of analysis).

The odds-ratio conversions translate a multiplicative rate effect
``theta`` into the odds ratio of remaining event-free, under Poisson or
negative-binomial counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np

from countsynth.evidence import ArmRecord

__all__ = [
    "EffectEstimate",
    "PooledResult",
    "rate_ratio_estimate",
    "dl_pool",
    "reml_pool",
    "poisson_odds_ratio",
    "nb_odds_ratio",
]

_Z975 = NormalDist().inv_cdf(0.975)


@dataclass(frozen=True)
class EffectEstimate:
    """One study's log effect (log rate ratio) with its standard error."""

    log_effect: float
    std_err: float
    study_id: str = ""

    def __post_init__(self) -> None:
        if not (self.std_err > 0 and math.isfinite(self.std_err)):
            raise ValueError(f"std_err must be > 0, got {self.std_err}")
        if not math.isfinite(self.log_effect):
            raise ValueError(f"log_effect must be finite, got {self.log_effect}")


@dataclass(frozen=True)
class PooledResult:
    """Random-effects pooled estimate on the log scale plus the ratio-scale CI."""

    pooled_log_effect: float
    std_err: float
    tau_sq: float
    ci95: tuple[float, float]

    @property
    def effect(self) -> float:
        """Pooled estimate on the ratio scale."""
        return math.exp(self.pooled_log_effect)


def rate_ratio_estimate(
    placebo: ArmRecord, active: ArmRecord, study_id: str = ""
) -> EffectEstimate:
    """Log rate ratio (active vs placebo) with a delta-method SE.

    Both arms must report a rate estimate and standard error; the SE of
    the log ratio is ``sqrt((se_a/r_a)^2 + (se_p/r_p)^2)``.
    """
    for name, arm in (("placebo", placebo), ("active", active)):
        if arm.rate_est is None or arm.std_err is None:
            raise ValueError(
                f"{name} arm lacks a (rate_est, std_err) pair; "
                "cannot form a rate-ratio estimate"
            )
    log_effect = math.log(active.rate_est / placebo.rate_est)
    std_err = math.hypot(
        active.std_err / active.rate_est, placebo.std_err / placebo.rate_est
    )
    return EffectEstimate(log_effect=log_effect, std_err=std_err, study_id=study_id)


def _pool_at_tau_sq(
    y: np.ndarray, s_sq: np.ndarray, tau_sq: float
) -> PooledResult:
    weights = 1.0 / (s_sq + tau_sq)
    pooled = float(np.sum(weights * y) / np.sum(weights))
    se = float(1.0 / math.sqrt(np.sum(weights)))
    ci = (
        math.exp(pooled - _Z975 * se),
        math.exp(pooled + _Z975 * se),
    )
    return PooledResult(
        pooled_log_effect=pooled, std_err=se, tau_sq=float(tau_sq), ci95=ci
    )


def _validated_arrays(
    estimates: Sequence[EffectEstimate],
) -> tuple[np.ndarray, np.ndarray]:
    if len(estimates) < 1:
        raise ValueError("need at least one estimate to pool")
    y = np.array([e.log_effect for e in estimates])
    s_sq = np.array([e.std_err**2 for e in estimates])
    return y, s_sq


def dl_pool(estimates: Sequence[EffectEstimate]) -> PooledResult:
    """DerSimonian-Laird random-effects pooling.

    The between-study variance is the moment estimator
    ``tau^2 = max(0, (Q - (k-1)) / (sum(w) - sum(w^2)/sum(w)))`` with
    fixed-effect weights ``w = 1/se^2``; pooling then uses inverse-variance
    weights ``1/(se^2 + tau^2)``.  The 95% interval is normal-theory on the
    log scale, exponentiated to the ratio scale.
    """
    y, s_sq = _validated_arrays(estimates)
    if y.size == 1:
        return _pool_at_tau_sq(y, s_sq, 0.0)
    w = 1.0 / s_sq
    pooled_fe = np.sum(w * y) / np.sum(w)
    q_stat = float(np.sum(w * (y - pooled_fe) ** 2))
    denom = float(np.sum(w) - np.sum(w**2) / np.sum(w))
    tau_sq = max(0.0, (q_stat - (y.size - 1)) / denom) if denom > 0 else 0.0
    return _pool_at_tau_sq(y, s_sq, tau_sq)


def _reml_log_lik(tau_sq: float, y: np.ndarray, s_sq: np.ndarray) -> float:
    v = s_sq + tau_sq
    w = 1.0 / v
    mu = np.sum(w * y) / np.sum(w)
    return float(
        -0.5 * np.sum(np.log(v))
        - 0.5 * math.log(np.sum(w))
        - 0.5 * np.sum(w * (y - mu) ** 2)
    )


def reml_pool(estimates: Sequence[EffectEstimate]) -> PooledResult:
    """Random-effects pooling with the REML between-study variance.

    Maximizes the restricted likelihood over ``tau^2 >= 0`` by bounded
    one-dimensional search, then pools exactly like :func:`dl_pool`.
    """
    from scipy.optimize import minimize_scalar

    y, s_sq = _validated_arrays(estimates)
    if y.size == 1:
        return _pool_at_tau_sq(y, s_sq, 0.0)
    spread = float(np.var(y, ddof=1)) if y.size > 1 else 0.0
    upper = 10.0 * max(spread, float(np.max(s_sq)), 1e-8)
    result = minimize_scalar(
        lambda t: -_reml_log_lik(t, y, s_sq),
        bounds=(0.0, upper),
        method="bounded",
        options={"xatol": 1e-12},
    )
    tau_sq = float(result.x)
    if _reml_log_lik(0.0, y, s_sq) >= _reml_log_lik(tau_sq, y, s_sq):
        tau_sq = 0.0  # boundary solution
    return _pool_at_tau_sq(y, s_sq, tau_sq)


def poisson_odds_ratio(theta: float, rate: float, duration: float) -> float:
    """Odds ratio of having any event, under Poisson counts.

    ``(exp(d*theta*rate) - 1) / (exp(d*rate) - 1)``; tends to ``theta``
    as ``duration * rate`` tends to zero.
    """
    if theta <= 0 or rate <= 0 or duration <= 0:
        raise ValueError("theta, rate and duration must be positive")
    m = duration * rate
    return math.expm1(theta * m) / math.expm1(m)


def nb_odds_ratio(
    theta: float, rate: float, duration: float, overdispersion: float
) -> float:
    """Odds ratio of having any event, under negative-binomial counts.

    ``((1 + phi*d*theta*rate)^(1/phi) - 1) / ((1 + phi*d*rate)^(1/phi) - 1)``.
    Equals ``theta`` exactly at ``phi = 1``; lies below ``theta`` for
    ``phi < 1`` and above it for ``phi > 1`` (for ``theta < 1``).
    Delegates to :func:`poisson_odds_ratio` at ``phi = 0``.
    """
    if overdispersion < 0:
        raise ValueError(f"overdispersion must be >= 0, got {overdispersion}")
    if theta <= 0 or rate <= 0 or duration <= 0:
        raise ValueError("theta, rate and duration must be positive")
    if overdispersion == 0.0:
        return poisson_odds_ratio(theta, rate, duration)
    if overdispersion == 1.0:
        # (1 + theta*m) - 1 over (1 + m) - 1 cancels algebraically.
        return theta
    phi = overdispersion
    m = duration * rate
    # expm1(log1p(x)/phi) keeps precision for small phi*m.
    numer = math.expm1(math.log1p(phi * theta * m) / phi)
    denom = math.expm1(math.log1p(phi * m) / phi)
    return numer / denom
