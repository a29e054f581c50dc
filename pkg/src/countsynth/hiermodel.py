"""Hierarchical Bayesian model for event rates and overdispersion.

Each study ``i`` has its own rate ``lambda_i`` and overdispersion
``phi_i``; placebo arms observe events at rate ``lambda_i`` while active
arms observe them at ``lambda_i * theta * psi_ij`` with a global
treatment effect ``theta`` and a per-arm multiplicative random effect
``psi_ij``.  Study-level log rates and log overdispersions are normal
around hyper-means with hyper-scales; all hyper-locations and log
hyper-scales carry flat priors over wide ranges, ``log theta`` is normal
around a neutral effect, and ``log psi_ij`` follows a heavy-tailed
Student-t with 3 degrees of freedom.

Arms contribute likelihood terms according to what they reported:

* rate estimate with standard error: normal approximation on the rate
  scale around the arm rate (the default routing for such arms),
* both a total count and a zero count: the joint (total, zeroes)
  approximation from :mod:`countsynth.nbcore`,
* a total count only (or a rate without standard error, converted to an
  implied total): the marginal normal approximation of the total,
* a zero count only: the exact binomial likelihood.

Besides the state/prior/likelihood API the module builds the sampling
target consumed by :mod:`countsynth.sampler`: a blocked random-walk
scheme over {per-study (log lambda_i, log phi_i)}, {per-arm log psi},
{log theta} and {hyperparameters}, augmented with joint translation and
rescaling moves that decorrelate levels from their hyper-locations and
hyper-scales (each an ordinary Metropolis move whose prior ratio and
Jacobian are computed exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.special import gammaln

from countsynth.evidence import StudyRecord, TreatmentClass, derive_total
from countsynth.nbcore import (
    ImpossibleDataError,
    _log1m_from_log,
    _log_pi0,
    _normal_log_pdf,
)

__all__ = [
    "PriorSpec",
    "ModelState",
    "ModelBuildError",
    "SeArmRouting",
    "arm_rate",
    "log_prior",
    "log_likelihood",
    "log_posterior",
    "sample_prior_state",
    "build_target",
    "HierarchicalTarget",
]

SeArmRouting = Literal["normal", "counts"]

_LOG10 = math.log(10.0)

# Student-t(3) log-density constant: lgamma(2) - lgamma(3/2) - log(3*pi)/2.
_T3_CONST = -math.lgamma(1.5) - 0.5 * math.log(3.0 * math.pi)


class ModelBuildError(ValueError):
    """The dataset cannot be assembled into a model (bad routing/config)."""


@dataclass(frozen=True)
class PriorSpec:
    """Prior bounds and scales for every parameter of the model.

    Uniform priors are expressed through inclusive (low, high) bounds on
    the parameter named; ``log theta`` is normal with the given
    moments; ``log psi`` is Student-t with ``psi_df`` degrees of freedom
    and scale ``sigma_psi``.
    """

    mu_lambda_bounds: tuple[float, float] = (-2.0 * _LOG10, 2.0 * _LOG10)
    log_sigma_lambda_bounds: tuple[float, float] = (-3.0 * _LOG10, _LOG10)
    mu_phi_bounds: tuple[float, float] = (-4.0 * _LOG10, 4.0 * _LOG10)
    log_sigma_phi_bounds: tuple[float, float] = (-3.0 * _LOG10, _LOG10)
    log_theta_mean: float = 0.0
    log_theta_sd: float = math.log(4.0)
    psi_df: float = 3.0
    log_sigma_psi_bounds: tuple[float, float] = (-3.0 * _LOG10, _LOG10)

    def __post_init__(self) -> None:
        for name in (
            "mu_lambda_bounds",
            "log_sigma_lambda_bounds",
            "mu_phi_bounds",
            "log_sigma_phi_bounds",
            "log_sigma_psi_bounds",
        ):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"{name} must be finite and ordered, got ({lo}, {hi})")
        if self.log_theta_sd <= 0:
            raise ValueError("log_theta_sd must be > 0")
        if self.psi_df <= 0:
            raise ValueError("psi_df must be > 0")


@dataclass(frozen=True, eq=False)
class ModelState:
    """Full parameter vector of the hierarchical model.

    ``log_psi`` is ragged: one array per study holding the log random
    effects of that study's active arms, in arm order.
    """

    log_lambda: np.ndarray
    log_phi: np.ndarray
    log_psi: tuple[np.ndarray, ...]
    log_theta: float
    mu_lambda: float
    sigma_lambda: float
    mu_phi: float
    sigma_phi: float
    sigma_psi: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "log_lambda", np.asarray(self.log_lambda, dtype=float)
        )
        object.__setattr__(self, "log_phi", np.asarray(self.log_phi, dtype=float))
        object.__setattr__(
            self,
            "log_psi",
            tuple(np.asarray(a, dtype=float) for a in self.log_psi),
        )
        if self.log_lambda.shape != self.log_phi.shape:
            raise ValueError("log_lambda and log_phi must have equal length")
        values = [
            self.log_theta,
            self.mu_lambda,
            self.sigma_lambda,
            self.mu_phi,
            self.sigma_phi,
            self.sigma_psi,
        ]
        flat = np.concatenate(
            [self.log_lambda, self.log_phi, *self.log_psi, values]
        )
        if not np.all(np.isfinite(flat)):
            raise ValueError("model state entries must all be finite")
        for name in ("sigma_lambda", "sigma_phi", "sigma_psi"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def n_studies(self) -> int:
        return self.log_lambda.size

    def psi_flat(self) -> np.ndarray:
        if not self.log_psi:
            return np.empty(0)
        return np.concatenate(self.log_psi)


def arm_rate(
    state: ModelState,
    study_index: int,
    arm_index: int,
    studies: Sequence[StudyRecord],
) -> float:
    """Event rate of one arm: ``lambda_i`` (placebo) or ``lambda_i*theta*psi_ij``."""
    study = studies[study_index]
    arm = study.arms[arm_index]
    log_rate = float(state.log_lambda[study_index])
    if arm.treatment_class is TreatmentClass.ACTIVE:
        ordinal = sum(
            a.treatment_class is TreatmentClass.ACTIVE
            for a in study.arms[:arm_index]
        )
        log_rate += state.log_theta + float(state.log_psi[study_index][ordinal])
    return math.exp(log_rate)


# ---------------------------------------------------------------------------
# Priors.


def _t_log_pdf(x: np.ndarray, df: float, scale: float) -> np.ndarray:
    """Student-t log-density with location 0."""
    if df == 3.0:
        return (
            _T3_CONST
            - math.log(scale)
            - 2.0 * np.log1p(x**2 / (3.0 * scale**2))
        )
    z_sq = (x / scale) ** 2
    return (
        math.lgamma((df + 1.0) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * math.log(df * math.pi)
        - math.log(scale)
        - (df + 1.0) / 2.0 * np.log1p(z_sq / df)
    )


def _uniform_log_pdf(value: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    if lo <= value <= hi:
        return -math.log(hi - lo)
    return -math.inf


def log_prior(state: ModelState, priors: PriorSpec) -> float:
    """Sum of all prior log-densities; -inf outside any uniform support."""
    total = 0.0
    total += _uniform_log_pdf(state.mu_lambda, priors.mu_lambda_bounds)
    total += _uniform_log_pdf(
        math.log(state.sigma_lambda), priors.log_sigma_lambda_bounds
    )
    total += _uniform_log_pdf(state.mu_phi, priors.mu_phi_bounds)
    total += _uniform_log_pdf(math.log(state.sigma_phi), priors.log_sigma_phi_bounds)
    total += _uniform_log_pdf(math.log(state.sigma_psi), priors.log_sigma_psi_bounds)
    if not math.isfinite(total):
        return -math.inf
    total += float(
        _normal_log_pdf(state.log_theta, priors.log_theta_mean, priors.log_theta_sd**2)
    )
    total += float(
        np.sum(_normal_log_pdf(state.log_lambda, state.mu_lambda, state.sigma_lambda**2))
    )
    total += float(
        np.sum(_normal_log_pdf(state.log_phi, state.mu_phi, state.sigma_phi**2))
    )
    psi = state.psi_flat()
    if psi.size:
        total += float(np.sum(_t_log_pdf(psi, priors.psi_df, state.sigma_psi)))
    return total


def sample_prior_state(
    priors: PriorSpec,
    studies: Sequence[StudyRecord],
    rng: np.random.Generator,
) -> ModelState:
    """One exact draw from the joint prior, shaped for ``studies``."""
    k = len(studies)
    mu_l = rng.uniform(*priors.mu_lambda_bounds)
    sd_l = math.exp(rng.uniform(*priors.log_sigma_lambda_bounds))
    mu_p = rng.uniform(*priors.mu_phi_bounds)
    sd_p = math.exp(rng.uniform(*priors.log_sigma_phi_bounds))
    sd_psi = math.exp(rng.uniform(*priors.log_sigma_psi_bounds))
    log_psi = tuple(
        rng.standard_t(priors.psi_df, size=len(s.active_arms)) * sd_psi
        for s in studies
    )
    return ModelState(
        log_lambda=rng.normal(mu_l, sd_l, size=k),
        log_phi=rng.normal(mu_p, sd_p, size=k),
        log_psi=log_psi,
        log_theta=rng.normal(priors.log_theta_mean, priors.log_theta_sd),
        mu_lambda=mu_l,
        sigma_lambda=sd_l,
        mu_phi=mu_p,
        sigma_phi=sd_p,
        sigma_psi=sd_psi,
    )


# ---------------------------------------------------------------------------
# Likelihood: per-arm routing tables and vectorized kernels.

_KIND_SE = 0
_KIND_JOINT = 1
_KIND_TOTAL = 2
_KIND_ZERO = 3


@dataclass
class _ArmEntry:
    study_idx: int
    active: bool
    psi_idx: int  # -1 for placebo arms
    delta: float
    n: int
    kind: int
    t: int = 0
    z: int = 0
    rate_obs: float = 0.0
    se_obs: float = 0.0


def _route_arm(
    arm, duration: float, se_arms: SeArmRouting
) -> tuple[int, dict]:
    """Pick the likelihood kind and its data for one arm."""
    has_counts = arm.total is not None or arm.zeroes is not None
    use_se = arm.has_se_pair and (se_arms == "normal" or not has_counts)
    if use_se:
        return _KIND_SE, {"rate_obs": arm.rate_est, "se_obs": arm.std_err}
    if arm.total is not None and arm.zeroes is not None:
        if arm.zeroes == arm.n_patients:
            if arm.total != 0:
                raise ImpossibleDataError(
                    "arm has every patient event-free but a positive total"
                )
            # The conditional factor degenerates; the binomial term alone
            # is the whole likelihood, identical to the zeroes-only kind.
            return _KIND_ZERO, {"z": arm.zeroes}
        if arm.total < arm.n_patients - arm.zeroes:
            raise ImpossibleDataError(
                f"{arm.n_patients - arm.zeroes} patients with events force "
                f"total >= {arm.n_patients - arm.zeroes}, got {arm.total}"
            )
        return _KIND_JOINT, {"t": arm.total, "z": arm.zeroes}
    if arm.total is not None:
        return _KIND_TOTAL, {"t": arm.total}
    if arm.zeroes is not None:
        return _KIND_ZERO, {"z": arm.zeroes}
    if arm.rate_est is not None:
        # Rate without standard error: use the total it implies.
        return _KIND_TOTAL, {
            "t": derive_total(arm.rate_est, arm.n_patients, duration)
        }
    raise ModelBuildError("arm carries no usable evidence")


def _build_entries(
    studies: Sequence[StudyRecord], se_arms: SeArmRouting
) -> tuple[list[_ArmEntry], int]:
    if se_arms not in ("normal", "counts"):
        raise ModelBuildError(f"unknown SE-arm routing {se_arms!r}")
    entries: list[_ArmEntry] = []
    psi_count = 0
    for i, study in enumerate(studies):
        for arm in study.arms:
            active = arm.treatment_class is TreatmentClass.ACTIVE
            try:
                kind, data = _route_arm(arm, study.duration, se_arms)
            except ValueError as exc:
                raise ModelBuildError(
                    f"study {study.study_id!r}: {exc}"
                ) from exc
            entries.append(
                _ArmEntry(
                    study_idx=i,
                    active=active,
                    psi_idx=psi_count if active else -1,
                    delta=study.duration,
                    n=arm.n_patients,
                    kind=kind,
                    **data,
                )
            )
            if active:
                psi_count += 1
    return entries, psi_count


class _KindSlice:
    """Data columns for the arms of one likelihood kind within a subset."""

    __slots__ = (
        "pos", "study", "active", "active_f", "any_active", "all_active",
        "psi", "delta", "n",
        "t", "z", "c", "log_choose", "rate_obs", "se_obs", "const",
    )

    def __init__(self, entries: list[_ArmEntry], positions: list[int]) -> None:
        sub = [entries[p] for p in positions]
        self.pos = np.array(positions, dtype=np.intp)
        self.study = np.array([e.study_idx for e in sub], dtype=np.intp)
        self.active = np.array([e.active for e in sub])
        self.active_f = self.active.astype(float)
        self.any_active = bool(self.active.any())
        self.all_active = bool(self.active.all())
        self.psi = np.array([max(e.psi_idx, 0) for e in sub], dtype=np.intp)
        self.delta = np.array([e.delta for e in sub])
        self.n = np.array([e.n for e in sub], dtype=float)
        self.t = np.array([e.t for e in sub], dtype=float)
        self.z = np.array([e.z for e in sub], dtype=float)
        self.c = self.n - self.z
        self.log_choose = (
            gammaln(self.n + 1.0)
            - gammaln(self.z + 1.0)
            - gammaln(self.c + 1.0)
        )
        self.rate_obs = np.array([e.rate_obs for e in sub])
        self.se_obs = np.array([e.se_obs for e in sub])
        with np.errstate(divide="ignore"):
            self.const = -np.log(self.se_obs * math.sqrt(2.0 * math.pi))

    def __len__(self) -> int:
        return int(self.pos.size)


class _ArmTables:
    """Precomputed routing tables for fast vectorized likelihoods."""

    def __init__(self, studies: Sequence[StudyRecord], se_arms: SeArmRouting):
        entries, n_psi = _build_entries(studies, se_arms)
        self.n_arms = len(entries)
        self.n_psi = n_psi
        self.n_studies = len(studies)
        self.study_of_arm = np.array([e.study_idx for e in entries], dtype=np.intp)
        # Arm position owning each psi (active arms and psis map 1:1).
        self.psi_arm_pos = np.array(
            [pos for pos, e in enumerate(entries) if e.active], dtype=np.intp
        )

        def _slice(predicate) -> dict[int, _KindSlice]:
            grouped: dict[int, list[int]] = {}
            for pos, e in enumerate(entries):
                if predicate(e):
                    grouped.setdefault(e.kind, []).append(pos)
            return {
                kind: _KindSlice(entries, positions)
                for kind, positions in grouped.items()
            }

        # Slices per arm family touched by the different move types.
        self.all_arms = _slice(lambda e: True)
        self.active_arms = _slice(lambda e: e.active)
        self.placebo_arms = _slice(lambda e: not e.active)
        self.count_arms = _slice(lambda e: e.kind != _KIND_SE)

    def arm_logliks(
        self,
        slices: dict[int, _KindSlice],
        log_lambda: np.ndarray,
        log_phi: np.ndarray,
        log_psi: np.ndarray,
        log_theta: float,
        out: np.ndarray,
    ) -> np.ndarray:
        """Write per-arm log-likelihoods for ``slices`` into ``out[pos]``."""
        for kind, sl in slices.items():
            log_rate = log_lambda[sl.study]
            if sl.any_active:
                boost = log_theta + (
                    log_psi[sl.psi] if log_psi.size else 0.0
                )
                if sl.all_active:
                    log_rate = log_rate + boost
                else:
                    log_rate = log_rate + sl.active_f * boost
            if kind == _KIND_SE:
                rate = np.exp(log_rate)
                out[sl.pos] = sl.const - 0.5 * ((sl.rate_obs - rate) / sl.se_obs) ** 2
                continue
            m = sl.delta * np.exp(log_rate)
            phi = np.exp(log_phi[sl.study])
            if kind == _KIND_ZERO:
                lp0 = _log_pi0(m, phi)
                out[sl.pos] = (
                    sl.log_choose + sl.z * lp0 + sl.c * _log1m_from_log(lp0)
                )
            elif kind == _KIND_TOTAL:
                mean = sl.n * m
                var = mean * (1.0 + phi * m)
                out[sl.pos] = _normal_log_pdf(sl.t, mean, var)
            else:  # _KIND_JOINT
                # Inline _trunc_moments_arrays to reuse lp0 for both factors.
                lp0 = _log_pi0(m, phi)
                pi0 = np.exp(lp0)
                one_minus = -np.expm1(lp0)
                theta_c = m / one_minus
                sigma_sq = theta_c - m**2 * (
                    (1.0 + phi) * pi0 - phi
                ) / one_minus**2
                var = sl.c * sigma_sq
                with np.errstate(divide="ignore", invalid="ignore"):
                    norm_term = np.where(
                        var > 0.0,
                        _normal_log_pdf(sl.t, sl.c * theta_c, var),
                        -np.inf,
                    )
                out[sl.pos] = (
                    sl.log_choose
                    + sl.z * lp0
                    + sl.c * np.log(one_minus)
                    + norm_term
                )
        return out


def log_likelihood(
    state: ModelState,
    studies: Sequence[StudyRecord],
    *,
    se_arms: SeArmRouting = "normal",
) -> float:
    """Total data log-likelihood of ``state`` for the given studies."""
    if state.n_studies != len(studies):
        raise ValueError(
            f"state has {state.n_studies} studies, data has {len(studies)}"
        )
    tables = _ArmTables(studies, se_arms)
    out = np.empty(tables.n_arms)
    tables.arm_logliks(
        tables.all_arms,
        state.log_lambda,
        state.log_phi,
        state.psi_flat(),
        state.log_theta,
        out,
    )
    return float(np.sum(out))


def log_posterior(
    state: ModelState,
    studies: Sequence[StudyRecord],
    priors: PriorSpec,
    *,
    se_arms: SeArmRouting = "normal",
) -> float:
    """log_prior + log_likelihood, with -inf propagating from the prior."""
    lp = log_prior(state, priors)
    if not math.isfinite(lp):
        return -math.inf
    return lp + log_likelihood(state, studies, se_arms=se_arms)


# ---------------------------------------------------------------------------
# Sampling target: packed parameter vector and blocked kernel.


class HierarchicalTarget:
    """The model as a sampling target with a specialized blocked kernel.

    Packed layout: ``[log_lambda (k), log_phi (k), log_psi (J),
    log_theta, mu_lambda, log_sigma_lambda, mu_phi, log_sigma_phi,
    log_sigma_psi]``.
    """

    def __init__(
        self,
        studies: Sequence[StudyRecord],
        priors: PriorSpec | None = None,
        *,
        se_arms: SeArmRouting = "normal",
        include_likelihood: bool = True,
    ) -> None:
        if not studies:
            raise ModelBuildError("no studies to model")
        self.studies = tuple(studies)
        self.priors = priors if priors is not None else PriorSpec()
        self.se_arms: SeArmRouting = se_arms
        self.include_likelihood = include_likelihood
        self.tables = _ArmTables(self.studies, se_arms)
        self.k = self.tables.n_studies
        self.n_psi = self.tables.n_psi

        names = [f"log_lambda[{s.study_id}]" for s in self.studies]
        names += [f"log_phi[{s.study_id}]" for s in self.studies]
        for s in self.studies:
            for ordinal in range(len(s.active_arms)):
                names.append(f"log_psi[{s.study_id}#{ordinal + 1}]")
        names += [
            "log_theta",
            "mu_lambda",
            "log_sigma_lambda",
            "mu_phi",
            "log_sigma_phi",
            "log_sigma_psi",
        ]
        self.param_names = names
        self.dim = 2 * self.k + self.n_psi + 6

        # Packed-vector index helpers.
        self.sl_lambda = slice(0, self.k)
        self.sl_phi = slice(self.k, 2 * self.k)
        self.sl_psi = slice(2 * self.k, 2 * self.k + self.n_psi)
        base = 2 * self.k + self.n_psi
        self.i_theta = base
        self.i_mu_l = base + 1
        self.i_ls_l = base + 2
        self.i_mu_p = base + 3
        self.i_ls_p = base + 4
        self.i_ls_psi = base + 5

    # -- state conversions ---------------------------------------------------

    def to_vector(self, state: ModelState) -> np.ndarray:
        x = np.empty(self.dim)
        x[self.sl_lambda] = state.log_lambda
        x[self.sl_phi] = state.log_phi
        x[self.sl_psi] = state.psi_flat()
        x[self.i_theta] = state.log_theta
        x[self.i_mu_l] = state.mu_lambda
        x[self.i_ls_l] = math.log(state.sigma_lambda)
        x[self.i_mu_p] = state.mu_phi
        x[self.i_ls_p] = math.log(state.sigma_phi)
        x[self.i_ls_psi] = math.log(state.sigma_psi)
        return x

    def to_state(self, x: np.ndarray) -> ModelState:
        psi_flat = x[self.sl_psi]
        log_psi: list[np.ndarray] = []
        offset = 0
        for study in self.studies:
            n_active = len(study.active_arms)
            log_psi.append(psi_flat[offset : offset + n_active].copy())
            offset += n_active
        return ModelState(
            log_lambda=x[self.sl_lambda].copy(),
            log_phi=x[self.sl_phi].copy(),
            log_psi=tuple(log_psi),
            log_theta=float(x[self.i_theta]),
            mu_lambda=float(x[self.i_mu_l]),
            sigma_lambda=math.exp(float(x[self.i_ls_l])),
            mu_phi=float(x[self.i_mu_p]),
            sigma_phi=math.exp(float(x[self.i_ls_p])),
            sigma_psi=math.exp(float(x[self.i_ls_psi])),
        )

    # -- densities -------------------------------------------------------------

    def _log_prior_vec(self, x: np.ndarray) -> float:
        pr = self.priors
        total = 0.0
        total += _uniform_log_pdf(float(x[self.i_mu_l]), pr.mu_lambda_bounds)
        total += _uniform_log_pdf(float(x[self.i_ls_l]), pr.log_sigma_lambda_bounds)
        total += _uniform_log_pdf(float(x[self.i_mu_p]), pr.mu_phi_bounds)
        total += _uniform_log_pdf(float(x[self.i_ls_p]), pr.log_sigma_phi_bounds)
        total += _uniform_log_pdf(float(x[self.i_ls_psi]), pr.log_sigma_psi_bounds)
        if not math.isfinite(total):
            return -math.inf
        total += float(
            _normal_log_pdf(x[self.i_theta], pr.log_theta_mean, pr.log_theta_sd**2)
        )
        sd_l = math.exp(float(x[self.i_ls_l]))
        sd_p = math.exp(float(x[self.i_ls_p]))
        total += float(
            np.sum(_normal_log_pdf(x[self.sl_lambda], x[self.i_mu_l], sd_l**2))
        )
        total += float(
            np.sum(_normal_log_pdf(x[self.sl_phi], x[self.i_mu_p], sd_p**2))
        )
        if self.n_psi:
            sd_psi = math.exp(float(x[self.i_ls_psi]))
            total += float(
                np.sum(_t_log_pdf(x[self.sl_psi], pr.psi_df, sd_psi))
            )
        return total

    def _arm_logliks_full(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.tables.n_arms)
        if self.include_likelihood:
            self.tables.arm_logliks(
                self.tables.all_arms,
                x[self.sl_lambda],
                x[self.sl_phi],
                x[self.sl_psi],
                float(x[self.i_theta]),
                out,
            )
        return out

    def log_density(self, x: np.ndarray) -> float:
        lp = self._log_prior_vec(x)
        if not math.isfinite(lp):
            return -math.inf
        return lp + float(np.sum(self._arm_logliks_full(x)))

    # -- initialization --------------------------------------------------------

    def _crude_study_log_rate(self, study: StudyRecord) -> float:
        arm = study.placebo_arm
        if arm.rate_est is not None:
            return math.log(arm.rate_est)
        exposure = arm.n_patients * study.duration
        if arm.total is not None:
            return math.log(max(arm.total, 0.5) / exposure)
        z_eff = min(max(float(arm.zeroes), 0.5), arm.n_patients - 0.5)
        return math.log(-math.log(z_eff / arm.n_patients) / study.duration)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        """Data-informed start with per-chain jitter (overdispersed starts)."""
        pr = self.priors
        x = np.empty(self.dim)
        crude = np.array([self._crude_study_log_rate(s) for s in self.studies])
        x[self.sl_lambda] = crude + rng.normal(0.0, 0.4, size=self.k)
        x[self.sl_phi] = math.log(0.5) + rng.normal(0.0, 0.4, size=self.k)
        x[self.sl_psi] = rng.normal(0.0, 0.1, size=self.n_psi)
        x[self.i_theta] = rng.normal(0.0, 0.3)

        def _inside(value: float, bounds: tuple[float, float]) -> float:
            lo, hi = bounds
            margin = 0.05 * (hi - lo)
            return float(np.clip(value, lo + margin, hi - margin))

        x[self.i_mu_l] = _inside(
            float(np.mean(crude)) + rng.normal(0.0, 0.3), pr.mu_lambda_bounds
        )
        x[self.i_ls_l] = _inside(
            math.log(0.5) + rng.normal(0.0, 0.3), pr.log_sigma_lambda_bounds
        )
        x[self.i_mu_p] = _inside(
            math.log(0.5) + rng.normal(0.0, 0.4), pr.mu_phi_bounds
        )
        x[self.i_ls_p] = _inside(
            math.log(0.5) + rng.normal(0.0, 0.3), pr.log_sigma_phi_bounds
        )
        x[self.i_ls_psi] = _inside(
            math.log(0.3) + rng.normal(0.0, 0.3), pr.log_sigma_psi_bounds
        )
        return x

    def make_kernel(self) -> "_HierKernel":
        return _HierKernel(self)


def build_target(
    studies: Sequence[StudyRecord],
    priors: PriorSpec | None = None,
    *,
    se_arms: SeArmRouting = "normal",
    include_likelihood: bool = True,
) -> HierarchicalTarget:
    """Assemble the sampling target for a dataset (see HierarchicalTarget)."""
    return HierarchicalTarget(
        studies,
        priors,
        se_arms=se_arms,
        include_likelihood=include_likelihood,
    )


# ---------------------------------------------------------------------------
# Blocked kernel.


class _MoveStats:
    """Robbins-Monro adapted scale(s) and acceptance bookkeeping for one family."""

    __slots__ = ("name", "target", "log_scale", "updates", "proposed", "accepted")

    def __init__(self, name: str, target: float, log_scale: np.ndarray | float):
        self.name = name
        self.target = target
        self.log_scale = (
            np.asarray(log_scale, dtype=float)
            if isinstance(log_scale, np.ndarray)
            else float(log_scale)
        )
        self.updates = 0
        self.proposed = 0
        self.accepted = 0

    def scales(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(np.exp(self.log_scale)))

    def adapt(self, accepted) -> None:
        self.updates += 1
        gain = (self.updates + 10.0) ** -0.6
        self.log_scale = self.log_scale + gain * (
            np.asarray(accepted, dtype=float) - self.target
        )

    def record(self, accepted) -> None:
        arr = np.atleast_1d(np.asarray(accepted))
        self.proposed += arr.size
        self.accepted += int(arr.sum())

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else math.nan


class _HierKernel:
    """One sweep = vectorized per-study and per-arm blocks, the global
    treatment effect, the hyperparameter block, and the group moves."""

    MULTIVARIATE_TARGET = 0.234
    SCALAR_TARGET = 0.44

    def __init__(self, target: HierarchicalTarget) -> None:
        self.t = target
        k, n_psi = target.k, target.n_psi
        self.x = np.empty(target.dim)
        self.arm_ll = np.zeros(target.tables.n_arms)
        self._scratch_ll = np.zeros(target.tables.n_arms)
        self._family_pos = {
            id(slices): self._positions(slices)
            for slices in (
                target.tables.all_arms,
                target.tables.active_arms,
                target.tables.placebo_arms,
                target.tables.count_arms,
            )
        }
        self._all_pos = self._family_pos[id(target.tables.all_arms)]
        self._count_pos = self._family_pos[id(target.tables.count_arms)]
        self._initialized = False
        self.moves = {
            "study_blocks": _MoveStats(
                "study_blocks", self.MULTIVARIATE_TARGET, np.full(k, math.log(0.2))
            ),
            "lambda_sites": _MoveStats(
                "lambda_sites", self.SCALAR_TARGET, np.full(k, math.log(0.2))
            ),
            "phi_sites": _MoveStats(
                "phi_sites", self.SCALAR_TARGET, np.full(k, math.log(0.4))
            ),
            "psi": _MoveStats("psi", self.SCALAR_TARGET, np.full(n_psi, math.log(0.5))),
            "theta": _MoveStats("theta", self.SCALAR_TARGET, math.log(0.1)),
            "hyper_lambda": _MoveStats(
                "hyper_lambda", self.MULTIVARIATE_TARGET, math.log(0.2)
            ),
            "hyper_phi": _MoveStats(
                "hyper_phi", self.MULTIVARIATE_TARGET, math.log(0.3)
            ),
            "hyper_psi": _MoveStats("hyper_psi", self.SCALAR_TARGET, math.log(0.3)),
            "translate_lambda": _MoveStats(
                "translate_lambda", self.SCALAR_TARGET, math.log(0.2)
            ),
            "translate_phi": _MoveStats(
                "translate_phi", self.SCALAR_TARGET, math.log(0.3)
            ),
            "scale_lambda": _MoveStats(
                "scale_lambda", self.SCALAR_TARGET, math.log(0.3)
            ),
            "scale_phi": _MoveStats("scale_phi", self.SCALAR_TARGET, math.log(0.3)),
            "scale_psi": _MoveStats("scale_psi", self.SCALAR_TARGET, math.log(0.3)),
            "translate_theta_psi": _MoveStats(
                "translate_theta_psi", self.SCALAR_TARGET, math.log(0.2)
            ),
            "translate_lambda_theta": _MoveStats(
                "translate_lambda_theta", self.SCALAR_TARGET, math.log(0.2)
            ),
        }

    # -- plumbing ---------------------------------------------------------------

    def reset(self, x0: np.ndarray) -> None:
        if x0.shape != (self.t.dim,):
            raise ValueError(f"state must have shape ({self.t.dim},)")
        if not math.isfinite(self.t.log_density(x0)):
            raise ValueError("kernel must start from a finite-density state")
        self.x = x0.astype(float).copy()
        self.arm_ll = self.t._arm_logliks_full(self.x)
        self._initialized = True

    def scales_snapshot(self) -> np.ndarray:
        return np.concatenate([m.scales() for m in self.moves.values()])

    def acceptance_rates(self) -> dict[str, float]:
        return {name: m.acceptance_rate for name, m in self.moves.items()}

    def _subset_ll(self, slices, x) -> np.ndarray:
        """Per-arm log-likelihood on a slice family, as a full-length vector.

        Returns a shared scratch buffer: consume it before the next call.
        """
        out = self._scratch_ll
        if self.t.include_likelihood:
            self.t.tables.arm_logliks(
                slices,
                x[self.t.sl_lambda],
                x[self.t.sl_phi],
                x[self.t.sl_psi],
                float(x[self.t.i_theta]),
                out,
            )
        return out

    @staticmethod
    def _positions(slices) -> np.ndarray:
        if not slices:
            return np.empty(0, dtype=np.intp)
        return np.concatenate([sl.pos for sl in slices.values()])

    # -- individual move families ------------------------------------------------

    def _move_study_blocks(self, rng, adapt: bool) -> None:
        t = self.t
        mv = self.moves["study_blocks"]
        scale = np.exp(mv.log_scale)
        prop = self.x.copy()
        prop[t.sl_lambda] = self.x[t.sl_lambda] + scale * rng.standard_normal(t.k)
        prop[t.sl_phi] = self.x[t.sl_phi] + scale * rng.standard_normal(t.k)

        new_ll = self._subset_ll(t.tables.all_arms, prop)
        delta_ll = np.bincount(
            t.tables.study_of_arm, weights=new_ll - self.arm_ll, minlength=t.k
        )
        sd_l = math.exp(float(self.x[t.i_ls_l]))
        sd_p = math.exp(float(self.x[t.i_ls_p]))
        delta_prior = _normal_log_pdf(
            prop[t.sl_lambda], self.x[t.i_mu_l], sd_l**2
        ) - _normal_log_pdf(self.x[t.sl_lambda], self.x[t.i_mu_l], sd_l**2)
        delta_prior += _normal_log_pdf(
            prop[t.sl_phi], self.x[t.i_mu_p], sd_p**2
        ) - _normal_log_pdf(self.x[t.sl_phi], self.x[t.i_mu_p], sd_p**2)

        log_u = np.log(rng.random(t.k))
        accept = log_u < delta_ll + delta_prior
        if accept.any():
            lam = self.x[t.sl_lambda]
            phi = self.x[t.sl_phi]
            lam[accept] = prop[t.sl_lambda][accept]
            phi[accept] = prop[t.sl_phi][accept]
            arm_accept = accept[t.tables.study_of_arm]
            self.arm_ll[arm_accept] = new_ll[arm_accept]
        mv.record(accept)
        if adapt:
            mv.adapt(accept)

    def _move_site_family(
        self,
        rng,
        adapt: bool,
        name: str,
        coord_slice: slice,
        slices,
        positions: np.ndarray,
        i_mu: int,
        i_ls: int,
    ) -> None:
        """Simultaneous per-study scalar updates of one level family.

        Studies are conditionally independent given the hypers, so every
        study proposes at once and accepts on its own likelihood/prior
        delta (single-site refinement on top of the joint study blocks).
        """
        t = self.t
        mv = self.moves[name]
        prop = self.x.copy()
        prop[coord_slice] = self.x[coord_slice] + np.exp(
            mv.log_scale
        ) * rng.standard_normal(t.k)

        new_ll = self._subset_ll(slices, prop)
        fam_study = t.tables.study_of_arm[positions]
        delta_ll = np.bincount(
            fam_study,
            weights=(new_ll - self.arm_ll)[positions],
            minlength=t.k,
        )
        sd = math.exp(float(self.x[i_ls]))
        delta_prior = _normal_log_pdf(
            prop[coord_slice], self.x[i_mu], sd**2
        ) - _normal_log_pdf(self.x[coord_slice], self.x[i_mu], sd**2)

        accept = np.log(rng.random(t.k)) < delta_ll + delta_prior
        if accept.any():
            coords = self.x[coord_slice]
            coords[accept] = prop[coord_slice][accept]
            touched = positions[accept[fam_study]]
            self.arm_ll[touched] = new_ll[touched]
        mv.record(accept)
        if adapt:
            mv.adapt(accept)

    def _move_lambda_sites(self, rng, adapt: bool) -> None:
        t = self.t
        self._move_site_family(
            rng,
            adapt,
            "lambda_sites",
            t.sl_lambda,
            t.tables.all_arms,
            self._all_pos,
            t.i_mu_l,
            t.i_ls_l,
        )

    def _move_phi_sites(self, rng, adapt: bool) -> None:
        t = self.t
        # Overdispersion enters count likelihoods only; SE arms are free.
        self._move_site_family(
            rng,
            adapt,
            "phi_sites",
            t.sl_phi,
            t.tables.count_arms,
            self._count_pos,
            t.i_mu_p,
            t.i_ls_p,
        )

    def _move_psi(self, rng, adapt: bool) -> None:
        t = self.t
        if t.n_psi == 0:
            return
        mv = self.moves["psi"]
        scale = np.exp(mv.log_scale)
        prop = self.x.copy()
        prop[t.sl_psi] = self.x[t.sl_psi] + scale * rng.standard_normal(t.n_psi)

        new_ll = self._subset_ll(t.tables.active_arms, prop)
        # Each active arm owns exactly one psi, so arm-level deltas map 1:1.
        owner = t.tables.psi_arm_pos
        delta_ll = new_ll[owner] - self.arm_ll[owner]
        sd_psi = math.exp(float(self.x[t.i_ls_psi]))
        delta_prior = _t_log_pdf(
            prop[t.sl_psi], t.priors.psi_df, sd_psi
        ) - _t_log_pdf(self.x[t.sl_psi], t.priors.psi_df, sd_psi)

        accept = np.log(rng.random(t.n_psi)) < delta_ll + delta_prior
        if accept.any():
            psi = self.x[t.sl_psi]
            psi[accept] = prop[t.sl_psi][accept]
            self.arm_ll[owner[accept]] = new_ll[owner[accept]]
        mv.record(accept)
        if adapt:
            mv.adapt(accept)

    def _scalar_move(
        self,
        rng,
        adapt: bool,
        name: str,
        make_proposal,
        slices,
        extra_log_ratio,
    ) -> None:
        """Shared accept/reject logic for single-scalar-step move families.

        ``make_proposal(step) -> x_prop``; ``extra_log_ratio(x_prop)`` adds
        the prior/Jacobian part of the acceptance ratio.
        """
        mv = self.moves[name]
        step = math.exp(float(np.asarray(mv.log_scale))) * rng.standard_normal()
        x_prop = make_proposal(step)
        log_ratio = extra_log_ratio(x_prop)
        evaluated = math.isfinite(log_ratio) and slices is not None
        if evaluated:
            new_ll = self._subset_ll(slices, x_prop)
            positions = self._family_pos[id(slices)]
            log_ratio += float(
                np.sum(new_ll[positions]) - np.sum(self.arm_ll[positions])
            )
        accepted = math.isfinite(log_ratio) and math.log(rng.random()) < log_ratio
        if accepted:
            if evaluated:
                self.arm_ll[positions] = new_ll[positions]
            self.x = x_prop
        mv.record(accepted)
        if adapt:
            mv.adapt(accepted)

    def _move_theta(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors

        def proposal(step):
            x = self.x.copy()
            x[t.i_theta] += step
            return x

        def ratio(x_prop):
            return float(
                _normal_log_pdf(
                    x_prop[t.i_theta], pr.log_theta_mean, pr.log_theta_sd**2
                )
                - _normal_log_pdf(
                    self.x[t.i_theta], pr.log_theta_mean, pr.log_theta_sd**2
                )
            )

        self._scalar_move(
            rng, adapt, "theta", proposal, t.tables.active_arms, ratio
        )

    def _move_hyper_block(
        self, rng, adapt: bool, name: str, idx: list[int], prior_delta
    ) -> None:
        mv = self.moves[name]
        x_prop = self.x.copy()
        x_prop[idx] += math.exp(
            float(np.asarray(mv.log_scale))
        ) * rng.standard_normal(len(idx))
        # Hyperparameters only enter priors; the likelihood is untouched.
        log_ratio = prior_delta(x_prop)
        accepted = math.isfinite(log_ratio) and math.log(rng.random()) < log_ratio
        if accepted:
            self.x = x_prop
        mv.record(accepted)
        if adapt:
            mv.adapt(accepted)

    def _normal_family_delta(self, x_prop, coord_slice, i_mu, i_ls, mu_b, ls_b):
        # Only the uniform supports and this family's normal terms change.
        if not (mu_b[0] <= x_prop[i_mu] <= mu_b[1]):
            return -math.inf
        if not (ls_b[0] <= x_prop[i_ls] <= ls_b[1]):
            return -math.inf
        vals = self.x[coord_slice]
        new = _normal_log_pdf(
            vals, float(x_prop[i_mu]), math.exp(float(x_prop[i_ls])) ** 2
        )
        old = _normal_log_pdf(
            vals, float(self.x[i_mu]), math.exp(float(self.x[i_ls])) ** 2
        )
        return float(np.sum(new - old))

    def _move_hypers(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors

        def delta_lambda(x_prop):
            return self._normal_family_delta(
                x_prop, t.sl_lambda, t.i_mu_l, t.i_ls_l,
                pr.mu_lambda_bounds, pr.log_sigma_lambda_bounds,
            )

        def delta_phi(x_prop):
            return self._normal_family_delta(
                x_prop, t.sl_phi, t.i_mu_p, t.i_ls_p,
                pr.mu_phi_bounds, pr.log_sigma_phi_bounds,
            )

        def delta_psi(x_prop):
            b = pr.log_sigma_psi_bounds
            if not (b[0] <= x_prop[t.i_ls_psi] <= b[1]):
                return -math.inf
            if not t.n_psi:
                return 0.0
            vals = self.x[t.sl_psi]
            new = _t_log_pdf(vals, pr.psi_df, math.exp(float(x_prop[t.i_ls_psi])))
            old = _t_log_pdf(vals, pr.psi_df, math.exp(float(self.x[t.i_ls_psi])))
            return float(np.sum(new - old))

        self._move_hyper_block(
            rng, adapt, "hyper_lambda", [t.i_mu_l, t.i_ls_l], delta_lambda
        )
        self._move_hyper_block(
            rng, adapt, "hyper_phi", [t.i_mu_p, t.i_ls_p], delta_phi
        )
        self._move_hyper_block(rng, adapt, "hyper_psi", [t.i_ls_psi], delta_psi)

    def _move_translate_lambda(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors

        def proposal(step):
            x = self.x.copy()
            x[t.sl_lambda] += step
            x[t.i_mu_l] += step
            return x

        def ratio(x_prop):
            # Deviations from mu are unchanged; only the uniform support matters.
            return _uniform_log_pdf(
                float(x_prop[t.i_mu_l]), pr.mu_lambda_bounds
            ) - _uniform_log_pdf(float(self.x[t.i_mu_l]), pr.mu_lambda_bounds)

        self._scalar_move(
            rng, adapt, "translate_lambda", proposal, t.tables.all_arms, ratio
        )

    def _move_translate_phi(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors

        def proposal(step):
            x = self.x.copy()
            x[t.sl_phi] += step
            x[t.i_mu_p] += step
            return x

        def ratio(x_prop):
            return _uniform_log_pdf(
                float(x_prop[t.i_mu_p]), pr.mu_phi_bounds
            ) - _uniform_log_pdf(float(self.x[t.i_mu_p]), pr.mu_phi_bounds)

        # SE-reported arms do not involve phi; only count arms recompute.
        self._scalar_move(
            rng, adapt, "translate_phi", proposal, t.tables.count_arms, ratio
        )

    def _scale_family_ratio(self, bounds, idx_ls, x_prop) -> float:
        """Log prior ratio + Jacobian for rescaling deviations of a scale family.

        Multiplying all deviations by c = exp(step) while adding step to the
        log-scale leaves (prior density x Jacobian) invariant for any
        location-scale family, so only the uniform support of the log-scale
        can veto the move.
        """
        return _uniform_log_pdf(float(x_prop[idx_ls]), bounds) - _uniform_log_pdf(
            float(self.x[idx_ls]), bounds
        )

    def _move_scale_lambda(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors

        def proposal(step):
            x = self.x.copy()
            c = math.exp(step)
            mu = x[t.i_mu_l]
            x[t.sl_lambda] = mu + c * (x[t.sl_lambda] - mu)
            x[t.i_ls_l] += step
            return x

        self._scalar_move(
            rng,
            adapt,
            "scale_lambda",
            proposal,
            t.tables.all_arms,
            lambda xp: self._scale_family_ratio(
                pr.log_sigma_lambda_bounds, t.i_ls_l, xp
            ),
        )

    def _move_scale_phi(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors

        def proposal(step):
            x = self.x.copy()
            c = math.exp(step)
            mu = x[t.i_mu_p]
            x[t.sl_phi] = mu + c * (x[t.sl_phi] - mu)
            x[t.i_ls_p] += step
            return x

        self._scalar_move(
            rng,
            adapt,
            "scale_phi",
            proposal,
            t.tables.count_arms,
            lambda xp: self._scale_family_ratio(pr.log_sigma_phi_bounds, t.i_ls_p, xp),
        )

    def _move_scale_psi(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors
        if t.n_psi == 0:
            return

        def proposal(step):
            x = self.x.copy()
            x[t.sl_psi] = math.exp(step) * x[t.sl_psi]
            x[t.i_ls_psi] += step
            return x

        self._scalar_move(
            rng,
            adapt,
            "scale_psi",
            proposal,
            t.tables.active_arms,
            lambda xp: self._scale_family_ratio(
                pr.log_sigma_psi_bounds, t.i_ls_psi, xp
            ),
        )

    def _move_translate_theta_psi(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors
        if t.n_psi == 0:
            return

        def proposal(step):
            x = self.x.copy()
            x[t.i_theta] += step
            x[t.sl_psi] -= step
            return x

        def ratio(x_prop):
            # Arm rates involve theta + psi only through their sum, so the
            # likelihood is exactly invariant; the prior decides.
            sd_psi = math.exp(float(self.x[t.i_ls_psi]))
            out = float(
                _normal_log_pdf(
                    x_prop[t.i_theta], pr.log_theta_mean, pr.log_theta_sd**2
                )
                - _normal_log_pdf(
                    self.x[t.i_theta], pr.log_theta_mean, pr.log_theta_sd**2
                )
            )
            out += float(
                np.sum(_t_log_pdf(x_prop[t.sl_psi], pr.psi_df, sd_psi))
                - np.sum(_t_log_pdf(self.x[t.sl_psi], pr.psi_df, sd_psi))
            )
            return out

        self._scalar_move(rng, adapt, "translate_theta_psi", proposal, None, ratio)

    def _move_translate_lambda_theta(self, rng, adapt: bool) -> None:
        t, pr = self.t, self.t.priors

        def proposal(step):
            x = self.x.copy()
            x[t.sl_lambda] += step
            x[t.i_mu_l] += step
            x[t.i_theta] -= step
            return x

        def ratio(x_prop):
            # Active-arm rates are invariant (lambda up, theta down); only
            # placebo arms and the theta prior change.
            out = _uniform_log_pdf(
                float(x_prop[t.i_mu_l]), pr.mu_lambda_bounds
            ) - _uniform_log_pdf(float(self.x[t.i_mu_l]), pr.mu_lambda_bounds)
            out += float(
                _normal_log_pdf(
                    x_prop[t.i_theta], pr.log_theta_mean, pr.log_theta_sd**2
                )
                - _normal_log_pdf(
                    self.x[t.i_theta], pr.log_theta_mean, pr.log_theta_sd**2
                )
            )
            return out

        self._scalar_move(
            rng,
            adapt,
            "translate_lambda_theta",
            proposal,
            t.tables.placebo_arms,
            ratio,
        )

    # -- one sweep ---------------------------------------------------------------

    def step(self, rng: np.random.Generator, adapt: bool) -> np.ndarray:
        if not self._initialized:
            raise RuntimeError("call reset(x0) before stepping")
        self._move_study_blocks(rng, adapt)
        self._move_lambda_sites(rng, adapt)
        self._move_phi_sites(rng, adapt)
        self._move_psi(rng, adapt)
        self._move_theta(rng, adapt)
        self._move_hypers(rng, adapt)
        self._move_translate_lambda(rng, adapt)
        self._move_translate_phi(rng, adapt)
        self._move_scale_lambda(rng, adapt)
        self._move_scale_phi(rng, adapt)
        self._move_scale_psi(rng, adapt)
        self._move_translate_theta_psi(rng, adapt)
        self._move_translate_lambda_theta(rng, adapt)
        return self.x
