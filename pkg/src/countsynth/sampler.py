"""Self-contained MCMC engine: adaptive random-walk Metropolis chains,
convergence diagnostics, posterior summaries, and predictive draws.

The engine drives any *target* object exposing::

    dim             -> int, parameter count
    param_names     -> ordered labels, len == dim
    log_density(x)  -> float (may be -inf)
    initial_state(rng) -> 1-d array, a candidate starting point
    make_kernel()   -> transition kernel with
                         reset(x0), step(rng, adapt) -> current state,
                         scales_snapshot(), acceptance_rates()

:mod:`countsynth.hiermodel` builds such targets with a specialized
blocked kernel; :class:`DensityTarget` wraps any plain log-density
callable with a joint Gaussian random-walk kernel for testing against
analytic distributions.

Chains are independent: each owns a private RNG stream spawned from the
master seed (numpy ``SeedSequence``/PCG64, fixed here for
reproducibility), proposal scales adapt during burn-in only, and
retained draws are the states at iteration indices
``burn_in + j*thinning``.  Everything downstream (PSRF, effective sample
size, kernel densities, predictive draws) is deterministic given the
retained draws and, where it needs randomness, an explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "InitializationError",
    "ChainSet",
    "PosteriorSummary",
    "PsrfResult",
    "DensityTarget",
    "run_chains",
    "psrf",
    "effective_sample_size",
    "summarize",
    "kde_density",
    "hyper_matrix",
    "posterior_predictive",
]

_INIT_RETRIES = 100


class InitializationError(RuntimeError):
    """No finite-posterior starting point found after bounded retries."""


# ---------------------------------------------------------------------------
# Chain container.


@dataclass(frozen=True, eq=False)
class ChainSet:
    """Retained draws of several chains over one parameter vector.

    ``chains[k]`` is a (retained, dim) matrix; ``seeds[k]`` records what
    seeded chain ``k``; ``diagnostics[k]`` holds that chain's acceptance
    rates and proposal-scale snapshots (at adaptation freeze and final,
    asserted equal by the freeze tests).
    """

    chains: tuple[np.ndarray, ...]
    seeds: tuple[object, ...]
    burn_in_fraction: float
    thinning: int
    param_names: tuple[str, ...]
    diagnostics: tuple[dict, ...] = ()

    def __post_init__(self) -> None:
        if not self.chains:
            raise ValueError("ChainSet needs at least one chain")
        dim = self.chains[0].shape[1]
        for c in self.chains:
            if c.ndim != 2 or c.shape[1] != dim:
                raise ValueError("all chains must share the parameter dimension")
        if len(self.param_names) != dim:
            raise ValueError("param_names must match the parameter dimension")
        if len(self.seeds) != len(self.chains):
            raise ValueError("one seed per chain required")

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def dim(self) -> int:
        return self.chains[0].shape[1]

    @property
    def n_retained(self) -> int:
        return self.chains[0].shape[0]

    def param_index(self, param: int | str) -> int:
        if isinstance(param, str):
            try:
                return self.param_names.index(param)
            except ValueError:
                raise KeyError(f"unknown parameter {param!r}") from None
        return range(self.dim)[param]

    def pooled(self, param: int | str) -> np.ndarray:
        """All chains' draws of one parameter, concatenated in chain order."""
        j = self.param_index(param)
        return np.concatenate([c[:, j] for c in self.chains])


# ---------------------------------------------------------------------------
# Generic target for analytic densities.


class _GaussianWalkKernel:
    """Joint Gaussian random-walk Metropolis over the full vector."""

    def __init__(self, target: "DensityTarget") -> None:
        self.t = target
        self.log_scale = math.log(target.init_proposal_scale)
        self.accept_target = 0.44 if target.dim == 1 else 0.234
        self.updates = 0
        self.proposed = 0
        self.accepted = 0
        self.x = np.empty(target.dim)
        self._log_d = -math.inf
        self._initialized = False

    def reset(self, x0: np.ndarray) -> None:
        log_d = self.t.log_density(x0)
        if not math.isfinite(log_d):
            raise ValueError("kernel must start from a finite-density state")
        self.x = np.asarray(x0, dtype=float).copy()
        self._log_d = log_d
        self._initialized = True

    def step(self, rng: np.random.Generator, adapt: bool) -> np.ndarray:
        if not self._initialized:
            raise RuntimeError("call reset(x0) before stepping")
        prop = self.x + math.exp(self.log_scale) * rng.standard_normal(self.t.dim)
        log_d = self.t.log_density(prop)
        accepted = math.log(rng.random()) < log_d - self._log_d
        if accepted:
            self.x = prop
            self._log_d = log_d
        self.proposed += 1
        self.accepted += int(accepted)
        if adapt:
            self.updates += 1
            gain = (self.updates + 10.0) ** -0.6
            self.log_scale += gain * (float(accepted) - self.accept_target)
        return self.x

    def scales_snapshot(self) -> np.ndarray:
        return np.array([math.exp(self.log_scale)])

    def acceptance_rates(self) -> dict[str, float]:
        rate = self.accepted / self.proposed if self.proposed else math.nan
        return {"walk": rate}


class DensityTarget:
    """Wrap a log-density callable as a sampling target.

    ``init`` may be a fixed starting vector or a callable ``rng -> x``;
    by default starts from ``init_spread * N(0, I)`` draws.
    """

    def __init__(
        self,
        log_density: Callable[[np.ndarray], float],
        dim: int,
        *,
        param_names: Sequence[str] | None = None,
        init: np.ndarray | Callable | None = None,
        init_spread: float = 1.0,
        init_proposal_scale: float = 1.0,
    ) -> None:
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self._log_density = log_density
        self.dim = dim
        self.param_names = (
            list(param_names)
            if param_names is not None
            else [f"x{i}" for i in range(dim)]
        )
        if len(self.param_names) != dim:
            raise ValueError("param_names must have length dim")
        self._init = init
        self.init_spread = init_spread
        self.init_proposal_scale = init_proposal_scale

    def log_density(self, x: np.ndarray) -> float:
        return float(self._log_density(np.asarray(x, dtype=float)))

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        if callable(self._init):
            return np.asarray(self._init(rng), dtype=float)
        if self._init is not None:
            return np.asarray(self._init, dtype=float).copy()
        return self.init_spread * rng.standard_normal(self.dim)

    def make_kernel(self) -> _GaussianWalkKernel:
        return _GaussianWalkKernel(self)


# ---------------------------------------------------------------------------
# Multi-chain driver.


def _resolve_seeds(
    seeds: int | Sequence[int], n_chains: int
) -> tuple[list[np.random.SeedSequence], tuple[object, ...]]:
    """Per-chain RNG streams: spawn from a master seed, or one seed each."""
    if isinstance(seeds, (int, np.integer)):
        master = np.random.SeedSequence(int(seeds))
        return master.spawn(n_chains), tuple(
            (int(seeds), k) for k in range(n_chains)
        )
    seed_list = [int(s) for s in seeds]
    if len(seed_list) != n_chains:
        raise ValueError(f"need {n_chains} seeds, got {len(seed_list)}")
    if len(set(seed_list)) != n_chains:
        raise ValueError("per-chain seeds must be distinct")
    return [np.random.SeedSequence(s) for s in seed_list], tuple(seed_list)


def _starting_point(model, kernel, rng: np.random.Generator) -> np.ndarray:
    for _ in range(_INIT_RETRIES):
        x0 = model.initial_state(rng)
        if math.isfinite(model.log_density(x0)):
            return x0
    raise InitializationError(
        f"no finite-density starting point in {_INIT_RETRIES} attempts"
    )


def run_chains(
    model,
    n_chains: int = 4,
    n_iterations: int = 200_000,
    burn_in_fraction: float = 0.5,
    thinning: int = 20,
    seeds: int | Sequence[int] = 0,
    *,
    progress: Callable[[int, int], None] | None = None,
) -> ChainSet:
    """Run independent adaptive chains and return their retained draws.

    Proposal scales adapt only during the first
    ``int(n_iterations * burn_in_fraction)`` iterations; retained states
    are those at iteration indices ``burn_in + j*thinning`` (the start
    state counts as iteration 0).  Deterministic given ``seeds``, which
    is either one master seed (per-chain streams are spawned from it) or
    an explicit sequence of distinct per-chain seeds.
    """
    if n_chains < 2:
        raise ValueError("n_chains must be >= 2")
    if n_iterations < 1_000:
        raise ValueError("n_iterations must be >= 1000")
    if not 0.0 <= burn_in_fraction < 1.0:
        raise ValueError("burn_in_fraction must be in [0, 1)")
    if thinning < 1:
        raise ValueError("thinning must be >= 1")
    streams, seed_record = _resolve_seeds(seeds, n_chains)
    burn_in = int(n_iterations * burn_in_fraction)
    retain = range(burn_in, n_iterations + 1, thinning)

    chains: list[np.ndarray] = []
    diagnostics: list[dict] = []
    for k, stream in enumerate(streams):
        if progress is not None:
            progress(k, n_chains)
        rng = np.random.Generator(np.random.PCG64(stream))
        kernel = model.make_kernel()
        x0 = _starting_point(model, kernel, rng)
        kernel.reset(x0)
        draws = np.empty((len(retain), model.dim))
        pos = 0
        if burn_in == 0:
            draws[pos] = x0
            pos += 1
        scales_at_freeze = kernel.scales_snapshot() if burn_in == 0 else None
        for i in range(1, n_iterations + 1):
            x = kernel.step(rng, adapt=i <= burn_in)
            if i == burn_in:
                scales_at_freeze = kernel.scales_snapshot()
            if i >= burn_in and (i - burn_in) % thinning == 0:
                draws[pos] = x
                pos += 1
        if pos != draws.shape[0]:
            raise AssertionError("retention bookkeeping mismatch")
        chains.append(draws)
        diagnostics.append(
            {
                "acceptance": kernel.acceptance_rates(),
                "scales_at_freeze": scales_at_freeze,
                "scales_final": kernel.scales_snapshot(),
                "initial_state": x0,
            }
        )
    return ChainSet(
        chains=tuple(chains),
        seeds=seed_record,
        burn_in_fraction=burn_in_fraction,
        thinning=thinning,
        param_names=tuple(model.param_names),
        diagnostics=tuple(diagnostics),
    )


# ---------------------------------------------------------------------------
# Convergence diagnostics.


@dataclass(frozen=True)
class PsrfResult:
    """Univariate PSRF per parameter plus the multivariate statistic.

    Degenerate parameters (zero variance within and between chains) are
    listed in ``degenerate`` and excluded from the multivariate value;
    their univariate entry is NaN.
    """

    per_param: Mapping[str, float]
    multivariate: float
    degenerate: tuple[str, ...]


def psrf(chains: ChainSet, params: Sequence[int | str] | None = None) -> PsrfResult:
    """Brooks-Gelman potential scale reduction: sqrt(V_hat / W) per
    parameter, and the max-eigenvalue multivariate version."""
    if chains.n_chains < 2:
        raise ValueError("PSRF needs at least 2 chains")
    n = chains.n_retained
    if n < 100:
        raise ValueError("PSRF needs at least 100 retained draws per chain")
    if params is None:
        params = list(range(chains.dim))
    idx = [chains.param_index(p) for p in params]
    names = [chains.param_names[j] for j in idx]
    m = chains.n_chains
    stacked = np.stack([c[:, idx] for c in chains.chains])  # (m, n, p)

    means = stacked.mean(axis=1)  # (m, p)
    within = stacked.var(axis=1, ddof=1)  # (m, p)
    w = within.mean(axis=0)
    b_over_n = means.var(axis=0, ddof=1)  # B/n
    degenerate = (w == 0.0) & (b_over_n == 0.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        v_hat = (n - 1) / n * w + (1.0 + 1.0 / m) * b_over_n
        r = np.sqrt(v_hat / w)
    r[degenerate] = np.nan

    keep = ~degenerate
    multivariate = math.nan
    if keep.sum() >= 1:
        dev = stacked[:, :, keep] - means[:, None, keep]
        w_mat = np.einsum("mnp,mnq->pq", dev, dev) / (m * (n - 1))
        mean_dev = means[:, keep] - means[:, keep].mean(axis=0)
        b_mat_over_n = mean_dev.T @ mean_dev / (m - 1)
        try:
            lam = np.linalg.eigvals(np.linalg.solve(w_mat, b_mat_over_n))
            lam_max = float(np.max(lam.real))
            multivariate = math.sqrt((n - 1) / n + (1.0 + 1.0 / m) * lam_max)
        except np.linalg.LinAlgError:
            multivariate = math.nan
    per_param = {name: float(val) for name, val in zip(names, r)}
    return PsrfResult(
        per_param=per_param,
        multivariate=multivariate,
        degenerate=tuple(name for name, d in zip(names, degenerate) if d),
    )


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance estimates via FFT, lags 0..n-1."""
    n = x.size
    centered = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real
    return acov / n


def _geyer_tau(x: np.ndarray) -> float:
    """Integrated autocorrelation time (initial monotone positive sequence).

    Sums Gamma_m = rho(2m) + rho(2m+1) while positive, forcing the
    sequence non-increasing; for reversible chains these pair sums are
    positive and decreasing, making the truncation well defined.
    """
    acov = _autocovariance(x)
    if acov[0] <= 0:
        return math.inf
    rho = acov / acov[0]
    n_pairs = rho.size // 2
    gamma = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    tau = -1.0
    prev = math.inf
    for g in gamma:
        if g <= 0.0:
            break
        g = min(g, prev)
        prev = g
        tau += 2.0 * g
    return max(tau, 1e-3)


def effective_sample_size(chains: ChainSet, param: int | str) -> float:
    """Sum over chains of retained-draw count / autocorrelation time."""
    j = chains.param_index(param)
    total = 0.0
    for c in chains.chains:
        x = c[:, j]
        if np.all(x == x[0]):
            return math.nan
        total += x.size / _geyer_tau(x)
    return total


# ---------------------------------------------------------------------------
# Posterior summaries.


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Quantile summary, KDE grid, and effective sample size of one parameter."""

    name: str
    median: float
    mean: float
    ci50: tuple[float, float]
    ci90: tuple[float, float]
    ci95: tuple[float, float]
    grid: np.ndarray
    density: np.ndarray
    ess: float
    degenerate: bool

    def quantile_dict(self) -> dict[str, float]:
        """The JSON-facing scalar fields."""
        return {
            "median": self.median,
            "mean": self.mean,
            "q025": self.ci95[0],
            "q25": self.ci50[0],
            "q75": self.ci50[1],
            "q975": self.ci95[1],
        }


def _silverman_bandwidth(x: np.ndarray) -> float:
    sd = float(np.std(x))
    q75, q25 = np.percentile(x, [75.0, 25.0])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def _kde_grid(x: np.ndarray, n_grid: int = 512) -> tuple[np.ndarray, np.ndarray, bool]:
    """Gaussian KDE with Silverman bandwidth, normalized on its grid."""
    h = _silverman_bandwidth(x)
    degenerate = not (h > 0.0)
    if degenerate:
        # Constant (or near-constant) samples: emit a narrow spike so the
        # grid still integrates to one, and flag it.
        center = float(x[0])
        h = max(abs(center), 1.0) * 1e-8
    grid = np.linspace(x.min() - 3.0 * h, x.max() + 3.0 * h, n_grid)
    density = np.zeros(n_grid)
    norm = 1.0 / (x.size * h * math.sqrt(2.0 * math.pi))
    step = 1 << 14
    for start in range(0, x.size, step):
        block = x[start : start + step]
        z = (grid[:, None] - block[None, :]) / h
        density += norm * np.exp(-0.5 * z**2).sum(axis=1)
    area = float(np.trapezoid(density, grid))
    if area > 0:
        density /= area
    return grid, density, degenerate


def kde_density(
    samples: np.ndarray, n_grid: int = 512
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Gaussian KDE grid of raw samples: (grid, density, degenerate flag).

    Same estimator :func:`summarize` uses, exposed for densities of
    transformed samples (e.g. a parameter mapped to its reporting scale).
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples for density estimation")
    return _kde_grid(x, n_grid)


def summarize(chains: ChainSet, param: int | str, *, n_grid: int = 512) -> PosteriorSummary:
    """Pooled-chain quantiles, Silverman-bandwidth KDE, and Geyer ESS."""
    j = chains.param_index(param)
    pooled = chains.pooled(j)
    if pooled.size == 0:
        raise ValueError("no retained draws to summarize")
    q = np.percentile(pooled, [2.5, 5.0, 25.0, 50.0, 75.0, 95.0, 97.5])
    grid, density, degenerate = _kde_grid(pooled, n_grid)
    return PosteriorSummary(
        name=chains.param_names[j],
        median=float(q[3]),
        mean=float(pooled.mean()),
        ci50=(float(q[2]), float(q[4])),
        ci90=(float(q[1]), float(q[5])),
        ci95=(float(q[0]), float(q[6])),
        grid=grid,
        density=density,
        ess=effective_sample_size(chains, j),
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Posterior predictive draws.

_HYPER_COLUMNS = ("mu_lambda", "log_sigma_lambda", "mu_phi", "log_sigma_phi")


def hyper_matrix(chains: ChainSet) -> np.ndarray:
    """Pooled (mu_lambda, sigma_lambda, mu_phi, sigma_phi) rows from a fit."""
    cols = []
    for name in _HYPER_COLUMNS:
        col = chains.pooled(name)
        if name.startswith("log_sigma"):
            col = np.exp(col)
        cols.append(col)
    return np.column_stack(cols)


def posterior_predictive(
    hyper_samples: np.ndarray, n_draws: int, seed: int
) -> np.ndarray:
    """Draws of (lambda*, phi*) for a hypothetical new study.

    ``hyper_samples`` has rows (mu_lambda, sigma_lambda, mu_phi,
    sigma_phi).  Rows are put in canonical (lexicographic) order before
    being paired with the seeded noise stream, so permuting the input
    rows permutes nothing: the output is identical, which makes the
    draws exchangeable against the hyperparameter sample order.
    """
    rows = np.asarray(hyper_samples, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 4:
        raise ValueError("hyper_samples must be (n, 4)")
    if rows.shape[0] == 0:
        raise ValueError("need at least one hyperparameter draw")
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    order = np.lexsort(rows.T[::-1])
    rows = rows[order]
    picks = rows[np.arange(n_draws) % rows.shape[0]]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, 2))
    log_lam = picks[:, 0] + picks[:, 1] * z[:, 0]
    log_phi = picks[:, 2] + picks[:, 3] * z[:, 1]
    return np.column_stack([np.exp(log_lam), np.exp(log_phi)])
