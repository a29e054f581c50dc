"""Batch command-line front end.

Subcommands::

    countsynth validate  --input data.csv
    countsynth fit       --input data.csv --subset C --seed 0 --out DIR
    countsynth classic   --input data.csv --subset A
    countsynth simulate  --theta 0.75 --n-studies 20 --seed 1 --out DIR

Every command is a deterministic function of (input bytes, configuration,
seed); nothing reads the clock for randomness.  ``fit`` writes
``summary.json`` (schema in ``countsynth/schema/``), per-chain dumps under
``chains/``, kernel-density grids under ``density/``, posterior-predictive
draws in ``predictive.tsv``, and a human-readable ``report.txt``.

Exit codes: 0 success; 1 usage, parse, or data errors; 2 model errors, and
convergence failures when ``--strict`` is set.

Configuration may come from a flat ``key = value`` file via ``--config``;
command-line flags take precedence over the file, which takes precedence
over built-in defaults (see ``docs/configuration.md``).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from countsynth import __version__
from countsynth.evidence import (
    ArmRecord,
    ParseError,
    StudyRecord,
    SubsetLabel,
    TreatmentClass,
    classify_subset,
    derive_total,
    load_reference_dataset,
    parse_dataset,
    reporting_crosstab,
    serialize_dataset,
    subset_tallies,
)
from countsynth.hiermodel import (
    ModelBuildError,
    PriorSpec,
    build_target,
)
from countsynth.metaclassic import (
    EffectEstimate,
    dl_pool,
    rate_ratio_estimate,
    reml_pool,
)
from countsynth.nbcore import ImpossibleDataError, mle_fit
from countsynth.sampler import (
    ChainSet,
    InitializationError,
    hyper_matrix,
    kde_density,
    posterior_predictive,
    psrf,
    run_chains,
    summarize,
)

__all__ = ["RunConfig", "main", "cmd_validate", "cmd_fit", "cmd_classic", "cmd_simulate"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MODEL = 2

PSRF_THRESHOLD = 1.05

# Hyperparameters reported in summaries and checked for convergence.
_REPORT_PARAMS = (
    "log_theta",
    "mu_lambda",
    "log_sigma_lambda",
    "mu_phi",
    "log_sigma_phi",
    "log_sigma_psi",
)

_FIT_DEFAULTS = {
    "subset": "C",
    "chains": 4,
    "iters": 200_000,
    "burnin_frac": 0.5,
    "thin": 20,
    "seed": 0,
    "se_arms": "normal",
    "strict": False,
    "priors_only": False,
    "out": "countsynth-out",
}

_SIM_DEFAULTS = {
    "theta": 0.75,
    "n_studies": 20,
    "mix": "0.167,0.333,0.125,0.375",
    "seed": 0,
    "fit": False,
    "chains": 2,
    "iters": 40_000,
    "burnin_frac": 0.5,
    "thin": 10,
    "se_arms": "normal",
    "strict": False,
    "out": "countsynth-sim",
}

# Population used by `simulate` unless the flags override theta.
_SIM_TRUTH = {
    "mu_lambda": math.log(0.8),
    "sigma_lambda": 0.3,
    "mu_phi": math.log(0.5),
    "sigma_phi": 0.4,
    "sigma_psi": 0.1,
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration of one `fit` run."""

    input_path: Path | None  # None = packaged reference dataset
    subset: str = "C"
    chains: int = 4
    iterations: int = 200_000
    burn_in_fraction: float = 0.5
    thinning: int = 20
    seed: int = 0
    se_arms: str = "normal"
    strict: bool = False
    priors_only: bool = False
    out_dir: Path = Path("countsynth-out")

    def __post_init__(self) -> None:
        if self.subset not in ("A", "B", "C"):
            raise ValueError(f"subset must be A, B or C, got {self.subset!r}")
        if self.chains < 2:
            raise ValueError("chains must be >= 2")
        if self.iterations < 1_000:
            raise ValueError("iterations must be >= 1000")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn-in fraction must be in [0, 1)")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.se_arms not in ("normal", "counts"):
            raise ValueError("se-arms must be 'normal' or 'counts'")
        if not isinstance(self.seed, int):
            raise ValueError("seed must be an integer")
        burn_in = int(self.iterations * self.burn_in_fraction)
        retained = (self.iterations - burn_in) // self.thinning + 1
        if retained < 100:
            raise ValueError(
                f"configuration retains only {retained} draws per chain; "
                "diagnostics need >= 100 (lower --thin or raise --iters)"
            )


class _UsageError(Exception):
    """Raised for argument/config problems; mapped to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1, not argparse's 2
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Config file handling (flags > config file > defaults).


def _read_config_file(path: Path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; keys use flag names."""
    values: dict[str, str] = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise _UsageError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise _UsageError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _coerce_like(key: str, raw: str, default) -> object:
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise _UsageError(f"config key {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise _UsageError(f"config key {key}: expected an integer") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise _UsageError(f"config key {key}: expected a number") from None
    return raw


def _merge_options(args: argparse.Namespace, defaults: dict) -> dict:
    """Precedence: command-line flag > config file > built-in default."""
    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        file_values = _read_config_file(Path(args.config))
    merged = {}
    _missing = object()
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        file_raw = file_values.pop(key, _missing)
        if flag_value is not None:
            merged[key] = flag_value
        elif file_raw is not _missing:
            merged[key] = _coerce_like(key, file_raw, default)
        else:
            merged[key] = default
    for stray in file_values:
        if stray not in ("input",):
            raise _UsageError(f"config key {stray!r} is not recognized")
    if getattr(args, "input", None) is None and "input" in file_values:
        args.input = file_values["input"]
    return merged


# ---------------------------------------------------------------------------
# Shared helpers.


def _load_studies(input_arg: str | None) -> tuple[list[StudyRecord], str]:
    if input_arg is None:
        return list(load_reference_dataset()), "<packaged reference dataset>"
    path = Path(input_arg)
    return list(parse_dataset(path)), str(path)


def _select_subset(studies: Sequence[StudyRecord], label: str) -> list[StudyRecord]:
    want = SubsetLabel(label)
    return [s for s in studies if want in classify_subset(s)]


def _jsonable(value):
    """Recursively convert to JSON-safe types; non-finite floats -> null."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (np.floating, float)):
        f = float(value)
        return f if math.isfinite(f) else None
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    return value


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def _write_two_columns(path: Path, x: np.ndarray, y: np.ndarray) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for a, b in zip(x, y):
            fh.write(f"{a:.17g}\t{b:.17g}\n")


def _write_chain_tsv(path: Path, names: Sequence[str], draws: np.ndarray) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write("\t".join(names) + "\n")
        np.savetxt(fh, draws, fmt="%.17g", delimiter="\t")


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        studies, source = _load_studies(args.input)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    n_arms = sum(len(s.arms) for s in studies)
    tallies = subset_tallies(studies)
    cross = reporting_crosstab(studies)
    lines = [
        f"dataset: {source}",
        f"studies: {len(studies)}, arms: {n_arms}",
        "subset tallies: "
        + " ".join(f"{k.value}={v}" for k, v in sorted(tallies.items(), key=lambda kv: kv[0].value)),
        "reporting: "
        + f"rate-and-SE studies={cross['se_studies']}, total-only={cross['total_only']}, "
        + f"zero-only={cross['zero_only']}, both={cross['both']}, neither={cross['neither']}",
    ]

    checked = matched = 0
    mismatches: list[str] = []
    for study in studies:
        for arm in study.arms:
            if arm.rate_est is None or arm.total is None:
                continue
            checked += 1
            implied = derive_total(arm.rate_est, arm.n_patients, study.duration)
            if implied == arm.total:
                matched += 1
            else:
                mismatches.append(
                    f"  {study.study_id} ({arm.treatment_class.value} arm): "
                    f"reported total {arm.total}, rate implies {implied}"
                )
    lines.append(f"derived totals: {matched} of {checked} rate-and-total arms match exactly")
    if mismatches:
        lines.append("note: mismatching rows (data as published):")
        lines.extend(mismatches)

    # Cross-field impossibilities the model would refuse to fit.
    violations: list[str] = []
    for study in studies:
        for arm in study.arms:
            if arm.total is None or arm.zeroes is None:
                continue
            where = f"{study.study_id} ({arm.treatment_class.value} arm)"
            if arm.zeroes == arm.n_patients and arm.total > 0:
                violations.append(
                    f"  {where}: every patient event-free but total = {arm.total}"
                )
            elif arm.total < arm.n_patients - arm.zeroes:
                violations.append(
                    f"  {where}: {arm.n_patients - arm.zeroes} patients with "
                    f"events force total >= that, got {arm.total}"
                )
    if violations:
        lines.append("violations:")
        lines.extend(violations)
        print("\n".join(lines))
        return EXIT_USAGE
    lines.append("violations: none")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    opts = _merge_options(args, _FIT_DEFAULTS)
    try:
        return RunConfig(
            input_path=Path(args.input) if args.input else None,
            subset=opts["subset"],
            chains=opts["chains"],
            iterations=opts["iters"],
            burn_in_fraction=opts["burnin_frac"],
            thinning=opts["thin"],
            seed=opts["seed"],
            se_arms=opts["se_arms"],
            strict=opts["strict"],
            priors_only=opts["priors_only"],
            out_dir=Path(opts["out"]),
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc


def _fit_summary_payload(
    config: RunConfig,
    source: str,
    n_studies: int,
    chain_set: ChainSet,
) -> tuple[dict, list[str]]:
    summaries = {name: summarize(chain_set, name) for name in chain_set.param_names}
    diag = psrf(chain_set, list(chain_set.param_names))

    parameters = {}
    for name, summ in summaries.items():
        entry = summ.quantile_dict()
        entry["psrf"] = diag.per_param[name]
        entry["ess"] = summ.ess
        parameters[name] = entry

    hyper_psrf = psrf(chain_set, list(_REPORT_PARAMS))
    log_theta = chain_set.pooled("log_theta")
    theta_q = np.percentile(log_theta, [2.5, 50.0, 97.5])

    warnings: list[str] = []
    bad = {
        name: value
        for name, value in hyper_psrf.per_param.items()
        if not (value < PSRF_THRESHOLD)
    }
    converged = not bad
    if bad:
        listed = ", ".join(f"{k}={v:.4f}" for k, v in sorted(bad.items()))
        warnings.append(
            f"convergence: PSRF >= {PSRF_THRESHOLD} on: {listed}"
        )

    payload = {
        "command": "fit",
        "version": __version__,
        "input": source,
        "subset": config.subset,
        "n_studies": n_studies,
        "config": {
            "chains": config.chains,
            "iterations": config.iterations,
            "burn_in_fraction": config.burn_in_fraction,
            "thinning": config.thinning,
            "seed": config.seed,
            "se_arms": config.se_arms,
            "priors_only": config.priors_only,
        },
        "theta": {
            "median": math.exp(theta_q[1]),
            "ci95": [math.exp(theta_q[0]), math.exp(theta_q[2])],
        },
        "parameters": parameters,
        "psrf_multivariate": hyper_psrf.multivariate,
        "converged": converged,
        "warnings": warnings,
    }
    return payload, warnings


def _write_fit_outputs(
    config: RunConfig,
    payload: dict,
    chain_set: ChainSet,
    elapsed: float,
) -> None:
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "chains").mkdir(exist_ok=True)
    (out / "density").mkdir(exist_ok=True)

    _write_json(out / "summary.json", payload)

    for k, draws in enumerate(chain_set.chains, start=1):
        _write_chain_tsv(out / "chains" / f"chain-{k}.tsv", chain_set.param_names, draws)

    # Density grids: sampled-scale hyperparameters plus the rate ratio and
    # the predictive (lambda*, phi*) marginals on their reporting scales.
    for name in _REPORT_PARAMS:
        grid, dens, _ = kde_density(chain_set.pooled(name))
        _write_two_columns(out / "density" / f"{name}.tsv", grid, dens)
    theta_samples = np.exp(chain_set.pooled("log_theta"))
    grid, dens, _ = kde_density(theta_samples)
    _write_two_columns(out / "density" / "theta.tsv", grid, dens)

    hypers = hyper_matrix(chain_set)
    predictive = posterior_predictive(hypers, hypers.shape[0], seed=config.seed)
    with (out / "predictive.tsv").open("w", encoding="utf-8") as fh:
        fh.write("lambda_star\tphi_star\n")
        np.savetxt(fh, predictive, fmt="%.17g", delimiter="\t")
    for j, name in enumerate(("lambda_star", "phi_star")):
        grid, dens, _ = kde_density(np.log(predictive[:, j]))
        _write_two_columns(out / "density" / f"log_{name}.tsv", grid, dens)

    lines = [
        "countsynth fit report",
        f"input: {payload['input']}",
        f"subset: {config.subset} ({payload['n_studies']} studies)",
        f"sampler: {config.chains} chains x {config.iterations} iterations, "
        f"burn-in fraction {config.burn_in_fraction}, thinning {config.thinning}, "
        f"seed {config.seed}, SE arms {config.se_arms}"
        + (", priors only" if config.priors_only else ""),
        f"retained draws: {chain_set.n_retained} per chain",
        f"elapsed: {elapsed:.1f} s",
        "",
        f"rate ratio theta: median {payload['theta']['median']:.4f}, "
        f"95% interval [{payload['theta']['ci95'][0]:.4f}, {payload['theta']['ci95'][1]:.4f}]",
        "",
        "hyperparameters (sampled scale):",
        f"  {'name':<18} {'median':>9} {'q025':>9} {'q975':>9} {'psrf':>7} {'ess':>9}",
    ]
    for name in _REPORT_PARAMS:
        entry = payload["parameters"][name]
        psrf_txt = "nan" if entry["psrf"] is None else f"{entry['psrf']:.4f}"
        lines.append(
            f"  {name:<18} {entry['median']:>9.4f} {entry['q025']:>9.4f} "
            f"{entry['q975']:>9.4f} {psrf_txt:>7} {entry['ess']:>9.0f}"
        )
    mv = payload["psrf_multivariate"]
    lines.append(
        "multivariate PSRF (hyperparameters): "
        + ("nan" if mv is None else f"{mv:.4f}")
    )
    lines.append("")
    lines.append("acceptance rates per move family (chain 1):")
    for block, rate in chain_set.diagnostics[0]["acceptance"].items():
        lines.append(f"  {block:<24} {rate:.3f}")
    lines.append("")
    lines.append(
        "convergence: " + ("PASS" if payload["converged"] else "CHECK FAILED")
        + f" (threshold PSRF < {PSRF_THRESHOLD})"
    )
    if payload["warnings"]:
        lines.extend(f"warning: {w}" for w in payload["warnings"])
    else:
        lines.append("warnings: none")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_fit(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    try:
        studies, source = _load_studies(args.input)
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    selected = _select_subset(studies, config.subset)
    if not selected:
        print(f"error: subset {config.subset} selects no studies", file=sys.stderr)
        return EXIT_USAGE

    try:
        target = build_target(
            selected,
            PriorSpec(),
            se_arms=config.se_arms,
            include_likelihood=not config.priors_only,
        )
        t0 = time.perf_counter()
        chain_set = run_chains(
            target,
            n_chains=config.chains,
            n_iterations=config.iterations,
            burn_in_fraction=config.burn_in_fraction,
            thinning=config.thinning,
            seeds=config.seed,
            progress=lambda k, n: print(
                f"sampling chain {k + 1}/{n} ...", file=sys.stderr, flush=True
            ),
        )
        elapsed = time.perf_counter() - t0
    except (ModelBuildError, ImpossibleDataError, InitializationError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL

    payload, warnings = _fit_summary_payload(config, source, len(selected), chain_set)
    _write_fit_outputs(config, payload, chain_set, elapsed)

    print(
        f"theta median {payload['theta']['median']:.4f} "
        f"[{payload['theta']['ci95'][0]:.4f}, {payload['theta']['ci95'][1]:.4f}] "
        f"(subset {config.subset}, {len(selected)} studies); "
        f"outputs in {config.out_dir}"
    )
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if warnings and config.strict:
        return EXIT_MODEL
    return EXIT_OK


# ---------------------------------------------------------------------------
# classic


def cmd_classic(args: argparse.Namespace) -> int:
    try:
        studies, source = _load_studies(args.input)
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    subset = args.subset if args.subset is not None else "A"
    selected = _select_subset(studies, subset)

    estimates: list[EffectEstimate] = []
    for study in selected:
        placebo = study.placebo_arm
        if not placebo.has_se_pair:
            continue
        for arm in study.active_arms:
            if arm.has_se_pair:
                estimates.append(rate_ratio_estimate(placebo, arm, study.study_id))
    if not estimates:
        print(
            f"error: no studies in subset {subset} carry rate-and-SE pairs",
            file=sys.stderr,
        )
        return EXIT_USAGE

    method = args.method if args.method is not None else "reml"
    pooled = reml_pool(estimates) if method == "reml" else dl_pool(estimates)

    header = f"{'study':<24} {'ratio':>8} {'log':>9} {'se':>8}"
    lines = [f"classical random-effects pooling ({method.upper()}), subset {subset}", header]
    for est in estimates:
        lines.append(
            f"{est.study_id:<24} {math.exp(est.log_effect):>8.4f} "
            f"{est.log_effect:>9.4f} {est.std_err:>8.4f}"
        )
    lo, hi = pooled.ci95
    lines.append(
        f"pooled: ratio {pooled.effect:.4f}, 95% CI [{lo:.4f}, {hi:.4f}], "
        f"tau^2 {pooled.tau_sq:.5f}"
    )
    print("\n".join(lines))

    payload = {
        "command": "classic",
        "input": source,
        "subset": subset,
        "method": method,
        "estimates": [
            {
                "study": est.study_id,
                "log_effect": est.log_effect,
                "std_err": est.std_err,
            }
            for est in estimates
        ],
        "pooled": {
            "effect": pooled.effect,
            "log_effect": pooled.pooled_log_effect,
            "std_err": pooled.std_err,
            "tau_sq": pooled.tau_sq,
            "ci95": list(pooled.ci95),
        },
    }
    print(json.dumps(_jsonable(payload), sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "classic.json", payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _mix_counts(mix: str, n_studies: int) -> dict[str, int]:
    """Largest-remainder allocation of study reporting formats.

    ``mix`` holds four comma-separated weights in the order
    (se, both, total, zero); they are normalized before allocation.
    """
    try:
        weights = [float(w) for w in mix.split(",")]
    except ValueError:
        raise _UsageError("--mix expects four comma-separated numbers") from None
    if len(weights) != 4 or any(w < 0 for w in weights) or sum(weights) <= 0:
        raise _UsageError("--mix expects four nonnegative weights, not all zero")
    total = sum(weights)
    exact = [w / total * n_studies for w in weights]
    counts = [int(e) for e in exact]
    remainder = n_studies - sum(counts)
    by_frac = sorted(
        range(4), key=lambda j: (-(exact[j] - counts[j]), j)
    )
    for j in by_frac[:remainder]:
        counts[j] += 1
    return dict(zip(("se", "both", "total", "zero"), counts))


def simulate_dataset(
    theta: float,
    n_studies: int,
    mix: str,
    seed: int,
) -> tuple[list[StudyRecord], dict, list[np.ndarray]]:
    """Generate a synthetic dataset with per-patient counts.

    Returns (studies, truth, per-arm individual count arrays in arm
    order) so callers can verify aggregation bookkeeping exactly.
    """
    rng = np.random.default_rng(seed)
    counts_by_format = _mix_counts(mix, n_studies)
    formats: list[str] = []
    for name in ("se", "both", "total", "zero"):
        formats.extend([name] * counts_by_format[name])

    truth = dict(_SIM_TRUTH)
    truth["theta"] = theta
    studies: list[StudyRecord] = []
    raw_counts: list[np.ndarray] = []
    for i in range(n_studies):
        duration = float(rng.choice([0.5, 1.0, 2.0]))
        lam = math.exp(rng.normal(truth["mu_lambda"], truth["sigma_lambda"]))
        phi = math.exp(rng.normal(truth["mu_phi"], truth["sigma_phi"]))
        psi = math.exp(rng.standard_t(3) * truth["sigma_psi"])
        fmt = formats[i]
        arms: list[ArmRecord] = []
        for tclass, rate in (
            (TreatmentClass.PLACEBO, lam),
            (TreatmentClass.ACTIVE, lam * theta * psi),
        ):
            n = int(rng.integers(50, 401))
            m = rate * duration
            # Gamma-Poisson mixture: mean m, variance m(1 + phi*m).
            gamma_draw = rng.gamma(1.0 / phi, phi * m, size=n)
            counts = rng.poisson(gamma_draw)
            raw_counts.append(counts)
            total = int(counts.sum())
            zeroes = int(np.count_nonzero(counts == 0))
            if fmt == "se" and total > 0:
                fit = mle_fit(counts, duration)
                arms.append(
                    ArmRecord(
                        treatment_class=tclass,
                        n_patients=n,
                        rate_est=fit.rate,
                        std_err=fit.se_rate,
                    )
                )
            elif fmt in ("se", "both"):
                # A no-event arm cannot publish a positive rate estimate;
                # fall back to the count pair, which carries the same news.
                arms.append(
                    ArmRecord(
                        treatment_class=tclass,
                        n_patients=n,
                        total=total,
                        zeroes=zeroes,
                    )
                )
            elif fmt == "total":
                arms.append(
                    ArmRecord(treatment_class=tclass, n_patients=n, total=total)
                )
            else:
                arms.append(
                    ArmRecord(treatment_class=tclass, n_patients=n, zeroes=zeroes)
                )
        studies.append(
            StudyRecord(
                study_id=f"Synthetic {i + 1:02d}",
                duration=duration,
                arms=tuple(arms),
            )
        )
    return studies, truth, raw_counts


def cmd_simulate(args: argparse.Namespace) -> int:
    opts = _merge_options(args, _SIM_DEFAULTS)
    if opts["n_studies"] < 1:
        raise _UsageError("--n-studies must be >= 1")
    if not 0 < opts["theta"]:
        raise _UsageError("--theta must be > 0")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)

    studies, truth, _ = simulate_dataset(
        opts["theta"], opts["n_studies"], opts["mix"], opts["seed"]
    )
    csv_path = out / "simulated.csv"
    csv_path.write_text(serialize_dataset(studies), encoding="utf-8")
    _write_json(
        out / "truth.json",
        {
            "command": "simulate",
            "seed": opts["seed"],
            "n_studies": opts["n_studies"],
            "mix": opts["mix"],
            "truth": truth,
        },
    )
    tallies = subset_tallies(studies)
    print(
        f"wrote {csv_path} ({len(studies)} studies; subsets "
        + " ".join(f"{k.value}={v}" for k, v in sorted(tallies.items(), key=lambda kv: kv[0].value))
        + ")"
    )
    if not opts["fit"]:
        return EXIT_OK

    try:
        config = RunConfig(
            input_path=csv_path,
            subset="C",
            chains=opts["chains"],
            iterations=opts["iters"],
            burn_in_fraction=opts["burnin_frac"],
            thinning=opts["thin"],
            seed=opts["seed"],
            se_arms=opts["se_arms"],
            strict=opts["strict"],
            out_dir=out,
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc
    selected = _select_subset(studies, "C")
    try:
        target = build_target(selected, PriorSpec(), se_arms=config.se_arms)
        t0 = time.perf_counter()
        chain_set = run_chains(
            target,
            n_chains=config.chains,
            n_iterations=config.iterations,
            burn_in_fraction=config.burn_in_fraction,
            thinning=config.thinning,
            seeds=config.seed,
            progress=lambda k, n: print(
                f"sampling chain {k + 1}/{n} ...", file=sys.stderr, flush=True
            ),
        )
        elapsed = time.perf_counter() - t0
    except (ModelBuildError, ImpossibleDataError, InitializationError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL

    payload, warnings = _fit_summary_payload(
        config, str(csv_path), len(selected), chain_set
    )
    _write_fit_outputs(config, payload, chain_set, elapsed)

    median = payload["theta"]["median"]
    lo, hi = payload["theta"]["ci95"]
    covered = lo <= opts["theta"] <= hi
    recovery = {
        "command": "simulate",
        "theta_true": opts["theta"],
        "theta_median": median,
        "theta_ci95": [lo, hi],
        "abs_error": abs(median - opts["theta"]),
        "covered": covered,
        "seed": opts["seed"],
    }
    _write_json(out / "recovery.json", recovery)
    print(
        f"recovery: true {opts['theta']:.3f}, posterior median {median:.3f} "
        f"[{lo:.3f}, {hi:.3f}], covered={covered}"
    )
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if warnings and config.strict:
        return EXIT_MODEL
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument wiring.


def _add_fit_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--chains", type=int)
    sub.add_argument("--iters", type=int)
    sub.add_argument("--burnin-frac", type=float, dest="burnin_frac")
    sub.add_argument("--thin", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--se-arms", choices=("normal", "counts"), dest="se_arms")
    sub.add_argument("--strict", action="store_const", const=True, default=None)
    sub.add_argument("--out")
    sub.add_argument("--config", help="flat key = value configuration file")


def build_parser() -> _Parser:
    parser = _Parser(prog="countsynth", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"countsynth {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p_val = commands.add_parser("validate", help="check a dataset and print tallies")
    p_val.add_argument("--input", help="evidence CSV (default: packaged dataset)")
    p_val.set_defaults(func=cmd_validate)

    p_fit = commands.add_parser("fit", help="run the hierarchical Bayesian fit")
    p_fit.add_argument("--input", help="evidence CSV (default: packaged dataset)")
    p_fit.add_argument("--subset", choices=("A", "B", "C"))
    p_fit.add_argument(
        "--priors-only",
        action="store_const",
        const=True,
        default=None,
        dest="priors_only",
        help="sample the prior (likelihood disabled)",
    )
    _add_fit_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_cls = commands.add_parser("classic", help="classical random-effects comparator")
    p_cls.add_argument("--input", help="evidence CSV (default: packaged dataset)")
    p_cls.add_argument("--subset", choices=("A", "B", "C"))
    p_cls.add_argument("--method", choices=("reml", "dl"))
    p_cls.add_argument("--out")
    p_cls.set_defaults(func=cmd_classic)

    p_sim = commands.add_parser("simulate", help="synthesize data; optionally refit")
    p_sim.add_argument("--theta", type=float, help="true rate ratio")
    p_sim.add_argument("--n-studies", type=int, dest="n_studies")
    p_sim.add_argument(
        "--mix",
        help="se,both,total,zero study-format weights (default Table-1-like)",
    )
    p_sim.add_argument(
        "--fit",
        action="store_const",
        const=True,
        default=None,
        help="fit the synthetic dataset and report recovery",
    )
    _add_fit_flags(p_sim)
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
