"""Evidence synthesis for event rates and overdispersion from aggregate count data.

The package combines study arms that report their results in different
aggregate formats (event rate with standard error, total event count,
count of event-free patients, or both counts) under one hierarchical
negative-binomial model, sampled with a self-contained MCMC engine.
A classical random-effects comparator and exact small-instance oracles
for every distributional approximation are included.

Modules
-------
nbcore
    Poisson / negative-binomial probability computations: zero
    probabilities, truncated moments, approximate and exact joint
    (total, zero-count) likelihoods, maximum likelihood fitting.
evidence
    Study records, CSV ingestion, subset classification, report-format
    conversions.
hiermodel
    The hierarchical Bayesian model: state vector, priors, likelihood
    routing, posterior evaluation, and the blocked sampling target.
sampler
    Generic adaptive random-walk Metropolis engine, chain management,
    convergence diagnostics, posterior summaries, predictive draws.
metaclassic
    Classical random-effects pooling of log rate ratios and the
    odds-ratio / rate-ratio conversion identities.
cli
    Batch command line interface (`countsynth`).
"""

from countsynth.nbcore import (
    AggregateObservation,
    NbParams,
    TruncatedMoments,
    exact_joint_pmf,
    joint_log_lik,
    mle_fit,
    nb_log_pmf,
    total_count_moments,
    total_only_log_lik,
    truncated_moments,
    zero_only_log_lik,
    zero_prob,
)
from countsynth.evidence import (
    ArmRecord,
    StudyRecord,
    SubsetLabel,
    classify_subset,
    derive_total,
    load_reference_dataset,
    parse_dataset,
    se_from_ci,
    serialize_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateObservation",
    "ArmRecord",
    "NbParams",
    "StudyRecord",
    "SubsetLabel",
    "TruncatedMoments",
    "classify_subset",
    "derive_total",
    "exact_joint_pmf",
    "joint_log_lik",
    "load_reference_dataset",
    "mle_fit",
    "nb_log_pmf",
    "parse_dataset",
    "se_from_ci",
    "serialize_dataset",
    "total_count_moments",
    "total_only_log_lik",
    "truncated_moments",
    "zero_only_log_lik",
    "zero_prob",
    "__version__",
]
