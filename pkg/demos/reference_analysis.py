"""Classical pooling vs the Bayesian model on the bundled dataset.

The bundled 24 trials publish their results in four formats; only the 4
trials reporting a rate and standard error are usable by classical
random-effects pooling. This script pools those classically, then fits
the hierarchical model on the nested subsets A (4 rate-and-SE studies),
B (plus the 8 studies reporting both counts) and C (all 24) and prints
how the treatment-effect interval tightens as evidence is added.

Runs at a reduced scale by default (about two minutes on one core);
desk-scale settings (4 chains x 200000 iterations) reproduce the
reference numbers and take about ten minutes per subset.
"""

import argparse
import math
import time

from countsynth import hiermodel, sampler
from countsynth.evidence import (
    SubsetLabel,
    classify_subset,
    load_reference_dataset,
    reporting_crosstab,
)
from countsynth.metaclassic import rate_ratio_estimate, reml_pool


def main() -> None:
    cli = argparse.ArgumentParser(description=__doc__)
    cli.add_argument("--chains", type=int, default=2)
    cli.add_argument("--iters", type=int, default=20_000)
    cli.add_argument("--seed", type=int, default=0)
    args = cli.parse_args()

    studies = load_reference_dataset()
    tallies = reporting_crosstab(studies)
    print(f"{len(studies)} studies: {tallies['se_studies']} with rate and SE, "
          f"{tallies['both']} with both counts, {tallies['total_only']} with "
          f"totals only, {tallies['zero_only']} with zero-counts only")

    print("\nclassical random-effects pooling (REML), rate-and-SE studies:")
    estimates = []
    for study in studies:
        if SubsetLabel.A not in classify_subset(study):
            continue
        for arm in study.active_arms:
            if arm.has_se_pair:
                estimates.append(
                    rate_ratio_estimate(study.placebo_arm, arm, study.study_id)
                )
    pooled = reml_pool(estimates)
    lo, hi = pooled.ci95
    print(f"  rate ratio {pooled.effect:.3f} [{lo:.3f}, {hi:.3f}] "
          f"from {len(estimates)} estimates")

    print(f"\nhierarchical model ({args.chains} chains x {args.iters} "
          f"iterations, seed {args.seed}):")
    for label, caption in (
        ("A", "rate-and-SE studies only"),
        ("B", "plus both-count studies"),
        ("C", "all studies"),
    ):
        subset = [
            s for s in studies if SubsetLabel(label) in classify_subset(s)
        ]
        target = hiermodel.build_target(subset)
        start = time.perf_counter()
        chains = sampler.run_chains(
            target,
            n_chains=args.chains,
            n_iterations=args.iters,
            burn_in_fraction=0.5,
            thinning=10,
            seeds=args.seed,
        )
        elapsed = time.perf_counter() - start
        effect = sampler.summarize(chains, "log_theta")
        lo, hi = (math.exp(q) for q in effect.ci95)
        print(f"  subset {label} ({len(subset):2d} studies, {caption}): "
              f"theta {math.exp(effect.median):.3f} [{lo:.3f}, {hi:.3f}] "
              f" ({elapsed:.0f}s)")

    print("\nzero-count and total-only studies carry real information about "
          "the rate and\noverdispersion, so the interval narrows from A to C "
          "even though none of the\nadded studies reports a usable variance.")


if __name__ == "__main__":
    main()
