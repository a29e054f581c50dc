"""Tour of the negative-binomial count-model primitives.

Runs in a few seconds and prints, for one parameter setting at a time:
the pmf and zero probability, how overdispersion inflates the total-count
variance, the zero-truncated moments, the accuracy of the factorized
(total, zero-count) likelihood against the exact convolution, and the
rate-ratio to odds-ratio conversion.
"""

import math

import numpy as np

from countsynth.metaclassic import nb_odds_ratio, poisson_odds_ratio
from countsynth.nbcore import (
    NbParams,
    exact_joint_pmf,
    joint_log_lik,
    nb_log_pmf,
    total_count_moments,
    truncated_moments,
    zero_prob,
)


def main() -> None:
    params = NbParams(rate=0.8, overdispersion=0.5, exposure=1.0)
    print(f"one patient, rate 0.8/yr, overdispersion 0.5, one year:")
    print(f"  P(0 events) = {math.exp(nb_log_pmf(0, params)):.4f}"
          f"  (zero_prob agrees: {zero_prob(params):.4f})")
    for x in range(1, 5):
        print(f"  P({x} events) = {math.exp(nb_log_pmf(x, params)):.4f}")

    print("\ntotal events in a 100-patient arm:")
    for phi in (0.0, 0.5, 2.0):
        mean, var = total_count_moments(100, NbParams(0.8, phi, 1.0))
        print(f"  phi={phi:3.1f}: mean {mean:6.1f}, variance {var:7.1f}"
              f"  (Poisson would be {mean:.1f})")

    print("\namong patients with at least one event (zero-truncated):")
    tm = truncated_moments(params)
    print(f"  P(zero) = {tm.zero_prob:.4f}, mean = {tm.trunc_mean:.4f}, "
          f"variance = {tm.trunc_var:.4f}")

    # Studies often report the event total and the number of event-free
    # patients together. The exact joint distribution of that pair is a
    # convolution; the model uses a factorized approximation instead.
    # Compare the two on the distribution of the total.
    print("\nfactorized vs exact likelihood of (total, zero-count):")
    for n, max_total in ((5, 300), (20, 1200), (30, 1500)):
        exact = exact_joint_pmf(n, params, max_total).sum(axis=1)
        approx = np.zeros_like(exact)
        for z in range(n + 1):
            for t in range(max_total + 1):
                if z == n and t > 0:
                    continue
                approx[t] += math.exp(joint_log_lik(t, z, n, params))
        tv = 0.5 * float(np.abs(approx - exact).sum())
        print(f"  n={n:3d}: total-variation distance {tv:.4f}")
    print("  the approximation error shrinks roughly like 1/sqrt(n)")

    print("\nrate ratio 0.75 expressed as an odds ratio of being event-free:")
    for m in (0.5, 1.0, 2.0):
        po = poisson_odds_ratio(0.75, m, 1.0)
        nb = nb_odds_ratio(0.75, m, 1.0, 0.5)
        print(f"  mean {m:3.1f} events: Poisson OR {po:.4f}, "
              f"NB(phi=0.5) OR {nb:.4f}")
    print(f"  at phi=1 the OR equals the rate ratio exactly: "
          f"{nb_odds_ratio(0.75, 1.0, 1.0, 1.0)}")


if __name__ == "__main__":
    main()
