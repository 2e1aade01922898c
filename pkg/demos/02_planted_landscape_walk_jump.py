"""Jumps cross barriers that walks crawl over.

A planted landscape hides a few known low-energy token sequences behind
coupling barriers; construction enumerates all K^L discrete energies, so the
modes are ground truth, not hope. Two chains target the same distribution
(landscape plus a weak confining quadratic, which keeps the continuous
target normalizable): one walk-only, one mixing in masked-model-guided
jumps. Watch how often each visits a planted mode and how many distinct
modes each finds.
"""

import numpy as np

from rss import (
    CompositeEnergy,
    GaussianEnergy,
    MaskedSequenceModel,
    Rng,
    SamplerConfig,
    argmax_decode,
    mode_occupancy,
    planted_landscape,
    run_chain,
)

L, K = 6, 4
landscape = planted_landscape(L, K, n_modes=3, depth=2.5, rng=Rng(42))
print("planted modes (tokens):")
for m in landscape.modes:
    print("   ", [int(t) for t in m],
          " discrete energy", round(landscape.energy.discrete_energy(m), 3))
print("median discrete energy   :", round(landscape.median_energy, 3))

energy = CompositeEnergy(landscape.energy, GaussianEnergy(np.zeros((L, K)), 2.5), 1.0)
model = MaskedSequenceModel.random(L, K, width=16, rng=Rng(9))


def explore(p_jump, seed):
    cfg = SamplerConfig(
        beta=1.0, eta=0.1, p_jump=p_jump, kappa=0.5, gamma=2.5, tau=1.0,
        steps=40_000, adapt_eta=True, burn_in=4_000, mask_mode="exact",
    )
    summary = run_chain(0.5 * Rng(seed).normal((L, K)), cfg, energy,
                        model=model, rng=Rng(seed), snapshot_stride=50)
    decoded = np.stack([argmax_decode(s) for (t, s) in summary.snapshots
                        if t > cfg.burn_in])
    counts = mode_occupancy(decoded, landscape.modes, radius=1)
    label = f"p_jump={p_jump:.1f}"
    visited = int(np.count_nonzero(counts[:-1]))
    print(f"{label}: mode visits {counts[:-1].tolist()} other {counts[-1]} "
          f"| distinct modes visited {visited}/{len(landscape.modes)} "
          f"| walk acc {summary.post_burn_in_walk_acceptance:.2f}", end="")
    if p_jump > 0:
        print(f" jump acc {summary.post_burn_in_jump_acceptance:.2f}")
    else:
        print()


print("\nsame target, two kernels:")
explore(0.0, seed=101)
explore(0.2, seed=202)
print("\nBoth histograms estimate the same stationary occupancy; the mixture")
print("chain just decorrelates faster across basins (compare the visit spread).")
