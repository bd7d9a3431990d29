"""The four-way comparison behind the headline claim.

On the pinned shifted benchmark, four training recipes share the identical
dataset and seed stream:

  source_only   no adaptation; one normalization over the whole batch
  unified       all sources pooled as one domain, aligned against the target
  discovery     k latent domains inferred by the prediction branch
  multi_source  true domain labels revealed and fixed (the reference ceiling)

The expected ordering is source_only < unified < discovery <= multi_source:
pooling shifted sources loses what per-domain alignment preserves, and
discovering the domains recovers almost all of the headroom.
"""

import time

from mdalign.experiments import default_experiment, run_baseline_grid, summarize

seeds = [0, 1, 2]  # the acceptance suite uses five; three keeps this demo brisk

start = time.time()
rows = run_baseline_grid(default_experiment(), seeds)
elapsed = time.time() - start

print(f"{len(rows)} runs in {elapsed:.0f}s\n")
print(f"{'configuration':<14} {'median acc':>10} {'mean acc':>9}   per-seed")
for entry in summarize(rows, "config"):
    label = entry["config"]
    per_seed = [f"{r['acc']:.3f}" for r in rows if r["config"] == label]
    print(f"{label:<14} {entry['median']:>10.3f} {entry['mean']:>9.3f}   {' '.join(per_seed)}")

med = {e["config"]: e["median"] for e in summarize(rows, "config")}
print()
print(f"discovery gains {100 * (med['discovery'] - med['source_only']):.1f} points over no adaptation")
print(f"and sits {100 * (med['multi_source'] - med['discovery']):.1f} points from the known-domain ceiling")

nmi = {e["config"]: e["median"] for e in summarize(rows, "config", "nmi")}
print(f"median discovery NMI against the hidden partition: {nmi['discovery']:.3f}")
