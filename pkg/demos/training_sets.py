"""Inspect the collocation and observation sets each problem trains on.

Prints the interior / boundary / data split and the total quadrature weight
of each set (which equals the measure of the region it samples), then writes
the Stokes sets to CSV for plotting.

    python demos/training_sets.py [out.csv]
"""
import sys

from pinnda import problems

for spec_id in ("poisson", "heat1d", "heatnd:5", "wave-gcc", "wave-nogcc", "stokes"):
    spec = problems.get_spec(spec_id)
    sets = problems.make_training_sets(spec, seed=0)
    weights = ", ".join(f"{label}={q.total_weight():.4f}" for label, q in sets.labelled_points())
    print(f"{spec_id:11s} {sets.counts}  weights: {weights}")

out = sys.argv[1] if len(sys.argv) > 1 else "stokes_points.csv"
sets = problems.make_training_sets(problems.get_spec("stokes"), seed=0)
for label, q in sets.labelled_points():
    q.to_csv(out.replace(".csv", f"_{label}.csv"), label=label)
print("wrote", out.replace(".csv", "_<set>.csv"))
