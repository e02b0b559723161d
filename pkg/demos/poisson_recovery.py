"""Recover a Poisson solution on the unit square from data on a 3/4-square.

Trains one network, reports the generalization errors and asks whether the
training errors sit below the empirically fitted quadrature gap.

    python demos/poisson_recovery.py [iterations]
"""
import sys

from pinnda import metrics, problems, training

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

spec = problems.get_spec("poisson")
print(spec.description)
hyper = training.Hyperparameters.for_problem(spec, max_iterations=iterations)
record = training.train(spec, hyper, seed=0, n=400)
print(f"{record.iterations} L-BFGS iterations ({record.status}), counts {record.counts}")
print(f"training errors: E_d={record.E_dT:.2e}  E_p={record.E_pT:.2e}  E_T={record.E_T:.2e}")

report = metrics.evaluate(spec, record.theta, record.arch)
print(f"relative L2 {report.L2_pct:.3f}%   relative H1 {report.H1_pct:.3f}%")

# decay rates of the residual quadrature error over three set sizes
alpha, alpha_d = metrics.residual_decay_rates(spec, record.theta, record.arch, [100, 400, 1600])
diag = metrics.well_trained_check(
    record.E_pT, record.E_dT, record.counts["N_int"], record.counts["N_d"], alpha, alpha_d
)
print(f"well-trained check: {diag.status} (alpha={diag.alpha:.2f}, alpha_d={diag.alpha_d:.2f}; {diag.note})")
