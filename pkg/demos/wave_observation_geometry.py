"""Same wave, two observation strips: one sees every light ray, one does not.

With data on (0,0.2) and (0.8,1) every characteristic meets the observed
region in finite time; with (0,0.2) alone the reflected rays escape it for a
while and the reconstruction degrades.

    python demos/wave_observation_geometry.py [iterations]
"""
import sys

from pinnda import metrics, problems, training

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1000

for spec_id in ("wave-gcc", "wave-nogcc"):
    spec = problems.get_spec(spec_id)
    hyper = training.Hyperparameters.for_problem(spec, max_iterations=iterations)
    record = training.train(spec, hyper, seed=0, n=3600)
    sup = metrics.sup_t_l2_error(spec, metrics.network_predictor(record.theta, record.arch))
    print(f"{spec_id:11s} {spec.description}")
    print(f"{'':11s} E_T={record.E_T:.2e}  sup_t relative L2 = {sup:.2f}%")
