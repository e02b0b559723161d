"""Generalization errors against the exact solutions, and training diagnostics.

All relative errors are percentages, ``100 * |u - u*| / |u|`` with the same
norm and test set on both sides.  Pass ``predict`` (a callable mapping points
to network outputs) to evaluate anything, e.g. an oracle field in tests.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network as nw
from .problems import ProblemSpec, make_training_sets, pde_residuals
from .quadrature import Box, QuadratureSet, TimeSlab, integrate, midpoint_grid, uniform_random

Predict = Callable[[np.ndarray], np.ndarray]

TEST_RESOLUTION = 200
RANDOM_TEST_POINTS = 100_000
RANDOM_TEST_SEED = 20_240_101
SUP_T_SLICES = 101


@dataclass
class ErrorReport:
    L2_pct: float
    H1_pct: float | None = None
    supL2_pct: float | None = None
    p_L2_pct: float | None = None
    E_dT: float | None = None
    E_pT: float | None = None
    E_sbT: float | None = None
    E_T: float | None = None
    test_set: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


# -- test sets ----------------------------------------------------------------


def default_test_set(spec: ProblemSpec, n_random: int = RANDOM_TEST_POINTS, seed: int = RANDOM_TEST_SEED) -> QuadratureSet:
    """200 midpoints per axis in two input dimensions, else uniform random points.

    The n-dimensional heat family always uses random points, whatever n.
    """
    box = spec.domain.as_box() if isinstance(spec.domain, TimeSlab) else spec.domain
    if box.dim <= 2 and not spec.id.startswith("heatnd:"):
        return midpoint_grid(TEST_RESOLUTION, box)
    return uniform_random(n_random, box, seed)


def describe(test: QuadratureSet) -> dict:
    out = {"rule": test.rule, "count": len(test)}
    if "shape" in test.meta:
        out["shape"] = list(test.meta["shape"])
    if "seed" in test.meta:
        out["seed"] = test.meta["seed"]
    return out


def network_predictor(theta: np.ndarray, arch: nw.MLPArchitecture) -> Predict:
    return lambda x: nw.forward(theta, arch, x)


# -- errors -------------------------------------------------------------------


def _norm(test: QuadratureSet, v: np.ndarray) -> float:
    v = v.reshape(len(test), -1)
    return math.sqrt(max(float(integrate(test, np.sum(v * v, axis=1))), 0.0))


def _components(spec: ProblemSpec) -> slice:
    # the solution proper; Stokes pressure is reported separately
    return slice(0, 2) if spec.kind == "stokes" else slice(0, spec.output_dim)


def l2_relative_error(spec: ProblemSpec, predict: Predict, test: QuadratureSet) -> float:
    comp = _components(spec)
    u = spec.exact(test.points)[:, comp]
    u_star = np.asarray(predict(test.points))[:, comp]
    return 100.0 * _norm(test, u - u_star) / _norm(test, u)


def _network_gradient(theta, arch, pts) -> np.ndarray:
    jet = nw.forward_jet(theta, arch, pts)
    return np.moveaxis(jet.d1.value, 0, -1)  # (B, m, d)


def h1_relative_error(
    spec: ProblemSpec,
    test: QuadratureSet,
    theta: np.ndarray | None = None,
    arch: nw.MLPArchitecture | None = None,
    grad: Callable[[np.ndarray], np.ndarray] | None = None,
    predict: Predict | None = None,
) -> float:
    """Relative full H1 error; for time-dependent problems only spatial derivatives count.

    The candidate is a network ``(theta, arch)`` or a pair ``predict``/``grad``
    where ``grad`` returns shape ``(B, m, d)``.
    """
    if grad is None:
        if theta is None or arch is None:
            raise ValueError("need a network or explicit value/gradient callables")
        predict = network_predictor(theta, arch)
        grad = lambda x: _network_gradient(theta, arch, x)  # noqa: E731
    comp = _components(spec)
    space = slice(0, spec.spatial_dim)
    pts = test.points
    u = spec.exact(pts)[:, comp]
    du = spec.exact_grad(pts)[:, comp, space]
    u_star = np.asarray(predict(pts))[:, comp]
    du_star = np.asarray(grad(pts))[:, comp, space]
    num = _norm(test, u - u_star) ** 2 + _norm(test, du - du_star) ** 2
    den = _norm(test, u) ** 2 + _norm(test, du) ** 2
    return 100.0 * math.sqrt(num / den)


def stokes_pressure_error(spec: ProblemSpec, predict: Predict, test: QuadratureSet) -> float:
    """Relative L2 pressure error after removing the mean of the difference."""
    p = spec.exact(test.points)[:, 2]
    diff = p - np.asarray(predict(test.points))[:, 2]
    diff = diff - integrate(test, diff) / test.total_weight()
    return 100.0 * _norm(test, diff) / _norm(test, p)


def sup_t_l2_error(
    spec: ProblemSpec, predict: Predict, slices: int = SUP_T_SLICES, resolution: int = TEST_RESOLUTION
) -> float:
    """max_t |u(.,t) - u*(.,t)| / max_t |u(.,t)| over uniformly spaced time slices."""
    if not isinstance(spec.domain, TimeSlab):
        raise ValueError("sup-in-time error needs a time-dependent problem")
    space = midpoint_grid(resolution, spec.domain.space)
    worst_err = worst_norm = 0.0
    for t in np.linspace(0.0, spec.domain.T, slices):
        pts = np.column_stack([space.points, np.full(len(space), t)])
        u = spec.exact(pts)
        worst_err = max(worst_err, _norm(space, u - np.asarray(predict(pts))))
        worst_norm = max(worst_norm, _norm(space, u))
    return 100.0 * worst_err / worst_norm


def evaluate(
    spec: ProblemSpec,
    theta: np.ndarray,
    arch: nw.MLPArchitecture,
    test: QuadratureSet | None = None,
    training: dict | None = None,
) -> ErrorReport:
    """Every error reported for ``spec`` on its default (or given) test set."""
    test = default_test_set(spec) if test is None else test
    predict = network_predictor(theta, arch)
    rep = ErrorReport(L2_pct=l2_relative_error(spec, predict, test), test_set=describe(test))
    if spec.kind in ("poisson", "heat"):
        rep.H1_pct = h1_relative_error(spec, test, theta, arch)
    if spec.kind == "wave":
        rep.supL2_pct = sup_t_l2_error(spec, predict)
    if spec.kind == "stokes":
        rep.p_L2_pct = stokes_pressure_error(spec, predict, test)
    for key, val in (training or {}).items():
        if hasattr(rep, key):
            setattr(rep, key, val)
    return rep


def evaluate_record(spec: ProblemSpec, record) -> dict:
    """Ensemble hook: generalization errors of a ``TrainRecord``."""
    return evaluate(spec, record.theta, record.arch).as_dict()


# -- well-trained diagnostic --------------------------------------------------


def fit_decay_rate(ns: Sequence[float], errors: Sequence[float]) -> float:
    """alpha in ``error ~ N^-alpha`` by least squares in log-log coordinates."""
    ns = np.asarray(ns, dtype=float)
    errors = np.abs(np.asarray(errors, dtype=float))
    keep = errors > 0
    if keep.sum() < 2 or len(np.unique(ns[keep])) < 2:
        raise ValueError("need quadrature errors at two or more distinct sizes")
    slope = np.polyfit(np.log(ns[keep]), np.log(errors[keep]), 1)[0]
    return float(-slope)


def quadrature_errors(
    integrand: Callable[[np.ndarray], np.ndarray],
    build: Callable[[int], QuadratureSet],
    ns: Sequence[int],
    reference: float,
) -> tuple[list[int], list[float]]:
    """Absolute errors of a rule family against a reference integral (realised sizes)."""
    sizes, errs = [], []
    for n in ns:
        q = build(n)
        sizes.append(len(q))
        errs.append(abs(float(integrate(q, integrand(q.points))) - reference))
    return sizes, errs


@dataclass
class WellTrainedDiagnostic:
    status: str  # well-trained | not-well-trained | indeterminate
    max_training_error: float
    gap_interior: float | None = None
    gap_data: float | None = None
    alpha: float | None = None
    alpha_d: float | None = None
    note: str = "gap constants are unknown and taken as 1"


def well_trained_check(
    E_pT: float, E_dT: float, n_int: int, n_d: int, alpha: float | None, alpha_d: float | None
) -> WellTrainedDiagnostic:
    """Compare training errors with the gap terms N^-alpha/2 and N_d^-alpha_d/2."""
    worst = max(E_pT, E_dT)
    if worst == 0.0:
        return WellTrainedDiagnostic("well-trained", 0.0, alpha=alpha, alpha_d=alpha_d)
    if alpha is None or alpha_d is None:
        return WellTrainedDiagnostic("indeterminate", worst, note="decay rates need two or more sizes")
    gap = n_int ** (-alpha / 2.0)
    gap_d = n_d ** (-alpha_d / 2.0)
    ok = E_pT <= gap and E_dT <= gap_d
    return WellTrainedDiagnostic("well-trained" if ok else "not-well-trained", worst, gap, gap_d, alpha, alpha_d)


def residual_decay_rates(
    spec: ProblemSpec, theta: np.ndarray, arch: nw.MLPArchitecture, ns: Sequence[int], seed: int = 0
) -> tuple[float | None, float | None]:
    """Empirical rates for the trained PDE and data residuals.

    The squared residuals are integrated with training-style sets of several
    sizes and compared with the integral on a fine reference set.  A single
    size gives ``(None, None)``.
    """
    if len(set(ns)) < 2:
        return None, None

    def pde_sq(pts):
        jet = nw.forward_jet(theta, arch, pts, spec.operator)
        return sum(np.sum(r.value.reshape(len(pts), -1) ** 2, axis=1) for r in pde_residuals(spec, jet, pts))

    def data_sq(pts):
        obs = slice(0, 2) if spec.kind == "stokes" else slice(0, spec.output_dim)
        d = nw.forward(theta, arch, pts)[:, obs] - spec.exact(pts)[:, obs]
        return np.sum(d * d, axis=1)

    big = make_training_sets(spec, 16 * max(ns), seed=seed + 7919)
    ref_p = float(integrate(big.interior, pde_sq(big.interior.points)))
    ref_d = float(integrate(big.data, data_sq(big.data.points)))
    sets = [make_training_sets(spec, n, seed=seed) for n in ns]
    try:
        alpha = fit_decay_rate([len(s.interior) for s in sets],
                               [integrate(s.interior, pde_sq(s.interior.points)) - ref_p for s in sets])
        alpha_d = fit_decay_rate([len(s.data) for s in sets],
                                 [integrate(s.data, data_sq(s.data.points)) - ref_d for s in sets])
    except ValueError:
        return None, None
    return alpha, alpha_d
