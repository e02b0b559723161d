"""Loss assembly, optimizers, single runs and ensemble training."""
from __future__ import annotations

import logging
import math
import os
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import network as nw
from .problems import (
    ProblemSpec,
    TrainingSets,
    boundary_residual,
    data_residual,
    make_training_sets,
    observed_components,
    pde_residuals,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "PINNDA_WORKERS"


@dataclass(frozen=True)
class Hyperparameters:
    depth: int = 4
    width: int = 20
    q: int = 2
    lambda_reg: float = 0.0
    lam: float = 0.001
    optimizer: str = "lbfgs"
    max_iterations: int = 10000
    restarts: int = 1
    activation: str = "tanh"
    lr: float = 1e-3  # adam only

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def for_problem(cls, spec: ProblemSpec, **overrides) -> "Hyperparameters":
        d = spec.defaults
        base = dict(depth=d.get("depth", 4), width=d.get("width", 20),
                    lambda_reg=d.get("lambda_reg", 0.0), lam=d.get("lambda", 0.001))
        base.update(overrides)
        return cls(**base)

    def architecture(self, spec: ProblemSpec) -> nw.MLPArchitecture:
        return nw.MLPArchitecture(spec.input_dim, spec.output_dim, self.depth, self.width, self.activation)


def standard_grid(**common) -> list[Hyperparameters]:
    """Every configuration of the ensemble grid (depth x width x lambda_reg x lambda)."""
    return [
        Hyperparameters(depth=k, width=w, lambda_reg=r, lam=l, **common)
        for k, w, r, l in product((4, 8, 10), (16, 20, 24), (0.0, 1e-6), (0.001, 0.01, 0.1, 1.0))
    ]


# -- loss ---------------------------------------------------------------------


@dataclass
class LossTerms:
    """Tape nodes of the loss and its squared training-error components."""

    total: ad.Node
    data_sq: ad.Node
    pde_sq: ad.Node
    boundary_sq: ad.Node | None
    reg: ad.Node | None


def _weighted_sq(res: ad.Node, w: np.ndarray) -> ad.Node:
    sq = ad.square(res)
    if sq.ndim == 2:
        sq = sq.sum(axis=1)
    return (sq * w).sum()


def assemble_loss(
    spec: ProblemSpec,
    sets: TrainingSets,
    theta,
    arch: nw.MLPArchitecture,
    lam: float,
    lambda_reg: float = 0.0,
    q: int = 2,
) -> LossTerms:
    """Quadrature loss: data [+ boundary] + lam * PDE + lambda_reg * |theta_W|_q^q."""
    if (sets.boundary is not None) != spec.has_boundary:
        raise ValueError(f"training sets do not match problem {spec.id!r}")
    if sets.interior.dim != spec.input_dim:
        raise ValueError("training-set dimension does not match the problem")
    if not isinstance(theta, ad.Node):
        theta = ad.constant(theta)

    pts = sets.interior.points
    jet = nw.forward_jet(theta, arch, pts, spec.operator)
    pde_sq = None
    for r in pde_residuals(spec, jet, pts):
        term = _weighted_sq(r, sets.interior.weights)
        pde_sq = term if pde_sq is None else pde_sq + term

    obs = observed_components(spec)
    vals = nw.forward_nodes(theta, arch, sets.data.points)[:, obs]
    data_sq = _weighted_sq(data_residual(vals, sets.data_values), sets.data.weights)
    total = data_sq + lam * pde_sq

    boundary_sq = None
    if spec.has_boundary:
        bvals = nw.forward_nodes(theta, arch, sets.boundary.points)
        boundary_sq = _weighted_sq(boundary_residual(bvals, sets.boundary_values), sets.boundary.weights)
        total = total + boundary_sq

    reg = None
    if lambda_reg > 0:
        w = theta[nw.weight_mask(arch)]
        reg = ad.square(w).sum() if q == 2 else ad.power(ad.power(ad.square(w), 0.5), q).sum()
        total = total + lambda_reg * reg
    return LossTerms(total, data_sq, pde_sq, boundary_sq, reg)


def loss_and_grad(spec, sets, arch, lam, lambda_reg=0.0, q=2) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    def fg(theta: np.ndarray):
        th = ad.variable(theta)
        terms = assemble_loss(spec, sets, th, arch, lam, lambda_reg, q)
        f = float(terms.total.value)
        if not math.isfinite(f):
            return f, np.full_like(theta, np.nan)
        return f, ad.reverse_gradient(terms.total, th)

    return fg


def training_errors(spec, sets, arch, theta, lam) -> dict[str, float]:
    """E_{d,T}, E_{sb,T}, E_{p,T} and the combined E_T at ``theta``."""
    terms = assemble_loss(spec, sets, theta, arch, lam)
    e_d2 = float(terms.data_sq.value)
    e_p2 = float(terms.pde_sq.value)
    e_sb2 = float(terms.boundary_sq.value) if terms.boundary_sq is not None else 0.0
    return {
        "E_dT": math.sqrt(e_d2),
        "E_pT": math.sqrt(e_p2),
        "E_sbT": math.sqrt(e_sb2),
        "E_T": math.sqrt(e_d2 + e_sb2 + lam * e_p2),
    }


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    history: list[float]
    iterations: int
    evaluations: int
    status: str  # gtol | ftol | max_iterations | line_search_failed | nonfinite

    @property
    def converged(self) -> bool:
        return self.status in ("gtol", "ftol")


def _cubic_min(a, fa, ga, b, fb, gb, lo, hi):
    """Minimiser of the cubic interpolating two points with slopes, clipped."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc >= 0 and math.isfinite(disc):
        d2 = math.sqrt(disc) * (1.0 if b > a else -1.0)
        denom = gb - ga + 2.0 * d2
        if denom != 0:
            t = b - (b - a) * (gb + d2 - d1) / denom
            if math.isfinite(t):
                return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(fg, x, f0, g0, d, t=1.0, c1=1e-4, c2=0.9, max_evals=25):
    """Step length satisfying the strong Wolfe conditions along ``d``.

    Returns ``(t, f, g, evals)``; ``t`` is ``None`` on failure.  A non-finite
    trial value shrinks the step instead of aborting.
    """
    dg0 = float(g0 @ d)
    evals = 0
    t_prev, f_prev, dg_prev, g_prev = 0.0, f0, dg0, g0
    best = (None, f0, g0)

    def evaluate(step):
        f, g = fg(x + step * d)
        return f, g

    f, g = evaluate(t)
    evals += 1
    while not math.isfinite(f) and evals < max_evals:
        t *= 0.5
        f, g = evaluate(t)
        evals += 1
    if not math.isfinite(f):
        return None, f0, g0, evals

    lo = hi = None
    first = True
    while evals < max_evals:
        dg = float(g @ d)
        if f < best[1]:
            best = (t, f, g)
        if f > f0 + c1 * t * dg0 or (not first and f >= f_prev):
            lo, hi = (t_prev, f_prev, dg_prev, g_prev), (t, f, dg, g)
            break
        if abs(dg) <= -c2 * dg0:
            return t, f, g, evals
        if dg >= 0:
            lo, hi = (t, f, dg, g), (t_prev, f_prev, dg_prev, g_prev)
            break
        # expand
        t_new = _cubic_min(t_prev, f_prev, dg_prev, t, f, dg, t + 0.01 * (t - t_prev), 10.0 * t)
        t_prev, f_prev, dg_prev, g_prev = t, f, dg, g
        t = t_new
        f, g = evaluate(t)
        evals += 1
        while not math.isfinite(f) and evals < max_evals:
            t = 0.5 * (t + t_prev)
            f, g = evaluate(t)
            evals += 1
        first = False
    else:
        return _fallback(best, f0, evals)

    # zoom between lo (satisfies sufficient decrease, lower f) and hi
    while evals < max_evals:
        (tl, fl, dgl, gl), (th, fh, dgh, gh) = lo, hi
        a, b = min(tl, th), max(tl, th)
        if b - a < 1e-12 * max(1.0, b):
            break
        t = _cubic_min(tl, fl, dgl, th, fh, dgh, a, b)
        # keep away from the bracket ends
        margin = 0.1 * (b - a)
        if t - a < margin or b - t < margin:
            t = 0.5 * (a + b)
        f, g = evaluate(t)
        evals += 1
        if not math.isfinite(f):
            hi = (t, np.inf, 0.0, g)
            continue
        dg = float(g @ d)
        if f < best[1]:
            best = (t, f, g)
        if f > f0 + c1 * t * dg0 or f >= fl:
            hi = (t, f, dg, g)
        else:
            if abs(dg) <= -c2 * dg0:
                return t, f, g, evals
            if dg * (th - tl) >= 0:
                hi = lo
            lo = (t, f, dg, g)
    return _fallback(best, f0, evals)


def _fallback(best, f0, evals):
    # accept the best decreasing trial even if curvature was not met
    t, f, g = best
    if t is not None and f < f0:
        return t, f, g, evals
    return None, f0, None, evals


def lbfgs_minimize(
    fg: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    max_iterations: int = 10000,
    memory: int = 10,
    gtol: float = 1e-9,
    ftol: float = 1e-9,
    max_ls: int = 25,
    callback: Callable[[int, float], None] | None = None,
) -> OptimResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    Accepted iterates never increase the loss.  Stops when the max-norm of
    the gradient falls to ``gtol``, the relative loss change to ``ftol``, or
    after ``max_iterations``; a failed line search returns the best iterate
    with status ``line_search_failed``.
    """
    x = np.array(x0, dtype=float)
    f, g = fg(x)
    evals = 1
    if not math.isfinite(f):
        return OptimResult(x, f, g, [f], 0, evals, "nonfinite")
    history = [f]
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    status = "max_iterations"
    it = 0
    while it < max_iterations:
        if np.max(np.abs(g)) <= gtol:
            status = "gtol"
            break
        d = _two_loop(g, s_hist, y_hist)
        if float(g @ d) >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        t0 = 1.0 if s_hist else min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-300))
        t, f_new, g_new, n_ev = strong_wolfe(fg, x, f, g, d, t0, max_evals=max_ls)
        evals += n_ev
        if t is None:
            if s_hist:
                # retry from steepest descent with a fresh memory
                s_hist.clear()
                y_hist.clear()
                continue
            status = "line_search_failed"
            break
        it += 1
        s = t * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(y @ y):
            s_hist.append(s)
            y_hist.append(y)
        x = x + s
        rel = abs(f - f_new) / max(abs(f), abs(f_new), 1e-300)
        f, g = f_new, g_new
        history.append(f)
        if callback is not None:
            callback(it, f)
        if rel <= ftol:
            status = "ftol"
            break
    return OptimResult(x, f, g, history, it, evals, status)


def _two_loop(g, s_hist, y_hist) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (a, rho), s, y in zip(reversed(alphas), s_hist, y_hist):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def adam_minimize(
    fg: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    max_iterations: int = 2000,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    gtol: float = 0.0,
) -> OptimResult:
    """Full-batch Adam; returns the best iterate seen."""
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    f, g = fg(x)
    history = [f]
    best = (f, x.copy(), g)
    status = "max_iterations"
    for k in range(1, max_iterations + 1):
        if not math.isfinite(f):
            status = "nonfinite"
            break
        if np.max(np.abs(g)) <= gtol:
            status = "gtol"
            break
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**k)
        vhat = v / (1 - beta2**k)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        f, g = fg(x)
        history.append(f)
        if math.isfinite(f) and f < best[0]:
            best = (f, x.copy(), g)
    return OptimResult(best[1], best[0], best[2], history, len(history) - 1, len(history), status)


# -- single run ---------------------------------------------------------------


@dataclass
class TrainRecord:
    problem: str
    hyper: Hyperparameters
    seed: int
    theta: np.ndarray
    arch: nw.MLPArchitecture
    counts: dict
    loss_history: list[float]
    E_dT: float
    E_pT: float
    E_sbT: float
    E_T: float
    iterations: int
    evaluations: int
    status: str
    wall_time: float
    noise_level: float = 0.0
    error: str | None = None
    metrics: dict | None = None  # generalization errors, filled in by an evaluator

    @property
    def ok(self) -> bool:
        return self.error is None and math.isfinite(self.E_T)

    def summary(self, with_theta: bool = False) -> dict:
        out = {
            "problem": self.problem,
            "seed": self.seed,
            "hyper": asdict(self.hyper),
            "architecture": asdict(self.arch),
            "counts": self.counts,
            "noise_level": self.noise_level,
            "E_dT": self.E_dT,
            "E_pT": self.E_pT,
            "E_sbT": self.E_sbT,
            "E_T": self.E_T,
            "final_loss": self.loss_history[-1] if self.loss_history else None,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "status": self.status,
            "wall_time": self.wall_time,
            "error": self.error,
            "metrics": self.metrics,
        }
        if with_theta:
            out["theta"] = self.theta.tolist()
        return out


def train(
    spec: ProblemSpec,
    hyper: Hyperparameters,
    seed: int,
    n: int | None = None,
    counts: tuple[int, int, int] | None = None,
    sets: TrainingSets | None = None,
) -> TrainRecord:
    """Build the training sets, initialise, minimise and report training errors."""
    start = time.perf_counter()
    if sets is None:
        sets = make_training_sets(spec, n, seed=seed, counts=counts)
    arch = hyper.architecture(spec)
    theta0 = nw.init(arch, seed)
    fg = loss_and_grad(spec, sets, arch, hyper.lam, hyper.lambda_reg, hyper.q)
    if hyper.optimizer == "lbfgs":
        res = lbfgs_minimize(fg, theta0, max_iterations=hyper.max_iterations)
    else:
        res = adam_minimize(fg, theta0, max_iterations=hyper.max_iterations, lr=hyper.lr)
    errs = training_errors(spec, sets, arch, res.x, hyper.lam)
    return TrainRecord(
        problem=spec.id,
        hyper=hyper,
        seed=seed,
        theta=res.x,
        arch=arch,
        counts=sets.counts,
        loss_history=res.history,
        iterations=res.iterations,
        evaluations=res.evaluations,
        status=res.status,
        wall_time=time.perf_counter() - start,
        noise_level=spec.noise_level,
        **errs,
    )


# -- ensembles ----------------------------------------------------------------


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items: Sequence, workers: int | None = None) -> list:
    """Map preserving input order; runs in-process when ``workers == 1``."""
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _safe_train(job):
    spec, hyper, seed, n, counts, evaluator = job
    try:
        rec = train(spec, hyper, seed, n=n, counts=counts)
        if evaluator is not None:
            rec.metrics = evaluator(spec, rec)
        return rec
    except Exception as exc:  # recorded and excluded from ensemble means
        arch = hyper.architecture(spec)
        return TrainRecord(
            spec.id, hyper, seed, np.zeros(nw.param_count(arch)), arch, {}, [],
            math.nan, math.nan, math.nan, math.nan, 0, 0, "failed", 0.0,
            spec.noise_level, error=f"{type(exc).__name__}: {exc}",
        )


@dataclass
class ConfigResult:
    hyper: Hyperparameters
    runs: list[TrainRecord]
    mean_E_T: float
    best: TrainRecord | None
    failures: int = 0

    def mean_metrics(self) -> dict:
        """Average of each evaluator metric over the successful runs."""
        good = [r.metrics for r in self.runs if r.ok and r.metrics]
        keys = [k for k, v in (good[0] if good else {}).items() if isinstance(v, (int, float))]
        return {k: float(np.mean([m[k] for m in good])) for k in keys}


@dataclass
class EnsembleResult:
    ranked: list[ConfigResult]
    best_config: Hyperparameters
    best_record: TrainRecord | None
    extra: dict = field(default_factory=dict)


def restart_seed(base_seed: int, restart: int) -> int:
    return int(base_seed) + int(restart)


def ensemble(
    spec: ProblemSpec,
    grid: Sequence[Hyperparameters],
    restarts: int,
    base_seed: int = 0,
    n: int | None = None,
    counts: tuple[int, int, int] | None = None,
    workers: int | None = None,
    evaluator: Callable[[ProblemSpec, "TrainRecord"], dict] | None = None,
) -> EnsembleResult:
    """Train every config ``restarts`` times and rank configs by mean E_T.

    Results are ordered by (config, restart) whatever the worker count.  The
    best run of a config is its lowest-E_T restart.  ``evaluator`` (which
    must be picklable for parallel runs) attaches generalization errors.
    """
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    jobs = [
        (spec, replace(h, restarts=restarts), restart_seed(base_seed, r), n, counts, evaluator)
        for h in grid
        for r in range(restarts)
    ]
    records = parallel_map(_safe_train, jobs, workers)
    results = []
    for i, h in enumerate(grid):
        runs = records[i * restarts : (i + 1) * restarts]
        good = [r for r in runs if r.ok]
        if len(good) < len(runs):
            log.warning("%d of %d runs failed for %s", len(runs) - len(good), len(runs), h)
        mean = float(np.mean([r.E_T for r in good])) if good else math.inf
        best = min(good, key=lambda r: r.E_T) if good else None
        results.append(ConfigResult(replace(h, restarts=restarts), runs, mean, best, len(runs) - len(good)))
    ranked = sorted(results, key=lambda c: c.mean_E_T)
    return EnsembleResult(ranked, ranked[0].hyper, ranked[0].best)
