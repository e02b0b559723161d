"""The data-assimilation problems: geometry, exact fields, residuals and data.

Inputs of time-dependent problems are laid out as ``(x_1, ..., x_n, t)``.
Residual functions take a :class:`~pinnda.autodiff.Jet2` of the network and
return tape nodes of shape ``(B,)`` (or ``(B, k)`` for vector residuals).
The jet's second-order slabs may be either the full Hessian diagonal or the
problem's contracted operator (see :attr:`ProblemSpec.operator`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable

import numpy as np

from . import autodiff as ad
from .quadrature import (
    Box,
    Disc,
    QuadratureSet,
    TimeSlab,
    Union,
    boundary_points,
    midpoint_count,
    sobol_points,
    uniform_random,
)

TWO_PI = 2.0 * math.pi
Field = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable description of one experiment.

    ``exact`` returns ``(B, m)`` values, ``exact_grad`` ``(B, m, d)`` input
    derivatives and ``exact_d2`` ``(B, m, d)`` Hessian diagonals, all in
    closed form.  ``source`` returns ``(B, k)`` right-hand sides for the PDE
    residual components.
    """

    id: str
    kind: str  # poisson | heat | wave | stokes
    input_dim: int
    output_dim: int
    domain: Box | TimeSlab
    observation: Box | Union | Disc | TimeSlab
    exact: Field
    exact_grad: Field
    exact_d2: Field
    source: Field
    interior_rule: str = "sobol"  # sobol | random
    data_rule: str = "grid"  # grid | random
    boundary_rule: str | None = None  # grid | random | None (no boundary term)
    interior_fraction: float = 0.5
    data_fraction: float | None = None  # None: split the rest by measure
    fixed_counts: tuple[int, int, int] | None = None  # (N_int, N_sb, N_d)
    default_n: int = 400
    noise_level: float = 0.0
    defaults: dict = field(default_factory=dict)
    time_dependent: bool = False
    description: str = ""

    @property
    def has_boundary(self) -> bool:
        return self.boundary_rule is not None

    @property
    def spatial_dim(self) -> int:
        return self.input_dim - 1 if self.time_dependent else self.input_dim

    @property
    def operator(self) -> np.ndarray:
        """Coefficients ``c`` of the second-order combination the PDE needs."""
        c = np.zeros((1, self.input_dim))
        if self.kind == "wave":
            c[0, : self.spatial_dim] = -1.0
            c[0, -1] = 1.0
        else:
            c[0, : self.spatial_dim] = 1.0
        return c

    def boundary_value(self, pts: np.ndarray) -> np.ndarray:
        """Dirichlet trace used by the spatial-boundary residual."""
        return self.exact(pts)

    def with_noise(self, level: float) -> "ProblemSpec":
        return replace(self, noise_level=float(level))

    def split(self, n: int) -> tuple[int, int, int]:
        """Requested ``(N_int, N_sb, N_d)`` for a total budget ``n``."""
        if self.fixed_counts is not None:
            if n == sum(self.fixed_counts):
                return self.fixed_counts
            tot = sum(self.fixed_counts)
            n_int, n_sb = (round(n * c / tot) for c in self.fixed_counts[:2])
            return n_int, n_sb, n - n_int - n_sb
        if not self.has_boundary:
            n_d = round(self.data_fraction * n)
            return n - n_d, 0, n_d
        n_int = round(self.interior_fraction * n)
        rest = n - n_int
        sb_meas = self.domain.boundary_measure()
        d_meas = self.observation.measure()
        n_sb = round(rest * sb_meas / (sb_meas + d_meas))
        return n_int, n_sb, rest - n_sb

    def split_fractions(self) -> tuple[float, float, float]:
        n = 10**6
        return tuple(c / n for c in self.split(n))


# -- residual operators -------------------------------------------------------


def _second_order(jet: ad.Jet2, operator: np.ndarray) -> ad.Node:
    """Operator combination of second derivatives, shape (B, m)."""
    if jet.d2.shape[0] == operator.shape[0]:
        return jet.d2[0]
    out = None
    for i, c in enumerate(operator[0]):
        if c == 0.0:
            continue
        term = jet.d2[i] if c == 1.0 else jet.d2[i] * c
        out = term if out is None else out + term
    return out


def _col(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, 0] if x.ndim == 2 else x


def poisson_residuals(jet: ad.Jet2, f) -> ad.Node:
    """``-Laplace(u) - f`` at the jet points."""
    lap = _second_order(jet, np.ones((1, jet.dim)))
    return -lap[:, 0] - _col(f)


def heat_residuals(jet: ad.Jet2, f) -> ad.Node:
    """``u_t - Laplace_x(u) - f``; time is the last input coordinate."""
    c = np.ones((1, jet.dim))
    c[0, -1] = 0.0
    lap = _second_order(jet, c)
    return jet.d1[-1][:, 0] - lap[:, 0] - _col(f)


def wave_residuals(jet: ad.Jet2, f) -> ad.Node:
    """``u_tt - Laplace_x(u) - f``; time is the last input coordinate."""
    c = -np.ones((1, jet.dim))
    c[0, -1] = 1.0
    box = _second_order(jet, c)
    return box[:, 0] - _col(f)


def stokes_residuals(jet: ad.Jet2, f, f_div=0.0) -> tuple[ad.Node, ad.Node]:
    """Momentum ``-Laplace(u) + grad(p) - f`` (B, 2) and ``div(u) - f_div`` (B,).

    Outputs are ordered ``(u1, u2, p)``.
    """
    lap = _second_order(jet, np.ones((1, jet.dim)))
    f = np.broadcast_to(np.asarray(f, dtype=float), (lap.shape[0], 2))
    m1 = -lap[:, 0] + jet.d1[0][:, 2] - f[:, 0]
    m2 = -lap[:, 1] + jet.d1[1][:, 2] - f[:, 1]
    div = jet.d1[0][:, 0] + jet.d1[1][:, 1] - f_div
    return ad.stack([m1, m2], axis=1), div


def boundary_residual(values: ad.Node, trace) -> ad.Node:
    """Spatial-boundary residual ``u_theta - h`` (``h`` is the Dirichlet trace)."""
    return values - np.asarray(trace, dtype=float)


def data_residual(values: ad.Node, g) -> ad.Node:
    return values - np.asarray(g, dtype=float)


def pde_residuals(spec: ProblemSpec, jet: ad.Jet2, pts: np.ndarray) -> list[ad.Node]:
    """All PDE residual components of ``spec`` at interior points."""
    f = spec.source(pts)
    if spec.kind == "poisson":
        return [poisson_residuals(jet, f)]
    if spec.kind == "heat":
        return [heat_residuals(jet, f)]
    if spec.kind == "wave":
        return [wave_residuals(jet, f)]
    if spec.kind == "stokes":
        mom, div = stokes_residuals(jet, f[:, :2], f[:, 2])
        return [mom, div]
    raise ValueError(f"unknown problem kind {spec.kind!r}")


def oracle_jet(spec: ProblemSpec, pts: np.ndarray) -> ad.Jet2:
    """Exact solution wrapped as a jet (full Hessian diagonal)."""
    val = spec.exact(pts)
    d1 = np.moveaxis(spec.exact_grad(pts), 2, 0)
    d2 = np.moveaxis(spec.exact_d2(pts), 2, 0)
    return ad.Jet2(ad.constant(val), ad.constant(d1), ad.constant(d2))


# -- exact solutions ----------------------------------------------------------


def _poisson_exact(x):
    x1, x2 = x[:, 0], x[:, 1]
    return (30.0 * x1 * x2 * (1 - x1) * (1 - x2))[:, None]


def _poisson_grad(x):
    x1, x2 = x[:, 0], x[:, 1]
    g1 = 30.0 * (1 - 2 * x1) * x2 * (1 - x2)
    g2 = 30.0 * x1 * (1 - x1) * (1 - 2 * x2)
    return np.stack([g1, g2], axis=1)[:, None, :]


def _poisson_d2(x):
    x1, x2 = x[:, 0], x[:, 1]
    return np.stack([-60.0 * x2 * (1 - x2), -60.0 * x1 * (1 - x1)], axis=1)[:, None, :]


def _poisson_source(x):
    # -Laplace of the exact field
    x1, x2 = x[:, 0], x[:, 1]
    return (60.0 * (x1 - x1**2 + x2 - x2**2))[:, None]


def _poisson_source_printed(x):
    return -_poisson_source(x)


_K2 = 4.0 * math.pi**2


def _heat1d_amp(variant, t):
    return np.exp(-_K2 * t * t) if variant == "printed" else np.exp(-_K2 * t)


def _heat1d_amp_t(variant, t):
    if variant == "printed":
        return -2.0 * _K2 * t * np.exp(-_K2 * t * t)
    return -_K2 * np.exp(-_K2 * t)


def _heat1d_amp_tt(variant, t):
    if variant == "printed":
        return (-2.0 * _K2 + 4.0 * _K2 * _K2 * t * t) * np.exp(-_K2 * t * t)
    return _K2 * _K2 * np.exp(-_K2 * t)


def _heat1d_exact(variant, p):
    x, t = p[:, 0], p[:, 1]
    return (_heat1d_amp(variant, t) * np.sin(TWO_PI * x))[:, None]


def _heat1d_grad(variant, p):
    x, t = p[:, 0], p[:, 1]
    gx = _heat1d_amp(variant, t) * TWO_PI * np.cos(TWO_PI * x)
    gt = _heat1d_amp_t(variant, t) * np.sin(TWO_PI * x)
    return np.stack([gx, gt], axis=1)[:, None, :]


def _heat1d_d2(variant, p):
    x, t = p[:, 0], p[:, 1]
    uxx = -_K2 * _heat1d_amp(variant, t) * np.sin(TWO_PI * x)
    utt = _heat1d_amp_tt(variant, t) * np.sin(TWO_PI * x)
    return np.stack([uxx, utt], axis=1)[:, None, :]


def _heat1d_source(variant, p):
    # u_t - u_xx of the chosen field
    return (_heat1d_grad(variant, p)[:, 0, 1] - _heat1d_d2(variant, p)[:, 0, 0])[:, None]


def _heat1d_fields(variant: str):
    """Exact field ``exp(-4 pi^2 t^p) sin(2 pi x)`` with p = 2 (printed) or 1."""
    if variant not in ("printed", "decay"):
        raise ValueError("heat1d variant must be 'printed' or 'decay'")
    return tuple(partial(f, variant) for f in (_heat1d_exact, _heat1d_grad, _heat1d_d2, _heat1d_source))


def _heatnd_exact(n, p):
    x, t = p[:, :n], p[:, n]
    return (np.sum(x * x, axis=1) / n + 2.0 * t)[:, None]


def _heatnd_grad(n, p):
    g = np.empty_like(p)
    g[:, :n] = 2.0 * p[:, :n] / n
    g[:, n] = 2.0
    return g[:, None, :]


def _heatnd_d2(n, p):
    h = np.full_like(p, 2.0 / n)
    h[:, n] = 0.0
    return h[:, None, :]


def _heatnd_fields(n: int):
    return partial(_heatnd_exact, n), partial(_heatnd_grad, n), partial(_heatnd_d2, n), _zero_source(1)


def _wave_exact(p):
    x, t = p[:, 0], p[:, 1]
    return (np.sin(TWO_PI * t) * np.sin(TWO_PI * x))[:, None]


def _wave_grad(p):
    x, t = p[:, 0], p[:, 1]
    gx = TWO_PI * np.sin(TWO_PI * t) * np.cos(TWO_PI * x)
    gt = TWO_PI * np.cos(TWO_PI * t) * np.sin(TWO_PI * x)
    return np.stack([gx, gt], axis=1)[:, None, :]


def _wave_d2(p):
    u = _wave_exact(p)[:, 0]
    k2 = TWO_PI**2
    return np.stack([-k2 * u, -k2 * u], axis=1)[:, None, :]


def _zeros(k, p):
    return np.zeros((len(p), k))


def _zero_source(k: int) -> Field:
    return partial(_zeros, k)


def stokes_velocity(x):
    x1, x2 = x[:, 0], x[:, 1]
    return np.stack([4 * x1 * x2**3, x1**4 - x2**4], axis=1)


def stokes_pressure(x):
    x1, x2 = x[:, 0], x[:, 1]
    return 12 * x1**2 * x2 - 4 * x2**3 - 1


def _stokes_exact(x):
    return np.column_stack([stokes_velocity(x), stokes_pressure(x)])


def _stokes_grad(x):
    x1, x2 = x[:, 0], x[:, 1]
    g = np.empty((len(x), 3, 2))
    g[:, 0] = np.stack([4 * x2**3, 12 * x1 * x2**2], axis=1)
    g[:, 1] = np.stack([4 * x1**3, -4 * x2**3], axis=1)
    g[:, 2] = np.stack([24 * x1 * x2, 12 * x1**2 - 12 * x2**2], axis=1)
    return g


def _stokes_d2(x):
    x1, x2 = x[:, 0], x[:, 1]
    h = np.empty((len(x), 3, 2))
    h[:, 0] = np.stack([np.zeros_like(x1), 24 * x1 * x2], axis=1)
    h[:, 1] = np.stack([12 * x1**2, -12 * x2**2], axis=1)
    h[:, 2] = np.stack([24 * x2, -24 * x2], axis=1)
    return h


# -- catalog ------------------------------------------------------------------

CATALOG_IDS = (
    "poisson",
    "poisson-noisy",
    "heat1d",
    "heat1d-random",
    "heatnd:<n>",
    "wave-gcc",
    "wave-nogcc",
    "stokes",
)

# (K-1, width, lambda_reg, lambda) of the selected configurations
_HEATND_DEFAULTS = {
    1: (4, 20, 0.0, 0.01),
    5: (4, 20, 0.0, 0.01),
    10: (4, 20, 0.0, 0.001),
    20: (4, 20, 1e-6, 0.001),
    50: (4, 20, 1e-6, 0.001),
    100: (4, 20, 1e-6, 0.001),
}


def _defaults(depth, width, lam_reg, lam) -> dict:
    return {"depth": depth, "width": width, "lambda_reg": lam_reg, "lambda": lam}


def poisson_spec(noise_level: float = 0.0, printed_source: bool = False) -> ProblemSpec:
    unit = Box.unit(2)
    return ProblemSpec(
        id="poisson-noisy" if noise_level else "poisson",
        kind="poisson",
        input_dim=2,
        output_dim=1,
        domain=unit,
        observation=Box((0.125, 0.125), (0.875, 0.875)),
        exact=_poisson_exact,
        exact_grad=_poisson_grad,
        exact_d2=_poisson_d2,
        source=_poisson_source_printed if printed_source else _poisson_source,
        data_fraction=9.0 / 16.0,
        default_n=400,
        noise_level=noise_level,
        defaults=_defaults(4, 24, 0.0, 0.001),
        description="-Laplace(u) = f on (0,1)^2, data on |x_i - 0.5| < 0.375",
    )


def heat1d_spec(variant: str = "printed", random_points: bool = False) -> ProblemSpec:
    exact, grad, d2, source = _heat1d_fields(variant)
    T = 0.02
    a = 0.2
    rule = "random" if random_points else None
    return ProblemSpec(
        id="heat1d-random" if random_points else "heat1d",
        kind="heat",
        input_dim=2,
        output_dim=1,
        domain=TimeSlab(Box((0.0,), (1.0,)), T),
        observation=TimeSlab(Box((a,), (1.0 - a,)), T),
        exact=exact,
        exact_grad=grad,
        exact_d2=d2,
        source=source,
        interior_rule=rule or "sobol",
        data_rule=rule or "grid",
        boundary_rule=rule or "grid",
        interior_fraction=0.4,
        default_n=16 * 50,
        defaults=_defaults(4, 24, 0.0, 0.001) if random_points else _defaults(8, 20, 0.0, 0.001),
        time_dependent=True,
        description=f"u_t - u_xx = f on (0,1)x(0,{T}), data on ({a},{1 - a}); exact field variant {variant!r}",
    )


def heatnd_spec(n: int) -> ProblemSpec:
    if n < 1:
        raise ValueError("space dimension must be positive")
    exact, grad, d2, source = _heatnd_fields(n)
    a = 0.4
    dflt = _HEATND_DEFAULTS.get(n, (4, 20, 1e-6 if n > 10 else 0.0, 0.001))
    return ProblemSpec(
        id=f"heatnd:{n}",
        kind="heat",
        input_dim=n + 1,
        output_dim=1,
        domain=TimeSlab(Box.unit(n), 1.0),
        # the observation window restricts time as well: [a, 1-a]^(n+1)
        observation=Box((a,) * (n + 1), (1.0 - a,) * (n + 1)),
        exact=exact,
        exact_grad=grad,
        exact_d2=d2,
        source=source,
        interior_rule="random",
        data_rule="random",
        boundary_rule="random",
        fixed_counts=(8192, 2048, 6144),
        default_n=16384,
        defaults=_defaults(*dflt),
        time_dependent=True,
        description=f"u_t - Laplace(u) = 0 on (0,1)^{n} x (0,1), exact |x|^2/n + 2t",
    )


def wave_spec(gcc: bool = True) -> ProblemSpec:
    obs = Union((Box((0.0,), (0.2,)), Box((0.8,), (1.0,)))) if gcc else Box((0.0,), (0.2,))
    return ProblemSpec(
        id="wave-gcc" if gcc else "wave-nogcc",
        kind="wave",
        input_dim=2,
        output_dim=1,
        domain=TimeSlab(Box((0.0,), (1.0,)), 1.0),
        observation=TimeSlab(obs, 1.0),
        exact=_wave_exact,
        exact_grad=_wave_grad,
        exact_d2=_wave_d2,
        source=_zero_source(1),
        boundary_rule="grid",
        interior_fraction=0.6 if gcc else 0.8,
        default_n=60 * 60,
        defaults=_defaults(4, 24, 0.0, 0.001),
        time_dependent=True,
        description="u_tt - u_xx = 0 on (0,1)x(0,1), data on "
        + ("(0,0.2) U (0.8,1)" if gcc else "(0,0.2)"),
    )


def stokes_spec() -> ProblemSpec:
    disc = Disc((0.5, 0.5), 0.25)
    return ProblemSpec(
        id="stokes",
        kind="stokes",
        input_dim=2,
        output_dim=3,
        domain=Box.unit(2),
        observation=disc,
        exact=_stokes_exact,
        exact_grad=_stokes_grad,
        exact_d2=_stokes_d2,
        source=_zero_source(3),
        data_fraction=disc.measure() / 1.0,
        default_n=400,
        defaults=_defaults(4, 24, 0.0, 0.001),
        description="homogeneous Stokes on (0,1)^2, velocity data on a disc of radius 0.25",
    )


def builtin_specs(heat1d_variant: str = "printed") -> dict[str, ProblemSpec]:
    """The experiment catalog (``heatnd`` shown for n = 1, 5, 10)."""
    specs = {
        "poisson": poisson_spec(),
        "poisson-noisy": poisson_spec(noise_level=0.01),
        "heat1d": heat1d_spec(heat1d_variant),
        "heat1d-random": heat1d_spec(heat1d_variant, random_points=True),
        "wave-gcc": wave_spec(True),
        "wave-nogcc": wave_spec(False),
        "stokes": stokes_spec(),
    }
    for n in (1, 5, 10):
        specs[f"heatnd:{n}"] = heatnd_spec(n)
    return specs


def get_spec(problem_id: str, **kwargs) -> ProblemSpec:
    """Resolve a catalog id such as ``poisson`` or ``heatnd:20``."""
    if problem_id.startswith("heatnd:"):
        try:
            n = int(problem_id.split(":", 1)[1])
        except ValueError:
            raise KeyError(problem_id) from None
        return heatnd_spec(n)
    specs = builtin_specs(**kwargs)
    if problem_id not in specs:
        raise KeyError(problem_id)
    return specs[problem_id]


# -- training sets ------------------------------------------------------------


@dataclass
class TrainingSets:
    interior: QuadratureSet
    data: QuadratureSet
    data_values: np.ndarray  # (N_d, m_observed)
    boundary: QuadratureSet | None = None
    boundary_values: np.ndarray | None = None

    @property
    def counts(self) -> dict[str, int]:
        return {
            "N_int": len(self.interior),
            "N_sb": 0 if self.boundary is None else len(self.boundary),
            "N_d": len(self.data),
        }

    def labelled_points(self):
        """``(label, QuadratureSet)`` pairs in a fixed order."""
        out = [("int", self.interior)]
        if self.boundary is not None:
            out.append(("sb", self.boundary))
        out.append(("d", self.data))
        return out


def observed_components(spec: ProblemSpec) -> slice:
    """Output components that are measured (pressure is never observed)."""
    return slice(0, 2) if spec.kind == "stokes" else slice(0, spec.output_dim)


def make_data(spec: ProblemSpec, points: np.ndarray, noise_level: float | None = None, seed: int = 0) -> np.ndarray:
    """Observations ``u(z_j) + noise * max|u| * eps_j`` on the observation points.

    The amplitude ``max|u|`` is taken over the observation points themselves.
    """
    level = spec.noise_level if noise_level is None else noise_level
    vals = spec.exact(points)[:, observed_components(spec)]
    if level == 0.0:
        return vals
    rng = np.random.default_rng([int(seed), 0x5EED])
    amp = float(np.max(np.abs(vals)))
    return vals + level * amp * rng.standard_normal(vals.shape)


def _interior(spec: ProblemSpec, n: int, seed: int) -> QuadratureSet:
    if spec.interior_rule == "sobol":
        return sobol_points(n, spec.domain)
    return uniform_random(n, spec.domain, seed)


def _data_set(spec: ProblemSpec, n: int, seed: int) -> QuadratureSet:
    if spec.data_rule == "grid":
        return midpoint_count(n, spec.observation)
    return uniform_random(n, spec.observation, seed + 1)


def make_training_sets(
    spec: ProblemSpec,
    n: int | None = None,
    seed: int = 0,
    counts: tuple[int, int, int] | None = None,
) -> TrainingSets:
    """Build S_int, S_sb, S_d for a total budget ``n`` (or explicit counts).

    Grid rules realise the nearest achievable grid, so actual counts can
    differ slightly from the request; see :attr:`TrainingSets.counts`.
    """
    if counts is None:
        counts = spec.split(spec.default_n if n is None else int(n))
    n_int, n_sb, n_d = counts
    if min(n_int, n_d) < 1 or (spec.has_boundary and n_sb < 1):
        raise ValueError(f"training-set counts must be positive, got {counts}")
    interior = _interior(spec, n_int, seed)
    data = _data_set(spec, n_d, seed)
    values = make_data(spec, data.points, seed=seed)
    boundary = trace = None
    if spec.has_boundary:
        if spec.boundary_rule == "random":
            boundary = boundary_points(spec.domain, n_sb, rule="random", seed=seed + 2)
        else:
            boundary = boundary_points(spec.domain, n_sb)
        trace = spec.boundary_value(boundary.points)
    return TrainingSets(interior, data, values, boundary, trace)
