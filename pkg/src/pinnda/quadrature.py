"""Quadrature point sets for interior, observation and boundary integrals.

Every rule returns a :class:`QuadratureSet` whose weights sum to the measure
of the geometry it covers, so ``integrate(q, values)`` approximates the
integral directly.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import qmc

MAX_SOBOL_DIM = 64


class UnsupportedDimensionError(ValueError):
    pass


# geometries ----------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``prod_i (lo_i, hi_i)``; also used for time slabs."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have equal length")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("box must have positive extent along every axis")

    @classmethod
    def unit(cls, dim: int) -> "Box":
        return cls((0.0,) * dim, (1.0,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def measure(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    def contains(self, x, closed: bool = True) -> np.ndarray:
        x = np.atleast_2d(x)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if closed:
            return np.all((x >= lo) & (x <= hi), axis=1)
        return np.all((x > lo) & (x < hi), axis=1)

    def scale(self, u: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return lo + u * (hi - lo)

    def subbox(self, lo, hi) -> "Box":
        return Box(tuple(map(float, lo)), tuple(map(float, hi)))


@dataclass(frozen=True)
class Disc:
    """Open disc in the plane."""

    center: tuple[float, float]
    radius: float

    dim = 2

    def measure(self) -> float:
        return math.pi * self.radius**2

    def contains(self, x, closed: bool = True) -> np.ndarray:
        x = np.atleast_2d(x)
        r = np.hypot(x[:, 0] - self.center[0], x[:, 1] - self.center[1])
        return r <= self.radius if closed else r < self.radius

    def bounding_box(self) -> Box:
        cx, cy = self.center
        r = self.radius
        return Box((cx - r, cy - r), (cx + r, cy + r))


@dataclass(frozen=True)
class Union:
    """Union of disjoint boxes."""

    parts: tuple[Box, ...]

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    def measure(self) -> float:
        return sum(p.measure() for p in self.parts)

    def contains(self, x, closed: bool = True) -> np.ndarray:
        x = np.atleast_2d(x)
        hit = np.zeros(len(x), dtype=bool)
        for p in self.parts:
            hit |= p.contains(x, closed)
        return hit


@dataclass(frozen=True)
class TimeSlab:
    """Space-time cylinder ``D x (0, T)``; points are laid out as ``(x, t)``."""

    space: Box | Union | Disc
    T: float

    @property
    def dim(self) -> int:
        return self.space.dim + 1

    def measure(self) -> float:
        return self.space.measure() * self.T

    def contains(self, x, closed: bool = True) -> np.ndarray:
        x = np.atleast_2d(x)
        t = x[:, -1]
        in_t = (t >= 0) & (t <= self.T) if closed else (t > 0) & (t < self.T)
        return in_t & self.space.contains(x[:, :-1], closed)

    def as_box(self) -> Box:
        if not isinstance(self.space, Box):
            raise TypeError("only box-shaped slabs can be flattened to a box")
        return Box(self.space.lo + (0.0,), self.space.hi + (float(self.T),))

    def boundary_measure(self) -> float:
        """|dD| * T for a box-shaped spatial domain."""
        if not isinstance(self.space, Box):
            raise TypeError("boundary rules need a box-shaped spatial domain")
        return _box_surface(self.space) * self.T


def _box_surface(box: Box) -> float:
    ext = np.subtract(box.hi, box.lo)
    if box.dim == 1:
        return 2.0
    return float(sum(2.0 * np.prod(np.delete(ext, i)) for i in range(box.dim)))


Geometry = Box | Disc | Union | TimeSlab


# quadrature sets -----------------------------------------------------------


@dataclass(frozen=True)
class QuadratureSet:
    points: np.ndarray
    weights: np.ndarray
    rule: str
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.points) != len(self.weights):
            raise ValueError("points and weights differ in length")

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def total_weight(self) -> float:
        return float(self.weights.sum())

    def to_csv(self, path, label: str | None = None) -> Path:
        """Write ``x1,...,xd,w`` rows (with a leading ``set`` column if labelled)."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            head = [f"x{i + 1}" for i in range(self.dim)] + ["w"]
            writer.writerow((["set"] if label else []) + head)
            for p, w in zip(self.points, self.weights):
                row = [repr(float(v)) for v in p] + [repr(float(w))]
                writer.writerow(([label] if label else []) + row)
        return path


def concat(sets: Sequence[QuadratureSet], rule: str | None = None) -> QuadratureSet:
    return QuadratureSet(
        np.concatenate([s.points for s in sets]),
        np.concatenate([s.weights for s in sets]),
        rule or sets[0].rule,
    )


def _uniform(points: np.ndarray, measure: float, rule: str, **meta) -> QuadratureSet:
    n = len(points)
    return QuadratureSet(points, np.full(n, measure / n), rule, meta)


def _as_box(geom) -> Box:
    if isinstance(geom, TimeSlab):
        return geom.as_box()
    if isinstance(geom, Box):
        return geom
    raise TypeError(f"{type(geom).__name__} is not box-shaped")


def sobol_unit(n: int, dim: int) -> np.ndarray:
    """First ``n`` points of the unscrambled Sobol sequence, origin skipped."""
    if dim > MAX_SOBOL_DIM:
        raise UnsupportedDimensionError(
            f"Sobol points supported up to dimension {MAX_SOBOL_DIM}, got {dim}"
        )
    if n < 1:
        raise ValueError("n must be positive")
    engine = qmc.Sobol(d=dim, scramble=False)
    engine.fast_forward(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return engine.random(n)


def sobol_points(n: int, geom) -> QuadratureSet:
    box = _as_box(geom)
    return _uniform(box.scale(sobol_unit(n, box.dim)), box.measure(), "sobol")


def uniform_random(n: int, geom, seed: int) -> QuadratureSet:
    """``n`` i.i.d. uniform points; rejection sampling for discs and unions."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if isinstance(geom, (Box, TimeSlab)) and not (
        isinstance(geom, TimeSlab) and not isinstance(geom.space, Box)
    ):
        box = _as_box(geom)
        pts = box.scale(rng.random((n, box.dim)))
        return _uniform(pts, box.measure(), "uniform-random", seed=seed)
    if isinstance(geom, Union):
        # components are disjoint: pick the component first, then sample it
        meas = np.array([p.measure() for p in geom.parts])
        which = rng.choice(len(geom.parts), size=n, p=meas / meas.sum())
        pts = np.empty((n, geom.dim))
        for i, part in enumerate(geom.parts):
            idx = np.flatnonzero(which == i)
            pts[idx] = part.scale(rng.random((len(idx), part.dim)))
        return _uniform(pts, geom.measure(), "uniform-random", seed=seed)
    if isinstance(geom, Disc):
        box = geom.bounding_box()
        out: list[np.ndarray] = []
        count = 0
        while count < n:
            cand = box.scale(rng.random((2 * (n - count) + 8, 2)))
            cand = cand[geom.contains(cand, closed=False)]
            out.append(cand)
            count += len(cand)
        return _uniform(np.concatenate(out)[:n], geom.measure(), "uniform-random", seed=seed)
    if isinstance(geom, TimeSlab):
        space = uniform_random(n, geom.space, seed)
        t = np.random.default_rng([seed, 1]).random(n) * geom.T
        return _uniform(np.column_stack([space.points, t]), geom.measure(), "uniform-random", seed=seed)
    raise TypeError(f"cannot sample {type(geom).__name__}")


def grid_shape(n: int, extents: Sequence[float]) -> tuple[int, ...]:
    """Per-axis resolution with product close to ``n`` and near-equal counts."""
    d = len(extents)
    base = max(1, round(n ** (1.0 / d)))
    shape = [base] * d
    # adjust the last axis so the product is as close to n as possible
    rest = int(np.prod(shape[:-1]))
    shape[-1] = max(1, round(n / rest))
    return tuple(shape)


def midpoint_grid(resolution, geom) -> QuadratureSet:
    """Cell-midpoint rule.

    For a box (or box-shaped time slab) ``resolution`` is one count per axis
    (an int is broadcast).  For a disc it is ``(n_r, n_phi)`` and the weights
    carry the polar Jacobian ``r dr dphi``.  For a union of boxes (or a slab
    over one) the resolution is applied to every component.
    """
    if isinstance(geom, Disc):
        n_r, n_phi = _resolution(resolution, 2)
        dr = geom.radius / n_r
        dphi = 2.0 * math.pi / n_phi
        r = (np.arange(n_r) + 0.5) * dr
        phi = (np.arange(n_phi) + 0.5) * dphi
        rr, pp = np.meshgrid(r, phi, indexing="ij")
        pts = np.column_stack(
            [geom.center[0] + (rr * np.cos(pp)).ravel(), geom.center[1] + (rr * np.sin(pp)).ravel()]
        )
        return QuadratureSet(pts, (rr * dr * dphi).ravel(), "midpoint-grid", {"shape": (n_r, n_phi)})
    if isinstance(geom, Union):
        return concat([midpoint_grid(resolution, p) for p in geom.parts])
    if isinstance(geom, TimeSlab) and isinstance(geom.space, Union):
        res = _resolution(resolution, geom.dim)
        return concat(
            [midpoint_grid(res, TimeSlab(p, geom.T)) for p in geom.space.parts]
        )
    box = _as_box(geom)
    res = _resolution(resolution, box.dim)
    axes = []
    for lo, hi, k in zip(box.lo, box.hi, res):
        h = (hi - lo) / k
        axes.append(lo + (np.arange(k) + 0.5) * h)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    w = box.measure() / len(pts)
    return QuadratureSet(pts, np.full(len(pts), w), "midpoint-grid", {"shape": tuple(res)})


def _resolution(resolution, dim: int) -> tuple[int, ...]:
    if np.isscalar(resolution):
        res = (int(resolution),) * dim
    else:
        res = tuple(int(r) for r in resolution)
    if len(res) != dim or min(res) < 1:
        raise ValueError(f"need {dim} positive resolutions, got {resolution!r}")
    return res


def midpoint_count(n: int, geom) -> QuadratureSet:
    """Midpoint grid with roughly ``n`` points (actual count recorded in meta)."""
    if isinstance(geom, Disc):
        # cells of comparable size: n_phi ~ 2 pi n_r / 2 keeps arcs ~ radial step
        n_r = max(1, round(math.sqrt(n / math.pi)))
        n_phi = max(1, round(n / n_r))
        return midpoint_grid((n_r, n_phi), geom)
    if isinstance(geom, Union):
        return _split_by_measure(n, geom.parts, lambda k, part: midpoint_count(k, part))
    if isinstance(geom, TimeSlab) and isinstance(geom.space, Union):
        return _split_by_measure(
            n, [TimeSlab(p, geom.T) for p in geom.space.parts], lambda k, part: midpoint_count(k, part)
        )
    box = _as_box(geom)
    return midpoint_grid(grid_shape(n, np.subtract(box.hi, box.lo)), box)


def _split_by_measure(n: int, parts, build) -> QuadratureSet:
    meas = np.array([p.measure() for p in parts])
    counts = np.maximum(1, np.round(n * meas / meas.sum()).astype(int))
    return concat([build(int(k), p) for k, p in zip(counts, parts)])


def boundary_points(slab: TimeSlab, n, rule: str = "grid", seed: int | None = None) -> QuadratureSet:
    """Points on ``dD x (0, T)`` for a box-shaped spatial domain.

    ``rule="grid"``: ``n`` is ``(n_face, n_t)`` or a total count.  Each face
    carries a midpoint grid with ``n_face`` points (per face) times ``n_t``
    time midpoints.  ``rule="random"``: ``n`` i.i.d. points, faces chosen in
    proportion to their area.  Weights sum to ``|dD| * T`` either way.
    """
    space = slab.space
    if not isinstance(space, Box):
        raise TypeError("boundary rules need a box-shaped spatial domain")
    d = space.dim
    faces = [(axis, side) for axis in range(d) for side in (0, 1)]
    area = np.array([_face_area(space, axis) for axis, _ in faces])
    total = slab.boundary_measure()
    if rule == "random":
        n = int(n)
        rng = np.random.default_rng(seed)
        which = rng.choice(len(faces), size=n, p=area / area.sum())
        u = rng.random((n, d + 1))
        pts = np.empty((n, d + 1))
        pts[:, :d] = space.scale(u[:, :d])
        for i, (axis, side) in enumerate(faces):
            idx = which == i
            pts[idx, axis] = space.hi[axis] if side else space.lo[axis]
        pts[:, d] = u[:, d] * slab.T
        return QuadratureSet(pts, np.full(n, total / n), "uniform-random", {"seed": seed})
    if np.isscalar(n):
        n_t = max(1, round(math.sqrt(n / len(faces)))) if d > 1 else max(1, round(n / len(faces)))
        n_face = max(1, round(n / (len(faces) * n_t)))
    else:
        n_face, n_t = (int(v) for v in n)
    t = (np.arange(n_t) + 0.5) * slab.T / n_t
    chunks, weights = [], []
    for (axis, side), a in zip(faces, area):
        if d == 1:
            face_pts = np.empty((1, 0))
        else:
            sub = Box(tuple(np.delete(space.lo, axis)), tuple(np.delete(space.hi, axis)))
            face_pts = midpoint_count(n_face, sub).points
        m = len(face_pts)
        coord = space.hi[axis] if side else space.lo[axis]
        fp = np.repeat(face_pts, n_t, axis=0)
        tt = np.tile(t, m)
        full = np.empty((m * n_t, d + 1))
        full[:, :d][:, [i for i in range(d) if i != axis]] = fp
        full[:, axis] = coord
        full[:, d] = tt
        chunks.append(full)
        weights.append(np.full(m * n_t, a * slab.T / (m * n_t)))
    return QuadratureSet(np.concatenate(chunks), np.concatenate(weights), "boundary-grid", {"n_t": n_t})


def _face_area(box: Box, axis: int) -> float:
    if box.dim == 1:
        return 1.0
    return float(np.prod(np.delete(np.subtract(box.hi, box.lo), axis)))


def integrate(q: QuadratureSet, values) -> float:
    """Weighted sum ``sum_i w_i v_i`` (``values`` may carry trailing axes)."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] != len(q):
        raise ValueError(f"expected {len(q)} values, got {v.shape[0]}")
    return np.tensordot(q.weights, v, axes=(0, 0))
