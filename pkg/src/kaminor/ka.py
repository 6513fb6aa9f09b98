"""Finite-resolution Kolmogorov-Arnold embedding of the unit square into R^5.

Family k (k = 0..4) of inner functions is a staircase on [0, 1] with step
``sigma = 1/level``. Its ramps (gaps) are the open intervals

    (k*sigma/5 + i*sigma,  k*sigma/5 + i*sigma + gamma*sigma)

and it is constant on the closed plateaus between them. Because the gap
width ``gamma*sigma`` is at most the family shift ``sigma/5``, a real
number lies in the gap of at most one family, so every point of the square
sits on a plateau cell of at least three families.

The coordinates of the embedding are ``Phi_k(x, y) = phi_k(x) + sqrt(2) * phi_k(y)``.
On a plateau cell of family k, ``Phi_k`` is constant and its 2 x 5
Jacobian has a zero column k. The outer function ``g`` is solved for
iteratively on the plateau values of all cells.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

N_INPUTS = 2
N_FAMILIES = 5
SQRT2 = math.sqrt(2.0)
DEFAULT_LAMBDAS = (1.0, SQRT2)
COLLISION_TOL = 1e-9
# classification tolerance, in units of sigma
_POS_TOL = 1e-9


class PlateauCollisionError(ValueError):
    """Two plateau cells share (numerically) the same embedding value."""


class BoundaryPointError(ValueError):
    """The point lies on a plateau/ramp boundary, where phi is not differentiable."""


@dataclass(frozen=True)
class Staircase:
    """Monotone piecewise-linear staircase of one family.

    Plateau ``i`` is ``[shift + (i + gamma) * sigma, shift + (i + 1) * sigma]``
    and carries the value of its left end. The ramp before it rises
    linearly from the previous plateau value.
    """

    k: int
    level: int
    gamma: float

    @property
    def sigma(self) -> float:
        return 1.0 / self.level

    @property
    def shift(self) -> float:
        return self.k * self.sigma / N_FAMILIES

    def _units(self, x):
        # position measured in cells, relative to this family's shift
        u = np.asarray(x, dtype=np.float64) * self.level - self.k / N_FAMILIES
        i = np.floor(u)
        return i, u - i

    def plateau_value(self, i):
        return (np.asarray(i, dtype=np.float64) + self.gamma) * self.sigma + self.shift

    @cached_property
    def plateau_indices(self) -> np.ndarray:
        """Indices of the plateaus that meet [0, 1]."""
        last = math.floor(self.level - self.gamma - self.k / N_FAMILIES + 1e-12)
        return np.arange(-1, last + 1)

    @property
    def plateau_values(self) -> np.ndarray:
        return self.plateau_value(self.plateau_indices)

    def plateau_interval(self, i) -> tuple[float, float]:
        """Plateau ``i`` clipped to [0, 1]."""
        lo = self.shift + (i + self.gamma) * self.sigma
        hi = self.shift + (i + 1) * self.sigma
        return max(lo, 0.0), min(hi, 1.0)

    def gap_intervals(self) -> list[tuple[float, float]]:
        """Open ramp intervals that meet (0, 1), unclipped."""
        out = []
        for i in range(0, self.level + 1):
            lo = self.shift + i * self.sigma
            hi = lo + self.gamma * self.sigma
            if lo < 1.0 and hi > 0.0:
                out.append((lo, hi))
        return out

    def ramp_slope(self) -> float:
        return 1.0 / self.gamma

    def __call__(self, x):
        i, fr = self._units(x)
        ramp = fr < self.gamma
        on_ramp = self.plateau_value(i - 1) + fr * self.sigma / self.gamma
        return np.where(ramp, on_ramp, self.plateau_value(i))

    def derivative(self, x):
        _, fr = self._units(x)
        return np.where(fr < self.gamma, self.ramp_slope(), 0.0)

    def in_gap(self, x):
        """True strictly inside a ramp; plateau endpoints count as plateau."""
        _, fr = self._units(x)
        return (fr > _POS_TOL) & (fr < self.gamma - _POS_TOL)

    def plateau_index(self, x):
        """Plateau containing ``x`` (closed plateaus), or -2 inside a ramp."""
        i, fr = self._units(x)
        idx = np.where(fr <= _POS_TOL, i - 1, i).astype(int)
        return np.where(self.in_gap(x), -2, idx)

    def distance_to_break(self, x):
        """Distance from ``x`` to the nearest plateau/ramp boundary."""
        _, fr = self._units(x)
        d = np.minimum(np.minimum(fr, 1.0 - fr), np.abs(fr - self.gamma))
        return d * self.sigma


def build_staircase(k: int, level: int, gamma: float) -> Staircase:
    if k not in range(N_FAMILIES):
        raise ValueError(f"family index k={k} outside 0..{N_FAMILIES - 1}")
    if int(level) != level or level < 2:
        raise ValueError(f"level must be an integer >= 2, got {level}")
    if not 0.0 < gamma <= 1.0 / N_FAMILIES + 1e-15:
        raise ValueError(f"gamma must lie in (0, 1/5], got {gamma}")
    return Staircase(k, int(level), float(gamma))


@dataclass
class KAEmbedding:
    """The map Phi: [0,1]^2 -> R^5 built from five staircase families."""

    level: int
    gamma: float
    lambdas: tuple[float, float]
    staircases: list[Staircase] = field(repr=False)

    n = N_INPUTS
    m = N_FAMILIES

    @property
    def sigma(self) -> float:
        return 1.0 / self.level

    def __call__(self, X) -> np.ndarray:
        """Embedding coordinates, shape (..., 5), for points of shape (..., 2)."""
        X = np.asarray(X, dtype=np.float64)
        l1, l2 = self.lambdas
        return np.stack([l1 * s(X[..., 0]) + l2 * s(X[..., 1]) for s in self.staircases], axis=-1)

    def cell_values(self, k: int) -> np.ndarray:
        """Plateau value of Phi_k on cell (i, j), indexed like ``plateau_indices``."""
        v = self.staircases[k].plateau_values
        l1, l2 = self.lambdas
        return l1 * v[:, None] + l2 * v[None, :]

    @cached_property
    def cells(self) -> dict[str, np.ndarray]:
        """Every plateau cell of every family: family, value, and centre of the clipped cell."""
        fam, vals, cx, cy = [], [], [], []
        for k, s in enumerate(self.staircases):
            centres = np.array([sum(s.plateau_interval(i)) / 2.0 for i in s.plateau_indices])
            V = self.cell_values(k)
            n = len(centres)
            fam.append(np.full(n * n, k))
            vals.append(V.ravel())
            cx.append(np.repeat(centres, n))
            cy.append(np.tile(centres, n))
        return {
            "family": np.concatenate(fam),
            "value": np.concatenate(vals),
            "center": np.stack([np.concatenate(cx), np.concatenate(cy)], axis=-1),
        }

    def lipschitz_bound(self) -> float:
        """Bound on |Phi_k(x) - Phi_k(y)| / |x - y|_inf."""
        return sum(self.lambdas) * max(s.ramp_slope() for s in self.staircases)

    def good_mask(self, X) -> np.ndarray:
        """Boolean (..., 5): family k is on a plateau in both coordinates."""
        X = np.asarray(X, dtype=np.float64)
        return np.stack([~s.in_gap(X[..., 0]) & ~s.in_gap(X[..., 1]) for s in self.staircases], axis=-1)

    def _fractions(self, x) -> np.ndarray:
        """Position within the current cell, shape (..., 5); same arithmetic as ``Staircase._units``."""
        u = np.asarray(x, dtype=np.float64)[..., None] * self.level - np.arange(N_FAMILIES) / N_FAMILIES
        return u - np.floor(u)

    def distance_to_break(self, x) -> float:
        """Distance from any coordinate of ``x`` to the nearest break of any family."""
        fr = self._fractions(x)
        d = np.minimum(np.minimum(fr, 1.0 - fr), np.abs(fr - self.gamma))
        return float(d.min() * self.sigma)

    def to_dict(self) -> dict:
        return {
            "kind": "ka-embedding",
            "n": self.n,
            "m": self.m,
            "level": self.level,
            "gamma": self.gamma,
            "lambdas": list(self.lambdas),
            "families": [
                {
                    "family": s.k,
                    "shift": s.shift,
                    "plateauIndices": s.plateau_indices.tolist(),
                    "plateauValues": s.plateau_values.tolist(),
                }
                for s in self.staircases
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KAEmbedding":
        emb = build_embedding(d["level"], d["gamma"], tuple(d["lambdas"]))
        for fam in d.get("families", []):
            stored = np.array(fam["plateauValues"])
            if not np.array_equal(stored, emb.staircases[fam["family"]].plateau_values):
                raise ValueError(f"family {fam['family']}: stored plateau values do not match the construction")
        return emb


def build_embedding(level: int, gamma: float, lambdas=DEFAULT_LAMBDAS) -> KAEmbedding:
    staircases = [build_staircase(k, level, gamma) for k in range(N_FAMILIES)]
    return KAEmbedding(int(level), float(gamma), tuple(float(v) for v in lambdas), staircases)


def embedding_jacobian(emb: KAEmbedding, x) -> np.ndarray:
    """2 x 5 Jacobian of Phi at ``x``; column k is (l1 phi_k'(x1), l2 phi_k'(x2))."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError(f"x must be a point of [0,1]^2, got {x}")
    if emb.distance_to_break(x) <= 1e-12:
        raise BoundaryPointError(f"{x.tolist()} lies on a piece boundary")
    slope = np.where(emb._fractions(x) < emb.gamma, 1.0 / emb.gamma, 0.0)
    return np.asarray(emb.lambdas)[:, None] * slope


def good_families(emb: KAEmbedding, x) -> set[int]:
    mask = emb.good_mask(np.asarray(x, dtype=np.float64))
    return {k for k in range(N_FAMILIES) if mask[k]}


def check_distinct_plateaus(emb: KAEmbedding) -> float:
    """Smallest gap between the plateau values of any two cells, over all families.

    Raises PlateauCollisionError when it is below ``COLLISION_TOL``.
    """
    v = np.sort(emb.cells["value"])
    gap = float(np.min(np.diff(v)))
    if gap < COLLISION_TOL:
        raise PlateauCollisionError(
            f"plateau values collide (min gap {gap:.3g}) at level {emb.level} with lambdas {emb.lambdas}"
        )
    return gap


# --- target functions -----------------------------------------------------

CATALOG = ("zero", "constant", "sum", "product", "sinprod")
_ALIASES = {"x+y": "sum", "x*y": "product", "xy": "product", "sin(pi x)sin(pi y)": "sinprod", "const": "constant"}


@dataclass(frozen=True)
class TargetFunction:
    """A continuous f on [0,1]^2: a catalog entry or a bilinearly interpolated grid table."""

    kind: str
    c: float = 1.0
    table: np.ndarray | None = field(default=None, compare=False, repr=False)

    @classmethod
    def catalog(cls, name: str, c: float = 1.0) -> "TargetFunction":
        name = _ALIASES.get(name, name)
        if name not in CATALOG:
            raise ValueError(f"unknown target {name!r}; choose from {CATALOG}")
        return cls(name, c)

    @classmethod
    def from_grid(cls, table) -> "TargetFunction":
        """Table of samples on ``linspace(0, 1, n)`` x ``linspace(0, 1, n')``, indexed [ix, iy]."""
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or min(table.shape) < 2:
            raise ValueError("grid table must be 2-D with at least 2 nodes per axis")
        return cls("grid", table=table)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "zero":
            return np.zeros(np.broadcast(x, y).shape)
        if self.kind == "constant":
            return np.full(np.broadcast(x, y).shape, float(self.c))
        if self.kind == "sum":
            return x + y
        if self.kind == "product":
            return x * y
        if self.kind == "sinprod":
            return np.sin(np.pi * x) * np.sin(np.pi * y)
        return _bilinear(self.table, x, y)

    def modulus(self, delta: float) -> float:
        """Modulus of continuity in the sup metric on [0,1]^2."""
        if delta <= 0:
            return 0.0
        if self.kind in ("zero", "constant"):
            return 0.0
        if self.kind == "sum":
            return 2.0 * min(delta, 1.0)
        if self.kind == "product":
            d = min(delta, 1.0)
            return 2.0 * d - d * d
        if self.kind == "sinprod":
            return math.sin(math.pi * min(delta, 0.5))
        return empirical_modulus(self, delta)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "constant":
            d["c"] = self.c
        if self.kind == "grid":
            d["table"] = self.table.tolist()
        return d


def _bilinear(table, x, y):
    nx, ny = table.shape
    fx = np.clip(x, 0.0, 1.0) * (nx - 1)
    fy = np.clip(y, 0.0, 1.0) * (ny - 1)
    ix = np.minimum(np.floor(fx).astype(int), nx - 2)
    iy = np.minimum(np.floor(fy).astype(int), ny - 2)
    tx, ty = fx - ix, fy - iy
    return (
        table[ix, iy] * (1 - tx) * (1 - ty)
        + table[ix + 1, iy] * tx * (1 - ty)
        + table[ix, iy + 1] * (1 - tx) * ty
        + table[ix + 1, iy + 1] * tx * ty
    )


def empirical_modulus(f, delta: float, resolution: int = 1024) -> float:
    """max(f) - min(f) over sup-metric windows of side ``delta``, sampled on a fine grid."""
    n = resolution + 1
    g = np.linspace(0.0, 1.0, n)
    F = f(g[:, None], g[None, :])
    w = max(1, int(round(delta * resolution))) + 1
    hi = ndimage.maximum_filter(F, size=w, mode="nearest")
    lo = ndimage.minimum_filter(F, size=w, mode="nearest")
    return float(np.max(hi - lo))


def resolution_floor(f: TargetFunction, emb: KAEmbedding) -> float:
    """2 * modulus of f over one cell of side sigma."""
    return 2.0 * f.modulus(emb.sigma)


# --- outer function -------------------------------------------------------


@dataclass
class OuterFunction:
    """Piecewise-linear g with constant extension beyond its breakpoints."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.t.shape != self.values.shape or self.t.ndim != 1 or self.t.size == 0:
            raise ValueError("breakpoints and values must be equal-length nonempty vectors")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("breakpoints must be strictly increasing")

    @classmethod
    def zero(cls, t) -> "OuterFunction":
        t = np.asarray(t, dtype=np.float64)
        return cls(t, np.zeros_like(t))

    def __call__(self, s):
        return np.interp(s, self.t, self.values)

    def to_dict(self) -> dict:
        return {"breakpoints": self.t.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "OuterFunction":
        return cls(d["breakpoints"], d["values"])


def default_eval_grid(emb: KAEmbedding) -> np.ndarray:
    """Uniform (8*level + 1)^2 grid on the unit square, as an (N, 2) array."""
    g = np.linspace(0.0, 1.0, 8 * emb.level + 1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=-1)


def represented(emb: KAEmbedding, g: OuterFunction, points) -> np.ndarray:
    """sum_k g(Phi_k(x)) at each point."""
    return g(emb(points)).sum(axis=-1)


class _Iteration:
    """Embedding values at cell centres and grid points, computed once."""

    def __init__(self, emb, f, eval_grid, divisor):
        check_distinct_plateaus(emb)
        cells = emb.cells
        order = np.argsort(cells["value"])
        self.t = cells["value"][order]
        centers = cells["center"][order]
        self.phi_centers = emb(centers)
        self.f_centers = f(centers[:, 0], centers[:, 1])
        self.grid = np.asarray(eval_grid, dtype=np.float64)
        self.phi_grid = emb(self.grid)
        self.f_grid = f(self.grid[:, 0], self.grid[:, 1])
        self.divisor = divisor

    def residual(self, g, on_grid=True):
        if on_grid:
            return self.f_grid - g(self.phi_grid).sum(axis=-1)
        return self.f_centers - g(self.phi_centers).sum(axis=-1)

    def step(self, g):
        increments = self.residual(g, on_grid=False) / self.divisor
        t = np.union1d(g.t, self.t)
        nxt = OuterFunction(t, g(t) + np.interp(t, self.t, increments))
        return nxt, self.residual(nxt)


def outer_iteration_step(emb: KAEmbedding, g: OuterFunction, f: TargetFunction, eval_grid=None, divisor: float = 3.0):
    """One update g_t -> g_{t+1} and the new residual on ``eval_grid``.

    Every cell Q of every family gets the increment e_t(centre of Q) / divisor
    at its plateau value; g_{t+1} adds the piecewise-linear interpolant of
    these increments to g_t.
    """
    if eval_grid is None:
        eval_grid = default_eval_grid(emb)
    return _Iteration(emb, f, eval_grid, divisor).step(g)


@dataclass
class IterationReport:
    errors: list[float]
    floor: float
    alarms: list[int]

    @property
    def ratios(self) -> list[float | None]:
        return [b / a if a > 0 else None for a, b in zip(self.errors, self.errors[1:])]

    @property
    def iterations(self) -> int:
        return len(self.errors) - 1

    @property
    def floor_iteration(self) -> int | None:
        for t, e in enumerate(self.errors):
            if e <= self.floor:
                return t
        return None

    @property
    def reached_floor(self) -> bool:
        return self.floor_iteration is not None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "supError", "ratio"])
        ratios = [None] + self.ratios
        for t, (e, r) in enumerate(zip(self.errors, ratios)):
            w.writerow([t, format(e, ".17g"), "" if r is None else format(r, ".17g")])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, floor: float = 0.0) -> "IterationReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([float(r["supError"]) for r in rows], floor, [])

    def to_dict(self) -> dict:
        return {
            "errors": self.errors,
            "ratios": self.ratios,
            "floor": self.floor,
            "floorIteration": self.floor_iteration,
            "nonContractionAlarms": self.alarms,
        }


def represent(
    emb: KAEmbedding,
    f: TargetFunction,
    max_iterations: int = 25,
    eval_grid=None,
    floor: float | None = None,
    divisor: float = 3.0,
    g0: OuterFunction | None = None,
) -> tuple[OuterFunction, IterationReport]:
    """Iterate the outer update until the sup error drops to ``floor`` or the budget runs out.

    ``floor`` defaults to ``resolution_floor(f, emb)``. Iterations where the
    error grows while still above the floor are listed in ``alarms``.
    """
    if eval_grid is None:
        eval_grid = default_eval_grid(emb)
    if floor is None:
        floor = resolution_floor(f, emb)
    it = _Iteration(emb, f, eval_grid, divisor)
    g = g0 if g0 is not None else OuterFunction.zero(it.t)
    errors = [float(np.max(np.abs(it.residual(g))))]
    alarms = []
    while errors[-1] > floor and len(errors) <= max_iterations:
        g, e = it.step(g)
        errors.append(float(np.max(np.abs(e))))
        if errors[-1] > errors[-2]:
            alarms.append(len(errors) - 1)
    return g, IterationReport(errors, float(floor), alarms)
