"""Matrix minors, exterior powers and minor-concentration functionals.

Minor tables are indexed by lexicographically ordered row and column
subsets, so ``MinorTable.values[r, c]`` is the determinant of the
submatrix picked out by ``row_subsets[r]`` and ``col_subsets[c]``.
With that ordering the table of ``A @ B`` is the product of the tables of
``A`` and ``B`` (Cauchy-Binet).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np

ZERO_PIVOT_RTOL = 1e-12
MAX_MINOR_COUNT = 10**6
_CHUNK = 1 << 15


class CapacityError(ValueError):
    """Raised when a minor table would exceed ``MAX_MINOR_COUNT`` entries."""


def as_matrix(M) -> np.ndarray:
    """Coerce ``M`` into a finite 2-D float64 array."""
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix entries must be finite")
    return A


def _batched_det(stack: np.ndarray) -> np.ndarray:
    """Determinants of a stack of square matrices, shape (B, h, h).

    Gaussian elimination with partial pivoting, vectorised over the batch.
    A pivot no larger than ``ZERO_PIVOT_RTOL`` times the largest entry of
    its matrix marks the matrix as singular and its determinant is 0.
    """
    A = np.array(stack, dtype=np.float64, copy=True)
    B, h, _ = A.shape
    if h == 0:
        return np.ones(B)
    scale = np.abs(A).reshape(B, -1).max(axis=1)
    det = np.ones(B)
    singular = scale == 0.0
    batch = np.arange(B)
    for k in range(h):
        piv = k + np.argmax(np.abs(A[:, k:, k]), axis=1)
        swap = piv != k
        if np.any(swap):
            rows_k = A[batch, k].copy()
            A[batch, k] = A[batch, piv]
            A[batch, piv] = rows_k
            det[swap] = -det[swap]
        p = A[:, k, k]
        singular |= np.abs(p) <= ZERO_PIVOT_RTOL * scale
        safe = np.where(singular, 1.0, p)
        det *= safe
        if k + 1 < h:
            factors = A[:, k + 1:, k] / safe[:, None]
            A[:, k + 1:, k:] -= factors[:, :, None] * A[:, k, None, k:]
    det[singular] = 0.0
    return det


def determinant(M) -> float:
    """Determinant of a square matrix by LU with partial pivoting."""
    A = as_matrix(M)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"determinant needs a square matrix, got {A.shape}")
    return float(_batched_det(A[None])[0])


def subsets(n: int, h: int) -> list[tuple[int, ...]]:
    """All h-subsets of range(n) in lexicographic order."""
    return list(itertools.combinations(range(n), h))


def subset_rank(subset, n: int) -> int:
    """Lexicographic rank of a sorted subset of range(n)."""
    h = len(subset)
    rank, prev = 0, -1
    for pos, s in enumerate(subset):
        for skipped in range(prev + 1, s):
            rank += comb(n - skipped - 1, h - pos - 1)
        prev = s
    return rank


@dataclass
class MinorTable:
    """All h x h minors of a matrix; the concrete form of its h-th exterior power."""

    h: int
    values: np.ndarray
    source_shape: tuple[int, int]
    row_subsets: list[tuple[int, ...]] = field(repr=False)
    col_subsets: list[tuple[int, ...]] = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def value(self, rows, cols) -> float:
        p, q = self.source_shape
        return float(self.values[subset_rank(tuple(rows), p), subset_rank(tuple(cols), q)])

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "sourceShape": list(self.source_shape),
            "rowCount": self.values.shape[0],
            "colCount": self.values.shape[1],
            "rowSubsets": [list(s) for s in self.row_subsets],
            "colSubsets": [list(s) for s in self.col_subsets],
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MinorTable":
        values = np.array(d["values"], dtype=np.float64).reshape(d["rowCount"], d["colCount"])
        return cls(
            h=int(d["h"]),
            values=values,
            source_shape=tuple(d["sourceShape"]),
            row_subsets=[tuple(s) for s in d["rowSubsets"]],
            col_subsets=[tuple(s) for s in d["colSubsets"]],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MinorTable":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        """One row per minor: space-separated subsets, then the value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rowSubset", "colSubset", "value"])
        for r, rs in enumerate(self.row_subsets):
            for c, cs in enumerate(self.col_subsets):
                w.writerow([" ".join(map(str, rs)), " ".join(map(str, cs)), format(self.values[r, c], ".17g")])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, source_shape) -> "MinorTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        p, q = source_shape
        rs = [tuple(int(i) for i in row["rowSubset"].split()) for row in rows]
        h = len(rs[0])
        table = cls(h, np.zeros((comb(p, h), comb(q, h))), (p, q), subsets(p, h), subsets(q, h))
        for row, r in zip(rows, rs):
            c = tuple(int(i) for i in row["colSubset"].split())
            table.values[subset_rank(r, p), subset_rank(c, q)] = float(row["value"])
        return table


def _check_order(shape, h):
    p, q = shape
    if not 1 <= h <= min(p, q):
        raise ValueError(f"minor order h={h} outside [1, {min(p, q)}] for a {p}x{q} matrix")
    count = comb(p, h) * comb(q, h)
    if count > MAX_MINOR_COUNT:
        raise CapacityError(f"{count} minors of order {h} for a {p}x{q} matrix exceeds {MAX_MINOR_COUNT}")
    return count


def minors(M, h: int) -> MinorTable:
    """Enumerate every h x h minor of ``M``."""
    A = as_matrix(M)
    p, q = A.shape
    _check_order(A.shape, h)
    rsub, csub = subsets(p, h), subsets(q, h)
    R = np.array(rsub, dtype=np.intp)
    C = np.array(csub, dtype=np.intp)
    values = np.empty((len(rsub), len(csub)))
    if h == 1:
        values[:] = A
    else:
        # chunk over row subsets to bound the (rows, cols, h, h) stack
        step = max(1, _CHUNK // len(csub))
        for start in range(0, len(rsub), step):
            Rc = R[start:start + step]
            stack = A[Rc[:, None, :, None], C[None, :, None, :]]
            values[start:start + step] = _batched_det(stack.reshape(-1, h, h)).reshape(len(Rc), len(csub))
    return MinorTable(h, values, (p, q), rsub, csub)


def l2_over_l1(values) -> float | None:
    """L2/L1 ratio of absolute values, or None when all are zero."""
    a = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    top = a.max(initial=0.0)
    if top == 0.0:
        return None
    # rescale so tiny or huge minors neither underflow nor overflow when squared
    a = a / top
    return float(np.sqrt(np.sum(a * a)) / a.sum())


def mc(M, h: int) -> float | None:
    """Minor concentration: L2 norm over L1 norm of all h x h minors.

    Returns None (the degenerate outcome) when every minor is exactly zero.
    """
    return l2_over_l1(minors(M, h).values)


def grouped_concentration(table: MinorTable, axis: str) -> tuple[np.ndarray, float | None]:
    """Group masses of a minor table and their L2/L1 concentration.

    ``axis="rows"`` groups minors sharing a row subset (a row of the minor
    grid), ``axis="cols"`` those sharing a column subset. The mass of a
    group is the L1 norm of its absolute minors.
    """
    if axis not in ("rows", "cols"):
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    masses = np.abs(table.values).sum(axis=1 if axis == "rows" else 0)
    return masses, l2_over_l1(masses)


@dataclass
class MCReport:
    h: int
    mc_global: float | None
    row_group_masses: np.ndarray
    col_group_masses: np.ndarray
    row_concentration: float | None
    col_concentration: float | None
    max_abs_minor: float
    total_minor_count: int

    @property
    def degenerate(self) -> bool:
        return self.mc_global is None

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "mcGlobal": self.mc_global,
            "degenerate": self.degenerate,
            "rowGroupMasses": self.row_group_masses.tolist(),
            "colGroupMasses": self.col_group_masses.tolist(),
            "rowConcentration": self.row_concentration,
            "colConcentration": self.col_concentration,
            "maxAbsMinor": self.max_abs_minor,
            "totalMinorCount": self.total_minor_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MCReport":
        return cls(
            h=d["h"],
            mc_global=d["mcGlobal"],
            row_group_masses=np.array(d["rowGroupMasses"], dtype=np.float64),
            col_group_masses=np.array(d["colGroupMasses"], dtype=np.float64),
            row_concentration=d["rowConcentration"],
            col_concentration=d["colConcentration"],
            max_abs_minor=d["maxAbsMinor"],
            total_minor_count=d["totalMinorCount"],
        )


def mc_report(M, h: int) -> MCReport:
    table = minors(M, h)
    rows, row_conc = grouped_concentration(table, "rows")
    cols, col_conc = grouped_concentration(table, "cols")
    return MCReport(
        h=h,
        mc_global=l2_over_l1(table.values),
        row_group_masses=rows,
        col_group_masses=cols,
        row_concentration=row_conc,
        col_concentration=col_conc,
        max_abs_minor=float(np.abs(table.values).max()),
        total_minor_count=table.values.size,
    )


def random_gaussian_matrix(p: int, q: int, seed: int) -> np.ndarray:
    """i.i.d. standard normal p x q matrix from numpy's PCG64 generator seeded with ``seed``."""
    if p < 1 or q < 1:
        raise ValueError("p and q must be positive")
    return np.random.default_rng(seed).standard_normal((p, q))


QUANTILE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class EnsembleSummary:
    """Statistics of mc over a Gaussian ensemble.

    ``stddev`` is the population standard deviation. Degenerate draws are
    excluded from the statistics and counted in ``degenerate``.
    """

    trials: int
    seed: int
    shape: tuple[int, int]
    h: int
    mean: float
    stddev: float
    min: float
    max: float
    quantiles: dict[float, float]
    degenerate: int
    values: np.ndarray = field(repr=False)

    def to_dict(self, include_values: bool = False) -> dict:
        d = {
            "trials": self.trials,
            "seed": self.seed,
            "shape": list(self.shape),
            "h": self.h,
            "mean": self.mean,
            "stddev": self.stddev,
            "min": self.min,
            "max": self.max,
            "quantiles": {format(k, "g"): v for k, v in self.quantiles.items()},
            "degenerate": self.degenerate,
        }
        if include_values:
            d["values"] = self.values.tolist()
        return d


def summarize(values, *, trials: int, seed: int, shape, h: int) -> EnsembleSummary:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        nan = float("nan")
        stats = dict(mean=nan, stddev=nan, min=nan, max=nan, quantiles={q: nan for q in QUANTILE_LEVELS})
    else:
        qs = np.quantile(vals, QUANTILE_LEVELS)
        # enforce monotone quantiles against interpolation roundoff
        qs = np.maximum.accumulate(qs)
        stats = dict(
            mean=float(vals.mean()),
            stddev=float(vals.std()),
            min=float(vals.min()),
            max=float(vals.max()),
            quantiles={lvl: float(v) for lvl, v in zip(QUANTILE_LEVELS, qs)},
        )
    return EnsembleSummary(
        trials=trials,
        seed=seed,
        shape=tuple(shape),
        h=h,
        degenerate=trials - int(vals.size),
        values=vals,
        **stats,
    )


def mc_baseline(p: int, q: int, h: int, trials: int, seed: int) -> EnsembleSummary:
    """mc over ``trials`` Gaussian p x q matrices.

    One PCG64 stream seeded with ``seed`` supplies the matrices in order,
    each drawn as ``standard_normal((p, q))``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    _check_order((p, q), h)
    rng = np.random.default_rng(seed)
    values = [mc(rng.standard_normal((p, q)), h) for _ in range(trials)]
    return summarize(values, trials=trials, seed=seed, shape=(p, q), h=h)
