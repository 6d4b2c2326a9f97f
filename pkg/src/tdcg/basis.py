"""Uniform spline bases and tabulated pair force fields.

Two basis degrees are supported on uniform clamped knot grids: degree 1
(piecewise-linear "hat" functions) and degree 3 (cubic B-splines).  Both
form a partition of unity on [lo, hi] and evaluate sparsely: at most
degree + 1 functions are nonzero at any point.  A pair force field is a
coefficient vector over such a basis with a radial cutoff; the
time-dependent variant carries a coefficient matrix over a radial basis
times a temporal basis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

__all__ = [
    "KnotGrid",
    "SplineBasis1D",
    "TensorBasis2D",
    "PairForceField",
    "TimeDependentPairForceField",
    "potential_from_force",
    "export_field_csv",
    "export_field_csv_td",
]


@dataclass(frozen=True)
class KnotGrid:
    """Uniform knots on [lo, hi] carrying n_basis spline functions of a given degree."""

    lo: float
    hi: float
    n_basis: int
    degree: int

    def __post_init__(self):
        if self.degree not in (1, 3):
            raise ValueError(f"degree must be 1 or 3, got {self.degree}")
        if not self.hi > self.lo:
            raise ValueError(f"need hi > lo, got [{self.lo}, {self.hi}]")
        if self.n_basis < self.degree + 1:
            raise ValueError(
                f"n_basis must be >= degree + 1 = {self.degree + 1}, got {self.n_basis}")

    @property
    def n_spans(self) -> int:
        return self.n_basis - self.degree

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.n_spans

    def knots(self) -> np.ndarray:
        """Full clamped knot vector of length n_basis + degree + 1."""
        inner = self.lo + self.spacing * np.arange(self.n_spans + 1)
        inner[-1] = self.hi
        return np.concatenate([np.full(self.degree, self.lo), inner,
                               np.full(self.degree, self.hi)])


class SplineBasis1D:
    """B-spline basis on a KnotGrid, evaluated with the Cox-de Boor recursion."""

    def __init__(self, grid: KnotGrid):
        self.grid = grid
        self._t = grid.knots()

    @property
    def n_basis(self) -> int:
        return self.grid.n_basis

    def _span(self, x: np.ndarray) -> np.ndarray:
        s = ((x - self.grid.lo) / self.grid.spacing).astype(np.int64)
        return np.clip(s, 0, self.grid.n_spans - 1) + self.grid.degree

    def eval_many(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Evaluate the (degree + 1) possibly-nonzero functions at each in-domain x.

        Parameters
        ----------
        x : ndarray, shape (n,)
            Points inside [lo, hi]; out-of-domain points are the caller's
            job to mask out beforehand.

        Returns
        -------
        first : ndarray of int, shape (n,)
            Index of the first nonzero basis function at each point.
        vals : ndarray, shape (n, degree + 1)
            Values of functions first .. first + degree.
        """
        x = np.asarray(x, dtype=np.float64)
        p, t = self.grid.degree, self._t
        i = self._span(x)
        n = x.shape[0]
        vals = np.zeros((n, p + 1))
        vals[:, 0] = 1.0
        left = np.empty((p + 1, n))
        right = np.empty((p + 1, n))
        for j in range(1, p + 1):
            left[j] = x - t[i + 1 - j]
            right[j] = t[i + j] - x
            saved = np.zeros(n)
            for r in range(j):
                temp = vals[:, r] / (right[r + 1] + left[j - r])
                vals[:, r] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            vals[:, j] = saved
        return i - p, vals

    def eval(self, x: float) -> List[Tuple[int, float]]:
        """Sparse evaluation at one point: [(index, value)] for nonzero functions.

        Returns an empty list outside [lo, hi].
        """
        if x < self.grid.lo or x > self.grid.hi:
            return []
        first, vals = self.eval_many(np.array([x]))
        return [(int(first[0] + r), float(v)) for r, v in enumerate(vals[0]) if v != 0.0]

    def dense(self, x: np.ndarray) -> np.ndarray:
        """Full (n, n_basis) design matrix for in-domain points (rows sum to 1)."""
        x = np.asarray(x, dtype=np.float64)
        first, vals = self.eval_many(x)
        out = np.zeros((x.shape[0], self.n_basis))
        rows = np.arange(x.shape[0])[:, None]
        out[rows, first[:, None] + np.arange(self.grid.degree + 1)] = vals
        return out

    def combine(self, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
        """sum_d coeffs[d] * basis_d(x) for in-domain x, vectorized."""
        first, vals = self.eval_many(np.asarray(x, dtype=np.float64))
        c = np.asarray(coeffs, dtype=np.float64)
        idx = first[:, None] + np.arange(self.grid.degree + 1)
        return np.sum(c[idx] * vals, axis=1)


class TensorBasis2D:
    """Product basis psi_d(r) * chi_b(t) with flat index s = d * N_b + b."""

    def __init__(self, r_basis: SplineBasis1D, t_basis: SplineBasis1D):
        self.r_basis = r_basis
        self.t_basis = t_basis

    @property
    def n_r(self) -> int:
        return self.r_basis.n_basis

    @property
    def n_t(self) -> int:
        return self.t_basis.n_basis

    @property
    def size(self) -> int:
        return self.n_r * self.n_t

    def flat_index(self, d: int, b: int) -> int:
        if not (0 <= d < self.n_r and 0 <= b < self.n_t):
            raise ValueError(f"basis index ({d}, {b}) outside ({self.n_r}, {self.n_t})")
        return d * self.n_t + b

    def eval(self, r: float, t: float) -> List[Tuple[int, float]]:
        out = []
        for d, pv in self.r_basis.eval(r):
            for b, cv in self.t_basis.eval(t):
                out.append((d * self.n_t + b, pv * cv))
        return out


@dataclass
class PairForceField:
    """Radial pair force f(r) = sum_d coeffs[d] psi_d(r), zero outside [lo, cutoff]."""

    basis: SplineBasis1D
    coeffs: np.ndarray
    cutoff: float

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (self.basis.n_basis,):
            raise ValueError(f"coeffs shape {self.coeffs.shape}, "
                             f"expected ({self.basis.n_basis},)")
        g = self.basis.grid
        if not (g.lo < self.cutoff <= g.hi):
            raise ValueError(f"cutoff {self.cutoff} outside basis domain ({g.lo}, {g.hi}]")

    def eval_pair_force(self, r: float) -> float:
        if r <= 0.0:
            raise ValueError(f"pair distance must be positive, got {r}")
        if r < self.basis.grid.lo or r > self.cutoff:
            return 0.0
        return float(self.basis.combine(self.coeffs, np.array([r]))[0])

    def eval_many(self, r: np.ndarray) -> np.ndarray:
        """Vectorized force at positive distances; zero outside [lo, cutoff]."""
        r = np.asarray(r, dtype=np.float64)
        if np.any(r <= 0.0):
            raise ValueError("pair distances must be positive")
        out = np.zeros_like(r)
        mask = (r >= self.basis.grid.lo) & (r <= self.cutoff)
        if np.any(mask):
            out[mask] = self.basis.combine(self.coeffs, r[mask])
        return out


@dataclass
class TimeDependentPairForceField:
    """Pair force f(r, t) = sum_{d,b} theta[d, b] psi_d(r) chi_b(t).

    The time argument is clamped to [t_lo, t_f]; evaluating past the fitted
    window freezes the field at its final shape.
    """

    tensor: TensorBasis2D
    theta: np.ndarray
    cutoff: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape == (self.tensor.size,):
            self.theta = self.theta.reshape(self.tensor.n_r, self.tensor.n_t)
        if self.theta.shape != (self.tensor.n_r, self.tensor.n_t):
            raise ValueError(f"theta shape {self.theta.shape}, expected "
                             f"({self.tensor.n_r}, {self.tensor.n_t}) or flat")
        g = self.tensor.r_basis.grid
        if not (g.lo < self.cutoff <= g.hi):
            raise ValueError(f"cutoff {self.cutoff} outside radial domain ({g.lo}, {g.hi}]")

    @property
    def t_f(self) -> float:
        return self.tensor.t_basis.grid.hi

    def at_time(self, t: float) -> PairForceField:
        """Collapse the temporal basis at clamped t into a static field."""
        tb = self.tensor.t_basis
        tc = min(max(t, tb.grid.lo), tb.grid.hi)
        chi = tb.dense(np.array([tc]))[0]
        return PairForceField(self.tensor.r_basis, self.theta @ chi, self.cutoff)

    def eval_pair_force_td(self, r: float, t: float) -> float:
        return self.at_time(t).eval_pair_force(r)


def potential_from_force(field, r_grid, t: Optional[float] = None) -> np.ndarray:
    """Integrate a pair force into a potential with u(cutoff) = 0.

    Composite trapezoid on a refinement of the knot grid (at least 10 points
    per knot interval), so that -du/dr tracks f to discretization accuracy.

    Parameters
    ----------
    field : PairForceField or TimeDependentPairForceField
        Force to integrate.  Time-dependent fields need `t`.
    r_grid : array_like
        Distances at which to report u.  Points beyond the cutoff get 0;
        points below the basis domain get the constant u(lo).
    t : float, optional
        Evaluation time for time-dependent fields.

    Returns
    -------
    ndarray of u values aligned with r_grid.
    """
    if isinstance(field, TimeDependentPairForceField):
        if t is None:
            raise ValueError("time-dependent field needs an evaluation time t")
        field = field.at_time(t)
    elif t is not None:
        raise ValueError("t given for a static field")
    g = field.basis.grid
    rc = field.cutoff
    r_grid = np.asarray(r_grid, dtype=np.float64)
    # refinement of every knot span up to the cutoff, plus the requested points
    edges = g.lo + g.spacing * np.arange(g.n_spans + 1)
    edges = np.append(edges[edges < rc], rc)
    fine = [np.linspace(a, b, 11) for a, b in zip(edges[:-1], edges[1:])]
    pts = np.concatenate(fine + [r_grid[(r_grid > g.lo) & (r_grid < rc)]])
    pts = np.unique(pts)
    f = field.eval_many(pts)
    seg = 0.5 * (f[1:] + f[:-1]) * np.diff(pts)
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])  # integral from pts[i] to rc
    u = np.interp(np.clip(r_grid, g.lo, rc), pts, tail)
    u[r_grid > rc] = 0.0
    return u


def export_field_csv(field: PairForceField, r_grid, path) -> None:
    """Write `r,f,u` rows for a static pair field."""
    r_grid = np.asarray(r_grid, dtype=np.float64)
    u = potential_from_force(field, r_grid)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r", "f", "u"])
        for r, uu in zip(r_grid, u):
            wr.writerow([repr(float(r)), repr(field.eval_pair_force(float(r))), repr(float(uu))])


def export_field_csv_td(field: TimeDependentPairForceField, r_grid, t_grid, path) -> None:
    """Write `t,r,f,u` rows for a time-dependent pair field on a (t, r) product grid."""
    r_grid = np.asarray(r_grid, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "r", "f", "u"])
        for t in np.asarray(t_grid, dtype=np.float64):
            snap = field.at_time(float(t))
            u = potential_from_force(snap, r_grid)
            for r, uu in zip(r_grid, u):
                wr.writerow([repr(float(t)), repr(float(r)),
                             repr(snap.eval_pair_force(float(r))), repr(float(uu))])
