"""Path-space force matching on pair bases.

Trajectory forces are regressed onto a radial pair basis (optionally
tensored with a temporal basis) by streaming frames into normal equations
A = J^T J, b = J^T F, where each scalar row is one Cartesian force
component of one coarse particle in one frame.  The design entry coupling
particle I to basis function s sums psi_d(r_IJ) (times chi_b(t) in the
tensor case) against the unit vector from J to I, over all partners J, so
rows for an isolated pair are exact negatives of each other.

Fits never form J explicitly across frames: frames enter one at a time and
only A (K x K), b, and scalar tallies persist, which keeps memory flat in
the number of frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse

from .basis import SplineBasis1D, TensorBasis2D
from .trajstore import Ensemble, Trajectory

__all__ = [
    "CGMapping",
    "DesignAccumulator",
    "FitResult",
    "SeparableFitResult",
    "SeparableForce",
    "map_positions",
    "map_forces",
    "map_momenta",
    "map_ensemble",
    "solve",
    "fit_equilibrium",
    "fit_instant",
    "fit_time_dependent",
    "fit_separable",
]


@dataclass
class CGMapping:
    """Partition of fine particles into coarse groups, with fine masses.

    groups[g] lists the fine indices belonging to coarse particle g; every
    fine index must appear in exactly one group.
    """

    groups: List[np.ndarray]
    fine_masses: np.ndarray

    def __post_init__(self):
        self.fine_masses = np.asarray(self.fine_masses, dtype=np.float64)
        if self.fine_masses.ndim != 1 or self.fine_masses.size == 0:
            raise ValueError("fine_masses must be a non-empty vector")
        if np.any(self.fine_masses <= 0.0):
            raise ValueError("fine_masses must be strictly positive")
        self.groups = [np.asarray(g, dtype=np.intp) for g in self.groups]
        n = self.fine_masses.size
        seen = np.zeros(n, dtype=np.intp)
        for g in self.groups:
            if g.size == 0:
                raise ValueError("empty coarse group")
            if np.any(g < 0) or np.any(g >= n):
                raise ValueError(f"group index outside 0..{n - 1}")
            seen[g] += 1
        if np.any(seen != 1):
            bad = int(np.argmax(seen != 1))
            raise ValueError(f"fine particle {bad} appears {seen[bad]} times, expected once")

    @property
    def n_fine(self) -> int:
        return self.fine_masses.size

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_masses(self) -> np.ndarray:
        return np.array([self.fine_masses[g].sum() for g in self.groups])

    @classmethod
    def identity(cls, masses) -> "CGMapping":
        masses = np.asarray(masses, dtype=np.float64)
        return cls([np.array([i]) for i in range(masses.size)], masses)

    @classmethod
    def blocks(cls, masses, k: int) -> "CGMapping":
        """Consecutive index blocks of size k (fine count must divide evenly)."""
        masses = np.asarray(masses, dtype=np.float64)
        n = masses.size
        if k < 1 or n % k != 0:
            raise ValueError(f"block size {k} does not partition {n} particles")
        return cls([np.arange(i, i + k) for i in range(0, n, k)], masses)


def _as_config(x, dim: int, n: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, dim)
    if arr.shape != (n, dim):
        raise ValueError(f"{what} has shape {arr.shape}, expected ({n}, {dim})")
    return arr


def map_positions(mapping: CGMapping, positions, dim: int = 3) -> np.ndarray:
    """Mass-weighted centers of the coarse groups, shape (n_groups, dim)."""
    q = _as_config(positions, dim, mapping.n_fine, "positions")
    out = np.empty((mapping.n_groups, dim))
    for g, idx in enumerate(mapping.groups):
        w = mapping.fine_masses[idx]
        out[g] = (w[:, None] * q[idx]).sum(axis=0) / w.sum()
    return out


def map_forces(mapping: CGMapping, forces, dim: int = 3) -> np.ndarray:
    """Per-group sums of fine-particle vectors (forces), shape (n_groups, dim)."""
    if forces is None:
        raise ValueError("mapping forces requires recorded forces on the trajectory")
    f = _as_config(forces, dim, mapping.n_fine, "forces")
    out = np.empty((mapping.n_groups, dim))
    for g, idx in enumerate(mapping.groups):
        out[g] = f[idx].sum(axis=0)
    return out


def map_momenta(mapping: CGMapping, momenta, dim: int = 3) -> np.ndarray:
    """Per-group momentum sums; divide by group masses for coarse velocities."""
    return map_forces(mapping, momenta, dim)


def map_ensemble(ens: Ensemble, mapping: CGMapping) -> Ensemble:
    """Coarse-grain every path: group centers, momentum sums, force sums."""
    out = []
    for tr in ens.paths:
        d, n = tr.dim, tr.n_frames
        q = np.empty((n, mapping.n_groups * d))
        p = np.empty_like(q)
        f = np.empty_like(q) if tr.forces is not None else None
        for i in range(n):
            q[i] = map_positions(mapping, tr.positions[i], d).ravel()
            p[i] = map_momenta(mapping, tr.momenta[i], d).ravel()
            if f is not None:
                f[i] = map_forces(mapping, tr.forces[i], d).ravel()
        out.append(Trajectory(d, mapping.group_masses, tr.times.copy(), q, p, f,
                              tr.dt_nominal))
    return Ensemble(out, ens.beta)


class DesignAccumulator:
    """Streaming normal equations for a radial (optionally time-tensored) pair basis."""

    def __init__(self, r_basis: SplineBasis1D, t_basis: Optional[SplineBasis1D] = None):
        self.r_basis = r_basis
        self.t_basis = t_basis
        k = r_basis.n_basis * (t_basis.n_basis if t_basis is not None else 1)
        self.A = np.zeros((k, k))
        self.b = np.zeros(k)
        self.sum_sq_F = 0.0
        self.n_rows = 0
        self.n_excluded = 0

    @property
    def size(self) -> int:
        return self.b.shape[0]

    def frame_design(self, positions, dim: int, t: Optional[float] = None):
        """Sparse design matrix (dim*M rows x K columns) for one coarse configuration.

        Also returns the number of pairs excluded for falling outside the
        radial basis domain.
        """
        q = np.asarray(positions, dtype=np.float64).reshape(-1, dim)
        m = q.shape[0]
        ii, jj = np.triu_indices(m, k=1)
        rvec = q[ii] - q[jj]
        r = np.sqrt(np.sum(rvec * rvec, axis=1))
        g = self.r_basis.grid
        ok = (r >= g.lo) & (r <= g.hi)
        excluded = int(np.size(r) - np.count_nonzero(ok))
        ii, jj, rvec, r = ii[ok], jj[ok], rvec[ok], r[ok]
        shape = (dim * m, self.size)
        if r.size == 0:
            return scipy.sparse.csr_matrix(shape), excluded
        unit = rvec / r[:, None]
        first, vals = self.r_basis.eval_many(r)
        er = self.r_basis.grid.degree + 1
        cols = first[:, None] + np.arange(er)          # (P, er)
        if self.t_basis is not None:
            if t is None:
                raise ValueError("time-tensored design needs the frame time t")
            tb = self.t_basis
            if t < tb.grid.lo - 1e-12 or t > tb.grid.hi + 1e-12:
                raise ValueError(f"frame time {t} outside temporal basis domain "
                                 f"[{tb.grid.lo}, {tb.grid.hi}]")
            tfirst, tvals = tb.eval_many(np.array([min(max(t, tb.grid.lo), tb.grid.hi)]))
            et = tb.grid.degree + 1
            nb = tb.n_basis
            cols = (cols[:, :, None] * nb + (tfirst[0] + np.arange(et))).reshape(r.size, er * et)
            vals = (vals[:, :, None] * tvals[0]).reshape(r.size, er * et)
        e = cols.shape[1]
        data_i = vals[:, None, :] * unit[:, :, None]   # (P, dim, e)
        rows_i = (ii * dim)[:, None, None] + np.arange(dim)[None, :, None]
        rows_j = (jj * dim)[:, None, None] + np.arange(dim)[None, :, None]
        rows = np.broadcast_to(rows_i, data_i.shape).ravel(), \
            np.broadcast_to(rows_j, data_i.shape).ravel()
        cc = np.broadcast_to(cols[:, None, :], data_i.shape).ravel()
        mat = scipy.sparse.coo_matrix(
            (np.concatenate([data_i.ravel(), -data_i.ravel()]),
             (np.concatenate(rows), np.concatenate([cc, cc]))), shape=shape)
        return mat.tocsr(), excluded

    def accumulate(self, positions, forces, dim: int, t: Optional[float] = None) -> None:
        """Add one frame: coarse positions and target forces, plus its time for tensor fits."""
        f = np.asarray(forces, dtype=np.float64).ravel()
        mat, excluded = self.frame_design(positions, dim, t)
        if f.shape[0] != mat.shape[0]:
            raise ValueError(f"forces length {f.shape[0]}, expected {mat.shape[0]}")
        self.A += (mat.T @ mat).toarray()
        self.b += mat.T @ f
        self.sum_sq_F += float(f @ f)
        self.n_rows += f.shape[0]
        self.n_excluded += excluded

    def merge(self, other: "DesignAccumulator") -> None:
        if other.size != self.size:
            raise ValueError(f"cannot merge designs of size {other.size} and {self.size}")
        self.A += other.A
        self.b += other.b
        self.sum_sq_F += other.sum_sq_F
        self.n_rows += other.n_rows
        self.n_excluded += other.n_excluded


@dataclass
class FitResult:
    """Solved coefficients plus the diagnostics needed to judge the fit."""

    coeffs: np.ndarray
    rms_residual: float
    condition_estimate: float
    regularization_used: float
    n_rows: int
    n_excluded: int
    solver: str = "cholesky"


def _solve_sym(a: np.ndarray, b: np.ndarray, ridge: float) -> Tuple[np.ndarray, float, str]:
    """Solve (a + ridge I) x = b; eigendecomposition fallback for bad conditioning."""
    k = a.shape[0]
    ar = a + ridge * np.eye(k) if ridge else a
    w = scipy.linalg.eigvalsh(ar)
    lam_max = float(w[-1])
    cond = math.inf if w[0] <= 0.0 else lam_max / float(w[0])
    if cond <= 1e12:
        try:
            x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(ar), b)
            return x, cond, "cholesky"
        except scipy.linalg.LinAlgError:
            pass
    w, v = scipy.linalg.eigh(ar)
    keep = w > 1e-10 * max(lam_max, 0.0)
    if not np.any(keep):
        return np.zeros(k), cond, "eigh-cutoff"
    x = v[:, keep] @ ((v[:, keep].T @ b) / w[keep])
    return x, cond, "eigh-cutoff"


def solve(acc: DesignAccumulator, ridge: float = 0.0) -> FitResult:
    """Solve the accumulated normal equations.

    The residual comes from the accumulated scalars alone:
    rms^2 = (sum_sq_F - 2 theta.b + theta.A theta) / n_rows.
    """
    if acc.n_rows == 0:
        raise ValueError("empty design: no rows accumulated")
    if ridge < 0.0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    theta, cond, how = _solve_sym(acc.A, acc.b, ridge)
    ss = acc.sum_sq_F - 2.0 * float(theta @ acc.b) + float(theta @ acc.A @ theta)
    rms = math.sqrt(max(ss, 0.0) / acc.n_rows)
    return FitResult(theta, rms, cond, ridge, acc.n_rows, acc.n_excluded, how)


def _cg_frames(ens: Ensemble, mapping: Optional[CGMapping]):
    """Yield (t, coarse positions, coarse forces, dim) in canonical path-then-frame order."""
    for tr in ens.paths:
        if tr.forces is None:
            raise ValueError("force matching requires recorded forces")
        d = tr.dim
        for i in range(tr.n_frames):
            if mapping is None:
                q = tr.positions[i].reshape(-1, d)
                f = tr.forces[i].reshape(-1, d)
            else:
                q = map_positions(mapping, tr.positions[i], d)
                f = map_forces(mapping, tr.forces[i], d)
            yield float(tr.times[i]), q, f, d


def fit_equilibrium(ens: Ensemble, r_basis: SplineBasis1D,
                    mapping: Optional[CGMapping] = None,
                    ridge: float = 0.0) -> FitResult:
    """Time-independent pair-force fit over every frame of the ensemble."""
    acc = DesignAccumulator(r_basis)
    for t, q, f, d in _cg_frames(ens, mapping):
        acc.accumulate(q, f, d)
    return solve(acc, ridge)


def fit_instant(ens: Ensemble, r_basis: SplineBasis1D, t: float,
                mapping: Optional[CGMapping] = None,
                ridge: float = 0.0) -> FitResult:
    """Pair-force fit restricted to the frame nearest t in each path.

    The nearest frame must lie within dt_nominal/2 of t.
    """
    acc = DesignAccumulator(r_basis)
    for tr in ens.paths:
        if tr.forces is None:
            raise ValueError("force matching requires recorded forces")
        i = int(np.argmin(np.abs(tr.times - t)))
        if abs(float(tr.times[i]) - t) > 0.5 * tr.dt_nominal * (1.0 + 1e-9):
            raise ValueError(f"no frame within dt/2 of t={t}; nearest is t={tr.times[i]}")
        d = tr.dim
        if mapping is None:
            q, f = tr.positions[i].reshape(-1, d), tr.forces[i].reshape(-1, d)
        else:
            q = map_positions(mapping, tr.positions[i], d)
            f = map_forces(mapping, tr.forces[i], d)
        acc.accumulate(q, f, d)
    return solve(acc, ridge)


def fit_time_dependent(ens: Ensemble, tensor: TensorBasis2D,
                       mapping: Optional[CGMapping] = None,
                       ridge: float = 0.0) -> FitResult:
    """Tensor-basis fit of a time-dependent pair force over all frames.

    Coefficients come back flat with index s = d * N_b + b (radial index d,
    temporal index b).
    """
    acc = DesignAccumulator(tensor.r_basis, tensor.t_basis)
    for t, q, f, d in _cg_frames(ens, mapping):
        acc.accumulate(q, f, d, t=t)
    return solve(acc, ridge)


@dataclass
class SeparableForce:
    """Callable force -D(t) B(q) built from two spline factors.

    Both arguments clamp to their fitted domains, so the force continues
    with its boundary value where data never reached (a zero continuation
    would leave simulated paths force-free once they stray past the data's
    range).
    """

    t_basis: SplineBasis1D
    q_basis: SplineBasis1D
    theta_time: np.ndarray
    theta_space: np.ndarray

    def __call__(self, q: float, t: float) -> float:
        gq = self.q_basis.grid
        qc = min(max(q, gq.lo), gq.hi)
        gt = self.t_basis.grid
        tc = min(max(t, gt.lo), gt.hi)
        d = float(self.t_basis.combine(self.theta_time, np.array([tc]))[0])
        b = float(self.q_basis.combine(self.theta_space, np.array([qc]))[0])
        return -d * b

    def eval_many(self, q: np.ndarray, t: float) -> np.ndarray:
        """Vectorized evaluation at one time for a vector of positions."""
        gq = self.q_basis.grid
        qc = np.clip(np.asarray(q, dtype=np.float64), gq.lo, gq.hi)
        gt = self.t_basis.grid
        tc = min(max(t, gt.lo), gt.hi)
        d = float(self.t_basis.combine(self.theta_time, np.array([tc]))[0])
        return -d * self.q_basis.combine(self.theta_space, qc)


@dataclass
class SeparableFitResult:
    """Alternating fit of F(q, t) ~ -D(t) B(q) with ||theta_space|| = 1."""

    theta_time: np.ndarray
    theta_space: np.ndarray
    residuals: np.ndarray
    n_rows: int
    n_excluded: int
    t_basis: SplineBasis1D
    q_basis: SplineBasis1D

    def force(self) -> SeparableForce:
        return SeparableForce(self.t_basis, self.q_basis, self.theta_time, self.theta_space)


def fit_separable(ens: Ensemble, t_basis: SplineBasis1D, q_basis: SplineBasis1D,
                  max_sweeps: int = 40, tol: float = 1e-10,
                  ridge: float = 0.0) -> SeparableFitResult:
    """Alternating least squares for the scalar benchmark force F(q, t) = -D(t) B(q).

    theta_space starts from a static fit of the forces (ignoring time) and
    theta_time from the constant sweep; each sweep solves the two linear
    blocks exactly and renormalizes theta_space to unit length.  The
    recorded residual trace (mean squared misfit per scalar sample) is
    non-increasing up to solver roundoff.

    Samples with q outside the spatial basis domain are dropped and counted.
    """
    ts, qs, fs = [], [], []
    for tr in ens.paths:
        if tr.dim != 1 or tr.n_particles != 1:
            raise ValueError("separable fits expect scalar (D=1, M=1) paths")
        if tr.forces is None:
            raise ValueError("force matching requires recorded forces")
        ts.append(tr.times)
        qs.append(tr.positions[:, 0])
        fs.append(tr.forces[:, 0])
    t = np.concatenate(ts)
    q = np.concatenate(qs)
    f = np.concatenate(fs)
    gt, gq = t_basis.grid, q_basis.grid
    if np.any(t < gt.lo - 1e-12) or np.any(t > gt.hi + 1e-12):
        raise ValueError("sample times fall outside the temporal basis domain")
    ok = (q >= gq.lo) & (q <= gq.hi)
    n_excluded = int(q.size - np.count_nonzero(ok))
    t, q, f = t[ok], q[ok], f[ok]
    if t.size == 0:
        raise ValueError("empty design: no in-domain samples")
    xt = t_basis.dense(np.clip(t, gt.lo, gt.hi))
    xq = q_basis.dense(q)

    theta_q, _, _ = _solve_sym(xq.T @ xq, -(xq.T @ f), ridge)
    norm = float(np.linalg.norm(theta_q))
    if norm == 0.0:
        raise ValueError("degenerate start: static force fit is identically zero")
    theta_q /= norm
    theta_t = np.full(t_basis.n_basis, norm)

    def residual(tt, tq):
        model = -(xt @ tt) * (xq @ tq)
        return float(np.mean((f - model) ** 2))

    trace = [residual(theta_t, theta_q)]
    for _ in range(max_sweeps):
        bq = xq @ theta_q
        design = xt * bq[:, None]
        theta_t, _, _ = _solve_sym(design.T @ design, -(design.T @ f), ridge)
        dt_vals = xt @ theta_t
        design = xq * dt_vals[:, None]
        theta_q, _, _ = _solve_sym(design.T @ design, -(design.T @ f), ridge)
        norm = float(np.linalg.norm(theta_q))
        if norm == 0.0:
            raise ValueError("alternating sweep collapsed theta_space to zero")
        theta_q /= norm
        theta_t *= norm
        trace.append(residual(theta_t, theta_q))
        if abs(trace[-2] - trace[-1]) <= tol * max(trace[0], 1e-300):
            break
    return SeparableFitResult(theta_t, theta_q, np.array(trace), int(t.size),
                              n_excluded, t_basis, q_basis)
