"""Particle MD with tabulated pair fields and a Langevin thermostat.

Forces come from radial spline fields through an O(M) cell list: cells are
at least one cutoff wide, so the half stencil (13 neighbor offsets plus the
home cell) finds every pair within the cutoff exactly once.  Periodic grids
narrower than three cells would alias stencil neighbors, and such systems
fall back to the all-pairs path.  Pair forces are accumulated antisymmetrically,
so total momentum is conserved exactly when the thermostat is off.

Integration is Euler-Maruyama or BAOAB (exact Ornstein-Uhlenbeck O-step;
with zeta = sigma = 0 it reduces to velocity Verlet).  Noise is drawn once
per step for all particles in particle-index order from the path's own
generator, which keeps trajectories bit-identical for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .basis import PairForceField, TimeDependentPairForceField, potential_from_force
from .stochastic import (BAOAB, EULER_MARUYAMA, IntegratorSpec,
                         SimulationDivergedError, splitmix64)
from .trajstore import Ensemble, Trajectory

__all__ = [
    "SimBox",
    "MDSystem",
    "CellList",
    "SingularityError",
    "init_fcc",
    "lj_like_field",
    "compute_pair_forces",
    "run_md",
    "run_fine_reference",
]

OPEN = "open"
PERIODIC = "periodic"


class SingularityError(RuntimeError):
    """Two particles closer than 1e-12; the message names the pair."""


@dataclass(frozen=True)
class SimBox:
    """Cuboid simulation region: edge lengths and boundary handling."""

    lengths: np.ndarray
    boundary: str = PERIODIC

    def __post_init__(self):
        object.__setattr__(self, "lengths", np.asarray(self.lengths, dtype=np.float64))
        if self.lengths.shape != (3,) or np.any(self.lengths <= 0.0):
            raise ValueError("box needs three positive edge lengths")
        if self.boundary not in (OPEN, PERIODIC):
            raise ValueError(f"boundary must be {OPEN!r} or {PERIODIC!r}, "
                             f"got {self.boundary!r}")

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC


@dataclass
class MDSystem:
    """Point particles in a box: masses (M,), positions and momenta (M, 3)."""

    box: SimBox
    masses: np.ndarray
    positions: np.ndarray
    momenta: np.ndarray

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.masses.ndim != 1 or self.masses.size == 0 or np.any(self.masses <= 0.0):
            raise ValueError("masses must be a non-empty positive vector")
        m = self.masses.size
        for name in ("positions", "momenta"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (m, 3):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({m}, 3)")
            setattr(self, name, arr)

    @property
    def n_particles(self) -> int:
        return self.masses.size


def _ragged_ranges(counts: np.ndarray) -> np.ndarray:
    """Concatenation of arange(c) for each c in counts."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.intp)
    ends = np.cumsum(counts)
    return np.arange(total, dtype=np.intp) - np.repeat(ends - counts, counts)

# half stencil: each unordered neighbor-cell pair appears exactly once
_OFFSETS = np.array([
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0), (0, 1, 1), (0, 1, -1), (1, 0, 1), (1, 0, -1),
    (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
], dtype=np.intp)


class CellList:
    """Spatial binning of one configuration with cells at least one cutoff wide."""

    def __init__(self, positions: np.ndarray, cutoff: float, box: SimBox):
        if not cutoff > 0.0:
            raise ValueError(f"cutoff must be positive, got {cutoff}")
        pos = np.asarray(positions, dtype=np.float64)
        self.cutoff = cutoff
        self.box = box
        self.n_particles = pos.shape[0]
        if box.periodic:
            pos = pos - box.lengths * np.floor(pos / box.lengths)
            origin = np.zeros(3)
            extent = box.lengths.copy()
            self.n_cells = np.maximum(np.floor(extent / cutoff).astype(np.intp), 1)
            self.brute = bool(np.any(self.n_cells < 3))
        else:
            origin = pos.min(axis=0)
            extent = np.maximum(pos.max(axis=0) - origin, 1e-300)
            self.n_cells = np.maximum(np.floor(extent / cutoff).astype(np.intp), 1)
            self.brute = False
        self.wrapped = pos
        if self.brute:
            return
        size = extent / self.n_cells
        c3 = np.clip((pos - origin) / size, 0, None).astype(np.intp)
        c3 = np.minimum(c3, self.n_cells - 1)
        nx, ny, nz = (int(v) for v in self.n_cells)
        cid = (c3[:, 0] * ny + c3[:, 1]) * nz + c3[:, 2]
        self.order = np.argsort(cid, kind="stable")
        self.counts = np.bincount(cid, minlength=nx * ny * nz)
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])

    def pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """Candidate pair indices (i, j); a superset of all pairs within the cutoff."""
        m = self.n_particles
        if self.brute or m < 2:
            return np.triu_indices(m, k=1)
        nx, ny, nz = (int(v) for v in self.n_cells)
        grid = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                    indexing="ij"), axis=-1).reshape(-1, 3)
        sp = np.arange(m, dtype=np.intp)
        cnt_pp = np.repeat(self.counts, self.counts)
        a_list, b_list = [], []
        # home cell: later-member partners only
        local = _ragged_ranges(self.counts)
        k = cnt_pp - 1 - local
        a_list.append(np.repeat(sp, k))
        b_list.append(np.repeat(sp + 1, k) + _ragged_ranges(k))
        for off in _OFFSETS:
            ng = grid + off
            if self.box.periodic:
                ng %= self.n_cells
                valid = np.ones(ng.shape[0], dtype=bool)
            else:
                valid = np.all((ng >= 0) & (ng < self.n_cells), axis=1)
            nid = (ng[:, 0] * ny + ng[:, 1]) * nz + ng[:, 2]
            cntp = np.where(valid, self.counts[nid % (nx * ny * nz)], 0)
            stp = np.where(valid, self.starts[nid % (nx * ny * nz)], 0)
            cntp_pp = np.repeat(cntp, self.counts)
            stp_pp = np.repeat(stp, self.counts)
            a_list.append(np.repeat(sp, cntp_pp))
            b_list.append(np.repeat(stp_pp, cntp_pp) + _ragged_ranges(cntp_pp))
        a = np.concatenate(a_list)
        b = np.concatenate(b_list)
        return self.order[a], self.order[b]


def init_fcc(box_lengths, lattice_constant: float) -> np.ndarray:
    """FCC positions filling the box: 4 sites per conventional cell, cell-major order.

    Every box edge must be a whole number of lattice constants (relative
    tolerance 1e-9).
    """
    if not lattice_constant > 0.0:
        raise ValueError(f"lattice constant must be positive, got {lattice_constant}")
    lengths = np.asarray(box_lengths, dtype=np.float64)
    ratio = lengths / lattice_constant
    cells = np.round(ratio).astype(np.intp)
    if np.any(cells < 1) or np.any(np.abs(ratio - cells) > 1e-9 * ratio):
        raise ValueError(f"box {lengths.tolist()} is not commensurate with "
                         f"lattice constant {lattice_constant}")
    base = lattice_constant * np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0],
                                        [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
    ix, iy, iz = np.meshgrid(np.arange(cells[0]), np.arange(cells[1]),
                             np.arange(cells[2]), indexing="ij")
    origins = lattice_constant * np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
    return (origins[:, None, :] + base[None, :, :]).reshape(-1, 3)


def lj_like_field(basis, cutoff: float, epsilon: float = 1.0, sigma: float = 1.0,
                  cap: Optional[float] = None) -> PairForceField:
    """Sample a truncated 12-6 force curve onto a degree-1 basis.

    The sampled values are softly capped (cap * tanh(f / cap)) when `cap`
    is given and shifted so the force vanishes at the cutoff knot.  The
    returned spline IS the model field; nothing off-basis remains.
    """
    g = basis.grid
    if g.degree != 1:
        raise ValueError("force sampling onto knots needs a degree-1 basis")
    if g.lo <= 0.0:
        raise ValueError("radial basis must start at a positive distance")
    r = g.lo + g.spacing * np.arange(g.n_basis)
    f = 24.0 * epsilon / r * (2.0 * (sigma / r) ** 12 - (sigma / r) ** 6)
    if cap is not None:
        if not cap > 0.0:
            raise ValueError(f"cap must be positive, got {cap}")
        f = cap * np.tanh(f / cap)
    f = f - np.interp(cutoff, r, f)
    return PairForceField(basis, f, cutoff)


def _collapse(field, t: Optional[float]) -> PairForceField:
    if isinstance(field, TimeDependentPairForceField):
        if t is None:
            raise ValueError("time-dependent field needs the evaluation time t")
        return field.at_time(t)
    return field


def compute_pair_forces(system: MDSystem, field, t: Optional[float] = None,
                        cells: Optional[CellList] = None) -> Tuple[np.ndarray, float]:
    """Pair forces and potential energy of one configuration.

    Returns (forces (M, 3), energy).  Time-dependent fields are collapsed
    at t first.  Raises SingularityError when a pair sits closer than 1e-12.
    """
    fld = _collapse(field, t)
    m = system.n_particles
    if cells is None:
        cells = CellList(system.positions, fld.cutoff, system.box)
    pos = cells.wrapped
    i, j = cells.pairs()
    forces = np.zeros((m, 3))
    if i.size == 0:
        return forces, 0.0
    d = pos[i] - pos[j]
    if system.box.periodic:
        d -= system.box.lengths * np.round(d / system.box.lengths)
    r2 = np.sum(d * d, axis=1)
    mask = r2 <= fld.cutoff ** 2
    i, j, d, r2 = i[mask], j[mask], d[mask], r2[mask]
    if i.size == 0:
        return forces, 0.0
    kmin = int(np.argmin(r2))
    if r2[kmin] < 1e-24:
        raise SingularityError(f"particles {int(i[kmin])} and {int(j[kmin])} overlap: "
                               f"r={math.sqrt(float(r2[kmin]))!r}")
    r = np.sqrt(r2)
    fmag = fld.eval_many(r)
    fvec = (fmag / r)[:, None] * d
    for a in range(3):
        forces[:, a] = (np.bincount(i, weights=fvec[:, a], minlength=m)
                        - np.bincount(j, weights=fvec[:, a], minlength=m))
    g = fld.basis.grid
    tab_r = np.linspace(g.lo, fld.cutoff, 10 * g.n_spans + 1)
    tab_u = potential_from_force(fld, tab_r)
    energy = float(np.sum(np.interp(np.clip(r, g.lo, fld.cutoff), tab_r, tab_u)))
    return forces, energy


class _PairEngine:
    """Pair forces off a retained neighbor list with a drift-triggered rebuild.

    The list keeps every pair within cutoff + skin of a reference
    configuration; while no particle has drifted more than skin/2 from it,
    masking the list to the cutoff reproduces the exact pair set a fresh
    enumeration would find, so only the floating-point summation order can
    differ from compute_pair_forces.
    """

    def __init__(self, box: SimBox, cutoff: float, skin: float = 0.3):
        self.box = box
        self.cutoff = cutoff
        self.skin = skin
        self.ref = None

    def _rebuild(self, pos: np.ndarray) -> None:
        cells = CellList(pos, self.cutoff + self.skin, self.box)
        i, j = cells.pairs()
        # separations come from the caller's (possibly unwrapped) coordinates,
        # so stored image shifts stay valid without per-step wrapping
        d = pos[i] - pos[j]
        if self.box.periodic:
            shift = self.box.lengths * np.round(d / self.box.lengths)
            d = d - shift
        keep = np.sum(d * d, axis=1) <= (self.cutoff + self.skin) ** 2
        self.i = i[keep]
        self.j = j[keep]
        if self.box.periodic and 2.0 * (self.cutoff + self.skin) <= np.min(self.box.lengths):
            # a wider box cannot switch a listed pair's nearest image between
            # rebuilds, so the rebuild-time shift serves every step
            self.shift = shift[keep]
        else:
            self.shift = None
        self.ref = pos.copy()

    def forces(self, pos: np.ndarray, fld: PairForceField) -> np.ndarray:
        if self.ref is None:
            self._rebuild(pos)
        else:
            drift = pos - self.ref
            if np.max(np.sum(drift * drift, axis=1)) > (0.5 * self.skin) ** 2:
                self._rebuild(pos)
        m = pos.shape[0]
        forces = np.zeros((m, 3))
        i, j = self.i, self.j
        if i.size == 0:
            return forces
        d = pos[i] - pos[j]
        if self.shift is not None:
            d -= self.shift
        elif self.box.periodic:
            d -= self.box.lengths * np.round(d / self.box.lengths)
        r2 = np.sum(d * d, axis=1)
        kmin = int(np.argmin(r2))
        if r2[kmin] < 1e-24:
            raise SingularityError(f"particles {int(i[kmin])} and {int(j[kmin])} overlap: "
                                   f"r={math.sqrt(float(r2[kmin]))!r}")
        r = np.sqrt(r2)
        g = fld.basis.grid
        if g.degree == 1:
            fmag = np.interp(r, g.lo + g.spacing * np.arange(g.n_basis), fld.coeffs)
            fmag[(r < g.lo) | (r > fld.cutoff)] = 0.0
        else:
            fmag = fld.eval_many(r)
        fvec = (fmag / r)[:, None] * d
        for a in range(3):
            forces[:, a] = (np.bincount(i, weights=fvec[:, a], minlength=m)
                            - np.bincount(j, weights=fvec[:, a], minlength=m))
        return forces


def run_md(system: MDSystem, field, zeta0: float, beta: float, spec: IntegratorSpec,
           sigma0: Optional[float] = None) -> Trajectory:
    """Langevin dynamics of the system under a pair field.

    sigma0 defaults to the fluctuation-dissipation value sqrt(2 zeta0/beta).
    Time-dependent fields are evaluated at each step's start time.  The
    recorded forces are the conservative pair forces.  The input system is
    not modified.
    """
    if zeta0 < 0.0:
        raise ValueError(f"zeta0 must be >= 0, got {zeta0}")
    if not beta > 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    if sigma0 is None:
        sigma0 = math.sqrt(2.0 * zeta0 / beta)
    elif sigma0 < 0.0:
        raise ValueError(f"sigma0 must be >= 0, got {sigma0}")
    rng = np.random.default_rng(spec.seed)
    box, mvec = system.box, system.masses
    m = system.n_particles
    minv = (1.0 / mvec)[:, None]
    pos = system.positions.copy()
    mom = system.momenta.copy()
    dt = spec.dt
    n_rec = spec.n_steps // spec.record_stride + 1
    times = dt * spec.record_stride * np.arange(n_rec)
    qs = np.empty((n_rec, 3 * m))
    ps = np.empty((n_rec, 3 * m))
    fs = np.empty((n_rec, 3 * m)) if spec.record_forces else None

    def record(slot, force):
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(mom)):
            raise SimulationDivergedError(
                f"state became non-finite by step {slot * spec.record_stride}")
        if box.periodic:
            qs[slot] = (pos - box.lengths * np.floor(pos / box.lengths)).ravel()
        else:
            qs[slot] = pos.ravel()
        ps[slot] = mom.ravel()
        if fs is not None:
            fs[slot] = force.ravel()

    td = _is_td(field)
    engine = _PairEngine(box, field.cutoff)

    def force_at(x, t):
        return engine.forces(x, field.at_time(t) if td else field)

    force = force_at(pos, 0.0)
    record(0, force)
    rec = 0
    if spec.scheme == EULER_MARUYAMA:
        amp = sigma0 * math.sqrt(dt)
        for step in range(spec.n_steps):
            pos = pos + dt * mom * minv
            mom = mom + dt * (force - zeta0 * mom * minv) + amp * rng.standard_normal((m, 3))
            force = force_at(pos, (step + 1) * dt)
            if (step + 1) % spec.record_stride == 0:
                rec += 1
                record(rec, force)
    elif spec.scheme == BAOAB:
        c1 = np.exp(-zeta0 * dt / mvec)[:, None]
        if zeta0 > 0.0:
            c2 = np.sqrt(sigma0 ** 2 * mvec / (2.0 * zeta0) * (1.0 - c1[:, 0] ** 2))[:, None]
        else:
            c2 = np.full((m, 1), sigma0 * math.sqrt(dt))
        half = 0.5 * dt
        for step in range(spec.n_steps):
            mom = mom + half * force
            pos = pos + half * mom * minv
            mom = c1 * mom + c2 * rng.standard_normal((m, 3))
            pos = pos + half * mom * minv
            force = force_at(pos, (step + 1) * dt)
            mom = mom + half * force
            if (step + 1) % spec.record_stride == 0:
                rec += 1
                record(rec, force)
    else:  # pragma: no cover - IntegratorSpec already validates
        raise ValueError(f"unknown scheme {spec.scheme!r}")
    return Trajectory(3, mvec, times, qs, ps, fs, dt * spec.record_stride)


def _is_td(field) -> bool:
    return isinstance(field, TimeDependentPairForceField)


class _BatchPairEngine:
    """Per-path neighbor lists evaluated through one flat index space.

    Path k owns rows [k*m, (k+1)*m); each path rebuilds on its own drift
    schedule, so its list history (and with it every recorded number) is
    identical to a one-path run, whatever the batch composition.
    """

    def __init__(self, box: SimBox, cutoff: float, n_paths: int, m: int,
                 skin: float = 0.3):
        self.box = box
        self.cutoff = cutoff
        self.skin = skin
        self.n_paths = n_paths
        self.m = m
        self.fixed_shift = (box.periodic
                            and 2.0 * (cutoff + skin) <= float(np.min(box.lengths)))
        self.parts = [None] * n_paths
        self.refs = np.empty((n_paths * m, 3))
        self.stale = np.ones(n_paths, dtype=bool)

    def _rebuild_one(self, k: int, pos: np.ndarray) -> None:
        base = k * self.m
        local = pos[base:base + self.m]
        cells = CellList(local, self.cutoff + self.skin, self.box)
        i, j = cells.pairs()
        d = local[i] - local[j]
        if self.box.periodic:
            shift = self.box.lengths * np.round(d / self.box.lengths)
            d = d - shift
        keep = np.sum(d * d, axis=1) <= (self.cutoff + self.skin) ** 2
        self.parts[k] = (base + i[keep], base + j[keep],
                         shift[keep] if self.fixed_shift else None)
        self.refs[base:base + self.m] = local

    def forces(self, pos: np.ndarray, fld: PairForceField) -> np.ndarray:
        drift = pos - self.refs
        far = (np.sum(drift * drift, axis=1).reshape(self.n_paths, self.m).max(axis=1)
               > (0.5 * self.skin) ** 2)
        rebuild = np.nonzero(far | self.stale)[0]
        if rebuild.size:
            for k in rebuild:
                self._rebuild_one(int(k), pos)
            self.stale[:] = False
            self.i = np.concatenate([p[0] for p in self.parts])
            self.j = np.concatenate([p[1] for p in self.parts])
            if self.fixed_shift:
                self.shift = np.concatenate([p[2] for p in self.parts])
        n = pos.shape[0]
        forces = np.zeros((n, 3))
        i, j = self.i, self.j
        if i.size == 0:
            return forces
        d = pos[i] - pos[j]
        if self.fixed_shift:
            d -= self.shift
        elif self.box.periodic:
            d -= self.box.lengths * np.round(d / self.box.lengths)
        r2 = np.sum(d * d, axis=1)
        kmin = int(np.argmin(r2))
        if r2[kmin] < 1e-24:
            m = self.m
            raise SingularityError(
                f"particles {int(i[kmin]) % m} and {int(j[kmin]) % m} overlap "
                f"(path {int(i[kmin]) // m}): r={math.sqrt(float(r2[kmin]))!r}")
        r = np.sqrt(r2)
        g = fld.basis.grid
        if g.degree == 1:
            fmag = np.interp(r, g.lo + g.spacing * np.arange(g.n_basis), fld.coeffs)
            fmag[(r < g.lo) | (r > fld.cutoff)] = 0.0
        else:
            fmag = fld.eval_many(r)
        fvec = (fmag / r)[:, None] * d
        for a in range(3):
            forces[:, a] = (np.bincount(i, weights=fvec[:, a], minlength=n)
                            - np.bincount(j, weights=fvec[:, a], minlength=n))
        return forces


def _run_md_batch(box: SimBox, masses: np.ndarray, starts, field, zeta0: float,
                  beta: float, spec: IntegratorSpec, seeds,
                  sigma0: Optional[float] = None) -> list:
    """Advance several same-box paths in lockstep; returns one Trajectory each.

    starts is a list of (positions, momenta) pairs.  Every path draws its
    noise from its own generator in the scalar order, which keeps each
    trajectory bit-identical to run_md on that path alone.
    """
    n_paths = len(starts)
    m = masses.size
    minv = np.tile((1.0 / masses)[:, None], (n_paths, 1))
    mvec3 = np.tile(masses[:, None], (n_paths, 1))
    pos = np.concatenate([np.asarray(q, dtype=np.float64) for q, _ in starts])
    mom = np.concatenate([np.asarray(p, dtype=np.float64) for _, p in starts])
    rngs = [np.random.default_rng(s) for s in seeds]
    if sigma0 is None:
        sigma0 = math.sqrt(2.0 * zeta0 / beta)
    dt = spec.dt
    n_rec = spec.n_steps // spec.record_stride + 1
    times = dt * spec.record_stride * np.arange(n_rec)
    qs = np.empty((n_paths, n_rec, 3 * m))
    ps = np.empty((n_paths, n_rec, 3 * m))
    fs = np.empty((n_paths, n_rec, 3 * m)) if spec.record_forces else None

    td = _is_td(field)
    engine = _BatchPairEngine(box, field.cutoff, n_paths, m)

    def force_at(x, t):
        return engine.forces(x, field.at_time(t) if td else field)

    def draw():
        out = np.empty((n_paths * m, 3))
        for k, rng in enumerate(rngs):
            out[k * m:(k + 1) * m] = rng.standard_normal((m, 3))
        return out

    def record(slot, force):
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(mom)):
            bad = ~np.all(np.isfinite(pos.reshape(n_paths, -1)), axis=1)
            bad |= ~np.all(np.isfinite(mom.reshape(n_paths, -1)), axis=1)
            raise SimulationDivergedError(
                f"state became non-finite by step {slot * spec.record_stride} "
                f"(path {int(np.nonzero(bad)[0][0])})")
        if box.periodic:
            w = pos - box.lengths * np.floor(pos / box.lengths)
        else:
            w = pos
        qs[:, slot] = w.reshape(n_paths, 3 * m)
        ps[:, slot] = mom.reshape(n_paths, 3 * m)
        if fs is not None:
            fs[:, slot] = force.reshape(n_paths, 3 * m)

    force = force_at(pos, 0.0)
    record(0, force)
    rec = 0
    if spec.scheme == EULER_MARUYAMA:
        amp = sigma0 * math.sqrt(dt)
        for step in range(spec.n_steps):
            pos = pos + dt * mom * minv
            mom = mom + dt * (force - zeta0 * mom * minv) + amp * draw()
            force = force_at(pos, (step + 1) * dt)
            if (step + 1) % spec.record_stride == 0:
                rec += 1
                record(rec, force)
    elif spec.scheme == BAOAB:
        c1 = np.exp(-zeta0 * dt / mvec3)
        if zeta0 > 0.0:
            c2 = np.sqrt(sigma0 ** 2 * mvec3 / (2.0 * zeta0) * (1.0 - c1 ** 2))
        else:
            c2 = np.full((n_paths * m, 1), sigma0 * math.sqrt(dt))
        half = 0.5 * dt
        for step in range(spec.n_steps):
            mom = mom + half * force
            pos = pos + half * mom * minv
            mom = c1 * mom + c2 * draw()
            pos = pos + half * mom * minv
            force = force_at(pos, (step + 1) * dt)
            mom = mom + half * force
            if (step + 1) % spec.record_stride == 0:
                rec += 1
                record(rec, force)
    else:  # pragma: no cover - IntegratorSpec already validates
        raise ValueError(f"unknown scheme {spec.scheme!r}")
    stride_dt = dt * spec.record_stride
    return [Trajectory(3, masses, times, qs[k], ps[k],
                       fs[k] if fs is not None else None, stride_dt)
            for k in range(n_paths)]


def _fine_path(args) -> list:
    box, masses, pos0, field, zeta0, beta, spec, seeds = args
    starts = []
    for seed in seeds:
        rng = np.random.default_rng(splitmix64(seed))
        starts.append((pos0, rng.normal(0.0, np.sqrt(masses / beta)[:, None],
                                        (masses.size, 3))))
    return _run_md_batch(box, masses, starts, field, zeta0, beta, spec, list(seeds))


def run_fine_reference(n_cells, lattice_constant: float, field, zeta0: float,
                       beta: float, spec: IntegratorSpec, n_paths: int,
                       master_seed: int, mass: float = 1.0,
                       boundary: str = OPEN, workers: int = 1) -> Ensemble:
    """Generate the fine-scale reference ensemble: FCC start, Maxwell momenta, pair field.

    Every path starts from the same lattice with its own thermal momenta
    and noise stream (path k seeded by splitmix64(master_seed + k); the
    momentum draw uses one further splitmix64 step).  Forces are recorded,
    so the ensemble can feed force matching directly.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    cells = np.asarray(n_cells, dtype=np.intp)
    if cells.shape != (3,) or np.any(cells < 1):
        raise ValueError("n_cells must be three positive integers")
    lengths = lattice_constant * cells
    box = SimBox(lengths, boundary)
    pos0 = init_fcc(lengths, lattice_constant)
    masses = np.full(pos0.shape[0], float(mass))
    spec = replace(spec, record_forces=True)
    seeds = [splitmix64(master_seed + k) for k in range(n_paths)]
    if workers == 1 or n_paths == 1:
        paths = _fine_path((box, masses, pos0, field, zeta0, beta, spec, seeds))
    else:
        chunk = max(1, math.ceil(n_paths / (workers * 2)))
        jobs = [(box, masses, pos0, field, zeta0, beta, spec, seeds[i:i + chunk])
                for i in range(0, n_paths, chunk)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_fine_path, jobs))
        paths = [tr for part in parts for tr in part]
    return Ensemble(paths, beta)
