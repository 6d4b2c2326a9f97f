"""Stochastic integrators for the scalar benchmark models.

Two generators share one integrator interface:

* ``simulate_gle`` integrates the extended three-variable system

      dQ = (P/m) dt
      dP = (-alpha Q + eta Z) dt
      dZ = (-Z/tau - eta P/m) dt + sqrt(2/(beta tau)) dW,   Z_0 ~ N(0, 1/beta)

  whose (Q, P) marginal obeys a generalized Langevin equation with the
  exponentially decaying memory kernel eta^2 exp(-t/tau) and matching
  colored noise.  The recorded force is the full momentum drift
  F_tot = -alpha Q + eta Z.

* ``simulate_langevin_td`` integrates a memoryless model

      dQ = (P/m) dt
      dP = F(Q, t) dt - zeta0 (P/m) dt + sigma0 dW

  with Euler-Maruyama or BAOAB stepping; the recorded force is the
  momentum drift F(Q, t) - zeta0 P/m.

Ensembles are seeded per path through a splitmix64 step of
(master_seed + path_index), which makes results bit-identical for any
worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np

from .trajstore import Ensemble, Trajectory

__all__ = [
    "GLEParams",
    "LangevinTDParams",
    "IntegratorSpec",
    "SimulationDivergedError",
    "GrowthReport",
    "splitmix64",
    "simulate_gle",
    "simulate_langevin_td",
    "generate_ensemble",
    "validate_force_growth",
]

EULER_MARUYAMA = "euler-maruyama"
BAOAB = "baoab"

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output step for the 64-bit state x (used for per-path seeding)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class SimulationDivergedError(RuntimeError):
    """State became non-finite; the message names the offending step."""


@dataclass
class GLEParams:
    """Benchmark parameters: harmonic trap alpha, kernel amplitude eta, memory time tau.

    init="point" starts every path at (q0, p0); init="gibbs" draws
    Q ~ N(0, 1/(beta alpha)) and P ~ N(0, m/beta) per path instead, which
    makes the paths stationary from t=0.
    """

    alpha: float
    eta: float
    tau: float
    beta: float
    q0: float = 0.0
    p0: float = 0.0
    mass: float = 1.0
    init: str = "point"

    def __post_init__(self):
        for name in ("alpha", "tau", "beta", "mass"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.init not in ("point", "gibbs"):
            raise ValueError(f"init must be 'point' or 'gibbs', got {self.init!r}")


@dataclass
class LangevinTDParams:
    """Memoryless model parameters with a (possibly time-dependent) force handle.

    `force` is called as force(q, t) -> float.  sigma0=None fills in the
    fluctuation-dissipation value sqrt(2 zeta0 / beta); require_fdt=True
    additionally rejects any sigma0 with |sigma0^2 - 2 zeta0/beta| > 1e-12.
    """

    force: Callable[[float, float], float]
    zeta0: float
    beta: float
    sigma0: Optional[float] = None
    mass: float = 1.0
    q0: float = 0.0
    p0: float = 0.0
    init: str = "point"
    require_fdt: bool = False

    def __post_init__(self):
        for name in ("beta", "mass"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.zeta0 < 0.0:
            raise ValueError(f"zeta0 must be >= 0, got {self.zeta0}")
        if self.sigma0 is None:
            self.sigma0 = math.sqrt(2.0 * self.zeta0 / self.beta)
        if self.sigma0 < 0.0:
            raise ValueError(f"sigma0 must be >= 0, got {self.sigma0}")
        if self.require_fdt and abs(self.sigma0 ** 2 - 2.0 * self.zeta0 / self.beta) > 1e-12:
            raise ValueError(
                f"sigma0^2={self.sigma0 ** 2!r} violates the fluctuation-dissipation "
                f"relation 2*zeta0/beta={2.0 * self.zeta0 / self.beta!r}")
        if self.init not in ("point", "gibbs"):
            raise ValueError(f"init must be 'point' or 'gibbs', got {self.init!r}")


@dataclass(frozen=True)
class IntegratorSpec:
    """Stepping plan: scheme, step size, step count, recording stride and seed."""

    scheme: str
    dt: float
    n_steps: int
    record_stride: int = 1
    seed: int = 0
    record_forces: bool = False

    def __post_init__(self):
        if self.scheme not in (EULER_MARUYAMA, BAOAB):
            raise ValueError(f"scheme must be {EULER_MARUYAMA!r} or {BAOAB!r}, "
                             f"got {self.scheme!r}")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.record_stride < 1:
            raise ValueError(f"record_stride must be >= 1, got {self.record_stride}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


def _check_finite(step: int, **state: float) -> None:
    for name, v in state.items():
        if not math.isfinite(v):
            raise SimulationDivergedError(f"{name} became {v} at step {step}")


def _recorder(spec: IntegratorSpec):
    n_rec = spec.n_steps // spec.record_stride + 1
    times = spec.dt * spec.record_stride * np.arange(n_rec)
    q = np.empty((n_rec, 1))
    p = np.empty((n_rec, 1))
    f = np.empty((n_rec, 1)) if spec.record_forces else None
    return n_rec, times, q, p, f


def simulate_gle(params: GLEParams, spec: IntegratorSpec,
                 noise: Optional[np.ndarray] = None) -> Trajectory:
    """Integrate the extended benchmark system with Euler-Maruyama.

    Parameters
    ----------
    params : GLEParams
    spec : IntegratorSpec
        Only the euler-maruyama scheme applies to the extended system; the
        BAOAB splitting is reserved for the memoryless models.
    noise : ndarray, shape (n_steps,), optional
        Standard-normal increments to use instead of drawing from the seed
        (coupling hook for step-size studies).  Initial-condition draws
        still come from the seeded generator.

    Returns
    -------
    Trajectory with D=1, M=1 and, when requested, the recorded drift
    F_tot = -alpha Q + eta Z.
    """
    if spec.scheme != EULER_MARUYAMA:
        raise ValueError("the extended-system integrator supports only euler-maruyama")
    rng = np.random.default_rng(spec.seed)
    a, eta, tau, beta, m = params.alpha, params.eta, params.tau, params.beta, params.mass
    if params.init == "gibbs":
        q = rng.normal(0.0, math.sqrt(1.0 / (beta * a)))
        p = rng.normal(0.0, math.sqrt(m / beta))
    else:
        q, p = params.q0, params.p0
    z = rng.normal(0.0, math.sqrt(1.0 / beta))
    if noise is None:
        noise = rng.standard_normal(spec.n_steps)
    elif noise.shape != (spec.n_steps,):
        raise ValueError(f"noise shape {noise.shape}, expected ({spec.n_steps},)")
    dt = spec.dt
    amp = math.sqrt(2.0 / (beta * tau)) * math.sqrt(dt)
    n_rec, times, qs, ps, fs = _recorder(spec)
    qs[0, 0], ps[0, 0] = q, p
    if fs is not None:
        fs[0, 0] = -a * q + eta * z
    rec = 0
    for i in range(spec.n_steps):
        v = p / m
        qn = q + v * dt
        pn = p + (-a * q + eta * z) * dt
        zn = z + (-z / tau - eta * v) * dt + amp * noise[i]
        q, p, z = qn, pn, zn
        if (i + 1) % spec.record_stride == 0:
            rec += 1
            _check_finite(i + 1, Q=q, P=p, Z=z)
            qs[rec, 0], ps[rec, 0] = q, p
            if fs is not None:
                fs[rec, 0] = -a * q + eta * z
    return Trajectory(1, np.array([m]), times, qs, ps, fs, dt * spec.record_stride)


def simulate_langevin_td(params: LangevinTDParams, spec: IntegratorSpec,
                         noise: Optional[np.ndarray] = None) -> Trajectory:
    """Integrate the memoryless model with Euler-Maruyama or BAOAB.

    The BAOAB O-step uses the exact Ornstein-Uhlenbeck update, so the
    zeta0 = sigma0 = 0 case reduces to velocity Verlet.
    """
    rng = np.random.default_rng(spec.seed)
    force, z0, s0 = params.force, params.zeta0, params.sigma0
    beta, m = params.beta, params.mass
    if params.init == "gibbs":
        q = params.q0
        p = rng.normal(0.0, math.sqrt(m / beta))
    else:
        q, p = params.q0, params.p0
    if noise is None:
        noise = rng.standard_normal(spec.n_steps)
    elif noise.shape != (spec.n_steps,):
        raise ValueError(f"noise shape {noise.shape}, expected ({spec.n_steps},)")
    dt = spec.dt
    n_rec, times, qs, ps, fs = _recorder(spec)
    qs[0, 0], ps[0, 0] = q, p
    if fs is not None:
        fs[0, 0] = force(q, 0.0) - z0 * p / m
    rec = 0
    if spec.scheme == EULER_MARUYAMA:
        amp = s0 * math.sqrt(dt)
        for i in range(spec.n_steps):
            t = i * dt
            qn = q + (p / m) * dt
            pn = p + (force(q, t) - z0 * p / m) * dt + amp * noise[i]
            q, p = qn, pn
            if (i + 1) % spec.record_stride == 0:
                rec += 1
                _check_finite(i + 1, Q=q, P=p)
                qs[rec, 0], ps[rec, 0] = q, p
                if fs is not None:
                    fs[rec, 0] = force(q, (i + 1) * dt) - z0 * p / m
    else:
        # exact OU half: P -> c1 P + c2 xi
        c1 = math.exp(-z0 * dt / m)
        if z0 > 0.0:
            c2 = math.sqrt(s0 ** 2 * m / (2.0 * z0) * (1.0 - c1 ** 2))
        else:
            c2 = s0 * math.sqrt(dt)
        half = 0.5 * dt
        f_cur = force(q, 0.0)
        for i in range(spec.n_steps):
            p += half * f_cur
            q += half * p / m
            p = c1 * p + c2 * noise[i]
            q += half * p / m
            f_cur = force(q, (i + 1) * dt)
            p += half * f_cur
            if (i + 1) % spec.record_stride == 0:
                rec += 1
                _check_finite(i + 1, Q=q, P=p)
                qs[rec, 0], ps[rec, 0] = q, p
                if fs is not None:
                    fs[rec, 0] = f_cur - z0 * p / m
    return Trajectory(1, np.array([m]), times, qs, ps, fs, dt * spec.record_stride)


Params = Union[GLEParams, LangevinTDParams]


def _force_lanes(force, q: np.ndarray, t: float):
    """Evaluate a force handle on a lane vector of positions."""
    if hasattr(force, "eval_many"):
        return force.eval_many(q, t)
    return force(q, t)


def _check_lanes(step: int, **state: np.ndarray) -> None:
    for name, arr in state.items():
        if not np.all(np.isfinite(arr)):
            bad = np.nonzero(~np.isfinite(arr))[0][0]
            raise SimulationDivergedError(f"{name} became {arr[bad]} at step {step}")


def _split_lanes(spec: IntegratorSpec, mass: float, n: int, times, qs, ps, fs):
    trs = []
    for k in range(n):
        f = fs[:, k:k + 1].copy() if fs is not None else None
        trs.append(Trajectory(1, np.array([mass]), times, qs[:, k:k + 1].copy(),
                              ps[:, k:k + 1].copy(), f, spec.dt * spec.record_stride))
    return trs


def _batch_gle(params: GLEParams, spec: IntegratorSpec, seeds) -> List[Trajectory]:
    """Lane-parallel Euler-Maruyama for the extended system, one lane per path.

    Each lane consumes its own generator in the same draw order as
    simulate_gle, and every update is elementwise, so lane k is bit-identical
    to a lone run seeded with seeds[k].
    """
    if spec.scheme != EULER_MARUYAMA:
        raise ValueError("the extended-system integrator supports only euler-maruyama")
    rngs = [np.random.default_rng(s) for s in seeds]
    a, eta, tau, beta, m = params.alpha, params.eta, params.tau, params.beta, params.mass
    n = len(seeds)
    if params.init == "gibbs":
        q = np.array([r.normal(0.0, math.sqrt(1.0 / (beta * a))) for r in rngs])
        p = np.array([r.normal(0.0, math.sqrt(m / beta)) for r in rngs])
    else:
        q = np.full(n, float(params.q0))
        p = np.full(n, float(params.p0))
    z = np.array([r.normal(0.0, math.sqrt(1.0 / beta)) for r in rngs])
    noise = np.stack([r.standard_normal(spec.n_steps) for r in rngs])
    dt = spec.dt
    amp = math.sqrt(2.0 / (beta * tau)) * math.sqrt(dt)
    n_rec = spec.n_steps // spec.record_stride + 1
    times = dt * spec.record_stride * np.arange(n_rec)
    qs = np.empty((n_rec, n))
    ps = np.empty((n_rec, n))
    fs = np.empty((n_rec, n)) if spec.record_forces else None
    qs[0], ps[0] = q, p
    if fs is not None:
        fs[0] = -a * q + eta * z
    rec = 0
    for i in range(spec.n_steps):
        v = p / m
        qn = q + v * dt
        pn = p + (-a * q + eta * z) * dt
        zn = z + (-z / tau - eta * v) * dt + amp * noise[:, i]
        q, p, z = qn, pn, zn
        if (i + 1) % spec.record_stride == 0:
            rec += 1
            _check_lanes(i + 1, Q=q, P=p, Z=z)
            qs[rec], ps[rec] = q, p
            if fs is not None:
                fs[rec] = -a * q + eta * z
    return _split_lanes(spec, m, n, times, qs, ps, fs)


def _batch_langevin(params: LangevinTDParams, spec: IntegratorSpec,
                    seeds) -> List[Trajectory]:
    """Lane-parallel memoryless-model integration (see _batch_gle).

    The force handle is evaluated once per step on the whole lane vector:
    through eval_many when the handle provides it, else by calling it with
    the vector (plain-arithmetic handles broadcast).
    """
    rngs = [np.random.default_rng(s) for s in seeds]
    force, z0, s0 = params.force, params.zeta0, params.sigma0
    beta, m = params.beta, params.mass
    n = len(seeds)
    if params.init == "gibbs":
        q = np.full(n, float(params.q0))
        p = np.array([r.normal(0.0, math.sqrt(m / beta)) for r in rngs])
    else:
        q = np.full(n, float(params.q0))
        p = np.full(n, float(params.p0))
    noise = np.stack([r.standard_normal(spec.n_steps) for r in rngs])
    dt = spec.dt
    n_rec = spec.n_steps // spec.record_stride + 1
    times = dt * spec.record_stride * np.arange(n_rec)
    qs = np.empty((n_rec, n))
    ps = np.empty((n_rec, n))
    fs = np.empty((n_rec, n)) if spec.record_forces else None
    qs[0], ps[0] = q, p
    if fs is not None:
        fs[0] = _force_lanes(force, q, 0.0) - z0 * p / m
    rec = 0
    if spec.scheme == EULER_MARUYAMA:
        amp = s0 * math.sqrt(dt)
        for i in range(spec.n_steps):
            t = i * dt
            qn = q + (p / m) * dt
            pn = p + (_force_lanes(force, q, t) - z0 * p / m) * dt + amp * noise[:, i]
            q, p = qn, pn
            if (i + 1) % spec.record_stride == 0:
                rec += 1
                _check_lanes(i + 1, Q=q, P=p)
                qs[rec], ps[rec] = q, p
                if fs is not None:
                    fs[rec] = _force_lanes(force, q, (i + 1) * dt) - z0 * p / m
    else:
        c1 = math.exp(-z0 * dt / m)
        if z0 > 0.0:
            c2 = math.sqrt(s0 ** 2 * m / (2.0 * z0) * (1.0 - c1 ** 2))
        else:
            c2 = s0 * math.sqrt(dt)
        half = 0.5 * dt
        f_cur = np.broadcast_to(np.asarray(_force_lanes(force, q, 0.0),
                                           dtype=np.float64), q.shape)
        for i in range(spec.n_steps):
            p = p + half * f_cur
            q = q + half * p / m
            p = c1 * p + c2 * noise[:, i]
            q = q + half * p / m
            f_cur = _force_lanes(force, q, (i + 1) * dt)
            p = p + half * f_cur
            if (i + 1) % spec.record_stride == 0:
                rec += 1
                _check_lanes(i + 1, Q=q, P=p)
                qs[rec], ps[rec] = q, p
                if fs is not None:
                    fs[rec] = f_cur - z0 * p / m
    return _split_lanes(spec, m, n, times, qs, ps, fs)


def _simulate_chunk(args) -> List[Trajectory]:
    params, spec, master_seed, indices = args
    seeds = [splitmix64(master_seed + k) for k in indices]
    if isinstance(params, GLEParams):
        return _batch_gle(params, spec, seeds)
    return _batch_langevin(params, spec, seeds)


def generate_ensemble(params: Params, spec: IntegratorSpec, n_paths: int,
                      master_seed: int, workers: int = 1) -> Ensemble:
    """Simulate n_paths independent paths; path k is seeded with splitmix64(master_seed + k).

    Results are merged in path order, so the ensemble is bit-identical for
    any `workers` value.  Parallel runs fork worker processes; params must
    then be picklable (module-level force handles, not lambdas).
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    indices = list(range(n_paths))
    if workers == 1 or n_paths == 1:
        paths = _simulate_chunk((params, spec, master_seed, indices))
    else:
        chunk = max(1, math.ceil(n_paths / (workers * 4)))
        jobs = [(params, spec, master_seed, indices[i:i + chunk])
                for i in range(0, n_paths, chunk)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_chunk, jobs))
        paths = [tr for part in parts for tr in part]
    return Ensemble(paths, params.beta)


@dataclass
class GrowthReport:
    """Diagnostic summary of a fitted pair field's magnitude and radial slopes."""

    max_abs_force: float
    max_abs_slope: float
    warnings: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.warnings


def validate_force_growth(fld, slope_limit: Optional[float] = None,
                          t_samples: int = 9) -> GrowthReport:
    """Scan a pair field for runaway radial slopes, span by span.

    Fitted fields can grow steeply where data never reached (domain edges);
    this flags any knot span whose |df/dr| exceeds `slope_limit` (default:
    10x the median span slope).  Time-dependent fields are scanned at
    t_samples times across [0, t_f].

    Returns a GrowthReport whose warnings name the offending knot spans.
    """
    from .basis import PairForceField, TimeDependentPairForceField

    if isinstance(fld, TimeDependentPairForceField):
        ts = np.linspace(fld.tensor.t_basis.grid.lo, fld.t_f, t_samples)
        snaps = [(f"t={t:g}: ", fld.at_time(float(t))) for t in ts]
    elif isinstance(fld, PairForceField):
        snaps = [("", fld)]
    else:
        raise TypeError(f"expected a pair force field, got {type(fld).__name__}")

    g = snaps[0][1].basis.grid
    edges = g.lo + g.spacing * np.arange(g.n_spans + 1)
    span_slopes = np.zeros(g.n_spans)
    max_f = 0.0
    per_snap = []
    for label, snap in snaps:
        r = np.linspace(max(g.lo, 1e-12), min(g.hi, snap.cutoff), 10 * g.n_spans + 1)
        f = snap.eval_many(r)
        max_f = max(max_f, float(np.max(np.abs(f))))
        slopes = np.abs(np.diff(f) / np.diff(r))
        mids = 0.5 * (r[1:] + r[:-1])
        spans = np.clip(((mids - g.lo) / g.spacing).astype(int), 0, g.n_spans - 1)
        snap_spans = np.zeros(g.n_spans)
        np.maximum.at(snap_spans, spans, slopes)
        np.maximum.at(span_slopes, spans, slopes)
        per_snap.append((label, snap_spans))
    if slope_limit is None:
        nz = span_slopes[span_slopes > 0.0]
        slope_limit = 10.0 * float(np.median(nz)) if nz.size else math.inf
    warnings = []
    for label, snap_spans in per_snap:
        for s in np.nonzero(snap_spans > slope_limit)[0]:
            warnings.append(
                f"{label}steep force on knot span [{edges[s]:.6g}, {edges[s + 1]:.6g}]: "
                f"|df/dr| ~ {snap_spans[s]:.6g} exceeds {slope_limit:.6g}")
    return GrowthReport(max_f, float(np.max(span_slopes)), warnings)
