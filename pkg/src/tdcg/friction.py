"""Friction and noise-amplitude estimators from trajectory correlations.

Correlation series are per-dimension normalized: C(l) averages v(t0+l).v(t0)
over paths and particles (and over all origins t0 in sliding mode), divided
by the spatial dimension.  The memoryless friction coefficient follows from
the ratio of time integrals

    zeta0 = - int_0^T Cfv dt / int_0^T Cvv dt,

where Cfv correlates the residual force dF = F_recorded - F_model against
the initial velocity; its Laplace-weighted generalization evaluates the
memory kernel's transform on an s grid.  The noise amplitude comes from the
realized quadratic variation of the momenta on a deliberately coarse grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .basis import PairForceField, TimeDependentPairForceField
from .cgmd import MDSystem, SimBox, compute_pair_forces
from .cgmd import OPEN as _OPEN
from .psfm import CGMapping, map_ensemble
from .trajstore import Ensemble, Trajectory

__all__ = [
    "CorrelationSeries",
    "DegenerateDenominatorError",
    "FIXED_ZERO",
    "SLIDING",
    "vacf",
    "force_velocity_corr",
    "zeta0_from_green_kubo",
    "sigma0_quadratic_variation",
    "fdt_convert",
    "laplace_kernel",
    "export_correlation_csv",
]

FIXED_ZERO = "fixed-zero"
SLIDING = "sliding"


class DegenerateDenominatorError(ValueError):
    """The velocity-correlation integral is too small to divide by."""


@dataclass
class CorrelationSeries:
    """Correlation values on a uniform lag grid starting at zero."""

    lags: np.ndarray
    values: np.ndarray
    n_samples: np.ndarray

    def __post_init__(self):
        self.lags = np.asarray(self.lags, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.n_samples = np.asarray(self.n_samples, dtype=np.int64)
        n = self.lags.shape[0]
        if n < 2:
            raise ValueError("need at least two lags")
        if self.values.shape != (n,) or self.n_samples.shape != (n,):
            raise ValueError("lags, values and n_samples must have matching length")
        if self.lags[0] != 0.0:
            raise ValueError(f"lag grid must start at 0, got {self.lags[0]}")
        d = np.diff(self.lags)
        if np.any(d <= 0.0) or np.max(np.abs(d - d[0])) > 1e-9 * d[0]:
            raise ValueError("lag grid must be uniform and increasing")
        if np.any(self.n_samples < 1):
            raise ValueError("every lag needs at least one sample")
        if np.any(np.diff(self.n_samples) > 0):
            raise ValueError("sample counts cannot grow with lag")


def _velocities(tr: Trajectory) -> np.ndarray:
    inv_m = np.repeat(1.0 / tr.masses, tr.dim)
    return tr.momenta * inv_m[None, :]


def _check_ensemble(ens: Ensemble, max_lag: Optional[int]) -> int:
    n_t = ens.paths[0].n_frames
    if n_t < 2:
        raise ValueError("correlations need at least two frames per path")
    n_lag = n_t if max_lag is None else min(int(max_lag) + 1, n_t)
    if n_lag < 2:
        raise ValueError(f"max_lag={max_lag} leaves fewer than two lags")
    return n_lag


def _correlate(a_paths, b_paths, dim: int, n_t: int, n_lag: int, mode: str, m: int):
    """Sum over paths, particles, axes (and sliding origins) of a(t0+l).b(t0), with counts."""
    acc = np.zeros(n_lag)
    counts = np.zeros(n_lag, dtype=np.int64)
    n_paths = len(a_paths)
    if mode == FIXED_ZERO:
        for a, b in zip(a_paths, b_paths):
            prod = a[:n_lag] * b[0][None, :]
            acc += prod.reshape(n_lag, m, dim).sum(axis=2).sum(axis=1)
        counts[:] = n_paths * m
    elif mode == SLIDING:
        for a, b in zip(a_paths, b_paths):
            for lag in range(n_lag):
                prod = a[lag:] * b[:n_t - lag]
                acc[lag] += float(prod.sum())
        counts = n_paths * m * (n_t - np.arange(n_lag))
    else:
        raise ValueError(f"origin mode must be {FIXED_ZERO!r} or {SLIDING!r}, got {mode!r}")
    return acc, counts


def vacf(ens: Ensemble, mapping: Optional[CGMapping] = None, mode: str = FIXED_ZERO,
         max_lag: Optional[int] = None) -> CorrelationSeries:
    """Velocity autocorrelation of an ensemble.

    Parameters
    ----------
    ens : Ensemble
    mapping : CGMapping, optional
        Coarse-grain the ensemble first; None correlates the particles as
        stored.
    mode : str
        "fixed-zero" correlates against t=0 only (transient statistics);
        "sliding" additionally averages over every origin in each path
        (equilibrium statistics; sample counts then shrink with lag).
    max_lag : int, optional
        Largest lag index to include (default: all).
    """
    if mapping is not None:
        ens = map_ensemble(ens, mapping)
    n_lag = _check_ensemble(ens, max_lag)
    tr0 = ens.paths[0]
    vs = [_velocities(tr) for tr in ens.paths]
    acc, counts = _correlate(vs, vs, tr0.dim, tr0.n_frames, n_lag, mode, tr0.n_particles)
    values = acc / (counts * tr0.dim)
    lags = tr0.dt_nominal * np.arange(n_lag)
    return CorrelationSeries(lags, values, counts)


def _field_model(field, box: Optional[SimBox], masses: np.ndarray) -> Callable:
    """Wrap a pair field as a per-frame model-force callable."""
    b = box if box is not None else SimBox(np.ones(3), _OPEN)
    td = isinstance(field, TimeDependentPairForceField)

    def model(q: np.ndarray, t: float) -> np.ndarray:
        system = MDSystem(b, masses, q, np.zeros_like(q))
        forces, _ = compute_pair_forces(system, field, t if td else None)
        return forces

    return model


def force_velocity_corr(ens: Ensemble, mapping: Optional[CGMapping] = None,
                        model_force=None, mode: str = FIXED_ZERO,
                        max_lag: Optional[int] = None,
                        box: Optional[SimBox] = None) -> CorrelationSeries:
    """Correlation of the residual force dF = F_recorded - F_model with velocity.

    The model force is subtracted frame by frame at the (mapped) positions.
    It can be a callable model_force(positions (M, D), t) -> (M, D), a
    PairForceField or TimeDependentPairForceField (3-D data; pass `box` for
    periodic data, open otherwise), or None for a zero model, which leaves
    the full recorded force.
    """
    if mapping is not None:
        ens = map_ensemble(ens, mapping)
    if isinstance(model_force, (PairForceField, TimeDependentPairForceField)):
        if ens.paths[0].dim != 3:
            raise ValueError("pair-field model forces need 3-D data")
        model_force = _field_model(model_force, box, ens.paths[0].masses)
    n_lag = _check_ensemble(ens, max_lag)
    tr0 = ens.paths[0]
    d, m = tr0.dim, tr0.n_particles
    dfs, vs = [], []
    for tr in ens.paths:
        if tr.forces is None:
            raise ValueError("force-velocity correlation requires recorded forces")
        df = tr.forces.copy()
        if model_force is not None:
            for i in range(tr.n_frames):
                mf = np.asarray(model_force(tr.positions[i].reshape(m, d),
                                            float(tr.times[i])), dtype=np.float64)
                df[i] -= mf.reshape(-1)
        dfs.append(df)
        vs.append(_velocities(tr))
    acc, counts = _correlate(dfs, vs, d, tr0.n_frames, n_lag, mode, m)
    values = acc / (counts * d)
    lags = tr0.dt_nominal * np.arange(n_lag)
    return CorrelationSeries(lags, values, counts)


def _window(series: CorrelationSeries, t_upper: Optional[float]) -> int:
    """Index of the last lag inside the integration window (>= 1)."""
    if t_upper is None:
        sgn = np.sign(series.values[0])
        flips = np.nonzero(np.sign(series.values) * sgn < 0)[0]
        k = int(flips[0]) if flips.size else series.lags.shape[0] - 1
    else:
        if t_upper <= 0.0:
            raise ValueError(f"t_upper must be positive, got {t_upper}")
        dt = series.lags[1]
        k = int(np.searchsorted(series.lags, t_upper + 1e-9 * dt, side="right")) - 1
    return max(k, 1)


def zeta0_from_green_kubo(cfv: CorrelationSeries, cvv: CorrelationSeries,
                          t_upper: Optional[float] = None) -> float:
    """Friction coefficient -int Cfv / int Cvv (trapezoid on the shared lag grid).

    The default window runs to the first zero crossing of Cvv; pass t_upper
    to override.  Both series must share one lag grid.
    """
    if cfv.lags.shape != cvv.lags.shape or np.max(np.abs(cfv.lags - cvv.lags)) > 0.0:
        raise ValueError("correlation series are on different lag grids")
    k = _window(cvv, t_upper)
    num = float(np.trapezoid(cfv.values[:k + 1], cfv.lags[:k + 1]))
    den = float(np.trapezoid(cvv.values[:k + 1], cvv.lags[:k + 1]))
    if abs(den) < 1e-14 * abs(num):
        raise DegenerateDenominatorError(
            f"velocity correlation integral {den!r} is degenerate against {num!r}")
    return -num / den


def sigma0_quadratic_variation(tr: Trajectory) -> float:
    """Noise amplitude from momentum quadratic variation on the trajectory's grid.

    sigma^2 is estimated per momentum component as sum (P_i - P_{i-1})^2
    over the n-1 increments divided by (n-1) * dt, then averaged over
    components; sensible only on grids coarse enough that the model's
    momentum increments look diffusive.
    """
    if tr.n_frames < 2:
        raise ValueError("quadratic variation needs at least two frames")
    inc = np.diff(tr.momenta, axis=0)
    n_inc = tr.n_frames - 1
    per_comp = np.sum(inc * inc, axis=0) / (n_inc * tr.dt_nominal)
    return math.sqrt(float(np.mean(per_comp)))


def fdt_convert(beta: float, zeta0: Optional[float] = None,
                sigma0: Optional[float] = None) -> float:
    """Convert between friction and noise amplitude via sigma0^2 = 2 zeta0 / beta.

    Give exactly one of zeta0 / sigma0; the other is returned.
    """
    if not beta > 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    if (zeta0 is None) == (sigma0 is None):
        raise ValueError("give exactly one of zeta0 and sigma0")
    if zeta0 is not None:
        if zeta0 < 0.0:
            raise ValueError(f"zeta0 must be >= 0, got {zeta0}")
        return math.sqrt(2.0 * zeta0 / beta)
    if sigma0 < 0.0:
        raise ValueError(f"sigma0 must be >= 0, got {sigma0}")
    return beta * sigma0 ** 2 / 2.0


def laplace_kernel(cfv: CorrelationSeries, cvv: CorrelationSeries, s_values,
                   t_upper: Optional[float] = None) -> np.ndarray:
    """Memory-kernel Laplace transform zeta_hat(s) = -Cfv_hat(s) / Cvv_hat(s).

    Transforms use the same trapezoid rule and window as the s=0 ratio, so
    zeta_hat(0) coincides with the plain friction estimate exactly.
    """
    if cfv.lags.shape != cvv.lags.shape or np.max(np.abs(cfv.lags - cvv.lags)) > 0.0:
        raise ValueError("correlation series are on different lag grids")
    k = _window(cvv, t_upper)
    lags = cfv.lags[:k + 1]
    out = np.empty(np.asarray(s_values, dtype=np.float64).shape)
    for n, s in enumerate(np.asarray(s_values, dtype=np.float64)):
        if s < 0.0:
            raise ValueError(f"Laplace abscissa must be >= 0, got {s}")
        w = np.exp(-s * lags)
        num = float(np.trapezoid(cfv.values[:k + 1] * w, lags))
        den = float(np.trapezoid(cvv.values[:k + 1] * w, lags))
        if abs(den) < 1e-14 * abs(num):
            raise DegenerateDenominatorError(
                f"velocity transform at s={s} is degenerate: {den!r} vs {num!r}")
        out[n] = -num / den
    return out


def export_correlation_csv(series: CorrelationSeries, path) -> None:
    """Write a correlation series as CSV with columns lag,value,n_samples."""
    with open(path, "w", newline="") as fh:
        fh.write("lag,value,n_samples\n")
        for lag, value, n in zip(series.lags, series.values, series.n_samples):
            fh.write(f"{float(lag)!r},{float(value)!r},{int(n)}\n")
