"""Structural and transport observables over trajectory ensembles.

The radial distribution function counts ordered pair distances into
uniform shells and normalizes bin k by n_frames * M * rho * V_shell(k)
with V_shell = (4 pi / 3)(r_{k+1}^3 - r_k^3), so an ideal gas gives
g ~ (M-1)/M.  Periodic boundaries use the minimum image and require
r_max at most half the shortest box length; open boundaries take the
caller's reference density (the droplet case).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .friction import CorrelationSeries
from .trajstore import Ensemble, Frame

__all__ = [
    "RdfSpec",
    "RdfResult",
    "MomentsResult",
    "rdf",
    "rdf_at_time",
    "ensemble_moments",
    "diffusion_coefficient",
    "export_rdf_csv",
    "export_moments_csv",
]

OPEN = "open"
PERIODIC = "periodic"


@dataclass(frozen=True)
class RdfSpec:
    """Binning and normalization plan for a radial distribution function.

    Periodic mode needs box lengths with r_max at most half the shortest
    one.  The normalization density defaults to M / V(box); open-boundary
    data without a reference box must state the density explicitly.
    """

    r_max: float
    n_bins: int
    boundary: str = OPEN
    box: Optional[np.ndarray] = None
    density: Optional[float] = None

    def __post_init__(self):
        if not self.r_max > 0.0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        if self.boundary not in (OPEN, PERIODIC):
            raise ValueError(f"boundary must be {OPEN!r} or {PERIODIC!r}, "
                             f"got {self.boundary!r}")
        if self.box is not None:
            box = np.asarray(self.box, dtype=np.float64)
            if box.shape != (3,) or np.any(box <= 0.0):
                raise ValueError("box must be three positive edge lengths")
            object.__setattr__(self, "box", box)
        if self.boundary == PERIODIC:
            if self.box is None:
                raise ValueError("periodic rdf needs box lengths")
            if self.r_max > 0.5 * float(np.min(self.box)) * (1.0 + 1e-12):
                raise ValueError(f"r_max={self.r_max} exceeds half the shortest "
                                 f"box length {0.5 * float(np.min(self.box))}")
        if self.density is not None and not self.density > 0.0:
            raise ValueError(f"density must be positive, got {self.density}")
        if self.density is None and self.box is None and self.boundary == OPEN:
            raise ValueError("open-boundary rdf needs a density or a reference box")


@dataclass
class RdfResult:
    r: np.ndarray        # bin centers
    g: np.ndarray
    counts: np.ndarray   # ordered pair counts per bin
    n_frames: int


@dataclass
class MomentsResult:
    times: np.ndarray
    mean: np.ndarray     # (n_frames, D*M)
    var: np.ndarray      # (n_frames, D*M), unbiased across paths
    mean_p: np.ndarray
    var_p: np.ndarray


def _frame_positions(frame) -> np.ndarray:
    if isinstance(frame, Frame):
        return frame.positions.reshape(-1, frame.dim)
    q = np.asarray(frame, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"frame positions must be 2-D (M, 3), got shape {q.shape}")
    return q


def rdf(frames, spec: RdfSpec) -> RdfResult:
    """Radial distribution function averaged over the given frames.

    `frames` is a sequence of Frame objects or (M, 3) position arrays, all
    with the same particle count.  Periodic mode applies the minimum image
    with the spec's box.  Bin k counts ordered pairs and is normalized by
    n_frames * M * rho * V_shell(k), V_shell = (4 pi / 3)(r_{k+1}^3 - r_k^3).
    """
    edges = np.linspace(0.0, spec.r_max, spec.n_bins + 1)
    counts = np.zeros(spec.n_bins, dtype=np.int64)
    box = spec.box if spec.boundary == PERIODIC else None
    n_frames = 0
    m = None
    for frame in frames:
        q = _frame_positions(frame)
        if q.shape[1] != 3:
            raise ValueError("rdf is defined for 3-D configurations")
        if m is None:
            m = q.shape[0]
            if m < 2:
                raise ValueError("rdf needs at least two particles")
        elif q.shape[0] != m:
            raise ValueError("all frames must share one particle count")
        ii, jj = np.triu_indices(m, k=1)
        d = q[ii] - q[jj]
        if box is not None:
            d -= box * np.round(d / box)
        r = np.sqrt(np.sum(d * d, axis=1))
        h, _ = np.histogram(r, bins=edges)
        counts += 2 * h  # ordered pairs
        n_frames += 1
    if n_frames == 0:
        raise ValueError("rdf needs at least one frame")
    if spec.density is not None:
        rho = spec.density
    else:
        rho = m / float(np.prod(spec.box))
    shell = (4.0 * math.pi / 3.0) * (edges[1:] ** 3 - edges[:-1] ** 3)
    g = counts / (n_frames * m * rho * shell)
    centers = 0.5 * (edges[1:] + edges[:-1])
    return RdfResult(centers, g, counts, n_frames)


def rdf_at_time(ens: Ensemble, spec: RdfSpec, t: float) -> RdfResult:
    """RDF from the frame nearest t in each path (within dt_nominal/2)."""
    frames = []
    for k, tr in enumerate(ens.paths):
        i = int(np.argmin(np.abs(tr.times - t)))
        if abs(float(tr.times[i]) - t) > 0.5 * tr.dt_nominal * (1.0 + 1e-9):
            raise ValueError(f"no frame within dt/2 of t={t} in path {k}")
        frames.append(tr.positions[i].reshape(tr.n_particles, tr.dim))
    return rdf(frames, spec)


def ensemble_moments(ens: Ensemble) -> MomentsResult:
    """Per-frame cross-path mean and unbiased variance of positions and momenta."""
    if ens.n_paths < 2:
        raise ValueError("variances need at least two paths")
    q = np.stack([tr.positions for tr in ens.paths])   # (n_p, n_t, D*M)
    p = np.stack([tr.momenta for tr in ens.paths])
    return MomentsResult(ens.times.copy(),
                         q.mean(axis=0), q.var(axis=0, ddof=1),
                         p.mean(axis=0), p.var(axis=0, ddof=1))


def diffusion_coefficient(cvv: CorrelationSeries,
                          t_upper: Optional[float] = None) -> float:
    """Integrated velocity autocorrelation (trapezoid up to t_upper, default all lags)."""
    if t_upper is None:
        k = cvv.lags.shape[0] - 1
    else:
        if t_upper <= 0.0:
            raise ValueError(f"t_upper must be positive, got {t_upper}")
        if t_upper > float(cvv.lags[-1]) * (1.0 + 1e-9):
            raise ValueError(f"t_upper={t_upper} is beyond the last lag {cvv.lags[-1]}")
        k = int(np.searchsorted(cvv.lags, t_upper + 1e-9 * cvv.lags[1], side="right")) - 1
        k = max(k, 1)
    return float(np.trapezoid(cvv.values[:k + 1], cvv.lags[:k + 1]))


def export_rdf_csv(res: RdfResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r", "g"])
        for r, g in zip(res.r, res.g):
            wr.writerow([repr(float(r)), repr(float(g))])


def export_moments_csv(res: MomentsResult, path) -> None:
    """Scalar-path export: `t,mean_q,var_q,mean_p,var_p` (first coordinate)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "mean_q", "var_q", "mean_p", "var_p"])
        for i, t in enumerate(res.times):
            wr.writerow([repr(float(t)),
                         repr(float(res.mean[i, 0])), repr(float(res.var[i, 0])),
                         repr(float(res.mean_p[i, 0])), repr(float(res.var_p[i, 0]))])
