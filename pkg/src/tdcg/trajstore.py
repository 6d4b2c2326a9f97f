"""Trajectory containers and binary storage.

A trajectory is a uniform time series of phase-space frames for M point
particles in D dimensions, stored as flat float64 arrays of length D*M per
frame (particle-major: x1, y1, z1, x2, ...).  Ensembles bundle trajectories
that share one time grid.  The on-disk format is a little-endian binary
layout ("TRJ1") that round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Frame",
    "Trajectory",
    "Ensemble",
    "TrajectoryIOError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "write_trajectory",
    "read_trajectory",
    "subsample",
    "slice_time",
    "export_csv",
]

_MAGIC = b"TRJ1"
_VERSION = 1
# magic, version, D, M, n_frames, dt_nominal, has_forces, 7 pad bytes
_HEADER = struct.Struct("<4sIIQQdB7x")


class TrajectoryIOError(Exception):
    """Base error for unreadable trajectory files."""


class BadMagicError(TrajectoryIOError):
    """File does not start with the TRJ1 magic bytes."""


class UnsupportedVersionError(TrajectoryIOError):
    """File declares a format version this reader does not understand."""


class TruncatedFileError(TrajectoryIOError):
    """File ends before the payload promised by its header."""


def _as_flat(name: str, x, n: Optional[int] = None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a flat vector, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr


@dataclass
class Frame:
    """One snapshot: time plus flat position/momentum (and optional force) vectors."""

    time: float
    dim: int
    positions: np.ndarray
    momenta: np.ndarray
    forces: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        self.positions = _as_flat("positions", self.positions)
        n = self.positions.shape[0]
        if n == 0 or n % self.dim != 0:
            raise ValueError(f"positions length {n} is not a positive multiple of dim {self.dim}")
        self.momenta = _as_flat("momenta", self.momenta, n)
        if self.forces is not None:
            self.forces = _as_flat("forces", self.forces, n)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0] // self.dim


@dataclass
class Trajectory:
    """Uniformly sampled trajectory of M particles in D dimensions.

    Parameters
    ----------
    dim : int
        Spatial dimension D.
    masses : ndarray, shape (M,)
        Particle masses, strictly positive.
    times : ndarray, shape (n_frames,)
        Sample times, strictly increasing and uniform to within
        1e-9 * dt_nominal.
    positions, momenta : ndarray, shape (n_frames, D*M)
    forces : ndarray, shape (n_frames, D*M), optional
        Total instantaneous forces, when the generator recorded them.
    dt_nominal : float
        Nominal sampling interval, > 0.
    """

    dim: int
    masses: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    momenta: np.ndarray
    forces: Optional[np.ndarray]
    dt_nominal: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not self.dt_nominal > 0.0:
            raise ValueError(f"dt_nominal must be positive, got {self.dt_nominal}")
        self.masses = _as_flat("masses", self.masses)
        if self.masses.size == 0:
            raise ValueError("masses must contain at least one particle")
        if np.any(self.masses <= 0.0):
            raise ValueError("masses must be strictly positive")
        self.times = _as_flat("times", self.times)
        n, w = self.times.shape[0], self.dim * self.masses.shape[0]
        for name in ("positions", "momenta"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n, w):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(n, w)}")
            setattr(self, name, arr)
        if self.forces is not None:
            self.forces = np.ascontiguousarray(self.forces, dtype=np.float64)
            if self.forces.shape != (n, w):
                raise ValueError(f"forces has shape {self.forces.shape}, expected {(n, w)}")
        if n >= 2:
            dts = np.diff(self.times)
            if np.any(dts <= 0.0):
                raise ValueError("times must be strictly increasing")
            tol = 1e-9 * self.dt_nominal
            bad = np.argmax(np.abs(dts - self.dt_nominal))
            if abs(dts[bad] - self.dt_nominal) > tol:
                raise ValueError(
                    f"non-uniform sampling at frame {bad + 1}: "
                    f"dt={dts[bad]!r} vs nominal {self.dt_nominal!r}"
                )

    @property
    def n_frames(self) -> int:
        return self.times.shape[0]

    @property
    def n_particles(self) -> int:
        return self.masses.shape[0]

    @property
    def has_forces(self) -> bool:
        return self.forces is not None

    def frame(self, i: int) -> Frame:
        f = None if self.forces is None else self.forces[i]
        return Frame(float(self.times[i]), self.dim, self.positions[i], self.momenta[i], f)

    def __iter__(self) -> Iterator[Frame]:
        return (self.frame(i) for i in range(self.n_frames))

    @classmethod
    def from_frames(cls, frames: Sequence[Frame], masses, dt_nominal: float) -> "Trajectory":
        if not frames:
            raise ValueError("from_frames needs at least one frame")
        dim = frames[0].dim
        times = np.array([f.time for f in frames], dtype=np.float64)
        q = np.stack([f.positions for f in frames])
        p = np.stack([f.momenta for f in frames])
        if all(f.forces is not None for f in frames):
            fr = np.stack([f.forces for f in frames])
        elif any(f.forces is not None for f in frames):
            raise ValueError("either all frames carry forces or none do")
        else:
            fr = None
        return cls(dim, np.asarray(masses, dtype=np.float64), times, q, p, fr, dt_nominal)


@dataclass
class Ensemble:
    """Trajectories on one shared time grid, with the inverse temperature used to generate them."""

    paths: list
    beta: float

    def __post_init__(self):
        if not self.paths:
            raise ValueError("ensemble needs at least one path")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        ref = self.paths[0]
        tol = 1e-9 * ref.dt_nominal
        for k, tr in enumerate(self.paths[1:], start=1):
            if tr.dim != ref.dim or tr.n_particles != ref.n_particles:
                raise ValueError(f"path {k} has shape (D={tr.dim}, M={tr.n_particles}), "
                                 f"expected (D={ref.dim}, M={ref.n_particles})")
            if tr.n_frames != ref.n_frames:
                raise ValueError(f"path {k} has {tr.n_frames} frames, expected {ref.n_frames}")
            if tr.n_frames and np.max(np.abs(tr.times - ref.times)) > tol:
                raise ValueError(f"path {k} is not on the shared time grid")

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def times(self) -> np.ndarray:
        return self.paths[0].times

    def subsample(self, stride: int) -> "Ensemble":
        return Ensemble([subsample(tr, stride) for tr in self.paths], self.beta)

    def slice_time(self, t_lo: float, t_hi: float) -> "Ensemble":
        return Ensemble([slice_time(tr, t_lo, t_hi) for tr in self.paths], self.beta)


def write_trajectory(traj: Trajectory, path) -> None:
    """Write a trajectory to `path` in the TRJ1 binary layout (little-endian)."""
    m, n = traj.n_particles, traj.n_frames
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, traj.dim, m, n,
                              traj.dt_nominal, 1 if traj.has_forces else 0))
        fh.write(traj.masses.tobytes())
        for i in range(n):
            fh.write(struct.pack("<d", traj.times[i]))
            fh.write(traj.positions[i].tobytes())
            fh.write(traj.momenta[i].tobytes())
            if traj.forces is not None:
                fh.write(traj.forces[i].tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFileError(f"file ends inside {what}: wanted {count} bytes, got {len(buf)}")
    return buf


def read_trajectory(path) -> Trajectory:
    """Read a TRJ1 file back into a Trajectory (bit-exact inverse of write_trajectory)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < 4 or head[:4] != _MAGIC:
            raise BadMagicError(f"not a TRJ1 file: leading bytes {head[:4]!r}")
        if len(head) < _HEADER.size:
            raise TruncatedFileError(f"header is {len(head)} bytes, expected {_HEADER.size}")
        _, version, dim, m, n, dt_nominal, has_forces = _HEADER.unpack(head)
        if version != _VERSION:
            raise UnsupportedVersionError(f"version {version}, reader supports {_VERSION}")
        masses = np.frombuffer(_read_exact(fh, 8 * m, "mass table"), dtype="<f8").copy()
        w = dim * m
        frame_doubles = 1 + (3 if has_forces else 2) * w
        payload = _read_exact(fh, 8 * frame_doubles * n, f"{n}-frame payload")
        raw = np.frombuffer(payload, dtype="<f8").reshape(n, frame_doubles) if n else \
            np.empty((0, frame_doubles))
        times = raw[:, 0].copy()
        q = raw[:, 1:1 + w].copy()
        p = raw[:, 1 + w:1 + 2 * w].copy()
        f = raw[:, 1 + 2 * w:].copy() if has_forces else None
    return Trajectory(dim, masses, times, q, p, f, dt_nominal)


def subsample(traj: Trajectory, stride: int) -> Trajectory:
    """Keep every stride-th frame starting from the first; dt_nominal scales by stride."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    forces = None if traj.forces is None else traj.forces[::stride]
    return Trajectory(traj.dim, traj.masses, traj.times[::stride],
                      traj.positions[::stride], traj.momenta[::stride],
                      forces, traj.dt_nominal * stride)


def slice_time(traj: Trajectory, t_lo: float, t_hi: float) -> Trajectory:
    """Restrict to frames with t_lo <= t <= t_hi (both ends inclusive, 1e-9*dt slack)."""
    if t_hi < t_lo:
        raise ValueError(f"empty window: t_lo={t_lo} > t_hi={t_hi}")
    tol = 1e-9 * traj.dt_nominal
    keep = (traj.times >= t_lo - tol) & (traj.times <= t_hi + tol)
    if not np.any(keep):
        raise ValueError(f"no frames in window [{t_lo}, {t_hi}]")
    forces = None if traj.forces is None else traj.forces[keep]
    return Trajectory(traj.dim, traj.masses, traj.times[keep],
                      traj.positions[keep], traj.momenta[keep],
                      forces, traj.dt_nominal)


def export_csv(traj: Trajectory, path) -> None:
    """Write `time,particle,axis,q,p,f` rows; the f column is blank without forces."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", "particle", "axis", "q", "p", "f"])
        for i in range(traj.n_frames):
            t = repr(float(traj.times[i]))
            for a in range(traj.dim * traj.n_particles):
                part, axis = divmod(a, traj.dim)
                f = repr(float(traj.forces[i, a])) if traj.forces is not None else ""
                wr.writerow([t, part, axis,
                             repr(float(traj.positions[i, a])),
                             repr(float(traj.momenta[i, a])), f])
