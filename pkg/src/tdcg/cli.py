"""Configuration-driven command line for the simulation and fitting pipelines.

Every subcommand reads one TOML config (validated strictly: unknown sections
or keys are rejected), consumes and produces plain files, and drops a
manifest.json recording the config hash, seed and version, which is enough
to re-run the step bit-identically regardless of --threads.

Bulk data lives in ensemble directories: numbered .trj files plus an
ensemble.json with the inverse temperature, box metadata and file list.
Fitted fields travel as fit.json documents that rebuild the spline field
exactly; plot-facing outputs are CSV.

Exit codes: 0 on success, 2 on config/validation errors, 3 when a
reproduce run fails one of its configured acceptance checks.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .basis import (KnotGrid, PairForceField, SplineBasis1D, TensorBasis2D,
                    TimeDependentPairForceField, export_field_csv,
                    export_field_csv_td)
from .cgmd import (MDSystem, SimBox, _run_md_batch, init_fcc,
                   lj_like_field, run_md)
from .friction import (FIXED_ZERO, SLIDING, _window, export_correlation_csv,
                       fdt_convert, force_velocity_corr,
                       laplace_kernel, sigma0_quadratic_variation, vacf,
                       zeta0_from_green_kubo)
from .observables import (RdfSpec, diffusion_coefficient, ensemble_moments,
                          export_moments_csv, export_rdf_csv, rdf_at_time)
from .psfm import (CGMapping, SeparableForce, fit_equilibrium, fit_instant,
                   fit_separable, fit_time_dependent, map_ensemble, map_positions)
from .stochastic import (BAOAB, EULER_MARUYAMA, GLEParams, IntegratorSpec,
                         LangevinTDParams, generate_ensemble, splitmix64)
from .trajstore import Ensemble, read_trajectory, subsample, write_trajectory

__all__ = ["main", "ConfigError"]

VERSION_STRING = f"tdcg-{__version__}"


class ConfigError(ValueError):
    """Invalid or incomplete configuration; maps to exit code 2."""


_FLOAT, _INT, _BOOL, _STR, _NUM_LIST, _INT_LIST = range(6)

_TYPE_NAMES = {_FLOAT: "number", _INT: "integer", _BOOL: "boolean", _STR: "string",
               _NUM_LIST: "list of numbers", _INT_LIST: "list of integers"}

_COMMON_RUN = {
    "beta": _FLOAT, "mass": _FLOAT, "dt": _FLOAT, "n_steps": _INT,
    "record_stride": _INT, "record_forces": _BOOL, "n_paths": _INT, "scheme": _STR,
}

SCHEMA = {
    "gle": {**_COMMON_RUN, "alpha": _FLOAT, "eta": _FLOAT, "tau": _FLOAT,
            "q0": _FLOAT, "p0": _FLOAT, "init": _STR},
    "langevin": {**_COMMON_RUN, "q0": _FLOAT, "p0": _FLOAT, "init": _STR,
                 "zeta0": _FLOAT, "sigma0": _FLOAT, "zeta0_file": _STR,
                 "sigma0_file": _STR, "require_fdt": _BOOL,
                 "force": _STR, "k": _FLOAT, "force_file": _STR},
    "md": {**_COMMON_RUN, "zeta0": _FLOAT, "sigma0": _FLOAT, "zeta0_file": _STR,
           "n_cells": _INT_LIST, "lattice_constant": _FLOAT, "boundary": _STR,
           "group_size": _INT, "field": _STR, "field_file": _STR,
           "epsilon": _FLOAT, "sigma": _FLOAT, "cap": _FLOAT, "cutoff": _FLOAT},
    "basis_r": {"lo": _FLOAT, "hi": _FLOAT, "n_basis": _INT, "degree": _INT,
                "cutoff": _FLOAT},
    "basis_t": {"lo": _FLOAT, "hi": _FLOAT, "n_basis": _INT, "degree": _INT},
    "fit": {"mode": _STR, "ridge": _FLOAT, "t": _FLOAT, "max_sweeps": _INT,
            "tol": _FLOAT, "group_size": _INT, "t_start": _FLOAT, "t_stop": _FLOAT,
            "mean_l2_tol": _FLOAT, "t_samples": _INT},
    "friction": {"mode": _STR, "origin": _STR, "t_upper": _FLOAT, "max_lag": _INT,
                 "t_start": _FLOAT, "t_stop": _FLOAT, "group_size": _INT,
                 "model": _STR, "k": _FLOAT, "model_file": _STR, "beta": _FLOAT,
                 "subsample": _INT, "s_values": _NUM_LIST,
                 "expected": _FLOAT, "tol_abs": _FLOAT, "tol_rel": _FLOAT},
    "observables": {"which": _STR, "r_max": _FLOAT, "n_bins": _INT,
                    "boundary": _STR, "density": _FLOAT, "t": _FLOAT,
                    "instants": _NUM_LIST, "origin": _STR, "max_lag": _INT,
                    "t_upper": _FLOAT, "group_size": _INT,
                    "t_start": _FLOAT, "t_stop": _FLOAT, "rank_from": _FLOAT},
    "io": {"out_dir": _STR, "seed": _INT, "workers": _INT, "data": _STR},
}


def _type_ok(value, kind: int) -> bool:
    if kind == _FLOAT:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == _INT:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == _BOOL:
        return isinstance(value, bool)
    if kind == _STR:
        return isinstance(value, str)
    if kind == _NUM_LIST:
        return (isinstance(value, list)
                and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                        for v in value))
    if kind == _INT_LIST:
        return (isinstance(value, list)
                and all(isinstance(v, int) and not isinstance(v, bool) for v in value))
    raise AssertionError(kind)


def load_config(path) -> tuple:
    """Parse and validate a TOML config; returns (dict, sha256 of the raw bytes)."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    sha = hashlib.sha256(raw).hexdigest()
    try:
        cfg = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{p} is not valid TOML: {exc}") from exc
    problems = []
    for section, body in cfg.items():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        if not isinstance(body, dict):
            problems.append(f"[{section}] must be a table")
            continue
        for key, value in body.items():
            kind = SCHEMA[section].get(key)
            if kind is None:
                problems.append(f"unknown key {key!r} in [{section}]")
            elif not _type_ok(value, kind):
                problems.append(f"[{section}] {key} must be a {_TYPE_NAMES[kind]}, "
                                f"got {value!r}")
    if problems:
        raise ConfigError(f"{p}: " + "; ".join(problems))
    return cfg, sha


def _need(cfg: dict, section: str, keys) -> dict:
    body = cfg.get(section)
    if body is None:
        raise ConfigError(f"missing section [{section}] (required keys: "
                          f"{', '.join(keys)})")
    missing = [k for k in keys if k not in body]
    if missing:
        raise ConfigError(f"[{section}] missing required keys: {', '.join(missing)}")
    return body


def _subst_run(cfg: dict, run_root: Path) -> dict:
    """Replace the {run} placeholder in string values with the run directory."""
    out = {}
    for k, v in cfg.items():
        if isinstance(v, dict):
            out[k] = _subst_run(v, run_root)
        elif isinstance(v, str):
            out[k] = v.replace("{run}", str(run_root))
        else:
            out[k] = v
    return out


@dataclass
class RunContext:
    cfg: dict
    sha: str
    config_path: Path
    out: Path
    seed: int
    workers: int
    data: Optional[Path]
    argv: list = field(default_factory=list)


def _write_manifest(ctx: RunContext, command: str, extra: Optional[dict] = None) -> None:
    doc = {"command": command, "version": VERSION_STRING,
           "config_path": str(ctx.config_path), "config_sha256": ctx.sha,
           "config": ctx.cfg, "seed": ctx.seed, "workers": ctx.workers,
           "argv": list(ctx.argv)}
    if extra:
        doc.update(extra)
    ctx.out.mkdir(parents=True, exist_ok=True)
    with open(ctx.out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_ensemble_dir(out: Path, ens: Ensemble, kind: str,
                        meta: Optional[dict] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, tr in enumerate(ens.paths):
        name = f"path_{k:05d}.trj"
        write_trajectory(tr, out / name)
        files.append(name)
    doc = {"kind": kind, "beta": ens.beta, "n_paths": ens.n_paths,
           "boundary": None, "box": None, "group_size": 1, "files": files}
    if meta:
        doc.update(meta)
    with open(out / "ensemble.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(path) -> tuple:
    """Load an ensemble directory or a bare .trj file; returns (Ensemble, meta)."""
    p = Path(path)
    if p.is_dir():
        meta_path = p / "ensemble.json"
        if not meta_path.is_file():
            raise ConfigError(f"{p} is not an ensemble directory (no ensemble.json)")
        meta = json.loads(meta_path.read_text())
        paths = [read_trajectory(p / name) for name in meta["files"]]
        return Ensemble(paths, float(meta["beta"])), meta
    if p.is_file():
        # bare trajectory: beta unknown, placeholder 1.0 (QV does not use it)
        tr = read_trajectory(p)
        return Ensemble([tr], 1.0), {"kind": "trajectory", "beta": None,
                                     "boundary": None, "box": None, "group_size": 1}
    raise ConfigError(f"data path {p} does not exist")


def _require_data(ctx: RunContext) -> tuple:
    if ctx.data is None:
        raise ConfigError("no input data: pass --data or set [io] data")
    return _load_data(ctx.data)


# ---------------------------------------------------------------------------
# field / fit artifacts

def _basis_doc(b: SplineBasis1D) -> dict:
    g = b.grid
    return {"lo": g.lo, "hi": g.hi, "n_basis": g.n_basis, "degree": g.degree}


def _basis_from_doc(doc: dict) -> SplineBasis1D:
    return SplineBasis1D(KnotGrid(doc["lo"], doc["hi"], doc["n_basis"], doc["degree"]))


def load_field(path):
    """Rebuild the fitted force object stored in a fit.json document."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"field file {p} does not exist")
    doc = json.loads(p.read_text())
    mode = doc.get("mode")
    if mode in ("equilibrium", "instant"):
        return PairForceField(_basis_from_doc(doc["basis_r"]),
                              np.asarray(doc["coeffs"]), doc["cutoff"])
    if mode == "time-dependent":
        tensor = TensorBasis2D(_basis_from_doc(doc["basis_r"]),
                               _basis_from_doc(doc["basis_t"]))
        return TimeDependentPairForceField(tensor, np.asarray(doc["coeffs"]),
                                           doc["cutoff"])
    if mode == "separable":
        return SeparableForce(_basis_from_doc(doc["basis_t"]),
                              _basis_from_doc(doc["basis_q"]),
                              np.asarray(doc["theta_time"]),
                              np.asarray(doc["theta_space"]))
    raise ConfigError(f"{p}: unknown fit mode {mode!r}")


def _report_value(path, key: str) -> float:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"report file {p} does not exist")
    doc = json.loads(p.read_text())
    if key not in doc or doc[key] is None:
        raise ConfigError(f"{p} has no value for {key!r}")
    return float(doc[key])


def _write_report(out: Path, doc: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# force handles (module-level so worker processes can pickle them)

@dataclass(frozen=True)
class ZeroForce:
    def __call__(self, q, t):
        return 0.0 * q


@dataclass(frozen=True)
class HarmonicForce:
    k: float

    def __call__(self, q, t):
        return -self.k * q


# ---------------------------------------------------------------------------
# simulate

def _integrator_spec(sec: dict, seed: int, default_scheme: str) -> IntegratorSpec:
    return IntegratorSpec(scheme=sec.get("scheme", default_scheme),
                          dt=float(sec["dt"]), n_steps=int(sec["n_steps"]),
                          record_stride=int(sec.get("record_stride", 1)),
                          seed=seed,
                          record_forces=bool(sec.get("record_forces", False)))


def _resolve_noise_pair(sec: dict, beta: float) -> tuple:
    """Resolve (zeta0, sigma0) from direct values and/or report files, filling by FDT."""
    zeta0, sigma0 = sec.get("zeta0"), sec.get("sigma0")
    if "zeta0_file" in sec:
        if zeta0 is not None:
            raise ConfigError("give zeta0 or zeta0_file, not both")
        zeta0 = _report_value(sec["zeta0_file"], "zeta0")
    if "sigma0_file" in sec:
        if sigma0 is not None:
            raise ConfigError("give sigma0 or sigma0_file, not both")
        sigma0 = _report_value(sec["sigma0_file"], "sigma0")
    if zeta0 is None and sigma0 is None:
        raise ConfigError("need a friction/noise source: zeta0, sigma0, "
                          "zeta0_file or sigma0_file")
    if zeta0 is None:
        zeta0 = fdt_convert(beta, sigma0=float(sigma0))
    if sigma0 is None:
        sigma0 = fdt_convert(beta, zeta0=float(zeta0))
    return float(zeta0), float(sigma0)


def _r_basis_from(cfg: dict) -> tuple:
    sec = _need(cfg, "basis_r", ("lo", "hi", "n_basis", "degree"))
    b = SplineBasis1D(KnotGrid(float(sec["lo"]), float(sec["hi"]),
                               int(sec["n_basis"]), int(sec["degree"])))
    return b, float(sec.get("cutoff", sec["hi"]))


def _t_basis_from(cfg: dict) -> SplineBasis1D:
    sec = _need(cfg, "basis_t", ("lo", "hi", "n_basis", "degree"))
    return SplineBasis1D(KnotGrid(float(sec["lo"]), float(sec["hi"]),
                                  int(sec["n_basis"]), int(sec["degree"])))


def _langevin_force(sec: dict):
    kind = sec.get("force")
    if kind == "zero":
        return ZeroForce()
    if kind == "harmonic":
        return HarmonicForce(float(sec.get("k", 1.0)))
    if kind == "file":
        if "force_file" not in sec:
            raise ConfigError("force = 'file' needs force_file")
        force = load_field(sec["force_file"])
        if not isinstance(force, SeparableForce):
            raise ConfigError("the scalar model takes a separable fit "
                              f"(got mode {type(force).__name__})")
        return force
    raise ConfigError(f"force must be 'zero', 'harmonic' or 'file', got {kind!r}")


def _md_field(cfg: dict, sec: dict):
    kind = sec.get("field")
    if kind == "lj":
        if "cutoff" not in sec:
            raise ConfigError("[md] field = 'lj' needs cutoff")
        basis, _ = _r_basis_from(cfg)
        return lj_like_field(basis, float(sec["cutoff"]),
                             epsilon=float(sec.get("epsilon", 1.0)),
                             sigma=float(sec.get("sigma", 1.0)),
                             cap=sec.get("cap"))
    if kind == "file":
        if "field_file" not in sec:
            raise ConfigError("[md] field = 'file' needs field_file")
        fld = load_field(sec["field_file"])
        if isinstance(fld, SeparableForce):
            raise ConfigError("separable fits are scalar models, not pair fields")
        return fld
    raise ConfigError(f"[md] field must be 'lj' or 'file', got {kind!r}")


def _md_chunk(args) -> list:
    box, masses, pos0, fld, zeta0, sigma0, beta, spec, seeds = args
    starts = []
    for seed in seeds:
        rng = np.random.default_rng(splitmix64(seed))
        starts.append((pos0, rng.normal(0.0, np.sqrt(masses / beta)[:, None],
                                        (masses.size, 3))))
    return _run_md_batch(box, masses, starts, fld, zeta0, beta, spec, list(seeds),
                         sigma0=sigma0)


def _md_ensemble(box, masses, pos0, fld, zeta0, sigma0, beta, spec,
                 n_paths: int, master_seed: int, workers: int) -> Ensemble:
    """MD ensemble with the same per-path seeding scheme as the stochastic module."""
    seeds = [splitmix64(master_seed + k) for k in range(n_paths)]
    if workers == 1 or n_paths == 1:
        paths = _md_chunk((box, masses, pos0, fld, zeta0, sigma0, beta, spec, seeds))
    else:
        from concurrent.futures import ProcessPoolExecutor
        chunk = max(1, math.ceil(n_paths / (workers * 2)))
        jobs = [(box, masses, pos0, fld, zeta0, sigma0, beta, spec, seeds[i:i + chunk])
                for i in range(0, n_paths, chunk)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_md_chunk, jobs))
        paths = [tr for part in parts for tr in part]
    return Ensemble(paths, beta)


def cmd_simulate(ctx: RunContext) -> int:
    cfg = ctx.cfg
    kinds = [s for s in ("gle", "langevin", "md") if s in cfg]
    if len(kinds) != 1:
        raise ConfigError(
            "simulate needs exactly one of the sections [gle], [langevin], [md]; "
            "[gle] requires alpha, eta, tau, beta, dt, n_steps; "
            "[langevin] requires beta, dt, n_steps, force plus zeta0/sigma0 "
            "(value or _file); "
            "[md] requires beta, dt, n_steps, n_cells, lattice_constant, field "
            "plus zeta0 (value or _file)")
    kind = kinds[0]
    if kind == "gle":
        sec = _need(cfg, "gle", ("alpha", "eta", "tau", "beta", "dt", "n_steps"))
        params = GLEParams(alpha=float(sec["alpha"]), eta=float(sec["eta"]),
                           tau=float(sec["tau"]), beta=float(sec["beta"]),
                           q0=float(sec.get("q0", 0.0)), p0=float(sec.get("p0", 0.0)),
                           mass=float(sec.get("mass", 1.0)),
                           init=sec.get("init", "point"))
        spec = _integrator_spec(sec, ctx.seed, EULER_MARUYAMA)
        ens = generate_ensemble(params, spec, int(sec.get("n_paths", 1)),
                                master_seed=ctx.seed, workers=ctx.workers)
        meta = {}
    elif kind == "langevin":
        sec = _need(cfg, "langevin", ("beta", "dt", "n_steps", "force"))
        beta = float(sec["beta"])
        zeta0, sigma0 = _resolve_noise_pair(sec, beta)
        params = LangevinTDParams(force=_langevin_force(sec), zeta0=zeta0, beta=beta,
                                  sigma0=sigma0, mass=float(sec.get("mass", 1.0)),
                                  q0=float(sec.get("q0", 0.0)),
                                  p0=float(sec.get("p0", 0.0)),
                                  init=sec.get("init", "point"),
                                  require_fdt=bool(sec.get("require_fdt", False)))
        spec = _integrator_spec(sec, ctx.seed, EULER_MARUYAMA)
        ens = generate_ensemble(params, spec, int(sec.get("n_paths", 1)),
                                master_seed=ctx.seed, workers=ctx.workers)
        meta = {"zeta0": zeta0, "sigma0": sigma0}
    else:
        sec = _need(cfg, "md", ("beta", "dt", "n_steps", "n_cells",
                                "lattice_constant", "field"))
        beta = float(sec["beta"])
        zeta0, sigma0 = _resolve_noise_pair(sec, beta)
        fld = _md_field(cfg, sec)
        cells = [int(v) for v in sec["n_cells"]]
        if len(cells) != 3:
            raise ConfigError("[md] n_cells needs three integers")
        a = float(sec["lattice_constant"])
        lengths = a * np.asarray(cells, dtype=np.float64)
        boundary = sec.get("boundary", "open")
        box = SimBox(lengths, boundary)
        mass = float(sec.get("mass", 1.0))
        pos_fine = init_fcc(lengths, a)
        k = int(sec.get("group_size", 1))
        if k > 1:
            mapping = CGMapping.blocks(np.full(pos_fine.shape[0], mass), k)
            pos0 = map_positions(mapping, pos_fine, dim=3)
            masses = mapping.group_masses
        else:
            pos0 = pos_fine
            masses = np.full(pos_fine.shape[0], mass)
        spec = _integrator_spec(sec, ctx.seed, BAOAB)
        ens = _md_ensemble(box, masses, pos0, fld, zeta0, sigma0, beta, spec,
                           int(sec.get("n_paths", 1)), ctx.seed, ctx.workers)
        meta = {"boundary": boundary, "box": lengths.tolist(), "group_size": k,
                "lattice_constant": a, "n_cells": cells, "zeta0": zeta0,
                "sigma0": sigma0, "t_f": spec.dt * spec.n_steps}
    _write_ensemble_dir(ctx.out, ens, kind, meta)
    _write_manifest(ctx, "simulate")
    tr0 = ens.paths[0]
    print(f"simulate[{kind}]: {ens.n_paths} path(s) x {tr0.n_frames} frames "
          f"(M={tr0.n_particles}) -> {ctx.out}")
    return 0


# ---------------------------------------------------------------------------
# fit

def _maybe_slice(ens: Ensemble, sec: dict) -> Ensemble:
    t_start = float(sec.get("t_start", 0.0))
    t_stop = sec.get("t_stop")
    if t_start == 0.0 and t_stop is None:
        return ens
    hi = float(t_stop) if t_stop is not None else float(ens.paths[0].times[-1])
    return ens.slice_time(t_start, hi)


def _mapping_for(ens: Ensemble, group_size: int) -> Optional[CGMapping]:
    if group_size <= 1:
        return None
    return CGMapping.blocks(ens.paths[0].masses, group_size)


def cmd_fit(ctx: RunContext, mode_flag: Optional[str]) -> int:
    cfg = ctx.cfg
    sec = cfg.get("fit", {})
    mode = mode_flag or sec.get("mode")
    if mode not in ("equilibrium", "instant", "time-dependent", "separable"):
        raise ConfigError("fit mode must be equilibrium, instant, time-dependent "
                          f"or separable (got {mode!r}); set [fit] mode or --mode")
    ens, meta = _require_data(ctx)
    ens = _maybe_slice(ens, sec)
    mapping = _mapping_for(ens, int(sec.get("group_size", 1)))
    ridge = float(sec.get("ridge", 0.0))
    out = ctx.out
    out.mkdir(parents=True, exist_ok=True)
    t_samples = int(sec.get("t_samples", 5))
    if mode == "separable":
        t_basis = _t_basis_from(cfg)
        q_basis, _ = _r_basis_from(cfg)
        res = fit_separable(ens, t_basis, q_basis,
                            max_sweeps=int(sec.get("max_sweeps", 40)),
                            tol=float(sec.get("tol", 1e-10)), ridge=ridge)
        force = res.force()
        doc = {"mode": mode, "basis_t": _basis_doc(t_basis),
               "basis_q": _basis_doc(q_basis),
               "theta_time": res.theta_time.tolist(),
               "theta_space": res.theta_space.tolist(),
               "stats": {"residuals": [float(v) for v in res.residuals],
                         "n_rows": res.n_rows, "n_excluded": res.n_excluded}}
        with open(out / "coeffs.csv", "w") as fh:
            fh.write("block,index,value\n")
            for i, v in enumerate(res.theta_time):
                fh.write(f"time,{i},{float(v)!r}\n")
            for i, v in enumerate(res.theta_space):
                fh.write(f"space,{i},{float(v)!r}\n")
        qs = np.linspace(q_basis.grid.lo, q_basis.grid.hi, 201)
        ts = np.linspace(t_basis.grid.lo, t_basis.grid.hi, t_samples)
        with open(out / "field.csv", "w") as fh:
            fh.write("t,q,f\n")
            for t in ts:
                for q in qs:
                    fh.write(f"{float(t)!r},{float(q)!r},{float(force(q, t))!r}\n")
        line = (f"fit[separable]: rms {res.residuals[-1]:.6g} after "
                f"{len(res.residuals) - 1} sweep(s), rows {res.n_rows}")
    else:
        r_basis, cutoff = _r_basis_from(cfg)
        r_grid = np.linspace(r_basis.grid.lo, cutoff, 201)
        if mode == "equilibrium":
            res = fit_equilibrium(ens, r_basis, mapping=mapping, ridge=ridge)
            fld = PairForceField(r_basis, res.coeffs, cutoff)
            export_field_csv(fld, r_grid, out / "field.csv")
            doc_t = None
        elif mode == "instant":
            if "t" not in sec:
                raise ConfigError("[fit] mode = 'instant' needs t")
            res = fit_instant(ens, r_basis, float(sec["t"]), mapping=mapping,
                              ridge=ridge)
            fld = PairForceField(r_basis, res.coeffs, cutoff)
            export_field_csv(fld, r_grid, out / "field.csv")
            doc_t = float(sec["t"])
        else:
            t_basis = _t_basis_from(cfg)
            tensor = TensorBasis2D(r_basis, t_basis)
            res = fit_time_dependent(ens, tensor, mapping=mapping, ridge=ridge)
            fld = TimeDependentPairForceField(tensor, res.coeffs, cutoff)
            t_grid = np.linspace(t_basis.grid.lo, t_basis.grid.hi, t_samples)
            export_field_csv_td(fld, r_grid, t_grid, out / "field.csv")
            doc_t = None
        doc = {"mode": mode, "cutoff": cutoff, "t": doc_t,
               "basis_r": _basis_doc(r_basis),
               "coeffs": res.coeffs.tolist(),
               "stats": {"rms_residual": res.rms_residual,
                         "condition_estimate": res.condition_estimate,
                         "n_rows": res.n_rows, "n_excluded": res.n_excluded,
                         "solver": res.solver}}
        if mode == "time-dependent":
            doc["basis_t"] = _basis_doc(t_basis)
        with open(out / "coeffs.csv", "w") as fh:
            fh.write("index,value\n")
            for i, v in enumerate(res.coeffs):
                fh.write(f"{i},{float(v)!r}\n")
        line = (f"fit[{mode}]: {res.coeffs.size} coeffs, rms {res.rms_residual:.6g}, "
                f"cond {res.condition_estimate:.3g}, rows {res.n_rows}, "
                f"excluded {res.n_excluded}")
    with open(out / "fit.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(ctx, "fit")
    print(line + f" -> {out}")
    return 0


# ---------------------------------------------------------------------------
# friction

def _friction_model(sec: dict):
    kind = sec.get("model", "zero")
    if kind == "zero":
        return None
    if kind == "harmonic":
        if "k" not in sec:
            raise ConfigError("[friction] model = 'harmonic' needs k")
        return HarmonicForce(float(sec["k"]))
    if kind == "file":
        if "model_file" not in sec:
            raise ConfigError("[friction] model = 'file' needs model_file")
        fld = load_field(sec["model_file"])
        if isinstance(fld, SeparableForce):
            def model(q, t, _f=fld):
                return _f(q, t)
            return model
        return fld
    raise ConfigError(f"[friction] model must be 'zero', 'harmonic' or 'file', "
                      f"got {kind!r}")


def cmd_friction(ctx: RunContext, mode_flag: Optional[str]) -> int:
    cfg = ctx.cfg
    sec = cfg.get("friction", {})
    mode = mode_flag or sec.get("mode")
    if mode not in ("qv", "equilibrium", "transient"):
        raise ConfigError("friction mode must be qv, equilibrium or transient "
                          f"(got {mode!r}); set [friction] mode or --mode")
    ens, meta = _require_data(ctx)
    out = ctx.out
    beta = sec.get("beta", meta.get("beta"))
    if mode == "qv":
        tr = ens.paths[0]
        stride = int(sec.get("subsample", 1))
        if stride > 1:
            tr = subsample(tr, stride)
        sigma0 = sigma0_quadratic_variation(tr)
        report = {"mode": "qv", "sigma0": sigma0, "spacing": tr.dt_nominal,
                  "n_increments": tr.n_frames - 1,
                  "zeta0": None if beta is None else fdt_convert(float(beta),
                                                                 sigma0=sigma0)}
        _write_report(out, report)
        _write_manifest(ctx, "friction")
        print(f"friction[qv]: sigma0 {sigma0:.6g} from {tr.n_frames - 1} increments "
              f"at spacing {tr.dt_nominal:.6g} -> {out}")
        return 0
    ens = _maybe_slice(ens, sec)
    mapping = _mapping_for(ens, int(sec.get("group_size", 1)))
    origin = sec.get("origin", SLIDING if mode == "equilibrium" else FIXED_ZERO)
    if origin not in (SLIDING, FIXED_ZERO):
        raise ConfigError(f"[friction] origin must be {SLIDING!r} or {FIXED_ZERO!r}")
    model = _friction_model(sec)
    box = None
    if meta.get("box") is not None:
        box = SimBox(np.asarray(meta["box"], dtype=np.float64), meta["boundary"])
    max_lag = sec.get("max_lag")
    cvv = vacf(ens, mapping=mapping, mode=origin,
               max_lag=None if max_lag is None else int(max_lag))
    cfv = force_velocity_corr(ens, mapping=mapping, model_force=model, mode=origin,
                              max_lag=None if max_lag is None else int(max_lag),
                              box=box)
    t_upper = sec.get("t_upper")
    t_upper = None if t_upper is None else float(t_upper)
    zeta0 = zeta0_from_green_kubo(cfv, cvv, t_upper)
    k_win = _window(cvv, t_upper)
    out.mkdir(parents=True, exist_ok=True)
    export_correlation_csv(cvv, out / "cvv.csv")
    export_correlation_csv(cfv, out / "cfv.csv")
    if "s_values" in sec:
        ss = np.asarray(sec["s_values"], dtype=np.float64)
        zs = laplace_kernel(cfv, cvv, ss, t_upper)
        with open(out / "laplace.csv", "w") as fh:
            fh.write("s,zeta_hat\n")
            for s, z in zip(ss, zs):
                fh.write(f"{float(s)!r},{float(z)!r}\n")
    report = {"mode": mode, "zeta0": zeta0, "origin": origin,
              "t_upper": float(cvv.lags[k_win]), "window_index": k_win,
              "n_lags": int(cvv.lags.size),
              "sigma0": None if beta is None else fdt_convert(float(beta),
                                                              zeta0=max(zeta0, 0.0))}
    _write_report(out, report)
    _write_manifest(ctx, "friction")
    print(f"friction[{mode}]: zeta0 {zeta0:.6g} over window [0, "
          f"{report['t_upper']:.6g}] ({origin}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# observables

def cmd_obs(ctx: RunContext, which_flag: Optional[str]) -> int:
    cfg = ctx.cfg
    sec = cfg.get("observables", {})
    which = which_flag or sec.get("which")
    if which not in ("rdf", "vacf", "dc", "moments"):
        raise ConfigError("observable must be rdf, vacf, dc or moments "
                          f"(got {which!r}); set [observables] which or --which")
    ens, meta = _require_data(ctx)
    mapping = _mapping_for(ens, int(sec.get("group_size", 1)))
    if mapping is not None:
        ens = map_ensemble(ens, mapping)
    out = ctx.out
    out.mkdir(parents=True, exist_ok=True)
    if which == "rdf":
        body = _need(cfg, "observables", ("r_max", "n_bins"))
        boundary = body.get("boundary", meta.get("boundary") or "open")
        box = None if meta.get("box") is None else np.asarray(meta["box"],
                                                              dtype=np.float64)
        spec = RdfSpec(float(body["r_max"]), int(body["n_bins"]), boundary,
                       box=box, density=body.get("density"))
        if "instants" in body:
            names = []
            for t in body["instants"]:
                res = rdf_at_time(ens, spec, float(t))
                name = f"rdf_t{float(t):g}.csv"
                export_rdf_csv(res, out / name)
                names.append(name)
            line = f"obs[rdf]: {len(names)} instant file(s)"
        elif "t" in body:
            res = rdf_at_time(ens, spec, float(body["t"]))
            export_rdf_csv(res, out / "rdf.csv")
            line = f"obs[rdf]: t={body['t']:g}, {res.n_frames} frame(s)"
        else:
            frames = [tr.positions[i].reshape(tr.n_particles, tr.dim)
                      for tr in ens.paths for i in range(tr.n_frames)]
            from .observables import rdf as _rdf
            res = _rdf(frames, spec)
            export_rdf_csv(res, out / "rdf.csv")
            line = f"obs[rdf]: {res.n_frames} frame(s)"
    elif which == "moments":
        res = ensemble_moments(ens)
        export_moments_csv(res, out / "moments.csv")
        line = f"obs[moments]: {res.times.size} frames x {ens.n_paths} paths"
    else:
        ens2 = _maybe_slice(ens, sec)
        origin = sec.get("origin", SLIDING)
        max_lag = sec.get("max_lag")
        cvv = vacf(ens2, mode=origin,
                   max_lag=None if max_lag is None else int(max_lag))
        export_correlation_csv(cvv, out / "cvv.csv")
        if which == "vacf":
            line = f"obs[vacf]: {cvv.lags.size} lags ({origin})"
        else:
            t_upper = sec.get("t_upper")
            d = diffusion_coefficient(cvv, None if t_upper is None else float(t_upper))
            _write_report(out, {"which": "dc", "D": d, "origin": origin,
                                "n_lags": int(cvv.lags.size)})
            line = f"obs[dc]: D {d:.6g}"
    _write_manifest(ctx, "obs")
    print(line + f" -> {out}")
    return 0


# ---------------------------------------------------------------------------
# reproduce

_BENCH_STAGES = (
    ("simulate", "data.toml", "data"),
    ("simulate", "qvpath.toml", "qvpath"),
    ("friction", "qv.toml", "qv"),
    ("simulate", "gk_data.toml", "gk_data"),
    ("friction", "gk.toml", "gk"),
    ("fit", "fit.toml", "fit"),
    ("simulate", "model.toml", "model"),
    ("obs", "moments_ref.toml", "obs_ref"),
    ("obs", "moments_model.toml", "obs_model"),
)

_FLUID_STAGES = (
    ("simulate", "fine.toml", "fine"),
    ("fit", "fit_eq.toml", "fit_eq"),
    ("fit", "fit_td.toml", "fit_td"),
    ("friction", "fe.toml", "fe"),
    ("friction", "ft.toml", "ft"),
    ("simulate", "model_td_fe.toml", "model_td_fe"),
    ("simulate", "model_td_ft.toml", "model_td_ft"),
    ("simulate", "model_td_0.toml", "model_td_0"),
    ("simulate", "model_pmf_fe.toml", "model_pmf_fe"),
    ("simulate", "model_pmf_ft.toml", "model_pmf_ft"),
    ("simulate", "model_pmf_0.toml", "model_pmf_0"),
)

_FLUID_MODELS = ("td_fe", "td_ft", "td_0", "pmf_fe", "pmf_ft", "pmf_0")


def _run_stage(kind: str, cfg_path: Path, sub_out: str, run_root: Path,
               workers: int, argv: list) -> dict:
    if not cfg_path.is_file():
        raise ConfigError(f"missing stage config {cfg_path}")
    cfg, sha = load_config(cfg_path)
    cfg = _subst_run(cfg, run_root)
    io = cfg.get("io", {})
    data = io.get("data")
    ctx = RunContext(cfg=cfg, sha=sha, config_path=cfg_path,
                     out=run_root / sub_out, seed=int(io.get("seed", 0)),
                     workers=workers, data=None if data is None else Path(data),
                     argv=argv)
    if kind == "simulate":
        cmd_simulate(ctx)
    elif kind == "fit":
        cmd_fit(ctx, None)
    elif kind == "friction":
        cmd_friction(ctx, None)
    elif kind == "obs":
        cmd_obs(ctx, None)
    else:  # pragma: no cover
        raise AssertionError(kind)
    return cfg


def _moments_rel_l2(ref_csv: Path, model_csv: Path) -> tuple:
    ref = np.genfromtxt(ref_csv, delimiter=",", names=True)
    mod = np.genfromtxt(model_csv, delimiter=",", names=True)
    n = min(ref.shape[0], mod.shape[0])
    if np.max(np.abs(ref["t"][:n] - mod["t"][:n])) > 1e-9:
        raise ConfigError("moment series are on different time grids")

    def rel(a, b):
        scale = float(np.linalg.norm(a))
        if scale == 0.0:
            raise ConfigError("reference mean is identically zero")
        return float(np.linalg.norm(b - a)) / scale

    return (rel(ref["mean_q"][:n], mod["mean_q"][:n]),
            rel(ref["mean_p"][:n], mod["mean_p"][:n]))


@dataclass
class Check:
    name: str
    value: float
    target: str
    passed: bool


def _bench_checks(run_root: Path, stage_cfgs: dict) -> list:
    checks = []
    qv_sec = stage_cfgs["qv"].get("friction", {})
    sigma0 = _report_value(run_root / "qv" / "report.json", "sigma0")
    exp, tol = float(qv_sec["expected"]), float(qv_sec["tol_abs"])
    checks.append(Check("A1 qv-sigma0", sigma0, f"{exp} +/- {tol}",
                        abs(sigma0 - exp) <= tol))
    fit_sec = stage_cfgs["fit"].get("fit", {})
    tol2 = float(fit_sec["mean_l2_tol"])
    errq, errp = _moments_rel_l2(run_root / "obs_ref" / "moments.csv",
                                 run_root / "obs_model" / "moments.csv")
    checks.append(Check("A2 mean-q-rel-l2", errq, f"<= {tol2}", errq <= tol2))
    checks.append(Check("A2 mean-p-rel-l2", errp, f"<= {tol2}", errp <= tol2))
    gk_sec = stage_cfgs["gk"].get("friction", {})
    zeta0 = _report_value(run_root / "gk" / "report.json", "zeta0")
    exp3, rel3 = float(gk_sec["expected"]), float(gk_sec["tol_rel"])
    checks.append(Check("A3 gk-kernel-integral", zeta0,
                        f"{exp3} rel {rel3}", abs(zeta0 - exp3) <= rel3 * abs(exp3)))
    return checks


def _fluid_compare(run_root: Path, cfg: dict, workers: int) -> list:
    sec = _need(cfg, "observables", ("r_max", "n_bins", "instants", "rank_from"))
    group = int(sec.get("group_size", 1))
    ref_ens, ref_meta = _load_data(run_root / "fine")
    if group > 1:
        ref_ens = map_ensemble(ref_ens, CGMapping.blocks(ref_ens.paths[0].masses,
                                                         group))
    box = None if ref_meta.get("box") is None else np.asarray(ref_meta["box"],
                                                              dtype=np.float64)
    spec = RdfSpec(float(sec["r_max"]), int(sec["n_bins"]),
                   sec.get("boundary", ref_meta.get("boundary") or "open"),
                   box=box, density=sec.get("density"))
    model_ens = {}
    for name in _FLUID_MODELS:
        model_ens[name] = _load_data(run_root / f"model_{name}")[0]
    dists = {}
    with open(run_root / "rdf_compare.csv", "w") as fh:
        fh.write("t,model,l2_to_ref\n")
        for t in sec["instants"]:
            t = float(t)
            ref = rdf_at_time(ref_ens, spec, t)
            export_rdf_csv(ref, run_root / f"rdf_ref_t{t:g}.csv")
            for name in _FLUID_MODELS:
                res = rdf_at_time(model_ens[name], spec, t)
                export_rdf_csv(res, run_root / f"rdf_{name}_t{t:g}.csv")
                d = float(np.linalg.norm(res.g - ref.g))
                dists[(t, name)] = d
                fh.write(f"{t!r},{name},{d!r}\n")
    t_start = float(sec.get("t_start", 0.0))
    t_upper = sec.get("t_upper")
    with open(run_root / "dc.csv", "w") as fh:
        fh.write("model,D\n")
        for name, ens in [("reference", ref_ens)] + list(model_ens.items()):
            late = ens.slice_time(t_start, float(ens.paths[0].times[-1]))
            cvv = vacf(late, mode=SLIDING)
            d = diffusion_coefficient(cvv, None if t_upper is None else float(t_upper))
            fh.write(f"{name},{d!r}\n")
    checks = []
    rank_from = float(sec["rank_from"])
    for t in sec["instants"]:
        t = float(t)
        if t < rank_from:
            continue
        d_td, d_pmf = dists[(t, "td_ft")], dists[(t, "pmf_fe")]
        checks.append(Check(f"A8 rdf-rank-t{t:g}", d_td,
                            f"<= pmf_fe {d_pmf:.6g}", d_td <= d_pmf))
    return checks


def _write_summary(run_root: Path, checks: list) -> bool:
    ok = all(c.passed for c in checks)
    with open(run_root / "summary.csv", "w") as fh:
        fh.write("check,value,target,pass\n")
        for c in checks:
            fh.write(f"{c.name},{c.value!r},{c.target},{c.passed}\n")
    lines = [f"{c.name}: value {c.value:.6g}, target {c.target}: "
             f"{'PASS' if c.passed else 'FAIL'}" for c in checks]
    (run_root / "summary.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return ok


def cmd_reproduce(name: str, cfg_dir: Path, run_root: Path, workers: int,
                  argv: list) -> int:
    if not cfg_dir.is_dir():
        raise ConfigError(f"--config must point at the stage-config directory "
                          f"for {name} (got {cfg_dir})")
    run_root.mkdir(parents=True, exist_ok=True)
    stages = _FLUID_STAGES if name == "fluid-pipeline" else _BENCH_STAGES
    stage_cfgs = {}
    for kind, fname, sub_out in stages:
        print(f"[{name}] stage {sub_out} ({kind}: {fname})")
        stage_cfgs[sub_out] = _run_stage(kind, cfg_dir / fname, sub_out, run_root,
                                         workers, argv)
    if name == "fluid-pipeline":
        cmp_cfg, _ = load_config(cfg_dir / "compare.toml")
        checks = _fluid_compare(run_root, _subst_run(cmp_cfg, run_root), workers)
    else:
        checks = _bench_checks(run_root, stage_cfgs)
    ok = _write_summary(run_root, checks)
    doc = {"command": "reproduce", "name": name, "version": VERSION_STRING,
           "config_dir": str(cfg_dir), "workers": workers, "argv": list(argv),
           "passed": ok}
    with open(run_root / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0 if ok else 3


# ---------------------------------------------------------------------------
# entry point

def _resolve_workers(value: Optional[int]) -> int:
    if value is None:
        return 1
    if value == 0:
        import os
        return os.cpu_count() or 1
    if value < 0:
        raise ConfigError(f"--threads must be >= 0, got {value}")
    return value


def _build_context(args, argv) -> RunContext:
    cfg, sha = load_config(args.config)
    io = cfg.get("io", {})
    out = args.out or io.get("out_dir")
    if out is None:
        raise ConfigError("no output directory: pass --out or set [io] out_dir")
    seed = args.seed if args.seed is not None else int(io.get("seed", 0))
    workers = _resolve_workers(args.threads if args.threads is not None
                               else int(io.get("workers", 1)))
    data = getattr(args, "data", None) or io.get("data")
    return RunContext(cfg=cfg, sha=sha, config_path=Path(args.config),
                      out=Path(out), seed=seed, workers=workers,
                      data=None if data is None else Path(data), argv=argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = argparse.ArgumentParser(
        prog="tdcg",
        description="Simulation, force-fitting and friction-estimation pipelines "
                    "driven by TOML configs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_data=True):
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--out", help="output directory (overrides [io] out_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides [io] seed)")
        p.add_argument("--threads", type=int,
                       help="worker processes, 0 = all cores (overrides [io] workers)")
        if with_data:
            p.add_argument("--data", help="input data: ensemble directory or .trj "
                                          "(overrides [io] data)")

    p_sim = sub.add_parser("simulate", help="generate a trajectory ensemble")
    common(p_sim, with_data=False)
    p_fit = sub.add_parser("fit", help="fit pair or scalar force models")
    common(p_fit)
    p_fit.add_argument("--mode", choices=["equilibrium", "instant",
                                          "time-dependent", "separable"])
    p_fric = sub.add_parser("friction", help="friction / noise-amplitude estimates")
    common(p_fric)
    p_fric.add_argument("--mode", choices=["qv", "equilibrium", "transient"])
    p_obs = sub.add_parser("obs", help="structural and kinetic observables")
    common(p_obs)
    p_obs.add_argument("--which", choices=["rdf", "vacf", "dc", "moments"])
    p_rep = sub.add_parser("reproduce", help="run a full benchmark pipeline")
    p_rep.add_argument("name", choices=["bench-tau05", "bench-tau01",
                                        "fluid-pipeline"])
    p_rep.add_argument("--config", required=True,
                       help="directory with the stage configs")
    p_rep.add_argument("--out", required=True, help="run directory")
    p_rep.add_argument("--threads", type=int)

    args = parser.parse_args(argv)
    try:
        if args.command == "reproduce":
            return cmd_reproduce(args.name, Path(args.config), Path(args.out),
                                 _resolve_workers(args.threads), argv)
        ctx = _build_context(args, argv)
        if args.command == "simulate":
            return cmd_simulate(ctx)
        if args.command == "fit":
            return cmd_fit(ctx, args.mode)
        if args.command == "friction":
            return cmd_friction(ctx, args.mode)
        if args.command == "obs":
            return cmd_obs(ctx, args.which)
        raise AssertionError(args.command)  # pragma: no cover
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
