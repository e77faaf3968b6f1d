"""Experiment orchestration and bit-exact CSV output.

Every run writes ``manifest.toml`` (resolved config, derived parameters, step
size, code version) and CSV files whose ``#`` header carries the SHA-256 of
that manifest. Floats are written with ``repr`` (shortest round-trip form),
so identical inputs give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (
    EstimatorConfig,
    detect_conditioning,
    detect_jumps,
    ensemble_stats,
    estimate_phonon_from_record,
)
from .config import ConfigError, RunConfig, as_flat_dict, serialize, with_overrides
from .engine import (
    OBSERVABLES,
    IntegratorConfig,
    IntegratorError,
    TrajectoryRecord,
    default_dt,
    run_trajectory,
    run_unconditional,
    unconditional_exact,
)
from .model import (
    DerivedParams,
    RegimeWarning,
    SmeSpec,
    build_full_sme,
    build_reduced_sme,
    derive_params,
)
from .operators import partial_trace, qubit_state, tensor, thermal_state, trace_distance

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRATOR, EXIT_VALIDATION = 0, 1, 2, 3

COND_THRESHOLD = 0.1      # Var(b^+b) below which the state counts as a number state
# hold/debounce in estimator windows: the state series is smooth, the record-based
# level track chatters and needs a longer debounce
STATE_HOLD_WINDOWS = 1
RECORD_DEBOUNCE_WINDOWS = 5
VALIDATE_TOLERANCE = 0.05  # max trace distance, full vs reduced model
EXACT_MAX_DIM = 64         # largest Hilbert space propagated with a dense expm


# -- model assembly ----------------------------------------------------------

def derived(cfg: RunConfig) -> DerivedParams:
    """Derived parameters; regime warnings become errors when ``cfg.strict``."""
    with warnings.catch_warnings():
        warnings.simplefilter("error" if cfg.strict else "default", RegimeWarning)
        try:
            return derive_params(cfg.physics)
        except RegimeWarning as exc:
            raise ConfigError(f"strict mode: {exc}") from exc


def build_spec(cfg: RunConfig, dp: DerivedParams | None = None, full: bool | None = None) -> SmeSpec:
    dp = dp or derived(cfg)
    if full is None:
        full = cfg.mode == "full-model"
    if full:
        return build_full_sme(dp, cfg.physics, n_levels=cfg.n_levels, n_cavity=cfg.n_cavity)
    return build_reduced_sme(dp, cfg.physics, cfg.feedback, n_levels=cfg.n_levels)


def initial_state(cfg: RunConfig, with_cavity: bool = False) -> np.ndarray:
    q = np.eye(2, dtype=np.complex128) / 2 if cfg.qubit0 == "mixed" else qubit_state(cfg.qubit0)
    if cfg.fock0 is not None:
        r = np.zeros((cfg.n_levels, cfg.n_levels), dtype=np.complex128)
        r[cfg.fock0, cfg.fock0] = 1.0
    else:
        r = thermal_state(cfg.nbar0, cfg.n_levels)
    parts = [q, r]
    if with_cavity:
        c = np.zeros((cfg.n_cavity, cfg.n_cavity), dtype=np.complex128)
        c[0, 0] = 1.0
        parts.append(c)
    return tensor(*parts)


def step_size(cfg: RunConfig, spec: SmeSpec) -> float:
    return cfg.dt if cfg.dt is not None else default_dt(spec)


def integrator_config(cfg: RunConfig, dt: float) -> IntegratorConfig:
    return IntegratorConfig(dt=dt, t_final=cfg.t_final, seed=cfg.seed,
                            renorm_every=cfg.renorm_every, diag_every=cfg.diag_every,
                            sample_every=cfg.sample_every, record_every=cfg.record_every)


def default_estimator(dp: DerivedParams, n_levels: int) -> EstimatorConfig:
    """Windows of four Welch segments, each two periods of the comb spacing ``2 chi``.

    A segment of a whole number of comb periods makes the lock-in bank
    orthogonal, so neighbouring levels do not leak into each other.
    """
    seg = 2 * math.pi / dp.chi
    return EstimatorConfig(window=4 * seg, subwindow=seg, n_levels=n_levels)


# -- serialization -----------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# execution-only keys: they must not change the manifest hash
_EXECUTION_KEYS = ("out = ", "workers = ")


def manifest_text(cfg: RunConfig, dp: DerivedParams, dt: float, spec: SmeSpec) -> str:
    body = [ln for ln in serialize(cfg).rstrip("\n").split("\n") if not ln.startswith(_EXECUTION_KEYS)]
    lines = body + ["", "[derived]"]
    for f in dataclasses.fields(dp):
        v = getattr(dp, f.name)
        if f.name == "warnings":
            lines.append(f"warnings = [{', '.join(repr(w) for w in v)}]".replace("'", '"'))
        else:
            lines.append(f"{f.name} = {fmt(v)}")
    lines += ["", "[run]", f"dt = {fmt(dt)}", f"n_steps = {int(round(cfg.t_final / dt))}",
              f'spec_fingerprint = "{spec.fingerprint}"', f'code_version = "{__version__}"']
    return "\n".join(lines) + "\n"


def write_csv(path: Path, columns: dict[str, np.ndarray], manifest_hash: str,
              comment: Sequence[str] = ()) -> Path:
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("CSV columns differ in length")
    head = [f"# manifest_sha256 = {manifest_hash}", *[f"# {c}" for c in comment], ",".join(names)]
    body = [",".join(fmt(c[i]) for c in cols) for i in range(n)]
    path.write_text("\n".join(head + body) + "\n")
    return path


def _traj_columns(rec: TrajectoryRecord) -> dict[str, np.ndarray]:
    cols = {"t": rec.times}
    cols.update({k: rec.observables[k] for k in OBSERVABLES if k in rec.observables})
    return cols


# -- analysis of one trajectory ----------------------------------------------

@dataclass(frozen=True)
class TrajectoryAnalysis:
    t_cond: float | None
    jumps: list            # from the state-derived <b^+b>
    estimate: object | None
    record_jumps: list = dataclasses.field(default_factory=list)  # from the estimator track


def conditioning_and_jumps(times: np.ndarray, n_mean: np.ndarray, n_var: np.ndarray,
                           window: float) -> tuple[float | None, list]:
    """Conditioning time and the state-derived jumps that follow it."""
    hold = STATE_HOLD_WINDOWS * window
    t_cond = detect_conditioning(times, n_var, COND_THRESHOLD, hold)
    if t_cond is None:
        return None, []
    sel = times >= t_cond
    return t_cond, detect_jumps(times[sel], n_mean[sel], hold)


def analyse_trajectory(rec: TrajectoryRecord, dp: DerivedParams, n_levels: int) -> TrajectoryAnalysis:
    est_cfg = default_estimator(dp, n_levels)
    t_cond, jumps = conditioning_and_jumps(rec.times, rec.observables["n_mean"],
                                           rec.observables["n_var"], est_cfg.window)
    estimate = None
    record_jumps = []
    if dp.chi > 0 and len(rec.dr) * rec.dr_dt >= est_cfg.window and rec.dr_dt <= est_cfg.segment:
        estimate = estimate_phonon_from_record(rec.dr, rec.dr_dt, dp.chi, dp.delta, est_cfg)
        ok = estimate.determined
        if ok.sum() > 1:
            record_jumps = detect_jumps(estimate.times[ok], estimate.n[ok].astype(float),
                                        RECORD_DEBOUNCE_WINDOWS * est_cfg.window,
                                        estimate.confidence[ok])
    return TrajectoryAnalysis(t_cond, jumps, estimate, record_jumps)


def _write_analysis(out: Path, a: TrajectoryAnalysis, h: str, tag: str = "") -> None:
    write_csv(out / f"conditioning{tag}.csv",
              {"t_cond": np.array([np.nan if a.t_cond is None else a.t_cond]),
               "threshold": np.array([COND_THRESHOLD])}, h)
    for name, events in (("jumps", a.jumps), ("jumps_record", a.record_jumps)):
        write_csv(out / f"{name}{tag}.csv",
                  {"time": np.array([j.time for j in events], dtype=float),
                   "n_before": np.array([j.n_before for j in events], dtype=int),
                   "n_after": np.array([j.n_after for j in events], dtype=int),
                   "confidence": np.array([j.confidence for j in events], dtype=float)}, h)
    if a.estimate is not None:
        e = a.estimate
        write_csv(out / f"estimator{tag}.csv",
                  {"t": e.times, "n_hat": e.n, "confidence": e.confidence,
                   "determined": e.determined}, h)


# -- modes -------------------------------------------------------------------

def _one(args):
    spec, rho0, icfg, index = args
    return run_trajectory(spec, rho0, icfg, traj_index=index)


def run_ensemble(spec: SmeSpec, rho0: np.ndarray, icfg: IntegratorConfig, size: int,
                 workers: int = 1) -> list[TrajectoryRecord]:
    """Trajectories ``0..size-1``; results do not depend on ``workers``."""
    jobs = [(spec, rho0, icfg, i) for i in range(size)]
    if workers == 1:
        return [_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        recs = list(pool.map(_one, jobs))
    return sorted(recs, key=lambda r: r.traj_index)


def unconditional_reference(spec: SmeSpec, rho0: np.ndarray, times: np.ndarray, dt: float,
                            cfg: RunConfig):
    """Ensemble-mean dynamics on the trajectory sample grid.

    Small systems use the exact propagator; larger ones fall back to RK4.
    """
    if spec.dim <= EXACT_MAX_DIM:
        return unconditional_exact(spec, rho0, times)
    return run_unconditional(spec, rho0, dt, cfg.t_final, cfg.sample_every)


def validation_curve(cfg: RunConfig, dp: DerivedParams | None = None, sample_every: int = 10):
    """Trace distance between the full model (cavity traced out) and the
    reduced model without feedback, both integrated unconditionally.

    Small systems are propagated exactly, larger ones with RK4.
    """
    dp = dp or derived(cfg)
    full = build_full_sme(dp, cfg.physics, n_levels=cfg.n_levels, n_cavity=cfg.n_cavity)
    red = build_reduced_sme(dp, cfg.physics, feedback=False, n_levels=cfg.n_levels)
    dt = cfg.dt if cfg.dt is not None else default_dt(full)
    rho_full = initial_state(cfg, with_cavity=True)
    if full.dim <= EXACT_MAX_DIM:
        times = dt * sample_every * np.arange(int(round(cfg.t_final / dt)) // sample_every + 1)
        sf = unconditional_exact(full, rho_full, times).states
        sr = unconditional_exact(red, initial_state(cfg), times).states
    else:
        rf = run_unconditional(full, rho_full, dt, cfg.t_final, sample_every)
        times, sf = rf.times, rf.states
        sr = run_unconditional(red, initial_state(cfg), dt, cfg.t_final, sample_every).states
    reduced_full = partial_trace(sf, full.layout, ["qubit", "resonator"])
    dist = np.array([trace_distance(a, b) for a, b in zip(reduced_full, sr)])
    return times, dist, dt


def run(cfg: RunConfig) -> int:
    """Execute ``cfg`` and write artifacts under ``cfg.out``; returns an exit code."""
    try:
        dp = derived(cfg)
        spec = build_spec(cfg, dp, full=cfg.mode in ("full-model", "validate"))
    except (ConfigError, ValueError, OverflowError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dt = step_size(cfg, spec)
    manifest = manifest_text(cfg, dp, dt, spec)
    h = hashlib.sha256(manifest.encode()).hexdigest()
    (out / "manifest.toml").write_text(manifest)

    try:
        if cfg.mode in ("trajectory", "full-model"):
            rho0 = initial_state(cfg, with_cavity=cfg.mode == "full-model")
            rec = run_trajectory(spec, rho0, integrator_config(cfg, dt), traj_index=0)
            write_csv(out / "trajectory.csv", _traj_columns(rec), h, [f"seed = {cfg.seed}"])
            write_csv(out / "record.csv", {"t": rec.dr_times, "dr": rec.dr}, h)
            if cfg.mode == "trajectory":
                _write_analysis(out, analyse_trajectory(rec, dp, cfg.n_levels), h)
        elif cfg.mode == "ensemble":
            rho0 = initial_state(cfg)
            recs = run_ensemble(spec, rho0, integrator_config(cfg, dt), cfg.ensemble, cfg.workers)
            for r in recs:
                write_csv(out / f"trajectory_{r.traj_index:04d}.csv", _traj_columns(r), h,
                          [f"seed = {cfg.seed}", f"traj_index = {r.traj_index}"])
            unc = unconditional_reference(spec, rho0, recs[0].times, dt, cfg)
            stats = ensemble_stats(recs, "n_mean", reference=unc.observables["n_mean"])
            write_csv(out / "ensemble_bands.csv",
                      {"t": stats.times, "mean": stats.mean, "se": stats.se, "p10": stats.p10,
                       "p50": stats.p50, "p90": stats.p90, "unconditional": stats.reference,
                       "mismatch": stats.mismatch}, h, ["observable = n_mean"])
        elif cfg.mode == "unconditional":
            res = run_unconditional(spec, initial_state(cfg), dt, cfg.t_final, cfg.sample_every)
            cols = {"t": res.times}
            cols.update(res.observables)
            write_csv(out / "unconditional.csv", cols, h)
        elif cfg.mode == "validate":
            t, dist, _ = validation_curve(cfg, dp, cfg.sample_every)
            write_csv(out / "validate.csv", {"t": t, "trace_distance": dist}, h,
                      [f"tolerance = {VALIDATE_TOLERANCE!r}"])
            if float(dist.max()) > VALIDATE_TOLERANCE:
                log.error("full vs reduced trace distance %.3g exceeds %.3g",
                          dist.max(), VALIDATE_TOLERANCE)
                return EXIT_VALIDATION
    except IntegratorError as exc:
        log.error("integrator failure (trajectory %s, step %s): %s",
                  exc.traj_index, exc.step, exc)
        return EXIT_INTEGRATOR
    return EXIT_OK


# -- figure data -------------------------------------------------------------

_FIG_COLUMNS = {"fig1": ("n_mean", "n_var"), "fig2": ("sy",), "fig3": ("n_var",)}


def export_figure_data(runs: Sequence[tuple[RunConfig, TrajectoryRecord]], which: str,
                       out_dir: str | Path) -> list[Path]:
    """Plot-ready CSVs.

    ``fig1``: ``t, mean_n, var_n`` per run. ``fig2``: ``t, sy`` per run.
    ``fig3``: ``t, var_n_eta1, var_n_etaLow`` from exactly two runs whose
    configs differ only in the detection efficiency.
    """
    if which not in _FIG_COLUMNS:
        raise ValueError(f"unknown figure {which!r}")
    if not runs:
        raise ValueError("no records given")
    for _, rec in runs:
        missing = [c for c in _FIG_COLUMNS[which] if c not in rec.observables]
        if missing:
            raise KeyError(f"record lacks observable columns {missing}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if which in ("fig1", "fig2"):
        for cfg, rec in runs:
            h = hashlib.sha256(serialize(cfg).encode()).hexdigest()
            if which == "fig1":
                cols = {"t": rec.times, "mean_n": rec.observables["n_mean"],
                        "var_n": rec.observables["n_var"]}
            else:
                cols = {"t": rec.times, "sy": rec.observables["sy"]}
            paths.append(write_csv(out / f"{which}_seed{cfg.seed}_traj{rec.traj_index}.csv",
                                   cols, h))
        return paths

    if len(runs) != 2:
        raise ValueError("fig3 needs exactly two runs")
    (ca, ra), (cb, rb) = sorted(runs, key=lambda r: -r[0].physics.eta)
    if ca.physics.eta != 1.0 or cb.physics.eta >= 1.0:
        raise ValueError("fig3 compares eta = 1 against one eta < 1")
    if with_overrides(cb, eta=1.0) != ca:
        diff = {k for k, v in as_flat_dict(ca).items() if as_flat_dict(cb).get(k) != v}
        raise ValueError(f"fig3 runs differ in more than eta: {sorted(diff - {'eta'})}")
    if not np.array_equal(ra.times, rb.times):
        raise ValueError("fig3 runs are sampled on different grids")
    h = hashlib.sha256((serialize(ca) + serialize(cb)).encode()).hexdigest()
    paths.append(write_csv(out / "fig3.csv",
                           {"t": ra.times, "var_n_eta1": ra.observables["n_var"],
                            "var_n_etaLow": rb.observables["n_var"]}, h,
                           [f"eta_low = {cb.physics.eta!r}"]))
    return paths


__all__ = [
    "COND_THRESHOLD",
    "EXIT_CONFIG",
    "EXIT_INTEGRATOR",
    "EXIT_OK",
    "EXIT_VALIDATION",
    "analyse_trajectory",
    "build_spec",
    "default_estimator",
    "derived",
    "export_figure_data",
    "initial_state",
    "manifest_text",
    "run",
    "run_ensemble",
    "validation_curve",
    "write_csv",
]
