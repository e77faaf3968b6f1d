"""Integration of conditional and unconditional master equations.

The conditional equation is

    d rho = A(rho) dt + B(rho) dW,
    A(rho) = -i[H, rho] + sum_k r_k D[L_k] rho,
    B(rho) = sqrt(eta r) H[M] rho,

stepped with the explicit Milstein scheme. The Milstein correction uses the
analytic directional derivative of the nonlinear innovation term.

Single trajectories run on one of two backends: a dense one (any
:class:`SmeSpec`) and a Fock-block kernel for reduced models whose state stays
diagonal in the resonator number basis (see :mod:`fockqnd.blocks`).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .model import SmeSpec
from .operators import dagger, expectation, is_hermitian

log = logging.getLogger(__name__)

NOISE_CHUNK = 1 << 16


class IntegratorError(RuntimeError):
    """Non-finite state, excessive truncation leakage or trace drift."""

    def __init__(self, msg: str, step: int | None = None, traj_index: int | None = None):
        super().__init__(msg)
        self.step = step
        self.traj_index = traj_index


@dataclass(frozen=True)
class FeedbackTerms:
    k: float
    c: np.ndarray
    F: np.ndarray
    lam: float
    eta: float

    def __post_init__(self):
        if not self.k >= 0:
            raise ValueError("measurement rate k must be >= 0")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("feedback needs eta in (0, 1]")
        if not is_hermitian(np.asarray(self.F), 1e-12):
            raise ValueError("feedback operator F must be Hermitian")


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    t_final: float
    seed: int = 0
    renorm_every: int = 1
    diag_every: int = 100
    sample_every: int = 100
    record_every: int = 1
    leakage_bound: float | None = None
    # opt-in: clip negative eigenvalues found at diagnostic steps
    repair_positivity: bool = False
    # optional early exit, polled every NOISE_CHUNK steps with the samples so far:
    # stop_when(times, observables) -> bool
    stop_when: Callable[[np.ndarray, dict], bool] | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.t_final >= self.dt:
            raise ValueError("t_final must be >= dt")
        for name in ("renorm_every", "diag_every", "sample_every", "record_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


# eigenvalues below this trigger the opt-in repair
REPAIR_THRESHOLD = -1e-6

def poll_stop(cfg: IntegratorConfig, n_done: int, obs: dict) -> int | None:
    """Number of samples to keep if ``cfg.stop_when`` fires after ``n_done`` steps."""
    if cfg.stop_when is None or n_done >= cfg.n_steps:
        return None
    m = n_done // cfg.sample_every + 1
    times = cfg.dt * cfg.sample_every * np.arange(m)
    return m if cfg.stop_when(times, {k: v[:m] for k, v in obs.items()}) else None


def truncate_outputs(cfg: IntegratorConfig, n_done: int, obs: dict, dr: np.ndarray):
    m = n_done // cfg.sample_every + 1
    return ({k: v[:m].copy() for k, v in obs.items()}, dr[: n_done // cfg.record_every].copy(),
            cfg.dt * cfg.sample_every * np.arange(m))


OBSERVABLES = ("n_mean", "n_var", "sx", "sy", "sz", "purity", "trace_dev", "leakage")


@dataclass
class TrajectoryRecord:
    """Strided observables plus the (optionally binned) homodyne record.

    ``dr[j]`` is the sum of the record increments over steps
    ``j*record_every ... (j+1)*record_every - 1``.
    """

    times: np.ndarray
    observables: dict[str, np.ndarray]
    dr: np.ndarray
    dr_dt: float
    seed: int
    traj_index: int
    fingerprint: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        for k, v in self.observables.items():
            if len(v) != n:
                raise ValueError(f"observable {k!r} has length {len(v)}, expected {n}")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    def __eq__(self, other):
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.traj_index == other.traj_index
            and self.fingerprint == other.fingerprint
            and self.dr_dt == other.dr_dt
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.dr, other.dr)
            and self.observables.keys() == other.observables.keys()
            and all(np.array_equal(self.observables[k], other.observables[k], equal_nan=True)
                    for k in self.observables)
        )

    @property
    def dr_times(self) -> np.ndarray:
        return self.dr_dt * np.arange(len(self.dr))


def noise_generator(seed: int, traj_index: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``(seed, traj_index)``."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(traj_index)])
    return np.random.Generator(np.random.Philox(ss))


def wiener_increments(rng: np.random.Generator, dt: float, n: int) -> np.ndarray:
    return rng.standard_normal(n) * math.sqrt(dt)


# -- feedback ---------------------------------------------------------------

def assemble_feedback_me(base: SmeSpec, fb: FeedbackTerms) -> SmeSpec:
    """Add measured channel ``(k, c)`` and Markovian current feedback ``lam F I(t)``.

    ``base`` carries the Hamiltonian and every channel except the measured one.
    """
    if fb.eta == 0:
        raise ValueError("eta = 0: feedback master equation is undefined")
    if fb.k <= 0:
        raise ValueError("measurement rate k must be > 0")
    c = np.asarray(fb.c, dtype=np.complex128)
    F = np.asarray(fb.F, dtype=np.complex128)
    lam, k, eta = fb.lam, fb.k, fb.eta
    H = base.H + 0.5 * lam * (dagger(c) @ F + F @ c)
    channels = list(base.lindblad_channels)
    channels.append((1.0, math.sqrt(k) * c - 1j * (lam / math.sqrt(k)) * F))
    if lam != 0:
        channels.append((lam**2 / k * (1.0 - eta) / eta, F))
    # sqrt(eta k) H[c - i lam F/(eta k)] == H[sqrt(eta k) c - i lam F / sqrt(eta k)]
    meas_op = c - 1j * lam / (eta * k) * F
    return SmeSpec(
        layout=base.layout,
        H=H,
        lindblad_channels=tuple(channels),
        meas_channel=(k, meas_op, eta),
        record_op=c + dagger(c),
        record_gain=base.record_gain,
        record_noise=base.record_noise,
        label=(base.label + "+feedback").lstrip("+"),
        meta=dict(base.meta, feedback_lambda=lam),
    )


# -- dense step operations ---------------------------------------------------

def _check(spec: SmeSpec, rho: np.ndarray) -> None:
    if rho.shape[-1] != spec.dim or rho.shape[-2] != spec.dim:
        raise ValueError(f"state dim {rho.shape[-2:]} does not match spec dim {spec.dim}")


def drift(spec: SmeSpec, rho: np.ndarray) -> np.ndarray:
    """``-i[H, rho] + sum rate D[L] rho``; broadcasts over leading axes."""
    _check(spec, rho)
    return _drift(spec, rho)


def _drift(spec: SmeSpec, rho: np.ndarray) -> np.ndarray:
    he = spec.h_eff
    out = -1j * (he @ rho - rho @ dagger(he))
    J = spec.jump_ops
    if len(J):
        out = out + (J @ rho[..., None, :, :] @ spec.jump_ops_dag).sum(axis=-3)
    return out


def _trace(x: np.ndarray) -> np.ndarray:
    return np.trace(x, axis1=-2, axis2=-1)[..., None, None]


def diffusion(spec: SmeSpec, rho: np.ndarray) -> np.ndarray:
    """``sqrt(eta rate) H[M] rho`` for the measurement channel."""
    _check(spec, rho)
    M = spec.meas_channel[1]
    x = M @ rho + rho @ dagger(M)
    tr = np.trace(x, axis1=-2, axis2=-1)
    return spec.meas_amplitude * (x - tr[..., None, None] * rho)


def diffusion_derivative(spec: SmeSpec, rho: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Directional derivative of :func:`diffusion` at ``rho`` along ``h``."""
    M = spec.meas_channel[1]
    c = spec.meas_amplitude
    x_rho = M @ rho + rho @ dagger(M)
    x_h = M @ h + h @ dagger(M)
    t_rho = np.trace(x_rho, axis1=-2, axis2=-1)[..., None, None]
    t_h = np.trace(x_h, axis1=-2, axis2=-1)[..., None, None]
    return c * (x_h - t_h * rho - t_rho * h)


def _finish(rho: np.ndarray, renormalize: bool) -> np.ndarray:
    rho = 0.5 * (rho + dagger(rho))
    if renormalize:
        tr = np.trace(rho, axis1=-2, axis2=-1).real
        rho = rho / tr[..., None, None]
    return rho


def milstein_step(spec: SmeSpec, rho: np.ndarray, dt: float, dW, renormalize: bool = True):
    """One explicit Milstein step; ``dW`` is scalar or has ``rho``'s batch shape."""
    dW = np.asarray(dW, dtype=float)
    if not (dt > 0):
        raise ValueError("dt must be > 0")
    if not np.all(np.isfinite(dW)):
        raise IntegratorError("non-finite Wiener increment")
    _check(spec, rho)
    w = dW[..., None, None]
    c = spec.meas_amplitude
    # overflow is reported below as IntegratorError
    with np.errstate(over="ignore", invalid="ignore"):
        out = rho + _drift(spec, rho) * dt
        if c > 0:
            # same algebra as diffusion() and diffusion_derivative(), sharing M rho
            M = spec.meas_channel[1]
            Md = dagger(M)
            x = M @ rho + rho @ Md
            tx = _trace(x)
            B = c * (x - tx * rho)
            xb = M @ B + B @ Md
            dB = c * (xb - _trace(xb) * rho - tx * B)
            out = out + B * w + 0.5 * dB * (w * w - dt)
    if not np.all(np.isfinite(out)):
        raise IntegratorError("non-finite state after Milstein step")
    return _finish(out, renormalize)


def record_increment(spec: SmeSpec, rho: np.ndarray, dt: float, dW):
    """``record_gain <record_op> dt + record_noise dW`` with the state's own dW."""
    mean = np.real(expectation(spec.record_op, rho))
    return spec.record_gain * mean * dt + spec.record_noise * np.asarray(dW, dtype=float)


def default_dt(spec: SmeSpec, fraction: float = 1 / 50) -> float:
    """``fraction`` over the fastest retained rate (channels, measurement, H spread)."""
    rates = [r * float(np.max(np.abs(dagger(op) @ op))) for r, op in spec.lindblad_channels]
    rates.append(spec.meas_channel[0])
    w = np.linalg.eigvalsh(0.5 * (spec.H + dagger(spec.H)))
    rates.append(0.5 * (w[-1] - w[0]))
    fastest = max(rates)
    if fastest <= 0:
        raise ValueError("spec has no dynamics to set a time step from")
    return fraction / fastest


# -- observables ---------------------------------------------------------------

@dataclass(frozen=True)
class _ObsOps:
    n: np.ndarray | None
    n2: np.ndarray | None
    sx: np.ndarray | None
    sy: np.ndarray | None
    sz: np.ndarray | None
    top: np.ndarray | None


def _observable_ops(spec: SmeSpec) -> _ObsOps:
    from .operators import annihilation_op, pauli_ops

    lay = spec.layout
    n = n2 = sx = sy = sz = top = None
    if "resonator" in lay.labels:
        N = lay.dims[lay.index("resonator")]
        b = annihilation_op(N)
        nd = np.real(np.diag(dagger(b) @ b))
        n = lay.embed(np.diag(nd), "resonator")
        n2 = lay.embed(np.diag(nd**2), "resonator")
        p = np.zeros(N)
        p[-1] = 1
        top = lay.embed(np.diag(p), "resonator")
    if "qubit" in lay.labels:
        px, py, pz, _, _ = pauli_ops()
        sx, sy, sz = (lay.embed(o, "qubit") for o in (px, py, pz))
    return _ObsOps(n, n2, sx, sy, sz, top)


def observables(spec: SmeSpec, rho: np.ndarray, ops: _ObsOps | None = None) -> dict[str, float]:
    ops = ops or _observable_ops(spec)

    def ev(o):
        return float("nan") if o is None else float(np.real(expectation(o, rho)))

    nm, n2 = ev(ops.n), ev(ops.n2)
    return {
        "n_mean": nm,
        "n_var": n2 - nm * nm,
        "sx": ev(ops.sx),
        "sy": ev(ops.sy),
        "sz": ev(ops.sz),
        "purity": float(np.real(np.einsum("ij,ji->", rho, rho))),
        "leakage": ev(ops.top),
    }


# -- runners ------------------------------------------------------------------

def run_trajectory(spec: SmeSpec, rho0: np.ndarray, cfg: IntegratorConfig,
                   traj_index: int = 0, backend: str = "auto") -> TrajectoryRecord:
    """Integrate one conditioned trajectory.

    ``backend`` is ``"dense"``, ``"block"`` or ``"auto"`` (block when the spec
    and initial state admit the Fock-block decomposition). Output is a
    deterministic function of ``(spec, rho0, cfg, traj_index, backend)``.
    """
    from . import blocks

    rho0 = np.asarray(rho0, dtype=np.complex128)
    _check(spec, rho0)
    if backend == "auto":
        backend = "block" if blocks.supports(spec, rho0) else "dense"
    if backend == "block":
        return blocks.run_trajectory_block(spec, rho0, cfg, traj_index)
    if backend != "dense":
        raise ValueError(f"unknown backend {backend!r}")
    return _run_dense(spec, rho0, cfg, traj_index)


def _run_dense(spec: SmeSpec, rho0: np.ndarray, cfg: IntegratorConfig, traj_index: int):
    rng = noise_generator(cfg.seed, traj_index)
    n_steps = cfg.n_steps
    ops = _observable_ops(spec)
    n_samples = n_steps // cfg.sample_every + 1
    obs = {k: np.empty(n_samples) for k in OBSERVABLES}
    times = cfg.dt * cfg.sample_every * np.arange(n_samples)
    dr = np.zeros(n_steps // cfg.record_every)
    rho = rho0.copy()
    max_drift = 0.0
    min_eig = math.inf
    max_leak = 0.0
    last_dev = 0.0
    repairs = 0

    def sample(j):
        o = observables(spec, rho, ops)
        for k, v in o.items():
            obs[k][j] = v
        obs["trace_dev"][j] = last_dev

    sample(0)
    max_leak = obs["leakage"][0] if not math.isnan(obs["leakage"][0]) else 0.0
    dws = np.empty(0)
    n_done = n_steps
    for step in range(n_steps):
        i = step % NOISE_CHUNK
        if i == 0:
            if step > 0 and poll_stop(cfg, step, obs) is not None:
                n_done = step
                break
            dws = wiener_increments(rng, cfg.dt, NOISE_CHUNK)
        dW = dws[i]
        inc = record_increment(spec, rho, cfg.dt, dW)
        j = step // cfg.record_every
        if j < len(dr):
            dr[j] += inc
        renorm = (step + 1) % cfg.renorm_every == 0
        try:
            new = milstein_step(spec, rho, cfg.dt, dW, renormalize=False)
        except IntegratorError as exc:
            raise IntegratorError(str(exc), step=step, traj_index=traj_index) from None
        tr = float(np.real(np.trace(new)))
        if not (math.isfinite(tr) and tr > 0.0):
            raise IntegratorError(f"trace {tr!r} is not positive", step=step, traj_index=traj_index)
        last_dev = abs(tr - 1.0)
        max_drift = max(max_drift, last_dev)
        rho = new / tr if renorm else new
        if (step + 1) % cfg.diag_every == 0:
            w, vecs = np.linalg.eigh(rho)
            min_eig = min(min_eig, float(w[0]))
            if cfg.repair_positivity and w[0] < REPAIR_THRESHOLD:
                w = np.clip(w, 0.0, None)
                rho = (vecs * (w / w.sum())) @ dagger(vecs)
                repairs += 1
        if (step + 1) % cfg.sample_every == 0:
            sample((step + 1) // cfg.sample_every)
            leak = obs["leakage"][(step + 1) // cfg.sample_every]
            if not math.isnan(leak):
                max_leak = max(max_leak, leak)
                if cfg.leakage_bound is not None and leak > cfg.leakage_bound:
                    raise IntegratorError(f"truncation leakage {leak:.3e} exceeds bound",
                                          step=step, traj_index=traj_index)
    if n_done < n_steps:
        obs, dr, times = truncate_outputs(cfg, n_done, obs, dr)
    diag = {
        "backend": "dense",
        "n_steps": n_done,
        "max_trace_drift": max_drift,
        "min_eigenvalue": min_eig,
        "max_hermiticity_dev": float(np.max(np.abs(rho - dagger(rho)))),
        "max_leakage": max_leak,
        "repairs": repairs,
        "final_state": rho,
    }
    return TrajectoryRecord(times, obs, dr, cfg.dt * cfg.record_every, cfg.seed, traj_index,
                            spec.fingerprint, diag)


@dataclass
class UnconditionalResult:
    times: np.ndarray
    states: np.ndarray
    observables: dict[str, np.ndarray]


def run_unconditional(spec: SmeSpec, rho0: np.ndarray, dt: float, t_final: float,
                      sample_every: int = 1, trace_tol: float = 1e-6) -> UnconditionalResult:
    """Fixed-step RK4 integration of the drift alone (the ensemble-mean dynamics)."""
    rho = np.asarray(rho0, dtype=np.complex128).copy()
    _check(spec, rho)
    n_steps = int(round(t_final / dt))
    n_samples = n_steps // sample_every + 1
    states = np.empty((n_samples,) + rho.shape, dtype=np.complex128)
    states[0] = rho
    tr0 = float(np.real(np.trace(rho)))
    for step in range(n_steps):
        k1 = drift(spec, rho)
        k2 = drift(spec, rho + 0.5 * dt * k1)
        k3 = drift(spec, rho + 0.5 * dt * k2)
        k4 = drift(spec, rho + dt * k3)
        rho = rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = 0.5 * (rho + dagger(rho))
        if (step + 1) % sample_every == 0:
            tr = float(np.real(np.trace(rho)))
            if not math.isfinite(tr) or abs(tr - tr0) > trace_tol:
                raise IntegratorError(f"trace drift {abs(tr - tr0):.3e}: step size unstable",
                                      step=step)
            states[(step + 1) // sample_every] = rho
    times = dt * sample_every * np.arange(n_samples)
    return UnconditionalResult(times, states, _observe_all(spec, states))


def _observe_all(spec: SmeSpec, states: np.ndarray) -> dict[str, np.ndarray]:
    ops = _observable_ops(spec)
    obs = {k: np.empty(len(states)) for k in ("n_mean", "n_var", "sx", "sy", "sz", "purity", "leakage")}
    for j, rho in enumerate(states):
        for k, v in observables(spec, rho, ops).items():
            obs[k][j] = v
    return obs


def liouvillian(spec: SmeSpec) -> np.ndarray:
    """Matrix of the drift acting on row-major ``vec(rho)``."""
    d = spec.dim
    I = np.eye(d)
    he = spec.h_eff
    L = -1j * (np.kron(he, I) - np.kron(I, he.conj()))
    for J in spec.jump_ops:
        L = L + np.kron(J, J.conj())
    return L


def propagate_exact(spec: SmeSpec, rho0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Drift-only evolution via the matrix exponential of :func:`liouvillian`."""
    from scipy.linalg import expm

    d = spec.dim
    L = liouvillian(spec)
    v = np.asarray(rho0, dtype=np.complex128).reshape(-1)
    out = np.empty((len(times), d, d), dtype=np.complex128)
    t_prev, step, U = 0.0, None, None
    for j, t in enumerate(times):
        h = t - t_prev
        if step is None or abs(h - step) > 1e-12 * abs(step):  # uniform grids reuse one propagator
            step, U = h, expm(L * h)
        v = U @ v
        t_prev = t
        out[j] = v.reshape(d, d)
    return out


def unconditional_exact(spec: SmeSpec, rho0: np.ndarray, times: np.ndarray) -> UnconditionalResult:
    """:func:`propagate_exact` packaged like :func:`run_unconditional`."""
    times = np.asarray(times, dtype=float)
    states = propagate_exact(spec, rho0, times)
    return UnconditionalResult(times, states, _observe_all(spec, states))
