"""Circuit-QED model: parameter derivation and master-equation assembly.

Three stochastic master equations are assembled as :class:`SmeSpec` data:

* the full qubit/resonator/cavity model with homodyne detection of the cavity,
* the reduced qubit/resonator model after adiabatic elimination of the cavity,
* the reduced model with Markovian homodyne feedback that turns the
  dissipative ``sigma_-`` measurement into a non-dissipative ``sigma_y`` one.

All frequencies are angular (rad/s), rates in 1/s, and hbar is absorbed so
Hamiltonians are in 1/s.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.constants as const
from scipy.linalg import expm

from .operators import (
    SpaceLayout,
    annihilation_op,
    dagger,
    identity,
    pauli_ops,
)

HBAR = const.hbar
E_CHARGE = const.e

# regime thresholds for warnings
ADIABATIC_RATIO = 10.0
SW_SMALL = 0.05


class RegimeWarning(UserWarning):
    """A derived parameter set violates an approximation's validity regime."""


@dataclass(frozen=True)
class PhysicalParams:
    """Experiment-level inputs.

    Exactly one of ``Q_m`` and ``gamma`` is given. ``chi_override`` and
    ``gprime_override`` replace the formula values for the dispersive and
    effective cavity couplings when set.
    """

    omega_c: float
    omega_m: float
    Delta: float
    epsilon: float = 0.0
    g: float = 0.0
    lam: float = 0.0
    mu: float = 1e7
    Q_m: float | None = None
    gamma: float | None = None
    Gamma_q: float = 0.0
    n0m: float = 2.0
    eta: float = 1.0
    mass: float = 1e-15
    chi_override: float | None = None
    gprime_override: float | None = None

    def __post_init__(self):
        if (self.Q_m is None) == (self.gamma is None):
            raise ValueError("supply exactly one of Q_m and gamma")
        for name in ("omega_c", "omega_m", "Delta", "g", "lam", "mu", "Gamma_q", "n0m", "mass"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.Q_m is not None and not self.Q_m > 0:
            raise ValueError("Q_m must be > 0")
        if self.gamma is not None and not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if self.chi_override is not None and self.chi_override < 0:
            raise ValueError("chi_override must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


@dataclass(frozen=True)
class CircuitParams:
    E_C: float  # J
    n_g_m: float
    Cg_over_Csigma: float
    c: float  # F/m
    L: float  # m
    d: float  # m

    def __post_init__(self):
        for name in ("E_C", "Cg_over_Csigma", "c", "L", "d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.n_g_m <= 1.0:
            raise ValueError("n_g_m must lie in [0, 1]")


@dataclass(frozen=True)
class DerivedParams:
    Omega: float
    delta: float
    gprime: float
    chi: float
    Gamma: float
    gamma: float
    dx: float
    s: float
    warnings: tuple[str, ...] = ()


def zero_point_width(mass: float, omega_m: float) -> float:
    """Ground-state half-width ``sqrt(hbar / (2 m omega_m))`` in metres."""
    if not (mass > 0 and omega_m > 0):
        raise ValueError("mass and omega_m must be > 0")
    return math.sqrt(HBAR / (2.0 * mass * omega_m))


def couplings_from_circuit(cp: CircuitParams, omega_c: float, m: float, omega_m: float):
    """Bare couplings ``(g, lam, dx)`` in rad/s, rad/s and m from circuit values."""
    if not (omega_c > 0 and m > 0 and omega_m > 0):
        raise ValueError("omega_c, m and omega_m must be > 0")
    dx = zero_point_width(m, omega_m)
    g = E_CHARGE * cp.Cg_over_Csigma * math.sqrt(HBAR * omega_c / (cp.c * cp.L)) / HBAR
    lam = 4.0 * cp.E_C * cp.n_g_m * dx / cp.d / HBAR
    return g, lam, dx


def derive_params(pp: PhysicalParams) -> DerivedParams:
    Omega = math.hypot(pp.epsilon, pp.Delta)
    if Omega == 0:
        raise ValueError("qubit splitting Omega vanishes")
    if pp.mu == 0:
        raise ValueError("cavity decay rate mu must be > 0")
    delta = 0.5 * (Omega - pp.omega_c)
    gprime = -pp.g * pp.Delta / Omega if pp.gprime_override is None else pp.gprime_override
    chi = 4.0 * pp.lam**2 * pp.Delta**2 / Omega**3 if pp.chi_override is None else pp.chi_override
    Gamma = 4.0 * gprime**2 / pp.mu
    gamma = pp.omega_m / pp.Q_m if pp.gamma is None else pp.gamma
    dx = zero_point_width(pp.mass, pp.omega_m) if pp.mass > 0 and pp.omega_m > 0 else float("nan")
    s = pp.lam * pp.Delta / Omega**2

    notes = []
    fast = max(abs(delta), chi, abs(gprime))
    if fast > 0 and pp.mu < ADIABATIC_RATIO * fast:
        notes.append(
            f"cavity not fast: mu/max(|delta|, chi, |g'|) = {pp.mu / fast:.3g} < {ADIABATIC_RATIO}"
        )
    if s > SW_SMALL:
        notes.append(f"dispersive expansion parameter s = {s:.3g} > {SW_SMALL}")
    for n in notes:
        warnings.warn(n, RegimeWarning, stacklevel=2)
    return DerivedParams(Omega, delta, gprime, chi, Gamma, gamma, dx, s, tuple(notes))


def sw_dispersive_check(lam: float, Delta: float, epsilon: float, omega_m: float,
                        n_levels: int = 12) -> float:
    """Dispersive coefficient of ``b^+b sigma_z`` from an exact unitary conjugation.

    Builds the cavity-free qubit/resonator Hamiltonian in the qubit energy
    basis, conjugates it with ``S = exp[i s sigma_y (b + b^+)]``,
    ``s = lam Delta / Omega^2``, and reads off the linear-in-n part of the
    ``sigma_z`` component on the Fock diagonal. The two top Fock levels are
    excluded from the fit because truncation distorts them.
    """
    Omega = math.hypot(epsilon, Delta)
    if Omega == 0:
        raise ValueError("Omega vanishes")
    if n_levels < 6:
        raise ValueError("n_levels must be >= 6")
    s = lam * Delta / Omega**2
    if abs(s) > 0.1:
        raise ValueError(f"s = {s:.3g} too large for the dispersive transformation")
    if lam == 0:
        return 0.0
    sx, sy, sz, _, _ = pauli_ops()
    b = annihilation_op(n_levels)
    x = b + dagger(b)
    n_op = dagger(b) @ b
    H = (omega_m * np.kron(identity(2), n_op)
         + 0.5 * Omega * np.kron(sz, identity(n_levels))
         + lam * np.kron(epsilon / Omega * sz - Delta / Omega * sx, x))
    S = expm(1j * s * np.kron(sy, x))
    Hsw = dagger(S) @ H @ S
    blocks = Hsw.reshape(2, n_levels, 2, n_levels)
    z_part = 0.5 * (blocks[0, :, 0, :] - blocks[1, :, 1, :])
    f = np.diag(z_part).real[: n_levels - 2]
    n = np.arange(n_levels - 2, dtype=float)
    # quadratic fit absorbs the O(s^4) n^2 term so the slope stays clean
    coeffs = np.polynomial.polynomial.polyfit(n, f, 2)
    return float(coeffs[1])


@dataclass(frozen=True, eq=False)
class SmeSpec:
    """A fully assembled stochastic master equation.

    ``lindblad_channels`` holds every dissipator (including the one produced
    by the measurement itself). The measurement channel ``(rate, op, eta)``
    only defines the innovation term ``sqrt(eta*rate) H[op] rho dW``. The
    record increment is ``record_gain <record_op> dt + record_noise dW``.
    """

    layout: SpaceLayout
    H: np.ndarray
    lindblad_channels: tuple[tuple[float, np.ndarray], ...]
    meas_channel: tuple[float, np.ndarray, float]
    record_op: np.ndarray
    record_gain: float
    record_noise: float
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.layout.dim
        ops = [self.H, self.meas_channel[1], self.record_op] + [op for _, op in self.lindblad_channels]
        for op in ops:
            if np.shape(op) != (d, d):
                raise ValueError(f"operator shape {np.shape(op)} does not match layout dim {d}")
        rates = [r for r, _ in self.lindblad_channels] + [self.meas_channel[0]]
        if any(not (r >= 0 and math.isfinite(r)) for r in rates):
            raise ValueError(f"rates must be finite and >= 0: {rates}")
        if not 0.0 <= self.meas_channel[2] <= 1.0:
            raise ValueError("measurement efficiency outside [0, 1]")

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def meas_amplitude(self) -> float:
        """``sqrt(eta * rate)`` multiplying the innovation term."""
        rate, _, eta = self.meas_channel
        return math.sqrt(eta * rate)

    @cached_property
    def h_eff(self) -> np.ndarray:
        """Non-Hermitian ``H - (i/2) sum rate L^+ L``."""
        h = np.array(self.H, dtype=np.complex128)
        for rate, op in self.lindblad_channels:
            h = h - 0.5j * rate * (dagger(op) @ op)
        return h

    @cached_property
    def jump_ops(self) -> np.ndarray:
        """Stack of ``sqrt(rate) L`` for channels with nonzero rate."""
        ops = [math.sqrt(r) * op for r, op in self.lindblad_channels if r > 0]
        if not ops:
            return np.zeros((0, self.dim, self.dim), dtype=np.complex128)
        return np.array(ops, dtype=np.complex128)

    @cached_property
    def jump_ops_dag(self) -> np.ndarray:
        return np.ascontiguousarray(np.swapaxes(self.jump_ops.conj(), -1, -2))

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.layout.factors).encode())
        for arr in [self.H, self.meas_channel[1], self.record_op]:
            h.update(np.ascontiguousarray(arr, dtype=np.complex128).tobytes())
        for rate, op in self.lindblad_channels:
            h.update(repr(float(rate)).encode())
            h.update(np.ascontiguousarray(op, dtype=np.complex128).tobytes())
        h.update(repr((float(self.meas_channel[0]), float(self.meas_channel[2]),
                       float(self.record_gain), float(self.record_noise))).encode())
        return h.hexdigest()[:16]


def _reduced_layout(n_levels: int) -> SpaceLayout:
    return SpaceLayout((("qubit", 2), ("resonator", n_levels)))


def _record_coeffs(Gamma: float, mu: float, eta: float) -> tuple[float, float]:
    gain = math.sqrt(Gamma / mu)
    noise = 1.0 / math.sqrt(eta * mu) if eta > 0 else math.inf
    return gain, noise


def build_reduced_sme(dp: DerivedParams, pp: PhysicalParams, feedback: bool,
                      n_levels: int = 30) -> SmeSpec:
    """Reduced qubit (x) resonator SME, with or without the sigma_y feedback."""
    if n_levels < 2:
        raise ValueError("n_levels must be >= 2")
    eta = pp.eta
    if feedback and eta == 0:
        raise ValueError("feedback requires eta > 0 (feedback gain diverges at eta = 0)")
    layout = _reduced_layout(n_levels)
    sx, sy, sz, sm, _ = pauli_ops()
    b = annihilation_op(n_levels)
    IN = identity(n_levels)
    I2 = identity(2)
    H = np.kron(sz, dp.delta * IN + dp.chi * (dagger(b) @ b))

    G = dp.Gamma
    channels = [
        (pp.Gamma_q, np.kron(sm, IN)),
        (dp.gamma * (pp.n0m + 1.0), np.kron(I2, b)),
        (dp.gamma * pp.n0m, np.kron(I2, dagger(b))),
    ]
    if feedback:
        channels.append((G, np.kron(sm - 0.5 * eta * sx, IN)))
        channels.append(((1.0 - eta) * G * eta / 4.0, np.kron(sx, IN)))
        meas = (G, np.kron(0.5 * sy, IN), eta)
    else:
        # LO phase theta = -pi: sigma_- exp[-i(theta + pi/2)] = i sigma_-
        channels.append((G, np.kron(sm, IN)))
        meas = (G, np.kron(1j * sm, IN), eta)
    gain, noise = _record_coeffs(G, pp.mu, eta)
    return SmeSpec(
        layout=layout,
        H=H,
        lindblad_channels=tuple(channels),
        meas_channel=meas,
        record_op=np.kron(sy, IN),
        record_gain=gain,
        record_noise=noise,
        label="reduced-feedback" if feedback else "reduced",
        meta={"n_levels": n_levels, "eta": eta, "feedback": feedback},
    )


def build_full_sme(dp: DerivedParams, pp: PhysicalParams, n_levels: int = 6,
                   n_cavity: int = 4, theta: float = -math.pi, max_dim: int = 1024) -> SmeSpec:
    """Qubit (x) resonator (x) cavity SME with homodyne detection of the cavity output."""
    if n_cavity < 2 or n_levels < 2:
        raise ValueError("n_levels and n_cavity must be >= 2")
    if 2 * n_levels * n_cavity > max_dim:
        raise OverflowError(f"full-model dimension {2 * n_levels * n_cavity} exceeds {max_dim}")
    layout = SpaceLayout((("qubit", 2), ("resonator", n_levels), ("cavity", n_cavity)))
    _, _, sz, sm, sp = pauli_ops()
    b = annihilation_op(n_levels)
    a = annihilation_op(n_cavity)
    I2, IN, IC = identity(2), identity(n_levels), identity(n_cavity)

    def k3(q, r, c):
        return np.kron(np.kron(q, r), c)

    H = k3(sz, dp.delta * IN + dp.chi * (dagger(b) @ b), IC)
    H = H + dp.gprime * (k3(sp, IN, a) + k3(sm, IN, dagger(a)))
    A = k3(I2, IN, a)
    channels = (
        (dp.gamma * (pp.n0m + 1.0), k3(I2, b, IC)),
        (dp.gamma * pp.n0m, k3(I2, dagger(b), IC)),
        (pp.mu, A),
        (pp.Gamma_q, k3(sm, IN, IC)),
    )
    phase = np.exp(-1j * theta)
    meas_op = A * phase
    noise = 1.0 / math.sqrt(pp.eta * pp.mu) if pp.eta > 0 else math.inf
    return SmeSpec(
        layout=layout,
        H=H,
        lindblad_channels=channels,
        meas_channel=(pp.mu, meas_op, pp.eta),
        record_op=meas_op + dagger(meas_op),
        record_gain=1.0,
        record_noise=noise,
        label="full",
        meta={"n_levels": n_levels, "n_cavity": n_cavity, "theta": theta, "eta": pp.eta},
    )
