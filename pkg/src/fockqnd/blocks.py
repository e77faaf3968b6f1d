"""Fock-block backend for reduced qubit (x) resonator models.

When the Hamiltonian is diagonal in the resonator number basis, every qubit
channel acts as ``q (x) 1`` and the resonator channels are multiples of ``b``
and ``b^+``, a state that starts diagonal in ``n`` stays diagonal. The state is
then ``sum_n |n><n| (x) q_n`` with 2x2 blocks ``q_n``, and one Milstein step
costs O(N) instead of O((2N)^3). The step is the same scheme as
:func:`fockqnd.engine.milstein_step`, written out block by block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .engine import (
    NOISE_CHUNK,
    OBSERVABLES,
    REPAIR_THRESHOLD,
    IntegratorConfig,
    IntegratorError,
    TrajectoryRecord,
    noise_generator,
    poll_stop,
    truncate_outputs,
    wiener_increments,
)
from .model import SmeSpec
from .operators import annihilation_op, dagger

_TOL = 1e-14


@dataclass(frozen=True)
class BlockModel:
    n_levels: int
    h: np.ndarray  # (N, 2, 2)
    jumps: np.ndarray  # (K, 2, 2), sqrt(rate) folded in
    kd: float  # rate of D[b]
    ku: float  # rate of D[b^+]
    M: np.ndarray  # (2, 2)
    amp: float
    rec: np.ndarray  # (2, 2)
    gain: float
    noise: float


def _split(op: np.ndarray, N: int) -> np.ndarray:
    return op.reshape(2, N, 2, N)


def _qubit_local(op: np.ndarray, N: int) -> np.ndarray | None:
    q = op.reshape(2, N, 2, N)[:, 0, :, 0]
    return q.copy() if np.allclose(np.kron(q, np.eye(N)), op, rtol=0, atol=_TOL) else None


def _resonator_multiple(op: np.ndarray, b: np.ndarray, N: int) -> float | None:
    r = op.reshape(2, N, 2, N)[0, :, 0, :]
    nz = np.argwhere(np.abs(b) > 0)
    if len(nz) == 0:
        return None
    i, j = nz[0]
    c = r[i, j] / b[i, j]
    if np.allclose(np.kron(np.eye(2), c * b), op, rtol=0, atol=_TOL):
        return float(abs(c) ** 2)
    return None


def decompose(spec: SmeSpec) -> BlockModel | None:
    """Block form of ``spec`` or ``None`` when it does not preserve Fock diagonality."""
    lay = spec.layout
    if lay.labels != ("qubit", "resonator") or lay.dims[0] != 2:
        return None
    N = lay.dims[1]
    Hb = _split(np.asarray(spec.H), N)
    h = np.empty((N, 2, 2), dtype=np.complex128)
    mask = ~np.eye(N, dtype=bool)
    if np.any(np.abs(Hb.transpose(1, 3, 0, 2)[mask]) > _TOL):
        return None
    for n in range(N):
        h[n] = Hb[:, n, :, n]
    b = annihilation_op(N)
    bd = dagger(b)
    jumps, kd, ku = [], 0.0, 0.0
    for rate, op in spec.lindblad_channels:
        if rate == 0:
            continue
        q = _qubit_local(op, N)
        if q is not None:
            jumps.append(math.sqrt(rate) * q)
            continue
        c = _resonator_multiple(op, b, N)
        if c is not None:
            kd += rate * c
            continue
        c = _resonator_multiple(op, bd, N)
        if c is not None:
            ku += rate * c
            continue
        return None
    M = _qubit_local(spec.meas_channel[1], N)
    rec = _qubit_local(spec.record_op, N)
    if M is None or rec is None:
        return None
    J = np.array(jumps, dtype=np.complex128) if jumps else np.zeros((0, 2, 2), np.complex128)
    return BlockModel(N, h, J, kd, ku, M, spec.meas_amplitude, rec,
                      float(spec.record_gain), float(spec.record_noise))


def is_fock_diagonal(rho: np.ndarray, N: int) -> bool:
    t = np.asarray(rho).reshape(2, N, 2, N).transpose(1, 3, 0, 2)
    return not np.any(np.abs(t[~np.eye(N, dtype=bool)]) > _TOL)


def supports(spec: SmeSpec, rho0: np.ndarray) -> bool:
    bm = decompose(spec)
    return bm is not None and is_fock_diagonal(rho0, bm.n_levels)


def to_blocks(rho: np.ndarray, N: int) -> np.ndarray:
    t = np.asarray(rho, dtype=np.complex128).reshape(2, N, 2, N)
    return np.ascontiguousarray(np.einsum("injn->nij", t))


def from_blocks(q: np.ndarray) -> np.ndarray:
    N = q.shape[0]
    out = np.zeros((2, N, 2, N), dtype=np.complex128)
    for n in range(N):
        out[:, n, :, n] = q[n]
    return out.reshape(2 * N, 2 * N)


# -- kernel -------------------------------------------------------------------
# Blocks are stored flattened row-major: v = (q00, q01, q10, q11), so that
# vec(X q Y) = (X kron Y^T) vec(q).

@numba.njit(cache=True)
def _sample(v, obs, j, dev):
    N = v.shape[0]
    nm = 0.0
    n2 = 0.0
    sx = 0.0
    sy = 0.0
    sz = 0.0
    pur = 0.0
    for n in range(N):
        p = v[n, 0].real + v[n, 3].real
        nm += n * p
        n2 += n * n * p
        sx += 2.0 * v[n, 1].real
        sy += -2.0 * v[n, 1].imag
        sz += v[n, 0].real - v[n, 3].real
        for a in range(4):
            pur += v[n, a].real ** 2 + v[n, a].imag ** 2
    obs[0, j] = nm
    obs[1, j] = n2 - nm * nm
    obs[2, j] = sx
    obs[3, j] = sy
    obs[4, j] = sz
    obs[5, j] = pur
    obs[6, j] = dev
    obs[7, j] = v[N - 1, 0].real + v[N - 1, 3].real


@numba.njit(cache=True)
def _min_eig(v):
    lo = np.inf
    for n in range(v.shape[0]):
        a = v[n, 0].real
        d = v[n, 3].real
        c = v[n, 1]
        e = 0.5 * (a + d) - math.sqrt(0.25 * (a - d) ** 2 + c.real ** 2 + c.imag ** 2)
        if e < lo:
            lo = e
    return lo


@numba.njit(cache=True)
def _clip_blocks(v, threshold):
    """Project blocks with an eigenvalue below ``threshold`` onto the PSD cone.

    For a 2x2 Hermitian block with eigenvalues lo < 0 <= hi the projection is
    hi * (q - lo I) / (hi - lo). Returns the number of blocks changed; the
    caller renormalizes.
    """
    count = 0
    for n in range(v.shape[0]):
        a = v[n, 0].real
        d = v[n, 3].real
        c = v[n, 1]
        r = math.sqrt(0.25 * (a - d) ** 2 + c.real ** 2 + c.imag ** 2)
        lo = 0.5 * (a + d) - r
        if lo >= threshold:
            continue
        hi = 0.5 * (a + d) + r
        count += 1
        if hi <= 0.0:
            for k in range(4):
                v[n, k] = 0.0
            continue
        f = hi / (hi - lo)
        v[n, 0] = f * (a - lo)
        v[n, 3] = f * (d - lo)
        v[n, 1] = f * c
        v[n, 2] = f * np.conj(c)
    return count


@numba.njit(cache=True)
def _step(v, S, hop_dn, hop_up, LM, amp, dt, dW, A, B, X):
    """Milstein update of v in place (Hermitized, not renormalized); returns trace."""
    N = v.shape[0]
    T = 0.0
    for n in range(N):
        for a in range(4):
            x = 0j
            y = 0j
            for c in range(4):
                x += LM[a, c] * v[n, c]
                y += S[n, a, c] * v[n, c]
            X[n, a] = x
            if n + 1 < N:
                y += hop_dn[n] * v[n + 1, a]
            if n >= 1:
                y += hop_up[n] * v[n - 1, a]
            A[n, a] = y
        T += X[n, 0].real + X[n, 3].real
    Tb = 0.0
    for n in range(N):
        for a in range(4):
            B[n, a] = amp * (X[n, a] - T * v[n, a])
    for n in range(N):
        for a in range(4):
            x = 0j
            for c in range(4):
                x += LM[a, c] * B[n, c]
            X[n, a] = x
        Tb += X[n, 0].real + X[n, 3].real
    f = 0.5 * (dW * dW - dt)
    tr = 0.0
    for n in range(N):
        for a in range(4):
            bp = amp * (X[n, a] - Tb * v[n, a] - T * B[n, a])
            v[n, a] = v[n, a] + A[n, a] * dt + B[n, a] * dW + bp * f
        x = 0.5 * (v[n, 1] + np.conj(v[n, 2]))
        v[n, 1] = x
        v[n, 2] = np.conj(x)
        v[n, 0] = v[n, 0].real
        v[n, 3] = v[n, 3].real
        tr += v[n, 0].real + v[n, 3].real
    return tr


@numba.njit(cache=True)
def _advance(v, S, hop_dn, hop_up, LM, amp, rec, gain, noise, dws, dt, step0, n_steps,
             renorm_every, record_every, dr, sample_every, obs, diag_every, stats,
             leak_bound, repair):
    """Advance ``v`` in place through ``dws``; returns (status, failing step).

    stats = [max_trace_drift, min_eig, max_leak, last_dev, repairs]
    status 0 ok, 1 non-finite or non-positive trace, 2 leakage bound exceeded.
    """
    N = v.shape[0]
    A = np.empty_like(v)
    B = np.empty_like(v)
    X = np.empty_like(v)
    n_rec = dr.shape[0]
    for i in range(dws.shape[0]):
        step = step0 + i
        if step >= n_steps:
            break
        dW = dws[i]
        mean = 0.0
        for n in range(N):
            for a in range(4):
                mean += (rec[a] * v[n, a]).real
        j = step // record_every
        if j < n_rec:
            dr[j] += gain * mean * dt + noise * dW
        tr = _step(v, S, hop_dn, hop_up, LM, amp, dt, dW, A, B, X)
        if not np.isfinite(tr) or tr <= 0.0:
            return 1, step
        dev = abs(tr - 1.0)
        stats[3] = dev
        if dev > stats[0]:
            stats[0] = dev
        if (step + 1) % renorm_every == 0:
            for n in range(N):
                for a in range(4):
                    v[n, a] /= tr
        if (step + 1) % diag_every == 0:
            e = _min_eig(v)
            if e < stats[1]:
                stats[1] = e
            if repair and e < REPAIR_THRESHOLD:
                stats[4] += _clip_blocks(v, REPAIR_THRESHOLD)
                t = 0.0
                for n in range(N):
                    t += v[n, 0].real + v[n, 3].real
                if not t > 0.0:
                    return 1, step
                for n in range(N):
                    for a in range(4):
                        v[n, a] /= t
        if (step + 1) % sample_every == 0:
            js = (step + 1) // sample_every
            _sample(v, obs, js, dev)
            leak = obs[7, js]
            if leak > stats[2]:
                stats[2] = leak
            if leak > leak_bound:
                return 2, step
    return 0, -1


@dataclass(frozen=True)
class _Kernel:
    S: np.ndarray  # (N, 4, 4) local superoperator per block
    hop_dn: np.ndarray  # coefficient of v[n+1] in dv[n]
    hop_up: np.ndarray  # coefficient of v[n-1] in dv[n]
    LM: np.ndarray  # vec(M q + q M^+)
    rec: np.ndarray  # tr(rec q) = sum rec_flat * v


def kernel_arrays(bm: BlockModel) -> _Kernel:
    N = bm.n_levels
    I = np.eye(2)
    G = np.zeros((2, 2), dtype=np.complex128)
    D = np.zeros((4, 4), dtype=np.complex128)
    for J in bm.jumps:
        G += dagger(J) @ J
        D += np.kron(J, J.conj())
    S = np.empty((N, 4, 4), dtype=np.complex128)
    for n in range(N):
        he = bm.h[n] - 0.5j * G
        loss = bm.kd * n + (bm.ku * (n + 1) if n < N - 1 else 0.0)
        S[n] = -1j * (np.kron(he, I) - np.kron(I, he.conj())) + D - loss * np.eye(4)
    n = np.arange(N)
    hop_dn = (bm.kd * (n + 1)).astype(float)
    hop_up = (bm.ku * n).astype(float)
    LM = np.kron(bm.M, I) + np.kron(I, bm.M.conj())
    # tr(R q) = sum_ac R_ac q_ca
    rec = np.ascontiguousarray(bm.rec.T.reshape(4))
    return _Kernel(S, hop_dn, hop_up, np.ascontiguousarray(LM), rec)


def milstein_blocks(bm: BlockModel, q: np.ndarray, dt: float, dW: float,
                    renormalize: bool = True) -> np.ndarray:
    """One Milstein step on 2x2 blocks ``q`` of shape (N, 2, 2); returns a new array."""
    k = kernel_arrays(bm)
    v = np.ascontiguousarray(q.reshape(-1, 4), dtype=np.complex128).copy()
    scratch = [np.empty_like(v) for _ in range(3)]
    tr = _step(v, k.S, k.hop_dn, k.hop_up, k.LM, bm.amp, dt, float(dW), *scratch)
    if renormalize:
        v /= tr
    return v.reshape(-1, 2, 2)


def _as_dict(obs: np.ndarray) -> dict[str, np.ndarray]:
    return {k: obs[i] for i, k in enumerate(OBSERVABLES)}


def run_trajectory_block(spec: SmeSpec, rho0: np.ndarray, cfg: IntegratorConfig,
                         traj_index: int = 0) -> TrajectoryRecord:
    bm = decompose(spec)
    if bm is None or not is_fock_diagonal(rho0, bm.n_levels):
        raise ValueError("spec/state do not admit the Fock-block decomposition")
    v = to_blocks(rho0, bm.n_levels).reshape(-1, 4).copy()
    k = kernel_arrays(bm)
    rng = noise_generator(cfg.seed, traj_index)
    n_steps = cfg.n_steps
    n_samples = n_steps // cfg.sample_every + 1
    obs = np.full((len(OBSERVABLES), n_samples), np.nan)
    _sample(v, obs, 0, 0.0)
    dr = np.zeros(n_steps // cfg.record_every)
    stats = np.array([0.0, np.inf, obs[7, 0], 0.0, 0.0])
    leak_bound = np.inf if cfg.leakage_bound is None else float(cfg.leakage_bound)
    n_done = n_steps
    for step0 in range(0, n_steps, NOISE_CHUNK):
        if step0 > 0 and poll_stop(cfg, step0, _as_dict(obs)) is not None:
            n_done = step0
            break
        dws = wiener_increments(rng, cfg.dt, NOISE_CHUNK)
        status, bad = _advance(v, k.S, k.hop_dn, k.hop_up, k.LM, bm.amp, k.rec, bm.gain,
                               bm.noise, dws, cfg.dt, step0, n_steps, cfg.renorm_every,
                               cfg.record_every, dr, cfg.sample_every, obs, cfg.diag_every,
                               stats, leak_bound, cfg.repair_positivity)
        if status == 1:
            raise IntegratorError("non-finite state", step=int(bad), traj_index=traj_index)
        if status == 2:
            raise IntegratorError("truncation leakage exceeds bound", step=int(bad),
                                  traj_index=traj_index)
    times = cfg.dt * cfg.sample_every * np.arange(n_samples)
    observables = _as_dict(obs)
    if n_done < n_steps:
        observables, dr, times = truncate_outputs(cfg, n_done, observables, dr)
    q = v.reshape(-1, 2, 2)
    diag = {
        "backend": "block",
        "n_steps": n_done,
        "max_trace_drift": float(stats[0]),
        "min_eigenvalue": float(stats[1]),
        "max_hermiticity_dev": float(np.max(np.abs(from_blocks(q) - dagger(from_blocks(q))))),
        "max_leakage": float(stats[2]),
        "repairs": int(stats[4]),
        "final_blocks": q,
    }
    return TrajectoryRecord(times, observables, dr, cfg.dt * cfg.record_every, cfg.seed,
                            traj_index, spec.fingerprint, diag)
