"""Dense operator algebra on truncated tensor-product Hilbert spaces.

Operators are plain ``complex128`` numpy arrays of shape ``(d, d)``; most
functions here also broadcast over leading batch axes so that a stack of
density matrices ``(..., d, d)`` can be pushed through in one call.

Qubit basis ordering is ``(|e>, |g>)`` so that ``sigma_z |e> = +|e>`` and
``sigma_- = |g><e|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

MAX_DIM = 4096

__all__ = [
    "MAX_DIM",
    "SpaceLayout",
    "annihilation_op",
    "as_operator",
    "check_positive",
    "commutator",
    "dagger",
    "density_matrix",
    "dissipator",
    "expectation",
    "fock_projector",
    "identity",
    "is_hermitian",
    "meas_superop",
    "partial_trace",
    "pauli_ops",
    "purity",
    "qubit_state",
    "tensor",
    "thermal_state",
    "trace_distance",
]


def as_operator(a) -> np.ndarray:
    """Coerce ``a`` to a square complex matrix (batch axes allowed)."""
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or a.shape[-1] < 1:
        raise ValueError(f"operator must be square, got shape {a.shape}")
    return a


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.complex128)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def annihilation_op(n_levels: int) -> np.ndarray:
    """Lowering operator on ``n_levels`` Fock states, ``<n-1|b|n> = sqrt(n)``."""
    if int(n_levels) != n_levels or n_levels < 1:
        raise ValueError(f"n_levels must be a positive integer, got {n_levels!r}")
    n_levels = int(n_levels)
    return np.diag(np.sqrt(np.arange(1, n_levels, dtype=float)), k=1).astype(np.complex128)


def pauli_ops() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(sx, sy, sz, sm, sp)`` in the ``(|e>, |g>)`` basis."""
    sx = np.array([[0, 1], [1, 0]], dtype=np.complex128)
    sy = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
    sz = np.array([[1, 0], [0, -1]], dtype=np.complex128)
    sm = np.array([[0, 0], [1, 0]], dtype=np.complex128)
    return sx, sy, sz, sm, sm.T.copy()


def qubit_state(label: str) -> np.ndarray:
    """Projector onto one of ``e, g, +x, -x, +y, -y``."""
    s = 1 / np.sqrt(2)
    kets = {
        "e": np.array([1, 0]),
        "g": np.array([0, 1]),
        "+x": np.array([s, s]),
        "-x": np.array([s, -s]),
        "+y": np.array([s, 1j * s]),
        "-y": np.array([s, -1j * s]),
    }
    try:
        k = kets[label].astype(np.complex128)
    except KeyError:
        raise ValueError(f"unknown qubit state {label!r}") from None
    return np.outer(k, k.conj())


def fock_projector(n: int, n_levels: int) -> np.ndarray:
    if not 0 <= n < n_levels:
        raise ValueError(f"Fock index {n} outside 0..{n_levels - 1}")
    p = np.zeros((n_levels, n_levels), dtype=np.complex128)
    p[n, n] = 1.0
    return p


def tensor(*ops: np.ndarray, max_dim: int = MAX_DIM) -> np.ndarray:
    """Kronecker product of one or more operators."""
    if not ops:
        raise ValueError("tensor needs at least one operator")
    dim = int(np.prod([np.shape(o)[-1] for o in ops]))
    if dim > max_dim:
        raise OverflowError(f"tensor dimension {dim} exceeds max_dim={max_dim}")
    return reduce(np.kron, (as_operator(o) for o in ops))


def thermal_state(nbar: float, n_levels: int) -> np.ndarray:
    """Truncated thermal state with ``p_n`` proportional to ``(nbar/(nbar+1))**n``."""
    if nbar < 0:
        raise ValueError(f"nbar must be >= 0, got {nbar}")
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    if nbar == 0:
        p = np.zeros(n_levels)
        p[0] = 1.0
    else:
        p = (nbar / (nbar + 1.0)) ** np.arange(n_levels)
        p /= p.sum()
    return np.diag(p).astype(np.complex128)


def density_matrix(a) -> np.ndarray:
    """Hermitize and trace-normalize ``a`` into a density matrix.

    Raises if the trace is (numerically) zero rather than dividing by it.
    """
    a = as_operator(a)
    a = 0.5 * (a + dagger(a))
    tr = np.trace(a, axis1=-2, axis2=-1).real
    if np.any(np.abs(tr) < 1e-12):
        raise ValueError("cannot normalize an operator with vanishing trace")
    return a / tr[..., None, None]


def is_hermitian(a: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.max(np.abs(a - dagger(a)), initial=0.0) <= tol)


def check_positive(rho: np.ndarray, tol: float = 1e-9) -> float:
    """Return the minimum eigenvalue of ``rho``; raise if below ``-tol``."""
    w = np.linalg.eigvalsh(0.5 * (rho + dagger(rho)))
    lo = float(np.min(w))
    if lo < -tol:
        raise ValueError(f"density matrix not positive: min eigenvalue {lo:.3e}")
    return lo


def _check_dims(s: np.ndarray, rho: np.ndarray) -> None:
    if s.shape[-1] != rho.shape[-1]:
        raise ValueError(f"dimension mismatch: {s.shape[-1]} vs {rho.shape[-1]}")


def dissipator(s: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lindblad dissipator ``s rho s^+ - {s^+ s, rho}/2``."""
    _check_dims(s, rho)
    sd = dagger(s)
    sds = sd @ s
    return s @ rho @ sd - 0.5 * (sds @ rho + rho @ sds)


def meas_superop(s: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Homodyne innovation term ``s rho + rho s^+ - tr(s rho + rho s^+) rho``."""
    _check_dims(s, rho)
    x = s @ rho + rho @ dagger(s)
    tr = np.trace(x, axis1=-2, axis2=-1)
    return x - tr[..., None, None] * rho


def expectation(a: np.ndarray, rho: np.ndarray) -> complex | np.ndarray:
    """``tr(a rho)``; broadcasts over batch axes of ``rho``."""
    _check_dims(a, rho)
    # tr(A rho) = sum_ij A_ij rho_ji
    val = np.einsum("...ij,...ji->...", a, rho)
    return complex(val) if np.ndim(val) == 0 else val


def purity(rho: np.ndarray) -> float | np.ndarray:
    val = np.einsum("...ij,...ji->...", rho, rho).real
    return float(val) if np.ndim(val) == 0 else val


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    w = np.linalg.eigvalsh(0.5 * ((a - b) + dagger(a - b)))
    return 0.5 * float(np.sum(np.abs(w)))


@dataclass(frozen=True)
class SpaceLayout:
    """Ordered tensor factors, e.g. ``(("qubit", 2), ("resonator", 15))``."""

    factors: tuple[tuple[str, int], ...]

    def __post_init__(self):
        labels = [f[0] for f in self.factors]
        if not self.factors:
            raise ValueError("layout needs at least one factor")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate factor labels in {labels}")
        if any(int(d) < 1 for _, d in self.factors):
            raise ValueError("factor dimensions must be >= 1")
        object.__setattr__(self, "factors", tuple((str(l), int(d)) for l, d in self.factors))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(l for l, _ in self.factors)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(d for _, d in self.factors)

    @property
    def dim(self) -> int:
        return math.prod(self.dims)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown factor {label!r}; layout has {self.labels}") from None

    def embed(self, op: np.ndarray, label: str) -> np.ndarray:
        """Pad a single-factor operator with identities on the other factors."""
        i = self.index(label)
        op = as_operator(op)
        if op.shape[-1] != self.dims[i]:
            raise ValueError(f"operator dim {op.shape[-1]} != factor {label!r} dim {self.dims[i]}")
        parts = [identity(d) for d in self.dims]
        parts[i] = op
        return tensor(*parts)


def partial_trace(rho: np.ndarray, layout: SpaceLayout, keep) -> np.ndarray:
    """Trace out every factor not listed in ``keep`` (order follows the layout)."""
    if isinstance(keep, str):
        keep = [keep]
    keep_idx = sorted(layout.index(k) for k in keep)
    dims = layout.dims
    n = len(dims)
    rho = as_operator(rho)
    if rho.shape[-1] != layout.dim:
        raise ValueError(f"state dim {rho.shape[-1]} != layout dim {layout.dim}")
    t = rho.reshape(rho.shape[:-2] + dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyz"
    row = list(letters[:n])
    col = [letters[n + i] if i in keep_idx else row[i] for i in range(n)]
    out = "".join(row[i] for i in keep_idx) + "".join(col[i] for i in keep_idx)
    expr = "..." + "".join(row) + "".join(col) + "->..." + out
    red = np.einsum(expr, t)
    d = int(np.prod([dims[i] for i in keep_idx]))
    return red.reshape(rho.shape[:-2] + (d, d))
