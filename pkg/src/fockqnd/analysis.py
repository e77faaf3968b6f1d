"""Post-processing of conditioned states and homodyne records.

Everything here is a pure function of arrays or :class:`TrajectoryRecord`
objects. The phonon-number estimator is a lock-in bank tuned to the comb of
qubit precession frequencies ``2 (delta + chi n)``; a plain periodogram peak
picker is kept as a cross-check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import TrajectoryRecord
from .operators import SpaceLayout, as_operator, partial_trace

__all__ = [
    "EnsembleStats",
    "EstimatorConfig",
    "JumpEvent",
    "PhononEstimate",
    "detect_conditioning",
    "detect_jumps",
    "ensemble_stats",
    "estimate_phonon_from_record",
    "fock_distribution",
    "phonon_stats",
    "post_conditioning_amplitude",
]


def fock_distribution(rho: np.ndarray, layout: SpaceLayout | None = None,
                      factor: str = "resonator") -> np.ndarray:
    """Occupation probabilities ``p_n = <n|rho|n>`` of one oscillator factor.

    Parameters
    ----------
    rho : ndarray
        Density matrix, either of the full space described by ``layout`` or
        already reduced to the oscillator (``layout=None``). Leading batch
        axes are allowed.
    layout, factor
        Tensor layout and the label of the oscillator factor.

    Returns
    -------
    ndarray
        Real probabilities, last axis indexed by ``n``. Entries below
        ``-1e-10`` trigger a warning; all negatives are clipped to zero.
    """
    rho = as_operator(rho)
    if layout is not None:
        rho = partial_trace(rho, layout, factor)
    p = np.diagonal(rho, axis1=-2, axis2=-1).real.copy()
    if np.any(p < -1e-10):
        warnings.warn(f"negative occupation {p.min():.3e} clipped to zero", RuntimeWarning,
                      stacklevel=2)
    np.clip(p, 0.0, None, out=p)
    return p


def phonon_stats(p: np.ndarray | None = None, *, n1: np.ndarray | None = None,
                 n2: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the phonon number.

    Either pass occupation vectors ``p`` (last axis is ``n``), or the first
    and second moments ``n1 = <n>`` and ``n2 = <n^2>`` as series.
    """
    if p is not None:
        p = np.asarray(p, dtype=float)
        n = np.arange(p.shape[-1], dtype=float)
        norm = p.sum(axis=-1)
        n1 = (p * n).sum(axis=-1) / norm
        n2 = (p * n * n).sum(axis=-1) / norm
    elif n1 is None or n2 is None:
        raise ValueError("give either occupations or both moments")
    n1 = np.asarray(n1, dtype=float)
    var = np.asarray(n2, dtype=float) - n1**2
    return n1, np.clip(var, 0.0, None)


def detect_conditioning(times: np.ndarray, var: np.ndarray, threshold: float,
                        hold: float) -> float | None:
    """First time after which ``var`` stays below ``threshold`` for ``hold``.

    The entry time is linearly interpolated between the last sample at or
    above the threshold and the first one below it. Returns ``None`` if the
    series never settles.
    """
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    t = np.asarray(times, dtype=float)
    v = np.asarray(var, dtype=float)
    if t.shape != v.shape:
        raise ValueError("times and var must have the same shape")
    below = v < threshold
    if not below.any():
        return None
    # start index of each run of consecutive below-threshold samples
    edges = np.diff(np.concatenate(([0], below.view(np.int8), [0])))
    starts = np.nonzero(edges == 1)[0]
    stops = np.nonzero(edges == -1)[0]  # exclusive
    for a, b in zip(starts, stops):
        if a == 0:
            t0 = t[0]
        else:
            v0, v1 = v[a - 1], v[a]
            t0 = t[a - 1] + (v0 - threshold) / (v0 - v1) * (t[a] - t[a - 1])
        # the run must last for hold; a run reaching the end counts only if long enough
        t_end = t[b] if b < len(t) else t[-1]
        if t_end - t0 >= hold:
            return float(t0)
    return None


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings for :func:`estimate_phonon_from_record`.

    Parameters
    ----------
    window : float
        Length of one estimation window (s). Windows do not overlap.
    n_levels : int
        Comb size, frequencies ``2 (delta + chi n)`` for ``n < n_levels``.
    threshold : float
        Confidence needed for an estimate to count as determined.
    subwindow : float, optional
        Segment length for Welch-style power averaging inside a window. The
        qubit precession loses phase coherence on the measurement time, so
        incoherent averaging of short segments beats one long transform.
        Defaults to the whole window.
    mode : {"lockin", "periodogram"}
        Comb lock-in bank, or a dense frequency scan with peak picking.
    resolution : float, optional
        Grid spacing in rad/s for periodogram mode; defaults to a quarter of
        the segment's Fourier spacing.
    """

    window: float
    n_levels: int = 20
    threshold: float = 0.5
    subwindow: float | None = None
    mode: str = "lockin"
    resolution: float | None = None

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError("window must be > 0")
        if self.n_levels < 2:
            raise ValueError("need at least two comb levels")
        if not 0 <= self.threshold < 1:
            raise ValueError("threshold must lie in [0, 1)")
        if self.subwindow is not None and not 0 < self.subwindow <= self.window:
            raise ValueError("subwindow must lie in (0, window]")
        if self.mode not in ("lockin", "periodogram"):
            raise ValueError(f"unknown estimator mode {self.mode!r}")
        if self.resolution is not None and not self.resolution > 0:
            raise ValueError("resolution must be > 0")

    @property
    def segment(self) -> float:
        return self.window if self.subwindow is None else self.subwindow


@dataclass(frozen=True)
class PhononEstimate:
    times: np.ndarray          # window centres
    n: np.ndarray              # best level per window
    confidence: np.ndarray
    threshold: float

    @property
    def determined(self) -> np.ndarray:
        return self.confidence >= self.threshold


def _confidence(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        r = first / second
    c = 1.0 - 1.0 / r
    c = np.where(np.isfinite(c), c, np.where(first > 0, 1.0, 0.0))
    return np.clip(c, 0.0, 1.0)


def _local_maxima(P: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index and height of the highest local maximum, and the runner-up height."""
    pad = np.pad(P, [(0, 0)] * (P.ndim - 1) + [(1, 1)], constant_values=-np.inf)
    peak = (P >= pad[..., :-2]) & (P > pad[..., 2:])
    masked = np.where(peak, P, -np.inf)
    order = np.argsort(masked, axis=-1)
    top = np.take_along_axis(masked, order[..., -1:], -1)[..., 0]
    nxt = np.take_along_axis(masked, order[..., -2:-1], -1)[..., 0]
    return order[..., -1], top, np.where(np.isfinite(nxt), nxt, 0.0)


def estimate_phonon_from_record(dr: np.ndarray, dt: float, chi: float, delta: float,
                                cfg: EstimatorConfig) -> PhononEstimate:
    """Window-by-window phonon number from a homodyne record.

    Parameters
    ----------
    dr : ndarray
        Record increments on a uniform grid of spacing ``dt``.
    chi, delta : float
        Dispersive shift and qubit detuning (rad/s).
    cfg : EstimatorConfig

    Returns
    -------
    PhononEstimate
        One entry per complete window. Confidence is ``1 - 1/r`` (floored at
        zero), ``r`` the ratio of the strongest to the second strongest
        spectral peak.
    """
    dr = np.asarray(dr, dtype=float)
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if not chi > 0:
        raise ValueError("chi must be > 0")
    seg = int(round(cfg.segment / dt))
    per = int(round(cfg.window / cfg.segment))
    if seg < 1 or cfg.window < dt:
        raise ValueError("window shorter than one record sample")
    if 2 * chi * seg * dt < 2 * math.pi:
        raise ValueError(
            f"segment {seg * dt:.3g} s cannot resolve the comb spacing 2*chi={2 * chi:.3g} rad/s")
    m = seg * per
    n_win = len(dr) // m
    if n_win < 1:
        raise ValueError("record shorter than one estimation window")
    x = dr[: n_win * m].reshape(n_win, per, seg)
    tau = dt * np.arange(seg)

    if cfg.mode == "lockin":
        omega = 2.0 * (delta + chi * np.arange(cfg.n_levels))
    else:
        top = 2.0 * (abs(delta) + chi * cfg.n_levels)
        res = cfg.resolution or 0.25 * 2 * math.pi / (seg * dt)
        omega = np.arange(0.0, top + res, res)
    phasor = np.exp(-1j * np.outer(omega, tau))                  # (K, seg)
    power = np.abs(x @ phasor.T) ** 2                              # (win, per, K)
    power = power.mean(axis=1)

    if cfg.mode == "lockin":
        order = np.argsort(power, axis=-1)
        best = order[:, -1]
        p1 = np.take_along_axis(power, order[:, -1:], 1)[:, 0]
        p2 = np.take_along_axis(power, order[:, -2:-1], 1)[:, 0]
        n_hat = best
    else:
        idx, p1, p2 = _local_maxima(power)
        n_hat = np.rint((omega[idx] / 2 - delta) / chi).astype(int)
        n_hat = np.clip(n_hat, 0, None)
    centres = (np.arange(n_win) + 0.5) * m * dt
    return PhononEstimate(centres, n_hat.astype(int), _confidence(p1, p2), cfg.threshold)


@dataclass(frozen=True)
class JumpEvent:
    time: float
    n_before: int
    n_after: int
    confidence: float

    def __post_init__(self):
        if self.n_before == self.n_after:
            raise ValueError("a jump must change the level")
        if self.n_before < 0 or self.n_after < 0:
            raise ValueError("levels must be >= 0")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def detect_jumps(times: np.ndarray, n: np.ndarray, debounce: float,
                 confidence: np.ndarray | None = None) -> list[JumpEvent]:
    """Debounced change points of the rounded level series.

    A new level is accepted once it has persisted for ``debounce``; the event
    time is when it first appeared. Per-sample ``confidence`` (e.g. from the
    estimator) is averaged over the debounce interval; steps of more than
    one level are unphysical for weak damping, so their confidence is divided
    by the step size squared.
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(n, dtype=float)
    if t.shape != x.shape:
        raise ValueError("times and levels must have the same shape")
    if not np.all(np.isfinite(x)):
        raise ValueError("level series must be finite")
    if not debounce >= 0:
        raise ValueError("debounce must be >= 0")
    c = np.ones_like(x) if confidence is None else np.asarray(confidence, dtype=float)
    lv = np.clip(np.rint(x), 0, None).astype(int)
    if len(lv) == 0:
        return []

    # run-length encode the rounded series
    cut = np.nonzero(np.diff(lv))[0] + 1
    starts = np.concatenate(([0], cut))
    ends = np.concatenate((cut, [len(lv)]))
    dur = np.where(ends < len(lv), t[np.minimum(ends, len(t) - 1)], t[-1]) - t[starts]

    events: list[JumpEvent] = []
    current = None
    for a, b, d in zip(starts, ends, dur):
        level = int(lv[a])
        stable = d >= debounce if b < len(lv) else d >= debounce or current is None
        if not stable:
            continue
        if current is None:
            current = level
        elif level != current:
            step = abs(level - current)
            in_window = (t >= t[a]) & (t <= t[a] + debounce)
            conf = float(np.mean(c[in_window])) if in_window.any() else float(c[a])
            events.append(JumpEvent(float(t[a]), current, level,
                                    float(np.clip(conf / step**2, 0.0, 1.0))))
            current = level
    return events


def post_conditioning_amplitude(times: np.ndarray, var: np.ndarray, t_cond: float) -> float:
    """Root-mean-square of ``Var(b^+b)`` after conditioning.

    For a perfectly conditioned Fock state the variance is zero, so the RMS
    about zero measures how far the state wanders from a number state.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(var, dtype=float)
    sel = t >= t_cond
    if not sel.any():
        raise ValueError("no samples after the conditioning time")
    return float(np.sqrt(np.mean(v[sel] ** 2)))


@dataclass(frozen=True)
class EnsembleStats:
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    p10: np.ndarray
    p50: np.ndarray
    p90: np.ndarray
    n_traj: int
    fingerprint: str
    reference: np.ndarray | None = None
    mismatch: np.ndarray | None = field(default=None)

    @property
    def consistent(self) -> bool:
        return self.mismatch is None or not bool(self.mismatch.any())


def ensemble_stats(records: Sequence[TrajectoryRecord], observable: str = "n_mean",
                   reference: np.ndarray | None = None, n_se: float = 3.0) -> EnsembleStats:
    """Pointwise mean, standard error and 10/50/90 percentiles.

    Records are sorted by trajectory index first so the result does not
    depend on completion order. ``reference`` (e.g. the unconditional curve
    on the same time grid) is flagged wherever it leaves the
    ``n_se``-standard-error band.
    """
    if len(records) < 2:
        raise ValueError("need at least two trajectories")
    fps = {r.fingerprint for r in records}
    if len(fps) != 1:
        raise ValueError(f"refusing to aggregate different specs: {sorted(fps)}")
    recs = sorted(records, key=lambda r: (r.traj_index, r.seed))
    t = recs[0].times
    for r in recs[1:]:
        if not np.array_equal(r.times, t):
            raise ValueError("trajectories are sampled on different time grids")
    if observable not in recs[0].observables:
        raise KeyError(f"unknown observable {observable!r}")
    Y = np.stack([r.observables[observable] for r in recs])
    mean = Y.mean(axis=0)
    se = Y.std(axis=0, ddof=1) / math.sqrt(len(recs))
    p10, p50, p90 = np.percentile(Y, [10, 50, 90], axis=0)
    mismatch = None
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        if reference.shape != mean.shape:
            raise ValueError("reference curve must match the sample grid")
        mismatch = np.abs(reference - mean) > n_se * se
    return EnsembleStats(t, mean, se, p10, p50, p90, len(recs), fps.pop(), reference, mismatch)
