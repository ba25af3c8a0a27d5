"""Clock and frame recovery from detection timestamps alone.

Three stages:

1. period recovery: the period maximising the resultant length of event
   phases ``2 pi t / tau`` (equivalently minimising circular variance),
   coarse grid on a short prefix, golden-section refinement on
   progressively longer spans, then a robust least-squares fit of click
   time against slot index over all events;
2. slot assignment: quantise ``(t - t0) / tau`` and gate large residuals;
3. offset estimation: correlate Z-outcome clicks at candidate sync slots
   against the shared code, for every cyclic shift of the frame.

Nothing here reads transmitter ground truth.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .channel import DetectionEvents
from .optim import golden_section
from .transmitter import CorrelationCode

log = logging.getLogger(__name__)

MIN_EVENTS = 100
RESIDUAL_GATE = 0.4
DOMINANCE_SIGMA = 5.0


class SyncError(RuntimeError):
    """Base class for synchronisation failures."""


class InsufficientData(SyncError):
    pass


class PeriodAmbiguity(SyncError):
    pass


class SyncFailure(SyncError):
    def __init__(self, message: str, result: "SyncResult | None" = None):
        super().__init__(message)
        self.result = result


class PeriodFit(NamedTuple):
    tau_b_s: float
    t0_s: float
    resultant: float
    n_events: int


def resultant_length(x: np.ndarray, tau) -> np.ndarray:
    """Mean resultant length of phases ``x / tau`` for one or many periods."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    out = np.empty(tau.size)
    step = max(1, int(4_000_000 // max(x.size, 1)))
    for lo in range(0, tau.size, step):
        ph = 2 * np.pi * (x[None, :] / tau[lo : lo + step, None])
        out[lo : lo + step] = np.hypot(np.cos(ph).sum(axis=1), np.sin(ph).sum(axis=1)) / x.size
    return out


def resultant_on_frequency_grid(x: np.ndarray, f0: float, df: float, n_freq: int, block: int = 256) -> np.ndarray:
    """:func:`resultant_length` at periods ``1 / (f0 + j df)``, ``j < n_freq``.

    ``exp(2 pi i (f0 + (s + j) df) x)`` factors into a per-block carrier and a
    fixed block of small rotations, so each block is one matrix-vector product.
    """
    x = np.asarray(x, dtype=float)
    b = min(block, n_freq)
    rot = np.exp(2j * np.pi * np.outer(np.arange(b) * df, x))
    out = np.empty(n_freq)
    for s in range(0, n_freq, b):
        m = min(b, n_freq - s)
        carrier = np.exp(2j * np.pi * (f0 + s * df) * x)
        out[s : s + m] = np.abs(rot[:m] @ carrier) / x.size
    return out


def circular_spread(x: np.ndarray, tau: float) -> float:
    """Circular variance ``1 - R`` of the event phases at period ``tau``."""
    return float(1.0 - resultant_length(x, tau)[0])


def _epoch(t: np.ndarray, tau: float) -> float:
    tref = t[0]
    x = t - tref
    ph = 2 * np.pi * (x / tau)
    phase = math.atan2(np.sin(ph).sum(), np.cos(ph).sum()) / (2 * np.pi)
    t0 = tref + phase * tau
    return t0 - round(t0 / tau) * tau


def recover_period(
    events: DetectionEvents,
    f_nominal: float,
    window_ppm: float = 100.0,
    coarse_events: int = 256,
    growth: int = 4,
    refine_events: int = 16384,
) -> PeriodFit:
    """Estimate the pulse period and slot-0 epoch from click times.

    Golden-section stages stop once ``refine_events`` events are covered;
    the remaining span is handled by :func:`_fit_time_vs_slot`.
    """
    t = np.sort(np.asarray(events.timestamp_s, dtype=float))
    if t.size < MIN_EVENTS:
        raise InsufficientData(f"need >= {MIN_EVENTS} events for period recovery, got {t.size}")
    tau_nom = 1.0 / f_nominal
    x = t - t[0]

    n = min(t.size, max(coarse_events, MIN_EVENTS))
    k_span = max(x[n - 1] / tau_nom, 1.0)
    # coarse scan is uniform in frequency so phases are linear in the grid index
    df = f_nominal / (8 * k_span)
    half = window_ppm * 1e-6 * f_nominal
    freqs = f_nominal + np.arange(-half, half + df / 2, df)
    r = resultant_on_frequency_grid(x[:n], freqs[0], df, freqs.size)
    best = int(np.argmax(r))
    z_peak = n * r[best] ** 2
    lobe = np.abs(freqs - freqs[best]) > 2 * f_nominal / k_span
    r_side = float(r[lobe].max()) if lobe.any() else 0.0
    if z_peak < 2 * math.log(freqs.size) + 10 or r_side > 0.7 * r[best]:
        raise PeriodAmbiguity(
            f"no sharp period optimum (Rayleigh z={z_peak:.1f}, sidelobe ratio {r_side / max(r[best], 1e-300):.2f})"
        )
    spacing = tau_nom / (8 * k_span)
    tau = float(1.0 / freqs[best])
    h = 1.5 * spacing
    while True:
        tol = min(1e-9 * tau, 1e-4 * tau_nom / k_span)
        tau = golden_section(lambda v: -resultant_length(x[:n], v)[0], tau - h, tau + h, tol)
        if n == t.size or n >= refine_events:
            break
        n = min(t.size, n * growth)
        k_new = max(x[n - 1] / tau_nom, 1.0)
        h = 0.6 * tau_nom / k_new
        k_span = k_new
    t0 = _epoch(t[:n], tau)
    if n < t.size:
        tau, t0 = _fit_time_vs_slot(t, tau, t0)
    rl = float(resultant_length(x, tau)[0])
    return PeriodFit(tau, t0, rl, int(t.size))


def _fit_time_vs_slot(t: np.ndarray, tau: float, t0: float, gate: float = RESIDUAL_GATE) -> tuple[float, float]:
    """Refit ``t = t0 + k tau`` by least squares, rejecting outliers (dark counts).

    Slot indices come from the current estimate, so it must already hold
    phase across the whole span (growth stages guarantee this).
    """
    pos = (t - t0) / tau
    k = np.rint(pos)
    ok = np.abs(pos - k) <= gate
    for _ in range(3):
        kc = k[ok].mean()
        tc = t[ok].mean()
        dk = k[ok] - kc
        slope = float(np.dot(dk, t[ok] - tc) / np.dot(dk, dk))
        resid = t - tc - slope * (k - kc)
        mad = 1.4826 * float(np.median(np.abs(resid[ok])))
        ok = np.abs(resid) <= max(4.0 * mad, 1e-15)
    t0 = tc - slope * kc
    return slope, t0 - round(t0 / slope) * slope


@dataclass
class SlottedEvents:
    """Events that passed the residual gate, with their receiver-side slot."""

    slot: np.ndarray
    detector: np.ndarray
    event_index: np.ndarray
    tau_b_s: float = float("nan")
    t0_s: float = float("nan")
    n_discarded: int = 0

    def __len__(self) -> int:
        return self.slot.size

    def shifted(self, s: int) -> "SlottedEvents":
        return SlottedEvents(self.slot + s, self.detector, self.event_index, self.tau_b_s, self.t0_s, self.n_discarded)


def assign_slots(events: DetectionEvents, tau_b_s: float, t0_s: float, gate: float = RESIDUAL_GATE) -> SlottedEvents:
    t = np.asarray(events.timestamp_s, dtype=float)
    pos = (t - t0_s) / tau_b_s
    slot = np.rint(pos).astype(np.int64)
    ok = np.abs(pos - slot) <= gate
    idx = np.flatnonzero(ok)
    return SlottedEvents(slot[idx], np.asarray(events.detector)[idx], idx, tau_b_s, t0_s, int(t.size - idx.size))


@dataclass
class SyncResult:
    tau_b_s: float
    t0_s: float
    frame_offset: int
    frame_length: int
    score_peak: int
    score_runner_up: int
    votes_at_peak: int
    assigned_event: np.ndarray = field(repr=False)
    assigned_slot: np.ndarray = field(repr=False)
    assigned_detector: np.ndarray = field(repr=False)
    tau_b_err_s: float = float("nan")
    success: bool = True

    @property
    def slot_shift(self) -> int:
        """``d`` such that transmitter slot = receiver slot - d, with d in [0, F)."""
        return (-self.frame_offset) % self.frame_length

    @property
    def assigned(self) -> list[tuple[int, int]]:
        return list(zip(self.assigned_event.tolist(), self.assigned_slot.tolist()))

    def to_dict(self) -> dict:
        return {
            "tau_b_s": self.tau_b_s,
            "tau_b_err_s": self.tau_b_err_s,
            "t0_s": self.t0_s,
            "frame_offset": self.frame_offset,
            "frame_length": self.frame_length,
            "score_peak": self.score_peak,
            "score_runner_up": self.score_runner_up,
            "votes_at_peak": self.votes_at_peak,
            "n_assigned": int(self.assigned_slot.size),
            "success": self.success,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _z_histograms(slotted: SlottedEvents, F: int) -> tuple[np.ndarray, np.ndarray]:
    z = slotted.detector < 2
    pos = np.mod(slotted.slot[z], F)
    bit = slotted.detector[z]
    h0 = np.bincount(pos[bit == 0], minlength=F).astype(np.int64)
    h1 = np.bincount(pos[bit == 1], minlength=F).astype(np.int64)
    return h0, h1


def offset_scores(slotted: SlottedEvents, code: CorrelationCode, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Vote score and vote count for every candidate offset k in [0, F)."""
    L = len(code)
    F = L * (M + 1)
    h0, h1 = _z_histograms(slotted, F)
    diff = h1 - h0
    tot = h1 + h0
    sgn = np.where(code.array == 1, 1, -1).astype(np.int64)
    k = np.arange(F)[:, None]
    j = np.arange(L)[None, :]
    p = (j * (M + 1) - k) % F
    return (diff[p] * sgn[None, :]).sum(axis=1), tot[p].sum(axis=1)


def offset_scores_bruteforce(slotted: SlottedEvents, code: CorrelationCode, M: int) -> np.ndarray:
    """Direct O(D F) re-scoring, one pass over the events per candidate."""
    L = len(code)
    F = L * (M + 1)
    bits = code.array
    scores = np.zeros(F, dtype=np.int64)
    z = slotted.detector < 2
    s = slotted.slot[z]
    b = slotted.detector[z]
    for k in range(F):
        at_sync = (s + k) % (M + 1) == 0
        idx = ((s[at_sync] + k) % F) // (M + 1)
        scores[k] = int(np.where(b[at_sync] == bits[idx], 1, -1).sum())
    return scores


def estimate_offset(
    slotted: SlottedEvents,
    code: CorrelationCode,
    M: int,
    dominance_sigma: float = DOMINANCE_SIGMA,
) -> SyncResult:
    if len(slotted) == 0:
        raise SyncFailure("no slotted events")
    F = len(code) * (M + 1)
    scores, votes = offset_scores(slotted, code, M)
    order = np.argsort(-scores, kind="stable")
    best, second = int(order[0]), int(order[1])
    peak, runner = int(scores[best]), int(scores[second])
    result = SyncResult(
        tau_b_s=slotted.tau_b_s,
        t0_s=slotted.t0_s,
        frame_offset=best,
        frame_length=F,
        score_peak=peak,
        score_runner_up=runner,
        votes_at_peak=int(votes[best]),
        assigned_event=slotted.event_index,
        assigned_slot=slotted.slot,
        assigned_detector=slotted.detector,
    )
    if not (peak > runner and peak >= runner + dominance_sigma * math.sqrt(votes[best])):
        result.success = False
        raise SyncFailure(
            f"correlation peak {peak} not dominant over {runner} (votes {int(votes[best])})", result
        )
    return result


def period_uncertainty(events: DetectionEvents, slotted: SlottedEvents) -> float:
    """Standard error of the period from a least-squares fit of time vs slot."""
    if len(slotted) < 3:
        return float("nan")
    t = np.asarray(events.timestamp_s)[slotted.event_index]
    s = slotted.slot.astype(float)
    sc = s - s.mean()
    denom = float(np.dot(sc, sc))
    if denom == 0:
        return float("nan")
    slope = float(np.dot(sc, t - t.mean())) / denom
    resid = t - t.mean() - slope * sc
    return float(math.sqrt(np.dot(resid, resid) / (s.size - 2) / denom))


def synchronize(
    events: DetectionEvents,
    code: CorrelationCode,
    M: int,
    f_nominal: float,
    window_ppm: float = 100.0,
    gate: float = RESIDUAL_GATE,
    dominance_sigma: float = DOMINANCE_SIGMA,
) -> SyncResult:
    """Period recovery, slot assignment and offset estimation in sequence."""
    fit = recover_period(events, f_nominal, window_ppm)
    slotted = assign_slots(events, fit.tau_b_s, fit.t0_s, gate)
    result = estimate_offset(slotted, code, M, dominance_sigma)
    result.tau_b_err_s = period_uncertainty(events, slotted)
    return result


class PeriodBlock(NamedTuple):
    tau_b_s: float
    t0_s: float
    start: int
    stop: int
    warning: str | None


def track_period(
    events: DetectionEvents,
    block_size: int,
    f_nominal: float,
    window_ppm: float = 100.0,
    max_step_ppm: float = 1.0,
) -> list[PeriodBlock]:
    """Piecewise period recovery over consecutive blocks of events.

    Each block's epoch is shifted by whole periods so that slot numbering
    continues from the previous block.
    """
    t = np.asarray(events.timestamp_s, dtype=float)
    if block_size < MIN_EVENTS:
        raise ValueError(f"block_size must be >= {MIN_EVENTS}")
    n_blocks = max(1, t.size // block_size)
    blocks: list[PeriodBlock] = []
    for b in range(n_blocks):
        lo = b * block_size
        hi = t.size if b == n_blocks - 1 else lo + block_size
        fit = recover_period(events.take(slice(lo, hi)), f_nominal, window_ppm)
        t0 = fit.t0_s
        warning = None
        if blocks:
            prev = blocks[-1]
            n_pred = (t[lo] - prev.t0_s) / prev.tau_b_s
            n_here = (t[lo] - t0) / fit.tau_b_s
            t0 -= round(n_pred - n_here) * fit.tau_b_s
            step = abs(fit.tau_b_s / prev.tau_b_s - 1) * 1e6
            if step >= max_step_ppm:
                warning = f"period changed by {step:.3f} ppm between blocks {b - 1} and {b}"
                log.warning(warning)
        blocks.append(PeriodBlock(fit.tau_b_s, t0, lo, hi, warning))
    return blocks


def alignment_accuracy(events: DetectionEvents, result: SyncResult) -> float:
    """Fraction of assigned signal events whose recovered transmitter slot is right.

    Needs events that still carry ground truth (simulation only); dark counts
    are ignored. NaN when no assigned event has a known slot.
    """
    if events.truth_slot is None:
        raise ValueError("events carry no ground truth")
    truth = events.truth_slot[result.assigned_event]
    known = truth >= 0
    if not known.any():
        return float("nan")
    alice = result.assigned_slot[known] - result.slot_shift
    return float(np.mean(alice == truth[known]))
