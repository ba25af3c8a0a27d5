"""Lossy fiber with polarization drift, and a four-detector passive-basis receiver.

Polarization states live on the Bloch sphere with H/V at the poles; the Z
basis states of the transmitter sit at +/-x and the X basis states at +/-y.
Unitaries are SU(2) elements ``exp(-i r.sigma / 2)`` for a rotation vector
``r`` (angle |r| on the sphere).
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .model import Intensity, ProtocolConfig, Rng, jones_vectors
from .transmitter import FramePlan

log = logging.getLogger(__name__)

SIGMA = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)
IDENTITY = np.eye(2, dtype=complex)


def rotation(rvec) -> np.ndarray:
    """SU(2) matrix for rotation vector(s) ``rvec`` of shape (3,) or (n, 3)."""
    r = np.asarray(rvec, dtype=float)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    angle = np.linalg.norm(r, axis=1)
    safe = np.where(angle > 0, angle, 1.0)
    n = r / safe[:, None]
    c = np.cos(angle / 2)[:, None, None]
    s = np.sin(angle / 2)[:, None, None]
    ns = np.einsum("ni,ijk->njk", n, SIGMA)
    u = c * IDENTITY[None] - 1j * s * ns
    return u[0] if single else u


def axis_rotation(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    return rotation(a / np.linalg.norm(a) * angle)


def is_unitary(u: np.ndarray, atol: float = 1e-12) -> bool:
    if u.ndim == 2:
        u = u[None]
    prod = np.einsum("nij,nkj->nik", u, u.conj())
    return bool(np.all(np.abs(prod - IDENTITY) < atol))


def apply_misalignment(p0, e_mis: float):
    """Mix a bit-0 probability with its flip: ``e_mis + (1 - 2 e_mis) p0``.

    Models finite polarization visibility (extinction ratio, state-prep
    error). Unlike a frame rotation it cannot be undone by the EPC, so
    ``e_mis`` is the floor of the QBER in both bases.
    """
    if not 0 <= e_mis <= 0.5:
        raise ValueError("e_mis must lie in [0, 0.5]")
    return e_mis + (1.0 - 2.0 * e_mis) * np.asarray(p0)


def random_unitary(gen: np.random.Generator) -> np.ndarray:
    """Haar-random SU(2) element."""
    q = gen.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([[a + 1j * b, c + 1j * d], [-c + 1j * d, a - 1j * b]])


# --------------------------------------------------------------------------
# Drift
# --------------------------------------------------------------------------

class DriftTrajectory:
    """Time-parameterised polarization rotation ``t -> U(t)``.

    Calling with an array of times returns an ``(n, 2, 2)`` stack.
    """

    def __init__(self, kind: str, fn: Callable[[np.ndarray], np.ndarray], params: dict):
        self.kind = kind
        self._fn = fn
        self.params = params

    def rvec(self, t) -> np.ndarray:
        return self._fn(np.atleast_1d(np.asarray(t, dtype=float)))

    def __call__(self, t) -> np.ndarray:
        scalar = np.ndim(t) == 0
        u = rotation(self.rvec(t))
        if self.params.get("base") is not None:
            u = u @ self.params["base"]
        return u[0] if scalar else u

    def angle(self, t) -> np.ndarray:
        return np.linalg.norm(self.rvec(t), axis=1)


class _RandomWalkPath:
    def __init__(self, step: float, dt: float, gen: np.random.Generator):
        self.step = step
        self.dt = dt
        self.gen = gen
        self.points = np.zeros((1, 3))

    def _extend(self, n_points: int) -> None:
        while self.points.shape[0] < n_points:
            k = max(n_points - self.points.shape[0], self.points.shape[0])
            inc = self.gen.normal(scale=self.step * math.sqrt(self.dt / 3.0), size=(k, 3))
            self.points = np.vstack([self.points, self.points[-1] + np.cumsum(inc, axis=0)])

    def __call__(self, t: np.ndarray) -> np.ndarray:
        if np.any(t < 0):
            raise ValueError("random-walk drift defined for t >= 0")
        pos = t / self.dt
        i = np.floor(pos).astype(np.int64)
        self._extend(int(i.max()) + 2 if i.size else 1)
        w = (pos - i)[:, None]
        return (1 - w) * self.points[i] + w * self.points[i + 1]


def drift_trajectory(kind: str, params: dict | None = None, rng: Rng | None = None) -> DriftTrajectory:
    """Build a drift trajectory.

    kinds and params:
      ``static``      axis (3-vector, default z), angle (rad)
      ``sinusoidal``  axis, amplitude (rad), period (s); identity at t = 0
      ``random-walk`` step (rad/sqrt(s)), dt (s, grid step, default 1.0);
                      isotropic Brownian rotation vector, E[angle^2] = step^2 t
    Any kind also accepts ``base``: a fixed 2x2 unitary applied first.
    """
    params = dict(params or {})
    axis = np.asarray(params.get("axis", (0.0, 0.0, 1.0)), dtype=float)
    if kind != "random-walk":
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ValueError("drift axis must be non-zero")
        axis = axis / norm
    if kind == "static":
        angle = float(params.get("angle", 0.0))
        fn = lambda t: np.tile(axis * angle, (t.size, 1))
    elif kind == "sinusoidal":
        amp = float(params.get("amplitude", 0.0))
        period = float(params.get("period", 1.0))
        if period <= 0:
            raise ValueError("period must be positive")
        fn = lambda t: (amp * np.sin(2 * np.pi * t / period))[:, None] * axis[None, :]
    elif kind == "random-walk":
        step = float(params.get("step", 0.0))
        dt = float(params.get("dt", 1.0))
        if step < 0 or dt <= 0:
            raise ValueError("random-walk needs step >= 0 and dt > 0")
        if rng is None:
            raise ValueError("random-walk drift needs an Rng")
        fn = _RandomWalkPath(step, dt, rng.generator())
    else:
        raise ValueError(f"unknown drift kind {kind!r}")
    return DriftTrajectory(kind, fn, params)


# --------------------------------------------------------------------------
# Channel, detector and clock models
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelModel:
    loss_db: float = 18.07
    background_rate: float = 0.0
    e_mis: float = 0.01
    drift: DriftTrajectory | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.loss_db < 0:
            raise ValueError("loss_db must be >= 0")
        if self.background_rate < 0:
            raise ValueError("background_rate must be >= 0")
        if not 0 <= self.e_mis <= 0.5:
            raise ValueError("e_mis must lie in [0, 0.5]")

    @property
    def transmittance(self) -> float:
        return 10.0 ** (-self.loss_db / 10.0)

    def unitary(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.drift is None:
            return np.broadcast_to(IDENTITY, (t.size, 2, 2))
        return self.drift(t)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.60
    dead_time_s: float = 40e-9
    jitter_sigma_s: float = 30e-12
    dark_rate_hz: float = 40.0
    # receiver-internal optical loss ahead of the detectors (filters, EPC, analyser)
    insertion_loss_db: float = 0.0

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must lie in (0, 1]")
        if self.dead_time_s < 0 or self.jitter_sigma_s < 0 or self.dark_rate_hz < 0:
            raise ValueError("dead_time_s, jitter_sigma_s and dark_rate_hz must be >= 0")
        if self.insertion_loss_db < 0:
            raise ValueError("insertion_loss_db must be >= 0")

    @property
    def eta(self) -> float:
        """Receiver-side transmittance times detection efficiency."""
        return self.efficiency * 10.0 ** (-self.insertion_loss_db / 10.0)


@dataclass(frozen=True)
class ReceiverClock:
    """Bob's time base: ``t_bob = t_alice (1 + drift_ppm e-6) + ramp + offset_s``.

    ``ppm_per_s`` adds a linear frequency ramp. The offset is restricted to
    less than one frame, which is what lets frame offsets resolve absolute
    slot indices (coarse start-of-run agreement is assumed).
    """

    offset_s: float = 0.0
    drift_ppm: float = 0.0
    ppm_per_s: float = 0.0

    def __post_init__(self):
        if abs(self.drift_ppm) > 100:
            raise ValueError("|drift_ppm| must be <= 100")
        if self.offset_s < 0:
            raise ValueError("offset_s must be >= 0")

    def to_bob(self, t_alice: np.ndarray) -> np.ndarray:
        t = np.asarray(t_alice, dtype=float)
        return t * (1 + self.drift_ppm * 1e-6) + 0.5e-6 * self.ppm_per_s * t * t + self.offset_s


class DetectionEvent(NamedTuple):
    timestamp_s: float
    detector: int
    truth_slot: int | None


@dataclass
class DetectionEvents:
    """Columnar list of detection events, sorted by timestamp.

    ``truth_slot`` is simulation metadata (-1 for dark counts); synchronisation
    never reads it.
    """

    timestamp_s: np.ndarray
    detector: np.ndarray
    truth_slot: np.ndarray | None = None

    def __post_init__(self):
        self.timestamp_s = np.asarray(self.timestamp_s, dtype=np.float64)
        self.detector = np.asarray(self.detector, dtype=np.int8)
        if self.truth_slot is not None:
            self.truth_slot = np.asarray(self.truth_slot, dtype=np.int64)
        if self.timestamp_s.shape != self.detector.shape:
            raise ValueError("timestamp and detector arrays differ in length")

    def __len__(self) -> int:
        return self.timestamp_s.size

    def __iter__(self) -> Iterator[DetectionEvent]:
        truth = self.truth_slot if self.truth_slot is not None else [None] * len(self)
        for t, d, s in zip(self.timestamp_s.tolist(), self.detector.tolist(), list(truth)):
            yield DetectionEvent(t, d, None if s is None or s < 0 else int(s))

    def take(self, idx) -> "DetectionEvents":
        return DetectionEvents(
            self.timestamp_s[idx],
            self.detector[idx],
            None if self.truth_slot is None else self.truth_slot[idx],
        )

    def strip_truth(self) -> "DetectionEvents":
        return DetectionEvents(self.timestamp_s, self.detector, None)

    @classmethod
    def from_list(cls, events: list[DetectionEvent]) -> "DetectionEvents":
        return cls(
            np.array([e.timestamp_s for e in events], dtype=float),
            np.array([e.detector for e in events], dtype=np.int8),
            np.array([-1 if e.truth_slot is None else e.truth_slot for e in events], dtype=np.int64),
        )


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------

def click_probability(mean_photon, eta_total: float) -> np.ndarray:
    """At least one photon survives loss and detection (Poisson thinning)."""
    return -np.expm1(-np.asarray(mean_photon, dtype=float) * eta_total)


def outcome_probabilities(u: np.ndarray, basis: np.ndarray, bit: np.ndarray, bob_basis: np.ndarray) -> np.ndarray:
    """Born probability of reading bit 0 in ``bob_basis`` after unitary(ies) ``u``."""
    psi = jones_vectors(basis, bit)
    u = np.broadcast_to(u, (psi.shape[0], 2, 2)) if u.ndim == 2 else u
    out = np.einsum("nij,nj->ni", u, psi)
    ref = jones_vectors(bob_basis, np.zeros_like(bob_basis))
    amp = np.einsum("ni,ni->n", ref.conj(), out)
    return np.clip(np.abs(amp) ** 2, 0.0, 1.0)


def pulse_outcome_distribution(
    u: np.ndarray, basis: int, bit: int, mean_photon: float, eta_total: float, e_mis: float = 0.0
) -> np.ndarray:
    """Probabilities of (det0, det1, det2, det3, no-click) for one pulse."""
    pclick = float(click_probability(mean_photon, eta_total))
    out = np.empty(5)
    for b in (0, 1):
        p0 = outcome_probabilities(u, np.array([basis]), np.array([bit]), np.array([b]))[0]
        p0 = float(apply_misalignment(p0, e_mis))
        out[2 * b] = 0.5 * pclick * p0
        out[2 * b + 1] = 0.5 * pclick * (1 - p0)
    out[4] = 1 - pclick
    return out


def _candidate_slots(n_slots: int, p: float, gen: np.random.Generator) -> np.ndarray:
    """Indices of Bernoulli(p) successes over ``range(n_slots)`` via geometric gaps."""
    if p <= 0 or n_slots <= 0:
        return np.empty(0, dtype=np.int64)
    if p >= 1:
        return np.arange(n_slots, dtype=np.int64)
    chunks = []
    pos = -1
    expected = n_slots * p
    while True:
        k = int(expected + 6 * math.sqrt(expected) + 16)
        # clip so astronomically small p cannot overflow the running sum
        gaps = np.minimum(gen.geometric(p, size=k), n_slots + 1)
        idx = pos + np.cumsum(gaps)
        chunks.append(idx[idx < n_slots])
        if idx[-1] >= n_slots:
            break
        pos = int(idx[-1])
        expected = (n_slots - pos) * p
    return np.concatenate(chunks).astype(np.int64)


def apply_dead_time(times: np.ndarray, dead_time: float) -> np.ndarray:
    """Keep-mask for one detector's sorted click times under non-paralysable dead time."""
    keep = np.ones(times.size, dtype=bool)
    if dead_time <= 0 or times.size < 2:
        return keep
    close = np.flatnonzero(np.diff(times) < dead_time) + 1
    for i in close:
        j = i - 1
        while not keep[j]:
            j -= 1
        if times[i] - times[j] < dead_time:
            keep[i] = False
    return keep


def transmit(
    plan: FramePlan,
    ch: ChannelModel,
    det: DetectorModel,
    clk: ReceiverClock,
    cfg: ProtocolConfig,
    rng: Rng,
    epc: np.ndarray | None = None,
    start_slot: int = 0,
    stop_slot: int | None = None,
) -> DetectionEvents:
    """Simulate clicks for the plan's slots ``[start_slot, stop_slot)``.

    Clicks are sampled by thinning: candidate slots are drawn at the signal
    click probability and accepted with ratio ``P_click(k) / P_click(mu)``,
    so only detected pulses are ever evaluated.
    """
    stop_slot = plan.n_slots if stop_slot is None else min(stop_slot, plan.n_slots)
    n = stop_slot - start_slot
    frame_span = plan.cfg.frame_length / cfg.f
    if clk.offset_s >= frame_span - 1.0 / cfg.f:
        raise ValueError("receiver clock offset must stay below one frame minus one slot")
    gen = rng.generator()
    eta_total = ch.transmittance * det.eta
    p_sig = float(click_probability(cfg.mu, eta_total))

    slots = start_slot + _candidate_slots(n, p_sig, gen)
    mean = plan.mean_photon(slots)
    accept = gen.random(slots.size) * p_sig < click_probability(mean, eta_total)
    slots = slots[accept]

    basis = plan.basis(slots)
    bit = plan.bit(slots)
    t_alice = slots / cfg.f
    u = ch.unitary(t_alice)
    if epc is not None:
        u = np.asarray(epc) @ u
    bob_basis = (gen.random(slots.size) >= cfg.p_z_bob).astype(np.int8)
    p0 = apply_misalignment(outcome_probabilities(u, basis, bit, bob_basis), ch.e_mis)
    outcome = (gen.random(slots.size) >= p0).astype(np.int8)
    detector = 2 * bob_basis + outcome
    t_pre = clk.to_bob(t_alice)

    # dark counts and residual background, independent per detector
    rate = det.dark_rate_hz + ch.background_rate / 4.0
    t_lo, t_hi = clk.to_bob(np.array([start_slot / cfg.f, stop_slot / cfg.f]))
    dark_t, dark_d = [], []
    for d in range(4):
        k = gen.poisson(rate * (t_hi - t_lo)) if rate > 0 else 0
        dark_t.append(gen.uniform(t_lo, t_hi, size=k))
        dark_d.append(np.full(k, d, dtype=np.int8))
    times = np.concatenate([t_pre] + dark_t)
    dets = np.concatenate([detector] + dark_d)
    truth = np.concatenate([slots] + [np.full(x.size, -1, dtype=np.int64) for x in dark_t])

    order = np.argsort(times, kind="stable")
    times, dets, truth = times[order], dets[order], truth[order]
    keep = np.ones(times.size, dtype=bool)
    for d in range(4):
        idx = np.flatnonzero(dets == d)
        keep[idx] = apply_dead_time(times[idx], det.dead_time_s)
    times, dets, truth = times[keep], dets[keep], truth[keep]

    if det.jitter_sigma_s > 0:
        times = times + gen.normal(scale=det.jitter_sigma_s, size=times.size)
        order = np.argsort(times, kind="stable")
        times, dets, truth = times[order], dets[order], truth[order]
    return DetectionEvents(times, dets, truth)


def expected_click_rate(cfg: ProtocolConfig, ch: ChannelModel, det: DetectorModel) -> float:
    """Mean detections per slot, signal and dark, for sizing acquisitions."""
    eta_total = ch.transmittance * det.eta
    p_sig = float(click_probability(cfg.mu, eta_total))
    p_dec = float(click_probability(cfg.nu, eta_total))
    q = cfg.q
    per_slot = (1 - q) * p_sig + q * (cfg.p_mu * p_sig + cfg.p_nu * p_dec)
    return per_slot + 4 * (det.dark_rate_hz + ch.background_rate / 4) / cfg.f


# --------------------------------------------------------------------------
# Timetag files
# --------------------------------------------------------------------------

_MAGIC = b"QKDTT01\n"
_TAG_DTYPE = np.dtype([("t_ps", "<i8"), ("detector", "u1")])


def write_timetags(events: DetectionEvents, path: str | Path) -> None:
    """Write events as integer-picosecond timetags; ``.csv`` suffix selects text."""
    path = Path(path)
    t_ps = np.rint(events.timestamp_s * 1e12).astype(np.int64)
    if path.suffix == ".csv":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("timestamp_ps,detector\n")
            for t, d in zip(t_ps.tolist(), events.detector.tolist()):
                fh.write(f"{t},{d}\n")
        return
    rec = np.empty(t_ps.size, dtype=_TAG_DTYPE)
    rec["t_ps"] = t_ps
    rec["detector"] = events.detector
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", rec.size))
        fh.write(rec.tobytes())


def read_timetags(path: str | Path) -> DetectionEvents:
    path = Path(path)
    if path.suffix == ".csv":
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        return DetectionEvents(data[:, 0] * 1e-12, data[:, 1].astype(np.int8))
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a timetag file")
        (n,) = struct.unpack("<Q", fh.read(8))
        rec = np.frombuffer(fh.read(n * _TAG_DTYPE.itemsize), dtype=_TAG_DTYPE)
    if rec.size != n:
        raise ValueError(f"{path}: truncated timetag file")
    return DetectionEvents(rec["t_ps"] * 1e-12, rec["detector"].astype(np.int8))


def expected_sync_detections(cfg: ProtocolConfig, ch: ChannelModel, det: DetectorModel, duration_s: float) -> float:
    """Mean signal clicks on sync slots (any detector) over ``duration_s``."""
    p = float(click_probability(cfg.mu, ch.transmittance * det.eta))
    return duration_s * cfg.f / (cfg.M + 1) * p


def duration_for_sync_detections(cfg: ProtocolConfig, ch: ChannelModel, det: DetectorModel, n_sync: float, z: float = 3.0) -> float:
    """Acquisition time whose sync-click count is at least ``n_sync`` with ~z-sigma margin."""
    target = n_sync + z * math.sqrt(n_sync)
    return target / expected_sync_detections(cfg, ch, det, 1.0)
