"""Electronic polarization controller model and QBER-driven gradient descent."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .channel import DriftTrajectory, apply_misalignment, rotation
from .model import Rng, jones_vectors
from .sync import SyncError

log = logging.getLogger(__name__)

# fiber-squeezer axes on the sphere: x, y, x (Euler-complete)
DEFAULT_AXES = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0))


class ObjectiveError(RuntimeError):
    pass


@dataclass(frozen=True)
class EpcState:
    # near mid-range, away from the rails; exactly (v_pi, v_pi, v_pi) is a
    # pi-rotation about y, a critical point when the drift is small
    voltages: tuple[float, float, float] = (1.5, 2.5, 2.0)
    v_pi: float = 2.0
    axes: tuple[tuple[float, float, float], ...] = DEFAULT_AXES

    @property
    def v_max(self) -> float:
        return 2.0 * self.v_pi

    def with_voltages(self, v) -> "EpcState":
        return replace(self, voltages=tuple(float(x) for x in v))


def clamp_voltages(v, v_max: float) -> np.ndarray:
    return np.clip(np.asarray(v, dtype=float), 0.0, v_max)


def epc_unitary(state: EpcState) -> np.ndarray:
    """Channel 1 acts first: ``U = R3 R2 R1`` with angle ``pi v_j / v_pi`` about axis j."""
    v = np.asarray(state.voltages, dtype=float)
    clamped = clamp_voltages(v, state.v_max)
    if np.any(clamped != v):
        log.warning("EPC voltage(s) %s outside [0, %g]; clamped", v.tolist(), state.v_max)
    u = np.eye(2, dtype=complex)
    for volt, axis in zip(clamped, state.axes):
        a = np.asarray(axis, dtype=float)
        u = rotation(a / np.linalg.norm(a) * (math.pi * volt / state.v_pi)) @ u
    return u


@dataclass(frozen=True)
class FeedbackConfig:
    qber_threshold: float = 0.02
    step_v: float = 0.05
    lr: float = 0.5
    max_iters: int = 200
    interval_s: float = 150.0
    probe_repeats: int = 1  # >1 averages re-drawn probes (noise-robust variant)
    rail_mode: str = "clamp"  # or "wrap": reset by 2 v_pi (a 2 pi rotation) at a rail

    def __post_init__(self):
        if not 0 < self.qber_threshold < 0.5:
            raise ValueError("qber_threshold must lie in (0, 0.5)")
        if self.lr <= 0 or self.step_v <= 0:
            raise ValueError("lr and step_v must be positive")
        if self.max_iters < 1 or self.probe_repeats < 1:
            raise ValueError("max_iters and probe_repeats must be >= 1")
        if self.rail_mode not in ("clamp", "wrap"):
            raise ValueError("rail_mode must be 'clamp' or 'wrap'")


class Measurement(NamedTuple):
    qber_z: float
    qber_x: float
    combined: float


@dataclass
class World:
    """Frozen snapshot of the channel and the disclosed bits used for estimation.

    Each disclosed bit carries a fixed uniform draw, so the estimate is a
    deterministic (piecewise-constant) function of the EPC voltages.
    """

    drift: np.ndarray
    e_mis: float
    basis: np.ndarray
    bit: np.ndarray
    u: np.ndarray
    min_samples: int = 500
    _psi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._psi = jones_vectors(self.basis, self.bit)
        if self.basis.size < self.min_samples:
            log.warning("only %d disclosed bits in snapshot; objective will be noisy", self.basis.size)

    @property
    def n_z(self) -> int:
        return int(np.sum(self.basis == 0))

    @property
    def n_x(self) -> int:
        return int(np.sum(self.basis == 1))

    def total_unitary(self, epc: np.ndarray) -> np.ndarray:
        return epc @ self.drift

    def error_probabilities(self, epc: np.ndarray) -> np.ndarray:
        # Bob only keeps same-basis bits, so error = leakage out of the sent state
        out = self._psi @ self.total_unitary(epc).T
        amp = np.einsum("ni,ni->n", self._psi.conj(), out)
        return 1.0 - apply_misalignment(np.clip(np.abs(amp) ** 2, 0.0, 1.0), self.e_mis)

    def measure(self, epc: np.ndarray, variant: int = 0) -> Measurement:
        """Measured QBER; ``variant`` k reuses the draws cyclically shifted by k."""
        if self.basis.size == 0:
            raise ObjectiveError("no disclosed bits in snapshot")
        u = np.roll(self.u, variant) if variant else self.u
        err = u < self.error_probabilities(epc)
        z = self.basis == 0
        n_z, n_x = int(z.sum()), int((~z).sum())
        e_z, e_x = int(err[z].sum()), int(err[~z].sum())
        return Measurement(
            e_z / n_z if n_z else math.nan,
            e_x / n_x if n_x else math.nan,
            (e_z + e_x) / (n_z + n_x),
        )

    def surrogate(self, epc: np.ndarray) -> Measurement:
        """Infinite-sample QBER from Born probabilities, same Z/X weighting."""
        tot = self.total_unitary(epc)
        q = []
        for b in (0, 1):
            psi = jones_vectors(np.array([b, b]), np.array([0, 1]))
            amp = np.einsum("ni,ni->n", psi.conj(), psi @ tot.T)
            q.append(float(np.mean(1.0 - apply_misalignment(np.abs(amp) ** 2, self.e_mis))))
        n_z, n_x = self.n_z, self.n_x
        w = n_z / (n_z + n_x) if n_z + n_x else 0.5
        return Measurement(q[0], q[1], w * q[0] + (1 - w) * q[1])


def make_world(drift: np.ndarray, e_mis: float, n_z: int, n_x: int, rng: Rng) -> World:
    gen = rng.generator()
    basis = np.concatenate([np.zeros(n_z, dtype=np.int8), np.ones(n_x, dtype=np.int8)])
    bit = gen.integers(0, 2, size=basis.size, dtype=np.int8)
    return World(np.asarray(drift, dtype=complex), e_mis, basis, bit, gen.random(basis.size))


def objective(v, world: World, base: EpcState | None = None, repeats: int = 1) -> float:
    """Combined disclosed-bit QBER with the EPC at voltages ``v``.

    ``repeats`` > 1 averages that many deterministic re-draws of the snapshot.
    """
    base = base or EpcState()
    u = epc_unitary(base.with_voltages(v))
    return float(np.mean([world.measure(u, k).combined for k in range(repeats)]))


def surrogate_objective(v, world: World, base: EpcState | None = None) -> float:
    base = base or EpcState()
    return world.surrogate(epc_unitary(base.with_voltages(v))).combined


class StepResult(NamedTuple):
    state: EpcState
    gradient: np.ndarray
    probes: np.ndarray  # (channel, [minus, plus])


def finite_difference_gradient(f: Callable[[np.ndarray], float], v: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    grad = np.zeros(v.size)
    probes = np.zeros((v.size, 2))
    for j in range(v.size):
        e = np.zeros(v.size)
        e[j] = h
        lo, hi = f(v - e), f(v + e)
        probes[j] = (lo, hi)
        grad[j] = (hi - lo) / (2 * h)
    return grad, probes


def feedback_step(
    state: EpcState,
    cfg: FeedbackConfig,
    world: World | Callable[[np.ndarray], float],
) -> StepResult:
    """One central-difference gradient step on the EPC voltages."""
    if isinstance(world, World):
        f = lambda v: objective(v, world, state, cfg.probe_repeats)
    else:
        f = world
    v = np.asarray(state.voltages, dtype=float)
    # probes never leave the rails
    v_probe = np.clip(v, cfg.step_v, state.v_max - cfg.step_v)
    grad, probes = finite_difference_gradient(f, v_probe, cfg.step_v)
    new_v = v - cfg.lr * grad
    if cfg.rail_mode == "wrap":
        new_v = np.mod(new_v, state.v_max)
    else:
        new_v = clamp_voltages(new_v, state.v_max)
    return StepResult(state.with_voltages(new_v), grad, probes)


class ConvergenceResult(NamedTuple):
    state: EpcState
    measurement: Measurement
    iterations: int
    converged: bool


def converge(state: EpcState, cfg: FeedbackConfig, world: World, max_iters: int | None = None) -> ConvergenceResult:
    """Step until the measured QBER falls below threshold or the cap is hit."""
    max_iters = cfg.max_iters if max_iters is None else max_iters
    m = world.measure(epc_unitary(state))
    it = 0
    while m.combined >= cfg.qber_threshold and it < max_iters:
        state = feedback_step(state, cfg, world).state
        m = world.measure(epc_unitary(state))
        it += 1
    return ConvergenceResult(state, m, it, m.combined < cfg.qber_threshold)


class FeedbackSample(NamedTuple):
    t_s: float
    qber_z: float
    qber_x: float
    v1: float
    v2: float
    v3: float


CSV_COLUMNS = ("t_s", "qber_z", "qber_x", "v1", "v2", "v3")


def run_feedback_loop(
    duration_s: float,
    drift: DriftTrajectory,
    cfg: FeedbackConfig,
    rng: Rng,
    e_mis: float = 0.01,
    n_z: int = 4000,
    n_x: int = 1000,
    state: EpcState | None = None,
    world_factory: Callable[[float, np.ndarray, Rng], World] | None = None,
    compensate: bool = True,
) -> list[FeedbackSample]:
    """Feedback every ``interval_s`` over a drifting channel.

    Each sample records the QBER measured on that interval's snapshot after
    the correction finished. ``compensate=False`` logs the uncompensated
    QBER with the EPC held fixed.
    """
    state = state or EpcState()
    if world_factory is None:
        world_factory = lambda t, u, r: make_world(u, e_mis, n_z, n_x, r)
    out: list[FeedbackSample] = []
    n_steps = int(math.floor(duration_s / cfg.interval_s + 1e-9))
    for k in range(n_steps):
        t = k * cfg.interval_s
        try:
            world = world_factory(t, drift(t), rng.fork(f"interval-{k}"))
        except SyncError as exc:
            log.warning("t=%.1f s: sync lost (%s); interval skipped", t, exc)
            continue
        if compensate:
            result = converge(state, cfg, world)
            state, m = result.state, result.measurement
        else:
            m = world.measure(epc_unitary(state))
        out.append(FeedbackSample(t, m.qber_z, m.qber_x, *state.voltages))
    return out


def write_feedback_csv(samples: list[FeedbackSample], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for s in samples:
            w.writerow([f"{s.t_s:.6f}", f"{s.qber_z:.6f}", f"{s.qber_x:.6f}", f"{s.v1:.6f}", f"{s.v2:.6f}", f"{s.v3:.6f}"])
