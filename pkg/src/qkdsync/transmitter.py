"""Alice's side: correlation code, frame layout and per-slot state assignment.

A frame is ``L_code`` segments of ``M + 1`` slots; the first slot of each
segment carries one code bit (a sync qubit), the remaining ``M`` slots carry
random BB84 states. Plans are lazy: every per-slot attribute is a pure
function of ``(seed, slot)``, so arbitrarily long transmissions never have
to be materialised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import (
    Basis,
    Intensity,
    ProtocolConfig,
    PulseRecord,
    QubitState,
    Rng,
    Role,
    validate_config,
)

MAX_CODE_ATTEMPTS = 1000


class CodeGenerationError(RuntimeError):
    pass


def cyclic_autocorrelation(bits: np.ndarray) -> np.ndarray:
    """Bipolar cyclic autocorrelation: entry s is sum_i x[i] x[i+s mod L], x = 2 bit - 1.

    Shift 0 equals L; this is exactly the expected offset score of a wrong
    cyclic shift per matched sync click.
    """
    x = 2 * np.asarray(bits, dtype=np.int64) - 1
    return np.array([int(np.dot(x, np.roll(x, -s))) for s in range(x.size)])


@dataclass(frozen=True)
class CorrelationCode:
    bits: tuple[int, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.int8)

    def is_balanced(self) -> bool:
        n = len(self.bits)
        return abs(sum(self.bits) - n / 2) <= 3 * np.sqrt(n)

    def max_sidelobe(self) -> int:
        return int(cyclic_autocorrelation(self.array)[1:].max())


def generate_code(L_code: int, rng: Rng) -> CorrelationCode:
    """Draw a random binary code that passes the balance and sidelobe gates."""
    if L_code < 2:
        raise ValueError("L_code must be >= 2")
    gen = rng.generator()
    for _ in range(MAX_CODE_ATTEMPTS):
        bits = gen.integers(0, 2, size=L_code, dtype=np.int8)
        code = CorrelationCode(tuple(int(b) for b in bits), rng.seed)
        if code.is_balanced() and code.max_sidelobe() <= 0.5 * L_code:
            return code
    raise CodeGenerationError(f"no acceptable code of length {L_code} after {MAX_CODE_ATTEMPTS} draws")


class FramePlan:
    """``R`` repetitions of the frame, evaluated lazily per slot.

    Sync slots send the code bit in the Z basis at signal intensity. Key slots
    draw basis, bit and intensity independently from counter-based streams.
    """

    def __init__(self, code: CorrelationCode, cfg: ProtocolConfig, R: int, rng: Rng):
        if R <= 0:
            raise ValueError("empty plan: R must be >= 1")
        if len(code) != cfg.L_code:
            raise ValueError(f"code length {len(code)} != L_code {cfg.L_code}")
        self.code = code
        self.cfg = cfg
        self.R = int(R)
        self._basis_rng = rng.fork("basis")
        self._bit_rng = rng.fork("bit")
        self._intensity_rng = rng.fork("intensity")
        self._code = code.array

    @property
    def n_slots(self) -> int:
        return self.R * self.cfg.frame_length

    def __len__(self) -> int:
        return self.n_slots

    def _slots(self, slots) -> np.ndarray:
        s = np.asarray(slots, dtype=np.int64)
        if s.size and (s.min() < 0 or s.max() >= self.n_slots):
            raise IndexError("slot outside plan")
        return s

    def is_sync(self, slots) -> np.ndarray:
        return self._slots(slots) % (self.cfg.M + 1) == 0

    def role(self, slots) -> np.ndarray:
        return np.where(self.is_sync(slots), int(Role.SYNC), int(Role.KEY)).astype(np.int8)

    def basis(self, slots) -> np.ndarray:
        s = self._slots(slots)
        key_basis = (self._basis_rng.uniform_at(s) >= self.cfg.p_z_alice).astype(np.int8)
        return np.where(s % (self.cfg.M + 1) == 0, np.int8(Basis.Z), key_basis)

    def bit(self, slots) -> np.ndarray:
        s = self._slots(slots)
        key_bit = (self._bit_rng.uniform_at(s) < 0.5).astype(np.int8)
        code_bit = self._code[(s % self.cfg.frame_length) // (self.cfg.M + 1)]
        return np.where(s % (self.cfg.M + 1) == 0, code_bit, key_bit)

    def intensity(self, slots) -> np.ndarray:
        s = self._slots(slots)
        key_int = (self._intensity_rng.uniform_at(s) >= self.cfg.p_mu).astype(np.int8)
        return np.where(s % (self.cfg.M + 1) == 0, np.int8(Intensity.SIGNAL), key_int)

    def mean_photon(self, slots) -> np.ndarray:
        return np.where(self.intensity(slots) == Intensity.SIGNAL, self.cfg.mu, self.cfg.nu)

    def records(self, start: int = 0, stop: int | None = None) -> Iterator[PulseRecord]:
        stop = self.n_slots if stop is None else min(stop, self.n_slots)
        for lo in range(start, stop, 65536):
            s = np.arange(lo, min(lo + 65536, stop))
            for slot, role, basis, bit, inten in zip(
                s.tolist(),
                self.role(s).tolist(),
                self.basis(s).tolist(),
                self.bit(s).tolist(),
                self.intensity(s).tolist(),
            ):
                yield PulseRecord(slot, Role(role), QubitState(Basis(basis), bit), Intensity(inten))

    @property
    def pulses(self) -> list[PulseRecord]:
        return list(self.records())

    def sync_bits(self) -> np.ndarray:
        s = np.arange(0, self.n_slots, self.cfg.M + 1)
        return self.bit(s)

    def export_ndjson(self, path: str | Path, start: int = 0, stop: int | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records(start, stop):
                fh.write(
                    json.dumps(
                        {
                            "slot": rec.slot,
                            "role": rec.role.name.lower(),
                            "basis": rec.state.basis.name,
                            "bit": rec.state.bit,
                            "intensity": rec.intensity.name.lower(),
                        }
                    )
                    + "\n"
                )


def read_plan_ndjson(path: str | Path) -> list[PulseRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                PulseRecord(
                    int(d["slot"]),
                    Role[d["role"].upper()],
                    QubitState(Basis[d["basis"]], int(d["bit"])),
                    Intensity[d["intensity"].upper()],
                )
            )
    return out


def build_frames(code: CorrelationCode, cfg: ProtocolConfig, R: int, rng: Rng) -> FramePlan:
    return FramePlan(code, validate_config(cfg), R, rng)


class DisclosedSet:
    """Slots whose values are revealed publicly: all sync slots plus a
    ``sample_fraction`` of key slots (counter-based, addressable by slot)."""

    def __init__(self, plan: FramePlan, sample_fraction: float, rng: Rng):
        if not 0.0 <= sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in [0, 1]")
        self.plan = plan
        self.sample_fraction = float(sample_fraction)
        self._rng = rng

    def contains(self, slots) -> np.ndarray:
        s = np.asarray(slots, dtype=np.int64)
        sampled = self._rng.uniform_at(s) < self.sample_fraction
        return self.plan.is_sync(s) | sampled

    def __contains__(self, slot: int) -> bool:
        return bool(self.contains(np.array([slot]))[0])

    def positions(self) -> np.ndarray:
        s = np.arange(self.plan.n_slots, dtype=np.int64)
        return s[self.contains(s)]

    def __len__(self) -> int:
        n = 0
        for lo in range(0, self.plan.n_slots, 1 << 22):
            s = np.arange(lo, min(lo + (1 << 22), self.plan.n_slots), dtype=np.int64)
            n += int(self.contains(s).sum())
        return n


def disclosed_positions(plan: FramePlan, sample_fraction: float, rng: Rng) -> DisclosedSet:
    return DisclosedSet(plan, sample_fraction, rng)
