"""Shared domain types, protocol configuration and seeded randomness."""

from __future__ import annotations

import configparser
import dataclasses
import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


class Basis(enum.IntEnum):
    Z = 0
    X = 1


class Role(enum.IntEnum):
    SYNC = 0
    KEY = 1


class Intensity(enum.IntEnum):
    SIGNAL = 0
    DECOY = 1


# Preparation phases, indexed by 2*basis + bit.
PHASES = (0.0, math.pi, math.pi / 2, 3 * math.pi / 2)

# Detector index -> (basis, bit) measurement outcome.
DETECTOR_OUTCOMES = ((Basis.Z, 0), (Basis.Z, 1), (Basis.X, 0), (Basis.X, 1))


class QubitState(NamedTuple):
    basis: Basis
    bit: int

    @property
    def theta(self) -> float:
        return PHASES[2 * int(self.basis) + self.bit]


class PulseRecord(NamedTuple):
    slot: int
    role: Role
    state: QubitState
    intensity: Intensity


def state_from_phase(theta: float, atol: float = 1e-9) -> QubitState:
    """Map a preparation phase in {0, pi/2, pi, 3pi/2} to its basis/bit label."""
    wrapped = math.fmod(theta, 2 * math.pi)
    if wrapped < 0:
        wrapped += 2 * math.pi
    for idx, phase in enumerate(PHASES):
        if abs(wrapped - phase) < atol or abs(wrapped - phase - 2 * math.pi) < atol:
            return QubitState(Basis(idx // 2), idx % 2)
    raise ValueError(f"phase {theta!r} is not one of the four BB84 phases")


def jones_vector(state: QubitState) -> np.ndarray:
    """Polarization Jones vector (|H> + e^{i theta}|V>)/sqrt(2) in the H/V basis."""
    return np.array([1.0, np.exp(1j * state.theta)]) / math.sqrt(2.0)


def jones_vectors(basis: np.ndarray, bit: np.ndarray) -> np.ndarray:
    """Vectorised :func:`jones_vector`; returns an ``(n, 2)`` complex array."""
    theta = np.asarray(PHASES)[2 * np.asarray(basis, dtype=np.int64) + np.asarray(bit, dtype=np.int64)]
    out = np.empty((theta.size, 2), dtype=complex)
    out[:, 0] = 1.0
    out[:, 1] = np.exp(1j * theta)
    return out / math.sqrt(2.0)


@dataclass(frozen=True)
class ProtocolConfig:
    """One-decoy BB84 protocol parameters.

    Defaults follow the measured 18 dB field operating point.
    """

    f: float = 1.0e8
    L_code: int = 64
    M: int = 7
    mu: float = 0.466
    nu: float = 0.127
    p_mu: float = 0.761
    p_z_alice: float = 0.935
    p_z_bob: float = 0.5
    eps_sec: float = 1e-9
    eps_cor: float = 1e-9
    f_e: float = 1.16
    seed: int = 0

    @property
    def frame_length(self) -> int:
        return self.L_code * (self.M + 1)

    @property
    def q(self) -> float:
        """Fraction of slots carrying key (non-sync) qubits."""
        return self.M / (self.M + 1)

    @property
    def p_nu(self) -> float:
        return 1.0 - self.p_mu

    @property
    def tau(self) -> float:
        return 1.0 / self.f

    def replace(self, **changes: Any) -> "ProtocolConfig":
        return dataclasses.replace(self, **changes)


def validate_config(cfg: ProtocolConfig) -> ProtocolConfig:
    """Check every protocol invariant, naming each violation.

    Returns the config unchanged so the call can be chained; validating twice
    is a no-op.
    """
    problems = []
    if not cfg.f > 0:
        problems.append("f must be positive")
    if not 0 < cfg.nu:
        problems.append("nu must be positive")
    if cfg.nu >= cfg.mu:
        problems.append("nu >= mu")
    if not cfg.mu < 1:
        problems.append("mu must be < 1")
    if not 0 < cfg.p_mu < 1:
        problems.append("p_mu must lie in (0, 1)")
    if not 0 < cfg.p_z_alice < 1:
        problems.append("p_z_alice must lie in (0, 1)")
    if cfg.p_z_bob != 0.5:
        problems.append("p_z_bob must equal 0.5")
    if int(cfg.L_code) != cfg.L_code or cfg.L_code < 2:
        problems.append("L_code must be an integer >= 2")
    if int(cfg.M) != cfg.M or cfg.M < 1:
        problems.append("M must be an integer >= 1")
    for name in ("eps_sec", "eps_cor"):
        if not 0 < getattr(cfg, name) < 1:
            problems.append(f"{name} must lie in (0, 1)")
    if not cfg.f_e >= 1:
        problems.append("f_e must be >= 1")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


# --------------------------------------------------------------------------
# Randomness
# --------------------------------------------------------------------------

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; uint64 arithmetic wraps modulo 2**64.
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class Rng:
    """Seeded, splittable randomness.

    ``fork(name)`` derives an independent child stream from the parent's key,
    so a module's draws do not depend on what other modules consumed.
    ``generator()`` gives a sequential numpy Generator; ``uniform_at`` is a
    counter-based draw addressed by integer index (random access into a
    stream, used for lazily evaluated per-slot attributes).
    """

    seed: int
    path: tuple[int, ...] = field(default=())

    def fork(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (_name_key(name),))

    @property
    def key(self) -> int:
        k = np.array([self.seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        for part in self.path:
            k = _mix64(k ^ np.uint64(part))
        return int(_mix64(k + np.uint64(0x9E3779B97F4A7C15))[0])

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))

    def uniform_at(self, index: np.ndarray) -> np.ndarray:
        """Uniform [0, 1) variates addressed by non-negative integer index."""
        idx = np.asarray(index, dtype=np.int64).astype(np.uint64)
        with np.errstate(over="ignore"):
            h = _mix64(idx * np.uint64(0x9E3779B97F4A7C15) + np.uint64(self.key))
            h = _mix64(h ^ np.uint64(self.key))
        return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------

def _coerce(value: str, like: Any) -> Any:
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def read_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    """Read an INI-style ``key = value`` file into ``{section: {key: value}}``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep field-name case (L_code, M)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    return {name: dict(parser[name]) for name in parser.sections()}


def build_dataclass(cls: type, values: dict[str, str] | None, section: str = "") -> Any:
    """Instantiate a dataclass from string values, rejecting unknown keys."""
    values = values or {}
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section or cls.__name__}]: {sorted(unknown)}")
    kwargs = {}
    for name, raw in values.items():
        try:
            kwargs[name] = _coerce(raw, getattr(defaults, name))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {name}: cannot parse {raw!r}") from exc
    return cls(**kwargs)
