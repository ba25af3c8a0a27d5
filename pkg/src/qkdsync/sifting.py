"""Basis sifting and per-basis, per-intensity count accumulation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Basis, Intensity, ProtocolConfig, build_dataclass
from .sync import SyncResult
from .transmitter import DisclosedSet, FramePlan

COUNT_FIELDS = ("n_z_mu", "n_z_nu", "n_x_mu", "n_x_nu", "m_z_mu", "m_z_nu", "m_x_mu", "m_x_nu")


class CountsFileError(ValueError):
    pass


@dataclass(frozen=True)
class CountStatistics:
    n_z_mu: int = 0
    n_z_nu: int = 0
    n_x_mu: int = 0
    n_x_nu: int = 0
    m_z_mu: int = 0
    m_z_nu: int = 0
    m_x_mu: int = 0
    m_x_nu: int = 0
    t_s: float = 0.0
    N_pulses: int = 0

    def __post_init__(self):
        for b in ("z", "x"):
            for k in ("mu", "nu"):
                n, m = getattr(self, f"n_{b}_{k}"), getattr(self, f"m_{b}_{k}")
                if not 0 <= m <= n:
                    raise ValueError(f"need 0 <= m_{b}_{k} <= n_{b}_{k}, got {m} and {n}")

    @property
    def n_z(self) -> int:
        return self.n_z_mu + self.n_z_nu

    @property
    def n_x(self) -> int:
        return self.n_x_mu + self.n_x_nu

    @property
    def m_z(self) -> int:
        return self.m_z_mu + self.m_z_nu

    @property
    def m_x(self) -> int:
        return self.m_x_mu + self.m_x_nu

    @property
    def qber_z(self) -> float:
        return self.m_z / self.n_z if self.n_z else float("nan")

    @property
    def qber_x(self) -> float:
        return self.m_x / self.n_x if self.n_x else float("nan")

    def __add__(self, other: "CountStatistics") -> "CountStatistics":
        vals = {f.name: getattr(self, f.name) + getattr(other, f.name) for f in dataclasses.fields(self)}
        return CountStatistics(**vals)

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path, params: dict | None = None) -> None:
        text = self.to_text()
        if params:
            text += "".join(f"{k} = {v!r}\n" for k, v in params.items())
        Path(path).write_text(text, encoding="utf-8")


def parse_counts(text: str, source: str = "<counts>") -> tuple[CountStatistics, dict[str, str]]:
    """Parse a flat ``key = value`` counts file.

    Keys naming :class:`ProtocolConfig` fields are returned separately so a
    fixture can carry its own operating point.
    """
    stats: dict[str, float | int] = {}
    params: dict[str, str] = {}
    stat_fields = {f.name: f for f in dataclasses.fields(CountStatistics)}
    cfg_fields = {f.name for f in dataclasses.fields(ProtocolConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CountsFileError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in stat_fields:
            try:
                num = float(value)
            except ValueError as exc:
                raise CountsFileError(f"{source}:{lineno}: {key} is not a number: {value!r}") from exc
            if key == "t_s":
                stats[key] = num
            else:
                if num != int(num):
                    raise CountsFileError(f"{source}:{lineno}: {key} must be an integer count")
                stats[key] = int(num)
        elif key in cfg_fields:
            params[key] = value
        else:
            raise CountsFileError(f"{source}:{lineno}: unknown key {key!r}")
    try:
        return CountStatistics(**stats), params
    except ValueError as exc:
        raise CountsFileError(f"{source}: {exc}") from exc


def read_counts(path: str | Path) -> tuple[CountStatistics, dict[str, str]]:
    return parse_counts(Path(path).read_text(encoding="utf-8"), str(path))


def config_with(params: dict[str, str], base: ProtocolConfig | None = None) -> ProtocolConfig:
    base = base or ProtocolConfig()
    merged = {f.name: str(getattr(base, f.name)) for f in dataclasses.fields(base)}
    merged.update(params)
    return build_dataclass(ProtocolConfig, merged, "counts")


@dataclass(frozen=True)
class QberEstimate:
    qber_z: float
    qber_x: float
    n_z: int
    n_x: int
    errors_z: int = 0
    errors_x: int = 0

    @property
    def z_defined(self) -> bool:
        return self.n_z > 0

    @property
    def x_defined(self) -> bool:
        return self.n_x > 0

    @property
    def combined(self) -> float:
        n = self.n_z + self.n_x
        return (self.errors_z + self.errors_x) / n if n else float("nan")


def align(plan: FramePlan, sync: SyncResult) -> tuple[np.ndarray, np.ndarray]:
    """Transmitter slot and detector for every assigned event.

    Slots hit by more than one event are dropped entirely, as are slots that
    fall outside the plan.
    """
    if not sync.success:
        raise ValueError("cannot sift an unsynchronised run")
    alice = sync.assigned_slot - sync.slot_shift
    det = sync.assigned_detector
    ok = (alice >= 0) & (alice < plan.n_slots)
    alice, det = alice[ok], det[ok]
    uniq, inv, cnt = np.unique(alice, return_inverse=True, return_counts=True)
    single = cnt[inv] == 1
    return alice[single], det[single]


def _tally(plan: FramePlan, slots: np.ndarray, det: np.ndarray) -> dict[str, int]:
    a_basis = plan.basis(slots)
    a_bit = plan.bit(slots)
    inten = plan.intensity(slots)
    b_basis = det // 2
    b_bit = det % 2
    match = a_basis == b_basis
    err = a_bit != b_bit
    out = {}
    for bname, bval in (("z", Basis.Z), ("x", Basis.X)):
        for kname, kval in (("mu", Intensity.SIGNAL), ("nu", Intensity.DECOY)):
            sel = match & (a_basis == bval) & (inten == kval)
            out[f"n_{bname}_{kname}"] = int(sel.sum())
            out[f"m_{bname}_{kname}"] = int((sel & err).sum())
    return out


def sift(plan: FramePlan, sync: SyncResult, disclosed: DisclosedSet) -> CountStatistics:
    slots, det = align(plan, sync)
    key = ~plan.is_sync(slots) & ~disclosed.contains(slots)
    counts = _tally(plan, slots[key], det[key])
    return CountStatistics(**counts, t_s=plan.n_slots / plan.cfg.f, N_pulses=plan.n_slots)


def estimate_qber(plan: FramePlan, sync: SyncResult, disclosed: DisclosedSet) -> QberEstimate:
    """QBER over publicly disclosed positions only (sync slots and sampled key slots)."""
    slots, det = align(plan, sync)
    pub = disclosed.contains(slots)
    c = _tally(plan, slots[pub], det[pub])
    n_z = c["n_z_mu"] + c["n_z_nu"]
    n_x = c["n_x_mu"] + c["n_x_nu"]
    e_z = c["m_z_mu"] + c["m_z_nu"]
    e_x = c["m_x_mu"] + c["m_x_nu"]
    return QberEstimate(
        e_z / n_z if n_z else math.nan,
        e_x / n_x if n_x else math.nan,
        n_z,
        n_x,
        e_z,
        e_x,
    )
