"""One-decoy finite-key analysis.

Two intensities ``mu > nu``. Per-intensity counts are corrected by Hoeffding
deviations computed on the total count of the basis, Poisson-weighted, and
combined into lower bounds on vacuum and single-photon detections, an upper
bound on single-photon bit errors in the check basis, and a phase-error bound
with the random-sampling correction ``gamma``. The secret key length is

    l = s_z0 + s_z1 (1 - h(phi_z)) - lambda_EC
        - 6 log2(T / eps_sec) - log2(2 / eps_cor)

with ``T`` union-bound terms (19 by default), each allotted ``eps_sec / T``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .channel import DetectorModel
from .model import ProtocolConfig, validate_config
from .optim import golden_section
from .sifting import CountStatistics


class KeyRateError(ValueError):
    pass


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float = 1e-9
    eps_cor: float = 1e-9
    n_eps_terms: int = 19

    def __post_init__(self):
        for name in ("eps_sec", "eps_cor"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.n_eps_terms < 1:
            raise ValueError("n_eps_terms must be >= 1")

    @property
    def eps_term(self) -> float:
        return self.eps_sec / self.n_eps_terms

    @classmethod
    def from_config(cls, cfg: ProtocolConfig) -> "SecurityParams":
        return cls(cfg.eps_sec, cfg.eps_cor)


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy undefined for {x!r}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def hoeffding_delta(n: float, eps: float) -> float:
    """Hoeffding deviation ``sqrt(n ln(1/eps) / 2)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    return math.sqrt(n * math.log(1.0 / eps) / 2.0)


def gamma_correction(eps: float, ratio: float, n_key: float, n_check: float, n_terms: int = 19) -> float:
    """Random-sampling correction for extrapolating phase errors from the check basis.

    ``ratio`` is the single-photon error rate seen in the check basis; it is
    zero when ``ratio`` is 0 or 1 (the entropy-like factor vanishes).
    """
    if n_key <= 0 or n_check <= 0:
        return 0.5
    if ratio <= 0.0 or ratio >= 1.0:
        return 0.0
    c, d, b = n_key, n_check, ratio
    inner = (c + d) / (c * d * (1 - b) * b) * (n_terms**2) / eps**2
    return math.sqrt((c + d) * (1 - b) * b / (c * d * math.log(2)) * math.log2(inner))


def poisson_weight(n: int, cfg: ProtocolConfig) -> float:
    """Probability that a pulse of random intensity contains exactly ``n`` photons."""
    fact = math.factorial(n)
    return sum(p * math.exp(-k) * k**n / fact for k, p in ((cfg.mu, cfg.p_mu), (cfg.nu, cfg.p_nu)))


@dataclass(frozen=True)
class DecoyBounds:
    s_z0_L: float
    s_z0_U: float
    s_z1_L: float
    s_x0_L: float
    s_x1_L: float
    v_x1_U: float
    phi_z_U: float
    feasible: bool = True


def _basis_bounds(n_mu, n_nu, m_nu, n_tot, cfg: ProtocolConfig, delta):
    mu, nu = cfg.mu, cfg.nu
    tau0, tau1 = poisson_weight(0, cfg), poisson_weight(1, cfg)
    d = delta(n_tot)
    n_mu_plus = math.exp(mu) / cfg.p_mu * (n_mu + d)
    n_nu_minus = math.exp(nu) / cfg.p_nu * (n_nu - d)
    s0_low = tau0 / (mu - nu) * (mu * n_nu_minus - nu * n_mu_plus)
    # vacuum clicks carry errors with probability 1/2
    s0_up = 2.0 * (tau0 * math.exp(nu) / cfg.p_nu * m_nu + d)
    s1_low = (
        tau1
        * mu
        / (nu * (mu - nu))
        * (n_nu_minus - (nu / mu) ** 2 * n_mu_plus - (mu**2 - nu**2) / mu**2 * s0_up / tau0)
    )
    return s0_low, s0_up, s1_low


def decoy_bounds(
    stats: CountStatistics,
    cfg: ProtocolConfig,
    sec: SecurityParams | None = None,
    finite: bool = True,
) -> DecoyBounds:
    """Vacuum / single-photon / phase-error bounds from one-decoy counts.

    ``finite=False`` drops every statistical correction (Hoeffding deltas and
    ``gamma``), giving the asymptotic bounds.
    """
    if cfg.mu <= cfg.nu:
        raise ValueError("need mu > nu")
    sec = sec or SecurityParams.from_config(cfg)
    log_term = math.log(1.0 / sec.eps_term)
    delta = (lambda n: math.sqrt(n * log_term / 2.0)) if finite else (lambda n: 0.0)
    feasible = True

    sz0, sz0_up, sz1 = _basis_bounds(stats.n_z_mu, stats.n_z_nu, stats.m_z_nu, stats.n_z, cfg, delta)
    sx0, _, sx1 = _basis_bounds(stats.n_x_mu, stats.n_x_nu, stats.m_x_nu, stats.n_x, cfg, delta)
    if sz1 <= 0 or sx1 <= 0:
        feasible = False

    tau1 = poisson_weight(1, cfg)
    dm = delta(stats.m_x)
    m_mu_plus = math.exp(cfg.mu) / cfg.p_mu * (stats.m_x_mu + dm)
    m_nu_minus = math.exp(cfg.nu) / cfg.p_nu * (stats.m_x_nu - dm)
    v_x1 = max(0.0, tau1 / (cfg.mu - cfg.nu) * (m_mu_plus - m_nu_minus))

    if feasible:
        ratio = min(v_x1 / sx1, 1.0)
        g = gamma_correction(sec.eps_sec, ratio, sz1, sx1, sec.n_eps_terms) if finite else 0.0
        phi = ratio + g
    else:
        phi = 0.5
    if not 0.0 <= phi <= 0.5:
        feasible = False
        phi = min(max(phi, 0.0), 0.5)
    return DecoyBounds(
        s_z0_L=max(sz0, 0.0),
        s_z0_U=sz0_up,
        s_z1_L=max(sz1, 0.0),
        s_x0_L=max(sx0, 0.0),
        s_x1_L=max(sx1, 0.0),
        v_x1_U=v_x1,
        phi_z_U=phi,
        feasible=feasible,
    )


@dataclass(frozen=True)
class KeyRateReport:
    s_z0_L: float
    s_z1_L: float
    phi_z_U: float
    lambda_ec: float
    l_bits: int
    skr_bits_per_s: float
    skr_eq_norm_bits_per_s: float
    qber_z: float
    qber_x: float
    n_z: float
    t_s: float
    feasible: bool

    def to_dict(self) -> dict:
        return asdict(self)


def key_length(
    bounds: DecoyBounds,
    stats: CountStatistics,
    cfg: ProtocolConfig,
    sec: SecurityParams | None = None,
    finite: bool = True,
) -> KeyRateReport:
    sec = sec or SecurityParams.from_config(cfg)
    if stats.t_s <= 0:
        raise KeyRateError("accumulation time t_s must be positive for a key rate")
    e_z = stats.m_z / stats.n_z if stats.n_z else 0.0
    e_x = stats.m_x / stats.n_x if stats.n_x else float("nan")
    lam = stats.n_z * cfg.f_e * binary_entropy(e_z)
    overhead = 6 * math.log2(sec.n_eps_terms / sec.eps_sec) + math.log2(2 / sec.eps_cor) if finite else 0.0
    raw = bounds.s_z0_L + bounds.s_z1_L * (1 - binary_entropy(bounds.phi_z_U)) - lam - overhead
    l_bits = int(math.floor(raw)) if bounds.feasible and raw > 0 else 0
    n_pulses = stats.N_pulses if stats.N_pulses else stats.t_s * cfg.f
    return KeyRateReport(
        s_z0_L=bounds.s_z0_L,
        s_z1_L=bounds.s_z1_L,
        phi_z_U=bounds.phi_z_U,
        lambda_ec=lam,
        l_bits=l_bits,
        skr_bits_per_s=l_bits / stats.t_s,
        skr_eq_norm_bits_per_s=l_bits * cfg.q * cfg.f / n_pulses,
        qber_z=e_z,
        qber_x=e_x,
        n_z=stats.n_z,
        t_s=stats.t_s,
        feasible=bounds.feasible,
    )


def analyze(stats: CountStatistics, cfg: ProtocolConfig, sec: SecurityParams | None = None, finite: bool = True) -> KeyRateReport:
    """decoy_bounds followed by key_length."""
    sec = sec or SecurityParams.from_config(cfg)
    return key_length(decoy_bounds(stats, cfg, sec, finite), stats, cfg, sec, finite)


# --------------------------------------------------------------------------
# Analytic channel model and parameter optimisation
# --------------------------------------------------------------------------

GATE_FRACTION = 0.8  # slot-assignment window, 2 x residual gate


def dark_probability(det: DetectorModel, f: float) -> float:
    """Dark click probability per slot window, all four detectors together."""
    return 4.0 * det.dark_rate_hz * GATE_FRACTION / f


def expected_counts(
    cfg: ProtocolConfig,
    loss_db: float,
    det: DetectorModel,
    e_mis: float,
    duration_s: float,
) -> CountStatistics:
    """Expected sifted counts and errors (real-valued) for a run of ``duration_s``."""
    eta = 10.0 ** (-loss_db / 10.0) * det.eta
    p_dc = dark_probability(det, cfg.f)
    n_key = cfg.f * duration_s * cfg.q
    vals = {}
    for kname, k, pk in (("mu", cfg.mu, cfg.p_mu), ("nu", cfg.nu, cfg.p_nu)):
        signal = -math.expm1(-k * eta)
        d_k = 1.0 - (1.0 - p_dc) * math.exp(-k * eta)
        e_k = (0.5 * p_dc + e_mis * signal) / d_k if d_k > 0 else 0.5
        for bname, pa, pb in (("z", cfg.p_z_alice, cfg.p_z_bob), ("x", 1 - cfg.p_z_alice, 1 - cfg.p_z_bob)):
            n = n_key * pk * pa * pb * d_k
            vals[f"n_{bname}_{kname}"] = n
            vals[f"m_{bname}_{kname}"] = n * e_k
    return CountStatistics(**vals, t_s=duration_s, N_pulses=int(round(cfg.f * duration_s)))


def duration_for_block(cfg: ProtocolConfig, loss_db: float, det: DetectorModel, n_z_target: float) -> float:
    """Accumulation time at which the expected sifted Z count reaches ``n_z_target``."""
    per_second = expected_counts(cfg, loss_db, det, 0.0, 1.0).n_z
    return n_z_target / per_second if per_second > 0 else math.inf


def predicted_rate(
    cfg: ProtocolConfig,
    loss_db: float,
    det: DetectorModel,
    e_mis: float,
    block_size_target: float = 1e7,
    finite: bool = True,
) -> KeyRateReport:
    duration = duration_for_block(cfg, loss_db, det, block_size_target)
    stats = expected_counts(cfg, loss_db, det, e_mis, duration)
    return analyze(stats, cfg, SecurityParams.from_config(cfg), finite)


@dataclass(frozen=True)
class OptimumResult:
    mu: float
    nu: float
    p_mu: float
    p_z_alice: float
    skr_bits_per_s: float
    report: KeyRateReport | None


MU_RANGE = (1e-3, 1.0)
NU_RANGE = (1e-3, 0.3)
P_RANGE = (0.5 + 1e-3, 0.999)


def optimize_parameters(
    loss_db: float,
    det: DetectorModel,
    e_mis: float,
    block_size_target: float = 1e7,
    base: ProtocolConfig | None = None,
    sweeps: int = 6,
) -> OptimumResult:
    """Maximise predicted rate over (mu, nu, p_mu, p_z_alice).

    Coarse grid, then cyclic coordinate-wise golden-section refinement.
    Grid ties break towards the lexicographically smallest parameter tuple.
    """
    if loss_db < 0:
        raise ValueError("loss_db must be >= 0")
    base = validate_config(base or ProtocolConfig())

    def rate(x) -> float:
        mu, nu, pm, pz = x
        if not (NU_RANGE[0] <= nu < mu <= MU_RANGE[1]):
            return 0.0
        cfg = base.replace(mu=mu, nu=nu, p_mu=pm, p_z_alice=pz)
        return predicted_rate(cfg, loss_db, det, e_mis, block_size_target).skr_bits_per_s

    grid = itertools.product(
        np.round(np.arange(0.1, 1.0001, 0.1), 6),
        np.round(np.arange(0.02, 0.3001, 0.04), 6),
        np.round(np.arange(0.55, 0.9501, 0.1), 6),
        (0.55, 0.7, 0.85, 0.95, 0.99),
    )
    best_x, best_r = None, -1.0
    for x in grid:
        if x[1] >= x[0]:
            continue
        r = rate(x)
        if r > best_r:
            best_x, best_r = list(x), r
    if best_r <= 0:
        x = best_x
        cfg = base.replace(mu=x[0], nu=x[1], p_mu=x[2], p_z_alice=x[3])
        return OptimumResult(*x, 0.0, predicted_rate(cfg, loss_db, det, e_mis, block_size_target))

    x = list(best_x)
    for _ in range(sweeps):
        for i in range(4):
            if i == 0:
                lo, hi = x[1] + 1e-4, MU_RANGE[1]
            elif i == 1:
                lo, hi = NU_RANGE[0], min(NU_RANGE[1], x[0] - 1e-4)
            else:
                lo, hi = P_RANGE

            def f(v, i=i):
                y = list(x)
                y[i] = v
                return -rate(y)

            cand = golden_section(f, lo, hi, 1e-5)
            if -f(cand) >= rate(x):
                x[i] = cand
    cfg = base.replace(mu=x[0], nu=x[1], p_mu=x[2], p_z_alice=x[3])
    report = predicted_rate(cfg, loss_db, det, e_mis, block_size_target)
    return OptimumResult(x[0], x[1], x[2], x[3], report.skr_bits_per_s, report)
