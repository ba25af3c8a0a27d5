import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qkdsync.model import (
    Basis,
    ConfigError,
    ProtocolConfig,
    QubitState,
    Rng,
    build_dataclass,
    jones_vector,
    jones_vectors,
    read_config_file,
    state_from_phase,
    validate_config,
)

ALL_STATES = [QubitState(Basis(b), bit) for b in (0, 1) for bit in (0, 1)]


def test_phase_mapping_examples():
    assert state_from_phase(0.0) == (Basis.Z, 0)
    assert state_from_phase(math.pi / 2) == (Basis.X, 0)
    assert state_from_phase(math.pi) == (Basis.Z, 1)
    assert state_from_phase(3 * math.pi / 2) == (Basis.X, 1)


def test_phase_mapping_is_bijective():
    thetas = {s.theta for s in ALL_STATES}
    assert len(thetas) == 4
    for s in ALL_STATES:
        assert state_from_phase(s.theta) == s


def test_invalid_phase():
    with pytest.raises(ValueError):
        state_from_phase(0.3)


def test_jones_examples():
    np.testing.assert_allclose(jones_vector(QubitState(Basis.Z, 0)), np.array([1, 1]) / math.sqrt(2))
    np.testing.assert_allclose(jones_vector(QubitState(Basis.Z, 1)), np.array([1, -1]) / math.sqrt(2), atol=1e-15)
    a = jones_vector(QubitState(Basis.Z, 0))
    b = jones_vector(QubitState(Basis.Z, 1))
    assert abs(np.vdot(a, b)) < 1e-15


@pytest.mark.invariant
def test_mutually_unbiased():
    for z in (0, 1):
        for x in (0, 1):
            a = jones_vector(QubitState(Basis.Z, z))
            b = jones_vector(QubitState(Basis.X, x))
            assert abs(abs(np.vdot(a, b)) ** 2 - 0.5) < 1e-12


def test_vectorised_jones_matches_scalar():
    basis = np.array([0, 0, 1, 1])
    bit = np.array([0, 1, 0, 1])
    vec = jones_vectors(basis, bit)
    for i, s in enumerate(ALL_STATES):
        np.testing.assert_allclose(vec[i], jones_vector(s))


def test_config_examples():
    assert ProtocolConfig(M=7).q == 0.875
    assert ProtocolConfig(M=3, L_code=64).frame_length == 4 * 64
    with pytest.raises(ConfigError, match="nu >= mu"):
        validate_config(ProtocolConfig(mu=0.1, nu=0.2))


def test_config_names_every_violation():
    with pytest.raises(ConfigError) as exc:
        validate_config(ProtocolConfig(p_mu=1.5, p_z_bob=0.4, M=0))
    msg = str(exc.value)
    for name in ("p_mu", "p_z_bob", "M"):
        assert name in msg


@pytest.mark.invariant
@given(st.integers(min_value=1, max_value=10_000))
def test_q_times_segment_is_m(M):
    cfg = ProtocolConfig(M=M)
    assert cfg.q * (M + 1) == pytest.approx(M, rel=1e-15)


@given(
    st.floats(0.01, 0.99),
    st.floats(0.001, 0.98),
    st.floats(0.01, 0.99),
    st.integers(2, 256),
    st.integers(1, 15),
)
@pytest.mark.invariant
def test_validation_idempotent(mu, nu, p_mu, L, M):
    cfg = ProtocolConfig(mu=mu, nu=nu, p_mu=p_mu, L_code=L, M=M)
    try:
        once = validate_config(cfg)
    except ConfigError as first:
        with pytest.raises(ConfigError) as second:
            validate_config(cfg)
        assert str(second.value) == str(first)
    else:
        assert validate_config(once) == once == cfg


def test_rng_is_reproducible_and_forks_are_independent():
    a = Rng(5).fork("x")
    b = Rng(5).fork("x")
    idx = np.arange(1000)
    assert np.array_equal(a.uniform_at(idx), b.uniform_at(idx))
    assert np.array_equal(a.generator().random(10), b.generator().random(10))
    c = Rng(5).fork("y")
    assert not np.array_equal(a.uniform_at(idx), c.uniform_at(idx))
    assert Rng(5).fork("x").fork("y").key != Rng(5).fork("y").fork("x").key


def test_uniform_at_is_random_access():
    r = Rng(9)
    full = r.uniform_at(np.arange(100))
    assert np.array_equal(r.uniform_at(np.array([42, 7])), full[[42, 7]])


def test_uniform_at_distribution():
    u = Rng(1).uniform_at(np.arange(200_000))
    assert 0 <= u.min() and u.max() < 1
    assert abs(u.mean() - 0.5) < 3 * math.sqrt(1 / 12 / u.size)
    counts = np.histogram(u, bins=20, range=(0, 1))[0]
    expected = u.size / 20
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 45  # 19 dof, p ~ 1e-3


def test_config_file_roundtrip(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[protocol]\nM = 3\nmu = 0.5\nL_code = 32  # short code\n")
    raw = read_config_file(p)
    cfg = build_dataclass(ProtocolConfig, raw["protocol"], "protocol")
    assert (cfg.M, cfg.mu, cfg.L_code) == (3, 0.5, 32)


def test_config_file_unknown_key(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        build_dataclass(ProtocolConfig, {"bogus": "1"}, "protocol")
