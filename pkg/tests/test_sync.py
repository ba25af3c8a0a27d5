import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from qkdsync.channel import ChannelModel, DetectionEvents, DetectorModel, ReceiverClock, transmit
from qkdsync.model import ProtocolConfig, Rng
from qkdsync.sync import (
    InsufficientData,
    PeriodAmbiguity,
    SlottedEvents,
    SyncFailure,
    alignment_accuracy,
    assign_slots,
    circular_spread,
    estimate_offset,
    offset_scores,
    offset_scores_bruteforce,
    recover_period,
    synchronize,
    track_period,
)
from qkdsync.transmitter import CorrelationCode, build_frames, generate_code

TAU = 1e-8


def simulate(R, loss_db=18.07, seed=0, offset_slots=0, drift_ppm=0.0, e_mis=0.01, det=None, **cfg_kw):
    cfg = ProtocolConfig(**cfg_kw)
    code = generate_code(cfg.L_code, Rng(seed).fork("code"))
    plan = build_frames(code, cfg, R, Rng(seed).fork("plan"))
    clk = ReceiverClock(offset_s=offset_slots * TAU, drift_ppm=drift_ppm)
    ev = transmit(plan, ChannelModel(loss_db=loss_db, e_mis=e_mis), det or DetectorModel(), clk, cfg, Rng(seed).fork("tx"))
    return cfg, code, plan, ev


def synthetic(slots, tau=TAU, jitter=0.0, seed=0):
    gen = np.random.default_rng(seed)
    t = np.sort(slots) * tau + gen.normal(scale=jitter, size=len(slots)) if jitter else np.sort(slots) * tau
    return DetectionEvents(t, np.zeros(len(slots), dtype=np.int8))


# -- period recovery -------------------------------------------------------

def test_exact_multiples():
    gen = np.random.default_rng(1)
    ev = synthetic(np.unique(gen.integers(0, 10**7, 5000)))
    fit = recover_period(ev, 1e8)
    assert fit.tau_b_s == pytest.approx(TAU, rel=1e-12)
    assert circular_spread(ev.timestamp_s, fit.tau_b_s) == pytest.approx(0.0, abs=1e-9)
    assert fit.resultant == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(3))
def test_twenty_ppm_drift(seed):
    *_, ev = simulate(R=5000, seed=seed, drift_ppm=20.0)
    ev = ev.take(slice(0, 10_000))
    fit = recover_period(ev, 1e8)
    assert abs(fit.tau_b_s / (TAU * (1 + 20e-6)) - 1) < 0.1e-6


def test_field_run_period():
    *_, ev = simulate(R=10**7 // 512)
    assert abs(recover_period(ev, 1e8).tau_b_s - TAU) < 1e-9


def test_period_invariant_window():
    *_, ev = simulate(R=2000, seed=4, drift_ppm=-80)
    tau = recover_period(ev, 1e8).tau_b_s
    assert abs(tau / TAU - 1) <= 1e-4


def test_insufficient_events():
    with pytest.raises(InsufficientData):
        recover_period(synthetic(np.arange(99)), 1e8)


def test_random_times_are_ambiguous():
    gen = np.random.default_rng(0)
    ev = DetectionEvents(np.sort(gen.uniform(0, 1e-2, 2000)), np.zeros(2000))
    with pytest.raises(PeriodAmbiguity):
        recover_period(ev, 1e8)


def test_recover_period_deterministic():
    *_, ev = simulate(R=500, seed=2)
    assert recover_period(ev, 1e8) == recover_period(ev, 1e8)


# -- slot assignment -------------------------------------------------------

def test_assign_slots_gate_examples():
    t0 = 3e-9
    ev = DetectionEvents(np.array([t0 + 7 * TAU, t0 + 7.45 * TAU, t0 + 8.39 * TAU]), np.zeros(3))
    s = assign_slots(ev, TAU, t0)
    assert s.slot.tolist() == [7, 8]
    assert s.event_index.tolist() == [0, 2]
    assert s.n_discarded == 1


def test_jitter_misassignment_bound():
    sigma = 30e-12
    assert 2 * norm.sf(0.4 * TAU / sigma) < 1e-6
    gen = np.random.default_rng(0)
    slots = np.arange(10**6)
    ev = DetectionEvents(slots * TAU + gen.normal(scale=sigma, size=slots.size), np.zeros(slots.size))
    s = assign_slots(ev, TAU, 0.0)
    assert len(s) == slots.size
    assert np.array_equal(s.slot, slots)


# -- offset estimation -----------------------------------------------------

def random_slotted(gen, L, M, n_events):
    F = L * (M + 1)
    n_slots = int(gen.integers(F, 10**4 + 1))
    slot = np.sort(gen.integers(0, n_slots, n_events))
    det = gen.integers(0, 4, n_events).astype(np.int8)
    return SlottedEvents(slot, det, np.arange(n_events))


@pytest.mark.invariant
@settings(max_examples=1000)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8, 16, 64]), st.integers(1, 7))
def test_scores_match_bruteforce(seed, L, M):
    gen = np.random.default_rng(seed)
    code = CorrelationCode(tuple(int(b) for b in gen.integers(0, 2, L)), seed)
    s = random_slotted(gen, L, M, int(gen.integers(1, 300)))
    fast, votes = offset_scores(s, code, M)
    slow = offset_scores_bruteforce(s, code, M)
    assert np.array_equal(fast, slow)
    assert int(np.argmax(fast)) == int(np.argmax(slow))
    assert np.all(np.abs(fast) <= votes)


@pytest.mark.invariant
@settings(max_examples=1000)
@given(st.integers(0, 2**32 - 1), st.integers(-5000, 5000))
def test_shift_equivariance(seed, shift):
    gen = np.random.default_rng(seed)
    L, M = 16, 3
    F = L * (M + 1)
    code = CorrelationCode(tuple(int(b) for b in gen.integers(0, 2, L)), seed)
    s = random_slotted(gen, L, M, 200)
    base, _ = offset_scores(s, code, M)
    moved, _ = offset_scores(s.shifted(shift), code, M)
    k = np.arange(F)
    assert np.array_equal(moved, base[(k + shift) % F])


def test_noiseless_zero_offset():
    cfg, code, plan, ev = simulate(R=50, loss_db=0, e_mis=0.0, det=DetectorModel(dark_rate_hz=0, jitter_sigma_s=0))
    s = assign_slots(ev, TAU, 0.0)
    res = estimate_offset(s, code, cfg.M)
    sync_z = plan.is_sync(ev.truth_slot) & (ev.detector < 2)
    assert res.frame_offset == 0
    assert res.score_peak == sync_z.sum()
    assert res.score_peak > res.score_runner_up


def test_injected_offset_13():
    cfg, code, plan, ev = simulate(R=4000, seed=11, offset_slots=13)
    res = synchronize(ev.strip_truth(), code, cfg.M, cfg.f)
    assert res.slot_shift == 13
    assert res.success and res.score_peak > res.score_runner_up
    assert alignment_accuracy(ev, res) > 0.999
    s = assign_slots(ev, res.tau_b_s, res.t0_s)
    slow = offset_scores_bruteforce(s, code, cfg.M)
    assert int(np.argmax(slow)) == res.frame_offset


@pytest.mark.invariant
def test_score_unbiased_for_qber():
    e = 0.05
    total_score = total_votes = 0
    for seed in range(30):
        cfg, code, plan, ev = simulate(R=200, loss_db=3, seed=seed, e_mis=e)
        res = synchronize(ev.strip_truth(), code, cfg.M, cfg.f)
        total_score += res.score_peak
        total_votes += res.votes_at_peak
    sigma = 2 * math.sqrt(total_votes * e * (1 - e))
    assert abs(total_score - total_votes * (1 - 2 * e)) <= 3 * sigma


@pytest.mark.invariant
def test_sync_ignores_ground_truth():
    cfg, code, plan, ev = simulate(R=1500, seed=8, offset_slots=200)
    a = synchronize(ev, code, cfg.M, cfg.f)
    b = synchronize(ev.strip_truth(), code, cfg.M, cfg.f)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.assigned_slot, b.assigned_slot)


def test_dominance_failure_carries_result():
    gen = np.random.default_rng(0)
    code = CorrelationCode(tuple(int(b) for b in gen.integers(0, 2, 64)), 0)
    s = random_slotted(gen, 64, 7, 50)
    with pytest.raises(SyncFailure) as info:
        estimate_offset(s, code, 7)
    assert info.value.result is not None and not info.value.result.success


def test_sync_result_json():
    cfg, code, plan, ev = simulate(R=1000, seed=3)
    res = synchronize(ev, code, cfg.M, cfg.f)
    d = res.to_dict()
    assert set(d) >= {"tau_b_s", "t0_s", "frame_offset", "score_peak", "score_runner_up"}
    assert 0 <= d["frame_offset"] < cfg.frame_length
    assert res.tau_b_err_s > 0


def test_alignment_accuracy_needs_truth():
    cfg, code, plan, ev = simulate(R=1000, seed=3)
    res = synchronize(ev, code, cfg.M, cfg.f)
    with pytest.raises(ValueError):
        alignment_accuracy(ev.strip_truth(), res)


# -- period tracking -------------------------------------------------------

def test_track_constant_clock():
    gen = np.random.default_rng(2)
    slots = np.unique(gen.integers(0, 5 * 10**7, 60_000))
    ev = synthetic(slots, jitter=30e-12)
    blocks = track_period(ev, 10_000, 1e8)
    taus = np.array([b.tau_b_s for b in blocks])
    assert np.all(np.abs(taus / TAU - 1) < 1e-10)
    assert all(b.warning is None for b in blocks)
    # chained epochs keep slot numbering continuous
    for b in blocks:
        part = ev.take(slice(b.start, b.stop))
        assert np.array_equal(assign_slots(part, b.tau_b_s, b.t0_s).slot, slots[b.start:b.stop])


def test_track_linear_ramp():
    rate = 0.1  # ppm per second
    gen = np.random.default_rng(3)
    slots = np.unique(gen.integers(0, 5 * 10**7, 100_000))
    clk = ReceiverClock(ppm_per_s=rate)
    t = clk.to_bob(slots * TAU) + gen.normal(scale=30e-12, size=slots.size)
    ev = DetectionEvents(t, np.zeros(slots.size))
    blocks = track_period(ev, 10_000, 1e8)
    mid = np.array([0.5 * (t[b.start] + t[b.stop - 1]) for b in blocks])
    ppm = np.array([(b.tau_b_s / TAU - 1) * 1e6 for b in blocks])
    slope = np.polyfit(mid, ppm, 1)[0]
    assert slope == pytest.approx(rate, rel=0.10)


def test_track_single_block():
    *_, ev = simulate(R=500, seed=5)
    blocks = track_period(ev, len(ev), 1e8)
    fit = recover_period(ev, 1e8)
    assert len(blocks) == 1
    assert (blocks[0].tau_b_s, blocks[0].t0_s) == (fit.tau_b_s, fit.t0_s)


def test_track_block_size_guard():
    with pytest.raises(ValueError):
        track_period(synthetic(np.arange(1000)), 50, 1e8)
