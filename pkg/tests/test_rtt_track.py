# tests/test_rtt_track.py
"""Tests the RTT statistics and the reroute filter."""
import math
from fractions import Fraction

import numpy as np
import pytest

from ecnfallback.errors import ContractError
from ecnfallback.fallback_detect import DetectionParams
from ecnfallback.rtt_track import (
    REROUTE_TOLERANCE_SHIFT,
    MinRttTracker,
    RerouteFilter,
    RttEstimator,
    gain_shift_for,
    k1_factor,
)


@pytest.mark.parametrize(
    ("ssthresh", "expected"),
    (
        pytest.param(2, 2, id="smallest"),
        pytest.param(10, 5, id="initial_window"),
        pytest.param(64, 10, id="64"),
        pytest.param(0xFFF, 17, id="cap"),
        pytest.param(1 << 20, 17, id="above_cap"),
    ),
)
def test_gain_shift_for(ssthresh, expected):
    assert gain_shift_for(ssthresh) == expected


def test_gain_shift_never_shrinks_with_ssthresh():
    shifts = [gain_shift_for(s) for s in range(2, 10_000)]
    assert all(a <= b for a, b in zip(shifts, shifts[1:]))


def test_gain_shift_rejects_tiny_ssthresh():
    with pytest.raises(ContractError):
        gain_shift_for(1)


def test_k1_factor():
    """G1=1/8, G2=1/4 and K2=2 give K1=1.375."""
    assert k1_factor(Fraction(1, 8), Fraction(1, 4), 2) == Fraction(11, 8)


@pytest.mark.parametrize("shift", range(4, 13))
def test_step_response(shift):
    """After 2^shift ACKs of a step the smoothed RTT has moved about 63%."""
    est = RttEstimator(10_000, reroute=False)
    est.set_gain_shift(shift)
    for i in range(1 << shift):
        est.on_ack(20_000, i)
    moved = (est.primary_srtt - 10_000) / 10_000
    assert 0.60 <= moved <= 0.66


@pytest.mark.parametrize("shift", (4, 8, 12))
def test_integer_ewmas_track_real_ones(shift, float_ewmas):
    rng = np.random.default_rng(shift)
    samples = rng.integers(10_000, 30_000, size=100_000).tolist()
    est = RttEstimator(samples[0], reroute=False)
    est.set_gain_shift(shift)
    ref = float_ewmas(samples[0], shift)
    for i, sample in enumerate(samples[1:], start=1):
        est.on_ack(sample, i * 100)
        ref.on_ack(sample)
        assert abs(est.primary_srtt - ref.srtt) <= 2
        assert abs(est.primary_mdev - ref.mdev) <= 2


def test_min_rtt_matches_brute_force():
    rng = np.random.default_rng(7)
    gaps = rng.integers(1, 5_000, size=10_000)
    rtts = rng.integers(5_000, 50_000, size=10_000).tolist()
    times = np.cumsum(gaps).tolist()
    window = 1_000_000
    tracker = MinRttTracker(window)
    first = 0
    for i, (now, rtt) in enumerate(zip(times, rtts)):
        while times[first] < now - window:
            first += 1
        assert tracker.update(now, rtt) == min(rtts[first : i + 1])


def test_min_rtt_window_must_be_positive():
    with pytest.raises(ContractError):
        MinRttTracker(0)


def test_depth_of_fresh_flow_is_zero():
    est = RttEstimator(20_000)
    assert est.depth == 0
    assert est.rtt_min == 20_000


def test_depth_is_srtt_above_minimum():
    est = RttEstimator(20_000, reroute=False)
    for i in range(2_000):
        est.on_ack(25_000, i * 1000)
    assert est.srtt == 25_000
    assert est.depth == 5_000


def test_depth_after_rtt_drop():
    est = RttEstimator(30_000, reroute=False)
    est.on_ack(10_000, 1)
    assert est.rtt_min == 10_000
    assert est.depth == est.srtt - 10_000


def test_depth_saturates_at_zero():
    est = RttEstimator(30_000, reroute=False)
    est.min_rtt = MinRttTracker(1_000)
    est.min_rtt.update(0, est.srtt + 100)
    assert est.depth == 0


def test_constant_rtt_never_starts_alternative():
    est = RttEstimator(20_000)
    for i in range(1_000):
        est.on_ack(20_000, i * 1000)
    assert est.reroute is not None
    assert est.reroute.enabled_count == 0
    assert est.srtt == est.primary_srtt


def test_gain_change_keeps_true_values():
    est = RttEstimator(20_000, reroute=False)
    for i in range(200):
        est.on_ack(20_000 + (i % 7) * 100, i * 1000)
    srtt, mdev = est.primary_srtt, est.primary_mdev
    est.on_ssthresh_change(200)
    assert est.g_srtt_shift == gain_shift_for(200)
    assert est.primary_srtt == srtt
    assert est.primary_mdev == mdev


def ripple(n):
    """Queue delay oscillating by 1.5 ms around a 20 ms base RTT."""
    return 20_000 + round(1_500 * math.sin(2 * math.pi * n / 40))


def test_reroute_filter_absorbs_base_rtt_step():
    """A step of ten mean deviations barely moves the reported mdev."""
    step_at = 1_100
    est = RttEstimator(ripple(0))
    assert est.reroute is not None
    for n in range(1, step_at):
        est.on_ack(ripple(n), n * 1000)
    assert not est.reroute.enabled
    before = est.mdev
    step = 10 * est.primary_mdev

    est.on_ack(ripple(step_at) + step, step_at * 1000)
    assert est.reroute.enabled
    assert est.rerouted

    corrected, uncorrected = [], []
    converged = disabled = None
    for n in range(step_at + 1, 4_000):
        est.on_ack(ripple(n) + step, n * 1000)
        if est.rerouted:
            assert est.mdev <= est.primary_mdev
        corrected.append(est.mdev)
        uncorrected.append(est.primary_mdev)
        if converged is None and n > step_at + 100:
            if est.primary_mdev <= 1.1 * before:
                converged = n
        if disabled is None and not est.reroute.enabled:
            disabled = n
    assert max(corrected) - before < 0.25 * (max(uncorrected) - before)
    assert converged is not None and disabled is not None
    assert disabled - converged <= 500
    assert not est.reroute.enabled


def stepped_up(filtered):
    """Ripple, then the same ripple ten mean deviations higher."""
    step_at = 1_100
    est = RttEstimator(ripple(0), reroute=filtered)
    for n in range(1, step_at):
        est.on_ack(ripple(n), n * 1000)
    step = 10 * est.primary_mdev
    depths = []
    for n in range(step_at, 4_000):
        est.on_ack(ripple(n) + step, n * 1000)
        if n >= step_at + 200:
            depths.append(est.depth)
    return est, step, depths


def test_depth_follows_base_rtt_step_up():
    est, step, depths = stepped_up(True)
    assert max(depths) < DetectionParams().d0_us
    assert est.rtt_min == 18_500
    assert est.depth_floor == 18_500 + step


def test_depth_counts_step_as_queue_without_filter():
    est, step, depths = stepped_up(False)
    assert min(depths) > step
    assert est.depth_floor == est.rtt_min == 18_500


def test_depth_floor_never_below_rtt_min():
    rng = np.random.default_rng(5)
    est = RttEstimator(20_000)
    for i in range(20_000):
        level = 20_000 + 8_000 * ((i // 3_000) % 2)
        est.on_ack(level + int(rng.integers(0, 2_000)), i * 1000)
        assert est.depth_floor >= est.rtt_min
        assert est.depth == max(est.srtt - est.depth_floor, 0)


def stepped_trace(rng, n=6_000):
    """Noisy ripple with a random step up at one third and back at two thirds."""
    base = int(rng.integers(10_000, 40_000))
    amplitude = int(rng.integers(500, 2_000))
    period = int(rng.integers(20, 80))
    step = int(rng.integers(8, 15)) * amplitude
    noise = rng.normal(0, amplitude / 50, size=n)
    return [
        base
        + round(amplitude * math.sin(2 * math.pi * i / period) + float(noise[i]))
        + (step if n // 3 <= i < 2 * n // 3 else 0)
        for i in range(n)
    ]


def fixed_gain_filter(samples, shift, tolerance_shift=REROUTE_TOLERANCE_SHIFT):
    est = RttEstimator(samples[0], reroute=False)
    est.set_gain_shift(shift)
    est.reroute = RerouteFilter(shift, shift + 1, tolerance_shift=tolerance_shift)
    return est


@pytest.mark.parametrize("seed", range(4))
def test_reroute_filter_tracks_real_arithmetic(seed, float_reroute):
    samples = stepped_trace(np.random.default_rng(seed))
    shift = 6
    est = fixed_gain_filter(samples, shift)
    ref = float_reroute(samples[0], shift)
    agree = close = near = 0
    for i, sample in enumerate(samples[1:], start=1):
        est.on_ack(sample, i * 1000)
        ref.on_ack(sample)
        agree += est.reroute.enabled == ref.enabled
        gap = abs(est.srtt - ref.cur_rtt)
        close += gap <= 5
        near += gap <= 0.01 * ref.cur_rtt
        if i in (len(samples) // 3, 2 * len(samples) // 3):
            assert est.reroute.enabled and ref.enabled
    n = len(samples) - 1
    assert agree >= 0.95 * n
    assert close >= 0.90 * n
    assert near >= 0.99 * n
    assert est.reroute.enabled_count >= 2


@pytest.mark.parametrize("tolerance", (None, REROUTE_TOLERANCE_SHIFT))
@pytest.mark.parametrize("shift", (4, 6, 8))
def test_reroute_decisions_match_real_arithmetic_per_sample(
    shift, tolerance, float_reroute
):
    """Loads the integer state into the real-valued filter before every sample
    and compares the next decision, skipping samples within rounding of a
    threshold."""
    rng = np.random.default_rng(shift)
    levels = np.repeat(rng.integers(15_000, 45_000, size=20), 1_000)
    samples = (levels + rng.integers(0, 10_000, size=levels.size)).tolist()
    est = fixed_gain_filter(samples, shift, tolerance)
    filt = est.reroute
    m = shift + 1
    checked = 0
    for i, sample in enumerate(samples[1:], start=1):
        ref = float_reroute(0, shift, tolerance_shift=tolerance)
        ref.srtt = [
            est.fbk_srtt.value / 2**shift,
            filt.srtt_alt.value / 2**shift if filt.enabled else None,
        ]
        ref.mdev = [est.fbk_mdev.value / 2**m, filt.mdev_alt.value / 2**m]
        ref.sign = filt.sign
        error = sample - ref.srtt[0]
        ambiguous = abs(abs(error) - 2 * ref.mdev[0]) < 2
        if ref.enabled:
            alt_mdev = ref.mdev[1] + ref.g2 * (abs(sample - ref.srtt[1]) - ref.mdev[1])
            retire_at = ref.mdev[0] * (1 - ref.tolerance)
            ambiguous |= abs(alt_mdev - retire_at) < 4 / 2**m
        est.on_ack(sample, i)
        ref.on_ack(sample)
        assert abs(est.fbk_srtt.value / 2**shift - ref.srtt[0]) <= 1
        assert abs(est.fbk_mdev.value / 2**m - ref.mdev[0]) <= 1
        if ambiguous:
            continue
        checked += 1
        assert filt.enabled == ref.enabled, f"sample {i}"
        if ref.enabled:
            assert filt.sign == ref.sign
            assert abs(filt.srtt_alt.value / 2**shift - ref.srtt[1]) <= 1
            assert abs(filt.mdev_alt.value / 2**m - ref.mdev[1]) <= 1
    assert checked >= 0.95 * (len(samples) - 1)
    assert filt.enabled_count >= 10
