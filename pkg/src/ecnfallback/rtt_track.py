"""src/ecnfallback/rtt_track.py
RTT statistics that feed Classic ECN AQM detection.

The smoothed RTT and its mean deviation are kept as upscaled integer EWMAs.
Their gain follows the sawtooth: a flow with a larger ssthresh has longer
sawteeth, so the EWMA has to average over more ACKs to see through them. The
gain is roughly 1 / (2 * ssthresh^1.5). The number of ACKs in one sawtooth,
about 3/4 * ssthresh^2, would be an upper bound on that averaging window,
but smoothing over that many would react far too slowly.
"""
import logging
from collections import deque
from fractions import Fraction
from typing import Deque, Literal, Optional, Tuple

from ecnfallback.errors import ContractError
from ecnfallback.intlog import (
    CarryState,
    UpscaledEwma,
    VALUE_MAX,
    carry_ilog2,
    ilog2,
    rescale_on_shift_change,
)

log = logging.getLogger(__name__)

FBK_G_DIFF = 1
FBK_SSTHRESH_MAX = 0x0FFF
# Initial window, used as the ssthresh until a real one exists.
INITIAL_SSTHRESH = 10
MIN_RTT_WINDOW_US = 10_000_000
# Outlier threshold, in mean deviations.
K2 = 2
# Retire the alternative pair once its mdev is within mdev >> 5 of the primary.
REROUTE_TOLERANCE_SHIFT = 5


def gain_shift_for(ssthresh: int) -> int:
    """Returns the srtt gain shift for a given ssthresh (in segments).

    Integer approximation of log2(2 * ssthresh^1.5), with ssthresh clamped
    below 2^12 so that the upscaled values stay within 44 bits.
    """
    if ssthresh < 2:
        raise ContractError(f"ssthresh must be at least 2 segments, got {ssthresh}")
    s = ilog2(min(ssthresh, FBK_SSTHRESH_MAX))
    # s = ilog2(min(ssthresh, 0x0FFF)) tops out at 11, so the shift stops at
    # 17 (18 for mdev) even though values may be upscaled by up to 19 bits.
    return s + (s >> 1) + 1


def k1_factor(g1: Fraction, g2: Fraction, k2: int = K2) -> Fraction:
    """Returns the factor that inflates mdev when the alternative pair starts.

    Args:
        g1: Gain of the smoothed RTT.
        g2: Gain of the mean deviation.
        k2: Outlier threshold in mean deviations.
    """
    return 1 + g2 * (k2 * (1 - g1) + (k2 - 1) * (1 - g2) - 1)


class MinRttTracker:
    """Exact windowed minimum of the RTT samples.

    Keeps a deque of (time, rtt) whose rtts increase from front to back, so the
    front is always the minimum of the samples still inside the window.
    """

    def __init__(self, window_us: int = MIN_RTT_WINDOW_US) -> None:
        if window_us <= 0:
            raise ContractError(f"min-RTT window must be positive, got {window_us}")
        self.window_us = window_us
        self._samples: Deque[Tuple[int, int]] = deque()

    def update(self, now: int, rtt: int) -> int:
        """Adds a sample taken at `now` and returns the current minimum."""
        samples = self._samples
        while samples and samples[-1][1] >= rtt:
            samples.pop()
        samples.append((now, rtt))
        horizon = now - self.window_us
        while samples[0][0] < horizon:
            samples.popleft()
        return samples[0][1]

    @property
    def minimum(self) -> Optional[int]:
        return self._samples[0][1] if self._samples else None

    def __len__(self) -> int:
        return len(self._samples)


class RerouteFilter:
    """Keeps an alternative srtt/mdev pair while the RTT jumps to a new level.

    A step in the base RTT (a reroute) drags the smoothed RTT slowly to the new
    level and, on the way, every sample looks like a large deviation, so mdev
    balloons. On the first outlier the filter starts a second pair from that
    sample. It keeps it while outliers stay on the same side, and retires it
    as soon as its mdev is no better than the primary one.

    Attributes:
        srtt_alt: Alternative smoothed RTT, None while disabled.
        mdev_alt: Alternative mean deviation, unread while disabled.
        sign: Side of the outlier that started the alternative pair.
        enabled_count: How many times the pair has been started.
    """

    def __init__(
        self,
        srtt_shift: int,
        mdev_shift: int,
        k2: int = K2,
        tolerance_shift: Optional[int] = REROUTE_TOLERANCE_SHIFT,
    ) -> None:
        self.k2 = k2
        self.tolerance_shift = tolerance_shift
        self.srtt_alt: Optional[UpscaledEwma] = None
        self.mdev_alt = UpscaledEwma(0, mdev_shift)
        self.sign = 0
        self.enabled_count = 0
        self._srtt_shift = srtt_shift

    @property
    def enabled(self) -> bool:
        return self.srtt_alt is not None

    def k1(self) -> Fraction:
        return k1_factor(
            Fraction(1, 1 << self._srtt_shift),
            Fraction(1, 1 << self.mdev_alt.gain_shift),
            self.k2,
        )

    def on_ack(self, acc_mrtt: int, srtt: UpscaledEwma, mdev: UpscaledEwma) -> None:
        """Updates the alternative pair; call before the primary pair moves."""
        s, m = srtt.gain_shift, mdev.gain_shift
        error = acc_mrtt - (srtt.value >> s)
        outlier = (abs(error) << m) > self.k2 * mdev.value

        if self.srtt_alt is None:
            if outlier:
                k1 = self.k1()
                self.srtt_alt = UpscaledEwma.start(acc_mrtt, s)
                scaled = mdev.value * k1.numerator // k1.denominator
                self.mdev_alt = UpscaledEwma(scaled, m)
                self.sign = 1 if error > 0 else -1
                self.enabled_count += 1
            return

        alt_error = acc_mrtt - (self.srtt_alt.value >> s)
        self.mdev_alt.value += abs(alt_error) - (self.mdev_alt.value >> m)
        if outlier and (error > 0) == (self.sign > 0):
            self.srtt_alt.value += alt_error
        elif self._no_better_than(mdev):
            self.srtt_alt = None
            self.sign = 0
        else:
            self.srtt_alt.value += alt_error

    def rescale(self, srtt_shift: int, mdev_shift: int) -> None:
        if self.srtt_alt is not None:
            self.srtt_alt.rescale(srtt_shift)
        self.mdev_alt.rescale(mdev_shift)
        self._srtt_shift = srtt_shift

    def selected(self, mdev: UpscaledEwma) -> bool:
        """Whether the alternative pair is the one to report."""
        return self.srtt_alt is not None and self.mdev_alt.value < mdev.value

    def _no_better_than(self, mdev: UpscaledEwma) -> bool:
        if self.tolerance_shift is None:
            return self.mdev_alt.value > mdev.value
        return self.mdev_alt.value > mdev.value - (mdev.value >> self.tolerance_shift)


class RttEstimator:
    """Per-flow smoothed RTT, mean deviation and windowed minimum.

    Args:
        first_mrtt: The first RTT sample [us].
        now: Time of the first sample [us].
        ssthresh: Segments, used to pick the initial gain.
        g_diff: How many times (as a power of 2) mdev is smoothed more slowly
            than srtt.
        min_window_us: Window of the minimum RTT tracker.
        reroute: Whether to run the reroute filter.

    Attributes:
        fbk_srtt: Smoothed RTT, upscaled by g_srtt_shift.
        fbk_mdev: Mean deviation, upscaled by g_mdev_shift.
        g_srtt_shift: Current srtt gain shift.
        mdev_carry, depth_carry, ewmas_carry: Carries of the per-round logs.
        min_rtt: The windowed minimum tracker.
        reroute: The reroute filter, or None if disabled.
    """

    def __init__(
        self,
        first_mrtt: int,
        now: int = 0,
        ssthresh: int = INITIAL_SSTHRESH,
        g_diff: int = FBK_G_DIFF,
        min_window_us: int = MIN_RTT_WINDOW_US,
        reroute: bool = True,
    ) -> None:
        if g_diff < 0:
            raise ContractError(f"g_diff must not be negative, got {g_diff}")
        self.g_diff = g_diff
        self.g_srtt_shift = gain_shift_for(ssthresh)
        first = _clamp_sample(first_mrtt)
        self.fbk_srtt = UpscaledEwma.start(first, self.g_srtt_shift)
        # No need for a conservative start, unlike an RTO estimator.
        self.fbk_mdev = UpscaledEwma.start(1, self.g_mdev_shift)
        self.mdev_carry = CarryState.initial(self.g_mdev_shift)
        self.depth_carry = CarryState.initial(self.g_srtt_shift)
        self.ewmas_carry = CarryState.initial(self.g_mdev_shift)
        self.min_rtt = MinRttTracker(min_window_us)
        self.min_rtt.update(now, first)
        self.reroute: Optional[RerouteFilter] = (
            RerouteFilter(self.g_srtt_shift, self.g_mdev_shift) if reroute else None
        )
        self._step_min: Optional[MinRttTracker] = None
        self._step_until = 0
        self._candidate: Optional[MinRttTracker] = None
        self._candidate_start = 0
        self._candidate_acks = 0
        self.samples = 1

    @property
    def g_mdev_shift(self) -> int:
        return self.g_srtt_shift + self.g_diff

    def on_ack(self, acc_mrtt: int, now: int) -> None:
        """Folds one RTT sample into every statistic."""
        acc = _clamp_sample(acc_mrtt)
        was_enabled = self.reroute is not None and self.reroute.enabled
        if self.reroute is not None:
            self.reroute.on_ack(acc, self.fbk_srtt, self.fbk_mdev)
        error = acc - (self.fbk_srtt.value >> self.g_srtt_shift)
        self.fbk_srtt.value += error
        self.fbk_mdev.value += abs(error) - (self.fbk_mdev.value >> self.g_mdev_shift)
        self.min_rtt.update(now, acc)
        self.samples += 1
        if self.reroute is not None:
            self._follow_step(acc, now, was_enabled)

    def _follow_step(self, acc: int, now: int, was_enabled: bool) -> None:
        """Moves the depth baseline up after a step up in the base RTT.

        Samples from before the step hold the windowed minimum down for a
        whole window, which would count the step as queue. Every alternative
        pair started on the high side opens a candidate baseline of the
        samples since. The candidate is kept if the alternative pair was the
        reported one for at least 2^g_srtt_shift ACKs, and lasts until the
        pre-step samples have left the window.
        """
        assert self.reroute is not None
        if self.reroute.enabled:
            if not was_enabled:
                up = self.reroute.sign > 0
                self._candidate = MinRttTracker(self.min_rtt.window_us) if up else None
                self._candidate_start = now
                self._candidate_acks = 0
            if self._candidate is not None:
                self._candidate.update(now, acc)
                self._candidate_acks += self.rerouted
        elif was_enabled:
            if (
                self._candidate is not None
                and self._candidate_acks >= 1 << self.g_srtt_shift
            ):
                self._step_min = self._candidate
                self._step_until = self._candidate_start + self.min_rtt.window_us
                log.debug("depth rebased to %d us", self._candidate.minimum)
            self._candidate = None
        if self._step_min is not None:
            if now >= self._step_until:
                self._step_min = None
            else:
                self._step_min.update(now, acc)

    def on_ssthresh_change(self, ssthresh: int) -> None:
        self.set_gain_shift(gain_shift_for(ssthresh))

    def set_gain_shift(self, shift: int) -> None:
        """Moves every upscaled value to a new srtt gain shift."""
        old = self.g_srtt_shift
        if shift == old:
            return
        diff = self.g_diff
        rescale_on_shift_change(self.fbk_srtt, self.depth_carry, old, shift)
        rescale_on_shift_change(
            self.fbk_mdev, self.mdev_carry, old + diff, shift + diff
        )
        self.ewmas_carry.rescale(old + diff, shift + diff)
        self.g_srtt_shift = shift
        if self.reroute is not None:
            self.reroute.rescale(shift, shift + diff)
        log.debug("srtt gain shift %d -> %d", old, shift)

    @property
    def primary_srtt(self) -> int:
        return self.fbk_srtt.value >> self.g_srtt_shift

    @property
    def primary_mdev(self) -> int:
        return self.fbk_mdev.value >> self.g_mdev_shift

    @property
    def rerouted(self) -> bool:
        return self.reroute is not None and self.reroute.selected(self.fbk_mdev)

    @property
    def srtt(self) -> int:
        """Smoothed RTT [us], from the alternative pair while it is better."""
        if self.rerouted:
            assert self.reroute is not None and self.reroute.srtt_alt is not None
            return self.reroute.srtt_alt.true_value
        return self.primary_srtt

    @property
    def mdev(self) -> int:
        """Mean deviation [us], from the alternative pair while it is better."""
        if self.rerouted:
            assert self.reroute is not None
            return self.reroute.mdev_alt.true_value
        return self.primary_mdev

    @property
    def rtt_min(self) -> int:
        minimum = self.min_rtt.minimum
        assert minimum is not None
        return minimum

    @property
    def depth_floor(self) -> int:
        """The RTT the queue depth is measured from [us].

        The windowed minimum, or the minimum since an upward reroute step
        while the step is being followed. Never below rtt_min.
        """
        tracker = self._step_min
        if self._candidate is not None and self.rerouted:
            tracker = self._candidate
        minimum = tracker.minimum if tracker is not None else None
        return self.rtt_min if minimum is None else minimum

    @property
    def depth(self) -> int:
        """Smoothed RTT above the depth floor [us], never negative."""
        return max(self.srtt - self.depth_floor, 0)

    def current(self, metric: Literal["srtt", "mdev", "depth"]) -> int:
        return getattr(self, metric)

    def mdev_log(self, v: int) -> int:
        """Dithered log2 of a mean deviation, using the mdev carry."""
        return carry_ilog2(max(v, 1), self.g_mdev_shift, self.mdev_carry)

    def depth_log(self, d: int) -> int:
        """Dithered log2 of a queue depth, using the depth carry."""
        return carry_ilog2(max(d, 1), self.g_srtt_shift, self.depth_carry)

    def product_log(self, v: int, d: int) -> int:
        """Dithered log2 of v * d, using the carry shared by both EWMAs."""
        product = max(v, 1) * max(d, 1)
        shift = self.g_mdev_shift
        # Keep product * carry within 64 bits.
        excess = product.bit_length() + shift + 2 - 64
        if excess > 0:
            product >>= excess
            return carry_ilog2(max(product, 1), shift, self.ewmas_carry) + excess
        return carry_ilog2(product, shift, self.ewmas_carry)

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(srtt={self.srtt}, mdev={self.mdev}, "
            f"rtt_min={self.rtt_min}, shift={self.g_srtt_shift})"
        )


def _clamp_sample(rtt: int) -> int:
    return min(max(rtt, 0), VALUE_MAX)
