"""src/ecnfallback/cc_engines.py
Congestion controllers driven by the simulator's transport.

PragueEngine is a scalable (DCTCP-like) sender that blends into an ABE-Reno
response as its Classic ECN score rises. CubicEngine and RenoEngine are the
classic ECN competitors.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional

from ecnfallback.active_probe import ActiveProbe, ProbeParams
from ecnfallback.errors import ContractError
from ecnfallback.fallback_detect import ClassicEcnScore, DetectionParams
from ecnfallback.packet import Ecn
from ecnfallback.rtt_track import RttEstimator

log = logging.getLogger(__name__)

ALPHA_BITS = 20
ALPHA_ONE = 1 << ALPHA_BITS
CWND_MIN = 2.0
INITIAL_CWND = 10
BETA_ABE = 0.7
CUBIC_C = 0.4
CUBIC_BETA = 0.7


class Changeover(Enum):
    """How the ECN response blends from scalable to classic.

    ALT1 interpolates linearly from alpha to ALPHA_ABE. ALT2 takes the larger
    of alpha and c * ALPHA_ABE.
    """

    ALT1 = "alt1"
    ALT2 = "alt2"


class CompetitorKind(Enum):
    CUBIC_ECN = "cubic"
    RENO_ECN = "reno"

    @property
    def beta_ecn(self) -> float:
        return CUBIC_BETA if self is CompetitorKind.CUBIC_ECN else 0.5


@dataclass(frozen=True)
class PragueParams:
    """Tunables of the Prague sender.

    Attributes:
        fallback: Act on the Classic ECN score. The score is still tracked
            when off.
        alpha_shift: Gain of the alpha EWMA as a shift, 4 means 1/16.
        initial_alpha: Alpha before the first round of feedback.
        beta_abe: Classic ECN backoff factor the changeover blends towards.
        changeover: Blending variant.
        pacing_ss_ratio, pacing_ca_ratio: Pacing rate as a multiple of
            cwnd / srtt in slow start and congestion avoidance.
    """

    fallback: bool = True
    alpha_shift: int = 4
    initial_alpha: Fraction = Fraction(1)
    beta_abe: float = BETA_ABE
    changeover: Changeover = Changeover.ALT2
    pacing_ss_ratio: float = 2.0
    pacing_ca_ratio: float = 1.0

    def __post_init__(self) -> None:
        if not 0 <= self.initial_alpha <= 1:
            raise ContractError("initial alpha must lie in [0, 1]")
        if not 0.5 <= self.beta_abe < 1:
            raise ContractError("beta_abe must lie in [0.5, 1)")

    @property
    def alpha_abe(self) -> float:
        return 2 * (1 - self.beta_abe)


@dataclass
class FlowState:
    """Window state shared between a controller and the transport.

    The transport owns snd_nxt and snd_una; the controller owns the rest.
    """

    cwnd: float = float(INITIAL_CWND)
    ssthresh: float = math.inf
    alpha_fp: int = ALPHA_ONE
    pacing_rate: float = 0.0
    snd_nxt: int = 0
    snd_una: int = 0
    s_accum: Fraction = field(default_factory=Fraction)
    ecn: Ecn = Ecn.ECT1

    @property
    def alpha(self) -> float:
        return self.alpha_fp / ALPHA_ONE

    @property
    def in_slow_start(self) -> bool:
        return self.cwnd < self.ssthresh


@dataclass(frozen=True)
class RoundSample:
    """What the transport measured over one round trip."""

    start_us: int
    end_us: int
    acked_bytes: int
    ce_bytes: int
    self_limited: Fraction

    @property
    def ce_fraction(self) -> Fraction:
        if self.acked_bytes <= 0:
            return Fraction(0)
        return min(Fraction(self.ce_bytes, self.acked_bytes), Fraction(1))


class SelfLimitMeter:
    """Measures the fraction of each round the sender had nothing to send.

    Args:
        now: Start of the first round [us].
    """

    def __init__(self, now: int = 0) -> None:
        self._round_start = now
        self._limited_since: Optional[int] = None
        self._limited_us = 0

    @property
    def limited(self) -> bool:
        return self._limited_since is not None

    def set_limited(self, now: int, limited: bool) -> None:
        if limited and self._limited_since is None:
            self._limited_since = now
        elif not limited and self._limited_since is not None:
            self._limited_us += now - self._limited_since
            self._limited_since = None

    def close_round(self, now: int) -> Fraction:
        """Returns the self-limited fraction of the round ending now."""
        limited = self._limited_us
        if self._limited_since is not None:
            limited += now - self._limited_since
            self._limited_since = now
        duration = now - self._round_start
        self._round_start = now
        self._limited_us = 0
        if duration <= 0:
            return Fraction(0)
        return min(Fraction(limited, duration), Fraction(1))


def prague_reduction(
    cwnd: float,
    alpha: float,
    c: float,
    changeover: Changeover = Changeover.ALT2,
    alpha_abe: float = 2 * (1 - BETA_ABE),
) -> float:
    """Returns how many segments to take off cwnd on a round with CE marks."""
    if changeover is Changeover.ALT2:
        return cwnd * max(alpha, c * alpha_abe) / 2
    return cwnd * (alpha + c * (alpha_abe - alpha)) / 2


class CongestionEngine(ABC):
    """Base class of the window controllers.

    One congestion response per round: after a reduction, further CE or loss
    is ignored until snd_una passes the snd_nxt of the reduction.
    """

    name = "engine"

    def __init__(self, initial_cwnd: int = INITIAL_CWND, ecn: Ecn = Ecn.ECT0) -> None:
        self.state = FlowState(cwnd=float(initial_cwnd), ecn=ecn)
        self.reductions = 0
        self._recover_seq: Optional[int] = None

    @property
    def ecn(self) -> Ecn:
        return self.state.ecn

    def pacing_rate(self, srtt_us: int, mss: int) -> Optional[float]:
        """Bytes per second to pace at, or None to send as the window allows."""
        return None

    def on_rtt_sample(self, acc_mrtt: int, now: int) -> None:
        """Takes one RTT sample [us]."""

    def on_round(self, sample: RoundSample) -> None:
        """Called at each round boundary."""

    @abstractmethod
    def on_ack(
        self, now: int, acked_bytes: int, ce_bytes: int, mss: int, cwnd_limited: bool
    ) -> None:
        """Takes one ACK that acknowledged acked_bytes, ce_bytes of them CE."""

    def on_loss(self, now: int) -> bool:
        """Takes a detected loss; returns whether the window was reduced."""
        return self._congestion(now, self.loss_beta())

    def on_rto(self, now: int) -> None:
        st = self.state
        before = st.cwnd
        st.ssthresh = max(st.cwnd * self.loss_beta(), CWND_MIN)
        st.cwnd = CWND_MIN
        self._recover_seq = st.snd_nxt
        self.reductions += 1
        self._after_reduction(now, before)

    def loss_beta(self) -> float:
        return 0.5

    def _may_reduce(self) -> bool:
        return self._recover_seq is None or self.state.snd_una >= self._recover_seq

    def _congestion(self, now: int, beta: float) -> bool:
        if not self._may_reduce():
            return False
        st = self.state
        before = st.cwnd
        st.cwnd = max(st.cwnd * beta, CWND_MIN)
        st.ssthresh = st.cwnd
        self._recover_seq = st.snd_nxt
        self.reductions += 1
        self._after_reduction(now, before)
        return True

    def _after_reduction(self, now: int, cwnd_before: float) -> None:
        pass

    def _grow_reno(self, acked_bytes: int, mss: int) -> None:
        st = self.state
        segments = acked_bytes / mss
        if st.in_slow_start:
            st.cwnd = min(st.cwnd + segments, max(st.ssthresh, st.cwnd))
        else:
            st.cwnd += segments / st.cwnd

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(cwnd={self.state.cwnd:.2f}, "
            f"ssthresh={self.state.ssthresh})"
        )


class RenoEngine(CongestionEngine):
    """Reno with classic ECN: a CE mark counts as a loss."""

    name = "reno"

    def on_ack(
        self, now: int, acked_bytes: int, ce_bytes: int, mss: int, cwnd_limited: bool
    ) -> None:
        if ce_bytes:
            self._congestion(now, CompetitorKind.RENO_ECN.beta_ecn)
        if cwnd_limited:
            self._grow_reno(acked_bytes, mss)


class CubicEngine(CongestionEngine):
    """Cubic with classic ECN, backing off to beta = 0.7 on CE or loss.

    Attributes:
        w_max: Window at the last reduction.
        k: Time [s] the cubic curve takes to climb back to w_max.
        w_est: Reno-friendly window estimate.
    """

    name = "cubic"

    def __init__(self, initial_cwnd: int = INITIAL_CWND, c: float = CUBIC_C) -> None:
        super().__init__(initial_cwnd, Ecn.ECT0)
        self.c = c
        self.beta = CUBIC_BETA
        self.w_max = 0.0
        self.k = 0.0
        self.w_est = 0.0
        self._w_last_max = 0.0
        self._epoch_start: Optional[int] = None
        self._srtt_us = 0

    def loss_beta(self) -> float:
        return self.beta

    def w_cubic(self, t: float) -> float:
        """The cubic window t seconds into the current epoch."""
        return self.c * (t - self.k) ** 3 + self.w_max

    def on_rtt_sample(self, acc_mrtt: int, now: int) -> None:
        if not self._srtt_us:
            self._srtt_us = acc_mrtt
        else:
            self._srtt_us += (acc_mrtt - self._srtt_us) // 8

    def on_ack(
        self, now: int, acked_bytes: int, ce_bytes: int, mss: int, cwnd_limited: bool
    ) -> None:
        if ce_bytes:
            self._congestion(now, self.beta)
        if not cwnd_limited:
            return
        st = self.state
        if st.in_slow_start:
            self._grow_reno(acked_bytes, mss)
            return
        segments = acked_bytes / mss
        if self._epoch_start is None:
            self._epoch_start = now
            if self.w_max > st.cwnd:
                self.k = ((self.w_max - st.cwnd) / self.c) ** (1 / 3)
            else:
                self.k = 0.0
                self.w_max = st.cwnd
            self.w_est = st.cwnd
        t = (now - self._epoch_start) / 1e6
        alpha_cubic = 3 * (1 - self.beta) / (1 + self.beta)
        self.w_est += alpha_cubic * segments / st.cwnd
        if self.w_cubic(t) < self.w_est:
            st.cwnd = self.w_est
            return
        target = self.w_cubic(t + self._srtt_us / 1e6)
        target = min(max(target, st.cwnd), 1.5 * st.cwnd)
        st.cwnd += (target - st.cwnd) * segments / st.cwnd

    def _after_reduction(self, now: int, cwnd_before: float) -> None:
        if cwnd_before < self._w_last_max:
            # Fast convergence: release bandwidth to newer flows.
            self.w_max = cwnd_before * (1 + self.beta) / 2
        else:
            self.w_max = cwnd_before
        self._w_last_max = cwnd_before
        self._epoch_start = None


def competitor(
    kind: CompetitorKind, initial_cwnd: int = INITIAL_CWND
) -> CongestionEngine:
    if kind is CompetitorKind.CUBIC_ECN:
        return CubicEngine(initial_cwnd)
    return RenoEngine(initial_cwnd)


class PragueEngine(CongestionEngine):
    """Scalable sender with Classic ECN AQM fallback.

    Args:
        params: Sender tunables.
        detection: Detector tunables.
        probe: Active probe tunables; the probe exists only when enabled.
        initial_cwnd: Initial window [segments].

    Attributes:
        rtt: RTT statistics, created on the first sample.
        detector: The classic_ecn score.
        probe: The tracer state machine, or None.
    """

    name = "prague"

    def __init__(
        self,
        params: PragueParams = PragueParams(),
        detection: DetectionParams = DetectionParams(),
        probe: ProbeParams = ProbeParams(),
        initial_cwnd: int = INITIAL_CWND,
    ) -> None:
        super().__init__(initial_cwnd, Ecn.ECT1)
        self.params = params
        self.detection = detection
        self.state.alpha_fp = int(params.initial_alpha * ALPHA_ONE)
        self.rtt: Optional[RttEstimator] = None
        self.detector = ClassicEcnScore(detection)
        self.probe: Optional[ActiveProbe] = (
            ActiveProbe(self.detector, probe) if probe.enabled else None
        )
        self._initial_cwnd = initial_cwnd

    def c(self) -> float:
        return self.detector.c() if self.params.fallback else 0.0

    def pacing_rate(self, srtt_us: int, mss: int) -> Optional[float]:
        if srtt_us <= 0:
            return None
        st = self.state
        p = self.params
        ratio = p.pacing_ss_ratio if st.in_slow_start else p.pacing_ca_ratio
        st.pacing_rate = ratio * st.cwnd * mss * 1e6 / srtt_us
        return st.pacing_rate

    def on_rtt_sample(self, acc_mrtt: int, now: int) -> None:
        if self.rtt is None:
            ssthresh = self.state.ssthresh
            proxy = int(ssthresh) if math.isfinite(ssthresh) else self._initial_cwnd
            self.rtt = RttEstimator(
                acc_mrtt,
                now,
                ssthresh=max(proxy, 2),
                g_diff=self.detection.g_diff,
                min_window_us=self.detection.min_rtt_window_us,
                reroute=self.detection.reroute_filter,
            )
        else:
            self.rtt.on_ack(acc_mrtt, now)

    def on_ack(
        self, now: int, acked_bytes: int, ce_bytes: int, mss: int, cwnd_limited: bool
    ) -> None:
        if ce_bytes:
            self.detector.on_ce_feedback()
            self.on_ce(now)
        if cwnd_limited:
            self._grow_reno(acked_bytes, mss)

    def on_ce(self, now: int) -> bool:
        """Reduces cwnd once per round, blending DCTCP and ABE by c."""
        if not self._may_reduce():
            return False
        st = self.state
        before = st.cwnd
        reduction = prague_reduction(
            st.cwnd, st.alpha, self.c(), self.params.changeover, self.params.alpha_abe
        )
        st.cwnd = max(st.cwnd - reduction, CWND_MIN)
        st.ssthresh = st.cwnd
        self._recover_seq = st.snd_nxt
        self.reductions += 1
        self._after_reduction(now, before)
        return True

    def on_loss(self, now: int) -> bool:
        self.detector.on_loss()
        return super().on_loss(now)

    def on_round(self, sample: RoundSample) -> None:
        st = self.state
        ce_fp = int(sample.ce_fraction * ALPHA_ONE)
        st.alpha_fp += (ce_fp - st.alpha_fp) >> self.params.alpha_shift
        st.alpha_fp = min(max(st.alpha_fp, 0), ALPHA_ONE)
        st.s_accum = sample.self_limited
        if self.rtt is None:
            return
        awake = self.detector.on_round(
            self.rtt.mdev, self.rtt.depth, sample.self_limited, self.rtt
        )
        if self.probe is not None:
            if not awake:
                self.probe.unsuppress()
            self.probe.per_rtt_arm(st.snd_una)

    def _after_reduction(self, now: int, cwnd_before: float) -> None:
        if self.rtt is not None:
            self.rtt.on_ssthresh_change(max(int(self.state.ssthresh), 2))
