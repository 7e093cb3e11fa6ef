"""src/ecnfallback/fallback_detect.py
Passive detection of a Classic ECN AQM at the bottleneck.

Each round trip the score moves by

    V * lg(v / V0) + D * lg(max(d / D0, 1)) - S * s

where v is the mean deviation of the RTT, d the queue depth (smoothed RTT above
the minimum) and s the fraction of the round the sender was self-limited. A
Classic AQM holds a deep, variable queue, an L4S AQM a shallow, smooth one.
Above CLASSIC_ECN the flow behaves classically; the bands beyond either end
of the transition make the score sticky.

The score is fixed-point, upscaled by SCORE_BITS, and the logs are the dithered
integer logs of intlog.carry_ilog2.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

from ecnfallback.errors import ContractError
from ecnfallback.intlog import fixed_log2
from ecnfallback.rtt_track import FBK_G_DIFF, MIN_RTT_WINDOW_US, RttEstimator

log = logging.getLogger(__name__)

SCORE_BITS = 20
SCORE_ONE = 1 << SCORE_BITS


@dataclass(frozen=True)
class DetectionParams:
    """Tunables of the detector and of the RTT statistics feeding it.

    Weights are powers of two, given as the exponent of their reciprocal:
    v_lg=1 means V=1/2. Sticky bands and CLASSIC_ECN are in whole score units.
    """

    v0_us: int = 750
    d0_us: int = 2000
    v_lg: int = 1
    d_lg: int = 1
    s_lg: int = 2
    l_sticky: int = 8
    c_sticky: int = 8
    classic_ecn: int = 1
    c_frac_idle: int = 2
    combined_logs: bool = False
    g_diff: int = FBK_G_DIFF
    min_rtt_window_us: int = MIN_RTT_WINDOW_US
    reroute_filter: bool = True

    def __post_init__(self) -> None:
        if self.v0_us < 1 or self.d0_us < 1:
            raise ContractError("V0 and D0 must be at least 1 us")
        for name in ("v_lg", "d_lg", "s_lg"):
            if not 0 <= getattr(self, name) <= SCORE_BITS:
                raise ContractError(f"{name} must lie in [0, {SCORE_BITS}]")
        if self.combined_logs and self.v_lg != self.d_lg:
            raise ContractError("combined logs need equal V and D weights")
        if self.c_frac_idle < 2:
            raise ContractError("c_frac_idle must be at least 2")

    @property
    def v0_lg(self) -> int:
        """lg(V0), upscaled by SCORE_BITS, pre-shifted by the V weight."""
        return fixed_log2(self.v0_us, SCORE_BITS) >> self.v_lg

    @property
    def d0_lg(self) -> int:
        return fixed_log2(self.d0_us, SCORE_BITS) >> self.d_lg


class ClassicEcnScore:
    """The classic_ecn score of one flow.

    Args:
        params: Detector tunables.

    Attributes:
        score_fp: The score, upscaled by SCORE_BITS.
        floor, ceiling, threshold: -L_STICKY, CLASSIC_ECN + C_STICKY and
            CLASSIC_ECN, upscaled.
        computed_rounds: Rounds whose delta was applied.
        suppressed_rounds: Rounds skipped because the score sat on the floor.
        frozen_rounds: Rounds skipped after losses without CE.
        losses_since_ce: Loss events since the last CE feedback.
        peak_fp: Highest score reached since connection init, upscaled.
    """

    def __init__(self, params: DetectionParams = DetectionParams()) -> None:
        self.params = params
        self.floor = -params.l_sticky * SCORE_ONE
        self.ceiling = (params.classic_ecn + params.c_sticky) * SCORE_ONE
        self.threshold = params.classic_ecn * SCORE_ONE
        self._v0_lg = params.v0_lg
        self._d0_lg = params.d0_lg
        self.on_connection_init()

    def on_connection_init(self) -> int:
        self.score_fp = self.floor
        self.peak_fp = self.floor
        self.computed_rounds = 0
        self.suppressed_rounds = 0
        self.frozen_rounds = 0
        self.losses_since_ce = 0
        return self.score_fp

    @property
    def score(self) -> float:
        return self.score_fp / SCORE_ONE

    @property
    def peak(self) -> float:
        return self.peak_fp / SCORE_ONE

    @property
    def quiescent(self) -> bool:
        return self.score_fp <= self.floor

    @property
    def frozen(self) -> bool:
        # More than one loss with no CE in between: not a Classic ECN AQM signal.
        return self.losses_since_ce >= 2

    @property
    def classic(self) -> bool:
        return self.score_fp >= self.threshold

    def on_ce_feedback(self) -> int:
        """Wakes the score from the floor by one unit."""
        self.losses_since_ce = 0
        if self.score_fp <= self.floor:
            self.score_fp += SCORE_ONE
            self.peak_fp = max(self.peak_fp, self.score_fp)
        return self.score_fp

    def on_loss(self) -> None:
        self.losses_since_ce += 1

    def on_round(
        self,
        v: int,
        d: int,
        s: Union[Fraction, float, int],
        rtt: RttEstimator,
    ) -> bool:
        """Applies one round's delta.

        Args:
            v: Mean deviation of the RTT [us].
            d: Queue depth [us].
            s: Self-limited fraction of the round.
            rtt: Owner of the log carries.

        Returns:
            False if the round was suppressed because the score is quiescent,
            in which case the caller clears tracer suppression.
        """
        if self.quiescent:
            self.suppressed_rounds += 1
            return False
        if self.frozen:
            self.frozen_rounds += 1
            return True
        self.add(self.round_delta(v, d, s, rtt))
        self.computed_rounds += 1
        return True

    def round_delta(
        self, v: int, d: int, s: Union[Fraction, float, int], rtt: RttEstimator
    ) -> int:
        """Returns the fixed-point delta for one round, without applying it."""
        p = self.params
        if p.combined_logs and d > p.d0_us:
            delta = (rtt.product_log(v, d) << (SCORE_BITS - p.v_lg)) - (
                self._v0_lg + self._d0_lg
            )
        else:
            delta = (rtt.mdev_log(v) << (SCORE_BITS - p.v_lg)) - self._v0_lg
            if d > p.d0_us:
                depth = (rtt.depth_log(d) << (SCORE_BITS - p.d_lg)) - self._d0_lg
                if depth > 0:
                    delta += depth
        return delta - (self_limited_fp(s) >> p.s_lg)

    def add(self, delta: int) -> int:
        """Adds a fixed-point delta, clamped to the sticky bounds."""
        was_classic = self.classic
        self.score_fp = min(max(self.score_fp + delta, self.floor), self.ceiling)
        self.peak_fp = max(self.peak_fp, self.score_fp)
        if self.classic != was_classic:
            log.debug("classic_ecn crossed to %.3f", self.score)
        return self.score_fp

    def on_idle_timeout(self) -> bool:
        """Decays a positive score; returns whether to re-arm the idle timer."""
        if self.score_fp > 0:
            self.score_fp //= self.params.c_frac_idle
            return True
        return False

    def c_fp(self) -> int:
        """The transition fraction c, upscaled by SCORE_BITS."""
        return min(max(self.score_fp * SCORE_ONE // self.threshold, 0), SCORE_ONE)

    def c(self) -> float:
        """The transition fraction c in [0, 1]."""
        return self.c_fp() / SCORE_ONE

    def __repr__(self) -> str:
        return f"{type(self).__name__}(score={self.score:.3f})"


def self_limited_fp(s: Union[Fraction, float, int]) -> int:
    """Converts a self-limited fraction to fixed point, clamped to [0, 1]."""
    value = int(Fraction(s) * SCORE_ONE)
    return min(max(value, 0), SCORE_ONE)
