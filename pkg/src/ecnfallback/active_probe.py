"""src/ecnfallback/active_probe.py
Active detection of an L4S bottleneck with triplets of tracer packets.

A triplet is three back-to-back packets: a large ECT(1) front, an ECT(0)
middle that repeats the last two bytes of the front, and an ECT(1) rear that
repeats only the last byte of the front. All three fit in one MTU. A dual-queue
AQM puts the middle in the classic queue, so when that queue holds anything
the rear overtakes the middle. The receiver ACKs duplicate data at once, and
its D-SACK then shows the rear arrived while the middle had not. That is
evidence of L4S, which pulls the score down. A single-queue AQM never
reorders the triplet, so probes never push the score up.
"""
import logging
from dataclasses import dataclass
from typing import List

from ecnfallback.errors import ContractError
from ecnfallback.fallback_detect import SCORE_ONE, ClassicEcnScore
from ecnfallback.packet import HEADER_BYTES, Ecn, TracerRole

log = logging.getLogger(__name__)

TRACER_NUM = 4
REAR_SIZE = 98


@dataclass(frozen=True)
class ProbeParams:
    enabled: bool = False
    tracer_num: int = TRACER_NUM
    rear_size: int = REAR_SIZE
    header_bytes: int = HEADER_BYTES

    def __post_init__(self) -> None:
        if self.tracer_num < 1:
            raise ContractError("tracer_num must be at least 1")
        if self.rear_size < 3:
            raise ContractError("rear tracers must carry at least 3 bytes")


@dataclass
class TracerState:
    """Arming counters and the sequence anchor of the outstanding triplet.

    Attributes:
        ect_tracers: 0 when none outstanding, positive when armed, negative
            when disarmed until the next round, -tracer_num-1 when suppressed.
        tracer_nxt: Sequence number just past the rear tracer, 0 when no
            verdict is pending.
    """

    ect_tracers: int = 0
    tracer_nxt: int = 0


@dataclass(frozen=True)
class TracerSegment:
    seq: int
    length: int
    ecn: Ecn
    role: TracerRole

    @property
    def end(self) -> int:
        return self.seq + self.length


class ActiveProbe:
    """Tracer state machine of one flow.

    Args:
        detector: The score the verdicts pull down.
        params: Probe tunables.

    Attributes:
        state: Arming counters.
        triplets_sent: Triplets emitted.
        verdicts: L4S verdicts harvested.
        checks: Triplets whose verdict was evaluated.
        duplicate_bytes: Payload bytes sent twice by tracers.
    """

    def __init__(
        self, detector: ClassicEcnScore, params: ProbeParams = ProbeParams()
    ) -> None:
        self.detector = detector
        self.params = params
        self.state = TracerState()
        self.triplets_sent = 0
        self.verdicts = 0
        self.checks = 0
        self.duplicate_bytes = 0
        self._acked_last_round = False
        # -L_STICKY / TRACER_NUM, the decrement per verdict and the arming level.
        self._decrement = detector.params.l_sticky * SCORE_ONE // params.tracer_num
        self._arm_level = -self._decrement

    @property
    def suppressed(self) -> bool:
        return self.state.ect_tracers == -self.params.tracer_num - 1

    def front_size(self, smss: int) -> int:
        p = self.params
        return smss - 2 * (p.header_bytes + p.rear_size)

    def per_rtt_arm(self, snd_una: int = 0) -> TracerState:
        """Arms tracers near the transition, or re-arms a disarmed count.

        Args:
            snd_una: Oldest unacknowledged byte. A verdict still pending one
                full round after its triplet was acknowledged is dropped.
        """
        st = self.state
        if st.tracer_nxt:
            if snd_una >= st.tracer_nxt:
                if self._acked_last_round:
                    st.tracer_nxt = 0
                    self._acked_last_round = False
                else:
                    self._acked_last_round = True
        if st.ect_tracers == 0:
            if self.detector.score_fp >= self._arm_level and not st.tracer_nxt:
                st.ect_tracers = self.params.tracer_num
        elif -self.params.tracer_num <= st.ect_tracers < 0:
            st.ect_tracers = -st.ect_tracers
        return st

    def unsuppress(self) -> None:
        """Clears every count; called while the score rests on its floor."""
        self.state.ect_tracers = 0

    def maybe_send_triplet(
        self, send_queue_len: int, smss: int, snd_nxt: int
    ) -> List[TracerSegment]:
        """Returns the triplet to send now, or an empty list.

        Args:
            send_queue_len: Fresh bytes waiting to be sent.
            smss: Sender maximum segment size (payload).
            snd_nxt: Next sequence number to send.
        """
        st = self.state
        if st.ect_tracers <= 0 or st.tracer_nxt or send_queue_len < smss:
            return []
        front = self.front_size(smss)
        if front <= 0:
            log.debug("smss %d too small for a tracer triplet", smss)
            return []
        rear = self.params.rear_size
        front_end = snd_nxt + front
        triplet = [
            TracerSegment(snd_nxt, front, Ecn.ECT1, TracerRole.FRONT),
            TracerSegment(front_end - 2, rear, Ecn.ECT0, TracerRole.MIDDLE),
            TracerSegment(front_end - 1, rear, Ecn.ECT1, TracerRole.REAR),
        ]
        st.tracer_nxt = triplet[-1].end
        self._acked_last_round = False
        self.triplets_sent += 1
        fresh = st.tracer_nxt - snd_nxt
        self.duplicate_bytes += sum(t.length for t in triplet) - fresh

        st.ect_tracers -= 1
        if st.ect_tracers == 0 and self.detector.score_fp >= self._arm_level:
            st.ect_tracers = -self.params.tracer_num - 1
        else:
            st.ect_tracers = -st.ect_tracers
        return triplet

    def on_ack(self, ackno: int, sack_edge: int) -> bool:
        """Evaluates the pending triplet on the first ACK that covers it.

        Returns:
            Whether the ACK carried evidence of an L4S bottleneck.
        """
        st = self.state
        if not st.tracer_nxt or ackno < st.tracer_nxt:
            return False
        front_end = st.tracer_nxt - self.params.rear_size + 1
        l4s = ackno == st.tracer_nxt and sack_edge == front_end
        st.tracer_nxt = 0
        self._acked_last_round = False
        self.checks += 1
        if l4s:
            self.verdicts += 1
            self.detector.add(-self._decrement)
            log.debug("tracer verdict: L4S, score %.3f", self.detector.score)
        return l4s
