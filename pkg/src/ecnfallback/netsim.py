"""src/ecnfallback/netsim.py
Discrete-event packet simulator of a dumbbell network.

Senders reach the bottleneck over zero-delay access links. After the
bottleneck each data packet travels half the base RTT to its receiver, and
each ACK travels the other half back, plus any reroute step of its path. The
ACK path is never congested.

Time is an integer count of microseconds. Events with equal times run in the
order they were scheduled, so a run is a pure function of its configuration.
"""
import heapq
import logging
from abc import ABC, abstractmethod
from bisect import bisect_left
from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum
from operator import attrgetter
from typing import Callable, Deque, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from ecnfallback.aqm_models import (
    AqmCounters,
    AqmKind,
    AqmModel,
    QueueSample,
    make_aqm,
)
from ecnfallback.cc_engines import (
    CongestionEngine,
    PragueEngine,
    RoundSample,
    SelfLimitMeter,
    competitor,
)
from ecnfallback.config import ScenarioConfig
from ecnfallback.errors import SimulationError
from ecnfallback.metrics import LINK_ID, FlowRecord, MetricsBundle
from ecnfallback.packet import HEADER_BYTES, MSS, Ack, Ecn, Packet

log = logging.getLogger(__name__)

DELACK_US = 40_000
ACK_RATIO = 2
DUPTHRESH = 3
PARETO_ALPHA = 0.9
WEB_MIN_BYTES = 1_000
WEB_MAX_BYTES = 1_000_000
# Web requests per second per b/s of link rate: 1 req/s at 4 Mb/s.
WEB_RATE_PER_BPS = 1 / 4e6
MARK_SAMPLE_RTTS = 16


class EventKind(Enum):
    SEND = "send"
    ARRIVE = "arrive"
    DEQUEUE = "dequeue"
    TIMER = "timer"
    APP = "app"


class SimEvent(NamedTuple):
    time: int
    seq: int
    kind: EventKind
    action: Callable[..., None]
    args: tuple


class Simulator:
    """Event queue and clock.

    Attributes:
        now: Current time [us].
        counts: Events processed, by kind.
    """

    def __init__(self) -> None:
        self.now = 0
        self.counts: Counter = Counter()
        self._queue: List[SimEvent] = []
        self._seq = 0

    def schedule(
        self, at: int, kind: EventKind, action: Callable[..., None], *args
    ) -> SimEvent:
        if at < self.now:
            raise SimulationError(
                f"event at {at} us scheduled in the past ({self.now})"
            )
        event = SimEvent(at, self._seq, kind, action, args)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def __len__(self) -> int:
        return len(self._queue)

    def run(self, until: int, after: Optional[Callable[[], None]] = None) -> int:
        """Processes every event up to and including `until`.

        Returns:
            Number of events processed.
        """
        processed = 0
        queue = self._queue
        while queue and queue[0].time <= until:
            event = heapq.heappop(queue)
            if event.time < self.now:
                raise SimulationError(
                    f"clock went backwards: {event.time} us after {self.now} us"
                )
            self.now = event.time
            event.action(*event.args)
            self.counts[event.kind] += 1
            processed += 1
            if after is not None:
                after()
        self.now = max(self.now, until)
        return processed


class RtoEstimator:
    """Standard smoothed RTT with gains 1/8 and 1/4, for timers and comparison.

    Attributes:
        srtt: Smoothed RTT [us], None before the first sample.
        rttvar: RTT variance [us].
        backoff: Exponent of the timer backoff.
    """

    MIN_US = 200_000
    MAX_US = 60_000_000
    INITIAL_US = 1_000_000

    def __init__(self) -> None:
        self.srtt: Optional[int] = None
        self.rttvar = 0
        self.backoff = 0

    def sample(self, rtt: int) -> None:
        if self.srtt is None:
            self.srtt = rtt
            self.rttvar = rtt // 2
        else:
            self.rttvar += (abs(self.srtt - rtt) - self.rttvar) // 4
            self.srtt += (rtt - self.srtt) // 8

    @property
    def timeout(self) -> int:
        if self.srtt is None:
            base = self.INITIAL_US
        else:
            base = max(self.srtt + 4 * self.rttvar, self.MIN_US)
        return min(base << self.backoff, self.MAX_US)


class AppSource(ABC):
    """What the application has written to the send buffer.

    Attributes:
        total: Bytes the flow will ever send, None if unbounded.
    """

    total: Optional[int] = None

    @abstractmethod
    def available(self, now: int, snd_nxt: int) -> int:
        """Bytes ready to send beyond snd_nxt."""

    def next_change(self, now: int) -> Optional[int]:
        """When more data may become available, if the source is scripted."""
        return None


class BulkSource(AppSource):
    """A long-running flow that always has data."""

    def available(self, now: int, snd_nxt: int) -> int:
        return 1 << 40


class FiniteSource(AppSource):
    """A web object of `size` bytes."""

    def __init__(self, size: int) -> None:
        self.total = size

    def available(self, now: int, snd_nxt: int) -> int:
        return max(self.total - snd_nxt, 0)


class OnOffSource(AppSource):
    """Unlimited data during on periods, none during off periods."""

    def __init__(self, on_us: int, off_us: int, start_us: int = 0) -> None:
        self.on_us = on_us
        self.off_us = off_us
        self.start_us = start_us

    def _phase(self, now: int) -> int:
        return (now - self.start_us) % (self.on_us + self.off_us)

    def available(self, now: int, snd_nxt: int) -> int:
        return 1 << 40 if self._phase(now) < self.on_us else 0

    def next_change(self, now: int) -> Optional[int]:
        phase = self._phase(now)
        if phase < self.on_us:
            return now + self.on_us - phase
        return now + self.on_us + self.off_us - phase


@dataclass(slots=True)
class SentSegment:
    """Scoreboard entry of a range of sequence space."""

    start: int
    end: int
    sent_us: int
    sacked: bool = False
    lost: bool = False
    retransmitted: bool = False
    in_pipe: bool = True

    @property
    def length(self) -> int:
        return self.end - self.start


class Receiver:
    """Delayed-ACK receiver with SACK, D-SACK and CE byte counting.

    Args:
        net: Where ACKs go.
        flow_id: Flow this receiver belongs to.
        ack_ratio: Segments per delayed ACK.
        delack_us: Longest hold time of a delayed ACK.

    Attributes:
        rcv_nxt: Next in-order byte expected.
        ce_bytes: CE-marked payload bytes received so far.
        acks_sent: ACKs emitted.
    """

    def __init__(
        self,
        net: "Network",
        flow_id: int,
        ack_ratio: int = ACK_RATIO,
        delack_us: int = DELACK_US,
    ) -> None:
        self.net = net
        self.flow_id = flow_id
        self.ack_ratio = ack_ratio
        self.delack_us = delack_us
        self.rcv_nxt = 0
        self.ce_bytes = 0
        self.acks_sent = 0
        self._ooo: List[Tuple[int, int]] = []
        self._held = 0
        self._held_echo = -1
        self._held_since = 0
        self._token = 0

    def on_data(self, pkt: Packet) -> Optional[Ack]:
        """Takes one data packet; returns the ACK it triggered at once, if any."""
        now = self.net.sim.now
        if pkt.ecn is Ecn.CE:
            self.ce_bytes += pkt.length
        start, end = pkt.seq, pkt.end
        had_holes = bool(self._ooo)
        dsack: Optional[Tuple[int, int]] = None
        recent: Optional[Tuple[int, int]] = None
        if end <= self.rcv_nxt:
            dsack = (start, end)
        elif start <= self.rcv_nxt:
            if start < self.rcv_nxt:
                dsack = (start, self.rcv_nxt)
            self.rcv_nxt = end
            self._absorb()
        elif any(s <= start and end <= e for s, e in self._ooo):
            dsack = (start, end)
        else:
            recent = self._insert(start, end)
        if dsack is not None or recent is not None or had_holes:
            return self._send(pkt.sent_us, 0, dsack, recent)
        self._held += 1
        if self._held >= self.ack_ratio:
            return self._send(pkt.sent_us, 0)
        self._held_echo = pkt.sent_us
        self._held_since = now
        self._token += 1
        self.net.sim.schedule(
            now + self.delack_us, EventKind.TIMER, self._on_delack_timer, self._token
        )
        return None

    @property
    def holes(self) -> List[Tuple[int, int]]:
        return list(self._ooo)

    def _absorb(self) -> None:
        while self._ooo and self._ooo[0][0] <= self.rcv_nxt:
            self.rcv_nxt = max(self.rcv_nxt, self._ooo.pop(0)[1])

    def _insert(self, start: int, end: int) -> Tuple[int, int]:
        merged = (start, end)
        kept = []
        for block in self._ooo:
            if block[1] < merged[0] or block[0] > merged[1]:
                kept.append(block)
            else:
                merged = (min(block[0], merged[0]), max(block[1], merged[1]))
        kept.append(merged)
        kept.sort()
        self._ooo = kept
        return merged

    def _on_delack_timer(self, token: int) -> None:
        if token == self._token and self._held:
            self._send(self._held_echo, self.net.sim.now - self._held_since)

    def _send(
        self,
        echo_us: int,
        delay_us: int,
        dsack: Optional[Tuple[int, int]] = None,
        recent: Optional[Tuple[int, int]] = None,
    ) -> Ack:
        first = dsack or recent
        blocks = [first] if first is not None else []
        blocks += [b for b in reversed(self._ooo) if b != first][: 3 - len(blocks)]
        ack = Ack(
            self.flow_id,
            self.rcv_nxt,
            tuple(blocks),
            self.ce_bytes,
            echo_us,
            delay_us,
            dsack is not None,
        )
        self._held = 0
        self._token += 1
        self.acks_sent += 1
        self.net.send_ack(ack)
        return ack


class TcpFlow:
    """The sending half of one connection.

    Args:
        net: The network the flow sends into.
        flow_id: Flow number.
        engine: Congestion controller.
        source: Application data model.
        start_us: When the flow starts.
        short: Whether this is a web flow.

    Attributes:
        snd_una, snd_nxt: Oldest unacknowledged and next new byte.
        pipe: Payload bytes estimated to be in the network.
        rto: Timer and comparison RTT statistics.
        record: The flow's entry in the metrics bundle.
    """

    def __init__(
        self,
        net: "Network",
        flow_id: int,
        engine: CongestionEngine,
        source: AppSource,
        start_us: int = 0,
        short: bool = False,
    ) -> None:
        self.net = net
        self.sim = net.sim
        self.flow_id = flow_id
        self.engine = engine
        self.source = source
        self.mss = MSS
        self.snd_una = 0
        self.snd_nxt = 0
        self.pipe = 0
        self.rto = RtoEstimator()
        self.retransmits = 0
        self.losses = 0
        self.started = False
        self.finished = False
        self.record = FlowRecord(flow_id, engine.name, short, start_us)
        self.meter = SelfLimitMeter(start_us)
        self._segments: List[SentSegment] = []
        self._head = 0
        self._retransmit_queue: Deque[SentSegment] = deque()
        self._high_sacked = 0
        self._loss_scan = 0
        self._last_ce = 0
        self._next_send = 0
        self._wake_at: Optional[int] = None
        self._rto_token = 0
        self._rto_pending = False
        self._idle_token = 0
        self._idle_pending = False
        self._round_end = 0
        self._round_start = start_us
        self._round_acked = 0
        self._round_ce = 0
        self._reductions = 0

    @property
    def prague(self) -> Optional[PragueEngine]:
        return self.engine if isinstance(self.engine, PragueEngine) else None

    @property
    def outstanding(self) -> int:
        return self.snd_nxt - self.snd_una

    def start(self) -> None:
        self.started = True
        self.meter = SelfLimitMeter(self.sim.now)
        self._round_start = self.sim.now
        log.debug("flow %d (%s) starts", self.flow_id, self.engine.name)
        self.try_send()

    def try_send(self) -> None:
        """Sends whatever the window, the pacer and the application allow."""
        if self.finished or not self.started:
            return
        now = self.sim.now
        while self.pipe + self.mss <= self.engine.state.cwnd * self.mss:
            seg = self._peek_retransmit()
            available = self.source.available(now, self.snd_nxt)
            if seg is None and available <= 0:
                break
            if now < self._next_send:
                self._wake(self._next_send)
                break
            if seg is not None:
                self._retransmit(seg, now)
            else:
                self._send_new(now, available)
        app_limited = (
            self._peek_retransmit() is None
            and self.source.available(now, self.snd_nxt) <= 0
        )
        self.meter.set_limited(now, app_limited)
        if app_limited:
            change = self.source.next_change(now)
            if change is not None:
                self._wake(change)
            if not self.outstanding:
                self._arm_idle(now)

    def on_ack(self, ack: Ack) -> None:
        if self.finished:
            return
        now = self.sim.now
        engine = self.engine
        acc_mrtt = now - ack.echo_us - ack.delay_us
        if acc_mrtt > 0:
            engine.on_rtt_sample(acc_mrtt, now)
            self.rto.sample(acc_mrtt)
        ce_delta = max(ack.ce_bytes - self._last_ce, 0)
        self._last_ce = max(ack.ce_bytes, self._last_ce)
        delivered = self._cumulative(ack.ackno, now)
        delivered += self._sack(ack)
        engine.state.snd_una = self.snd_una
        engine.state.snd_nxt = self.snd_nxt
        newly_lost = self._detect_losses()
        prague = self.prague
        if prague is not None and prague.probe is not None:
            checks = prague.probe.checks
            if prague.probe.on_ack(ack.ackno, ack.sack_edge):
                self.net.metrics.probe.append(
                    now, self.flow_id, "verdict", prague.detector.score
                )
            elif prague.probe.checks != checks:
                self.net.metrics.probe.append(
                    now, self.flow_id, "check", prague.detector.score
                )
        app_limited = self.source.available(now, self.snd_nxt) <= 0
        engine.on_ack(now, delivered, ce_delta, self.mss, not app_limited)
        if newly_lost:
            engine.on_loss(now)
        self._round_acked += delivered
        self._round_ce += ce_delta
        if prague is not None and prague.rtt is not None and self.net.trace:
            rtt = prague.rtt
            self.net.metrics.rtt.append(
                now,
                self.flow_id,
                acc_mrtt,
                rtt.primary_srtt,
                self.rto.srtt,
                rtt.primary_mdev,
                rtt.rtt_min,
            )
        if self.snd_una >= self._round_end and self.snd_una > 0:
            self._close_round(now)
        if engine.reductions != self._reductions:
            self._reductions = engine.reductions
            self._trace_window(now)
        if self.source.total is not None and self.snd_una >= self.source.total:
            self._finish(now)
            return
        self.try_send()

    def _cumulative(self, ackno: int, now: int) -> int:
        if ackno <= self.snd_una:
            return 0
        delivered = ackno - self.snd_una
        segments = self._segments
        while self._head < len(segments) and segments[self._head].end <= ackno:
            seg = segments[self._head]
            if seg.sacked:
                delivered -= seg.length
            if seg.in_pipe:
                self.pipe -= seg.length
                seg.in_pipe = False
            self._head += 1
        if self._head > 1024 and self._head * 2 > len(segments):
            del segments[: self._head]
            self._head = 0
        self.snd_una = ackno
        self.rto.backoff = 0
        if self.outstanding:
            self._restart_rto(now)
        else:
            self._rto_token += 1
            self._rto_pending = False
        return max(delivered, 0)

    def _sack(self, ack: Ack) -> int:
        newly = 0
        segments = self._segments
        start_of = attrgetter("start")
        for start, end in ack.sack_blocks:
            if end <= self.snd_una:
                continue
            i = bisect_left(segments, start, lo=self._head, key=start_of)
            while i < len(segments) and segments[i].start < end:
                seg = segments[i]
                if seg.end <= end and not seg.sacked:
                    seg.sacked = True
                    newly += seg.length
                    if seg.in_pipe:
                        self.pipe -= seg.length
                        seg.in_pipe = False
                    self._high_sacked = max(self._high_sacked, seg.end)
                i += 1
        return newly

    def _detect_losses(self) -> int:
        """Marks holes with DUPTHRESH segments' worth SACKed above them."""
        limit = self._high_sacked - DUPTHRESH * self.mss
        if limit <= self.snd_una or limit <= self._loss_scan:
            return 0
        segments = self._segments
        i = bisect_left(
            segments, self._loss_scan, lo=self._head, key=attrgetter("start")
        )
        lost = 0
        while i < len(segments) and segments[i].end <= limit:
            seg = segments[i]
            if not seg.sacked and not seg.lost and not seg.retransmitted:
                seg.lost = True
                if seg.in_pipe:
                    self.pipe -= seg.length
                    seg.in_pipe = False
                self._retransmit_queue.append(seg)
                lost += 1
            i += 1
        self._loss_scan = segments[i].start if i < len(segments) else self.snd_nxt
        self.losses += lost
        return lost

    def _peek_retransmit(self) -> Optional[SentSegment]:
        queue = self._retransmit_queue
        while queue:
            seg = queue[0]
            if seg.sacked or seg.end <= self.snd_una or not seg.lost:
                queue.popleft()
                continue
            return seg
        return None

    def _retransmit(self, seg: SentSegment, now: int) -> None:
        self._retransmit_queue.popleft()
        seg.lost = False
        seg.retransmitted = True
        seg.sent_us = now
        seg.in_pipe = True
        self.pipe += seg.length
        self.retransmits += 1
        pkt = Packet(
            self.flow_id, seg.start, seg.length, self.engine.ecn, now, retransmit=True
        )
        self.net.transmit(pkt)
        self._after_send(now, pkt.size)

    def _send_new(self, now: int, available: int) -> None:
        prague = self.prague
        triplet = []
        if prague is not None and prague.probe is not None:
            triplet = prague.probe.maybe_send_triplet(available, self.mss, self.snd_nxt)
        if prague is not None and triplet:
            front, rear = triplet[0], triplet[-1]
            for tracer in triplet:
                self.net.transmit(
                    Packet(
                        self.flow_id,
                        tracer.seq,
                        tracer.length,
                        tracer.ecn,
                        now,
                        tracer.role,
                    )
                )
            self._push_segment(front.seq, front.end, now)
            self._push_segment(front.end, rear.end, now)
            self.snd_nxt = rear.end
            self.record.triplets += 1
            self.net.metrics.probe.append(
                now, self.flow_id, "triplet", prague.detector.score
            )
            self._after_send(now, self.mss + HEADER_BYTES)
            return
        length = min(self.mss, available)
        pkt = Packet(self.flow_id, self.snd_nxt, length, self.engine.ecn, now)
        self.net.transmit(pkt)
        self._push_segment(self.snd_nxt, pkt.end, now)
        self.snd_nxt = pkt.end
        self._after_send(now, pkt.size)

    def _push_segment(self, start: int, end: int, now: int) -> None:
        self._segments.append(SentSegment(start, end, now))
        self.pipe += end - start

    def _after_send(self, now: int, size: int) -> None:
        self.engine.state.snd_nxt = self.snd_nxt
        rate = self.engine.pacing_rate(self.rto.srtt or 0, self.mss)
        if rate:
            self._next_send = max(self._next_send, now) + int(size * 1e6 / rate)
        if not self._rto_pending:
            self._restart_rto(now)
        if self._idle_pending:
            self._idle_token += 1
            self._idle_pending = False

    def _wake(self, at: int) -> None:
        if self._wake_at is not None and self._wake_at <= at:
            return
        self._wake_at = at
        self.sim.schedule(at, EventKind.SEND, self._on_wake, at)

    def _on_wake(self, at: int) -> None:
        if self._wake_at == at:
            self._wake_at = None
            self.try_send()

    def _restart_rto(self, now: int) -> None:
        self._rto_token += 1
        self._rto_pending = True
        self.sim.schedule(
            now + self.rto.timeout, EventKind.TIMER, self._on_rto, self._rto_token
        )

    def _on_rto(self, token: int) -> None:
        if token != self._rto_token or self.finished:
            return
        self._rto_pending = False
        if not self.outstanding:
            return
        now = self.sim.now
        queue: Deque[SentSegment] = deque()
        for seg in self._segments[self._head :]:
            if seg.sacked:
                continue
            if seg.in_pipe:
                self.pipe -= seg.length
                seg.in_pipe = False
            seg.lost = True
            seg.retransmitted = False
            queue.append(seg)
        self._retransmit_queue = queue
        self._loss_scan = self.snd_nxt
        self.engine.state.snd_una = self.snd_una
        self.engine.state.snd_nxt = self.snd_nxt
        self.engine.on_rto(now)
        self.rto.backoff = min(self.rto.backoff + 1, 6)
        self.losses += 1
        self._next_send = now
        log.debug("flow %d retransmission timeout at %d us", self.flow_id, now)
        self._trace_window(now)
        self.try_send()

    def _arm_idle(self, now: int) -> None:
        if self.prague is None or self._idle_pending:
            return
        self._idle_pending = True
        self._idle_token += 1
        self.sim.schedule(
            now + self.rto.timeout, EventKind.TIMER, self._on_idle, self._idle_token
        )

    def _on_idle(self, token: int) -> None:
        if token != self._idle_token or self.finished:
            return
        self._idle_pending = False
        prague = self.prague
        if prague is not None and prague.detector.on_idle_timeout():
            self._arm_idle(self.sim.now)

    def _close_round(self, now: int) -> None:
        s = self.meter.close_round(now)
        sample = RoundSample(
            self._round_start, now, self._round_acked, self._round_ce, s
        )
        self.engine.on_round(sample)
        self._round_start = now
        self._round_acked = 0
        self._round_ce = 0
        self._round_end = self.snd_nxt
        prague = self.prague
        if prague is None or prague.rtt is None:
            return
        det = prague.detector
        record = self.record
        if self.net.trace:
            self.net.metrics.score.append(
                now,
                self.flow_id,
                det.score,
                prague.rtt.mdev,
                prague.rtt.depth,
                float(s),
                prague.c(),
            )
        if record.first_wake_us is None and det.score_fp > det.floor:
            record.first_wake_us = now
        if record.first_classic_us is None and det.classic:
            record.first_classic_us = now
        if record.first_ceiling_us is None and det.score_fp >= det.ceiling:
            record.first_ceiling_us = now

    def _trace_window(self, now: int) -> None:
        if self.net.trace:
            st = self.engine.state
            self.net.metrics.window.append(
                now, self.flow_id, round(st.cwnd, 3), round(st.ssthresh, 3)
            )

    def _finish(self, now: int) -> None:
        self.finished = True
        self._rto_token += 1
        self._idle_token += 1
        self.record.end_us = now
        self.net.on_flow_finished(self)

    def close(self) -> FlowRecord:
        """Fills in the flow's summary."""
        record = self.record
        record.acked_bytes = self.snd_una
        prague = self.prague
        if prague is not None:
            record.final_score = prague.detector.score
            record.max_score = prague.detector.peak
            if prague.probe is not None:
                record.verdicts = prague.probe.verdicts
        return record


class Bottleneck:
    """The bottleneck link: an AQM feeding a serializer.

    Attributes:
        aqm: The current discipline.
        in_tx: Packet being serialized, if any.
        retired: Counters of disciplines replaced during the run.
    """

    def __init__(self, net: "Network", aqm: AqmModel) -> None:
        self.net = net
        self.aqm = aqm
        self.rate_bps = aqm.rate_bps
        self.in_tx: Optional[Packet] = None
        self.retired = AqmCounters()
        self._remainder = 0

    @property
    def counters(self) -> AqmCounters:
        return self.retired.add(self.aqm.counters)

    def tx_time(self, size: int) -> int:
        """Serialization time [us], carrying the rounding remainder forward."""
        total = size * 8_000_000 + self._remainder
        self._remainder = total % self.rate_bps
        return total // self.rate_bps

    def arrive(self, pkt: Packet) -> None:
        self.aqm.enqueue(pkt, self.net.sim.now)
        if self.in_tx is None:
            self._start()

    def _start(self) -> None:
        now = self.net.sim.now
        pkt = self.aqm.dequeue(now)
        if pkt is None:
            return
        self.in_tx = pkt
        self.net.sim.schedule(
            now + self.tx_time(pkt.size), EventKind.DEQUEUE, self._finish
        )

    def _finish(self) -> None:
        pkt = self.in_tx
        assert pkt is not None
        self.in_tx = None
        self.net.forward(pkt)
        self._start()

    def switch(self, aqm: AqmModel) -> None:
        """Replaces the discipline, moving queued packets over in order."""
        old = self.aqm
        self.retired = self.retired.add(old.counters)
        aqm.adopt(old.drain())
        self.aqm = aqm
        if self.in_tx is None:
            self._start()


class WebTraffic:
    """Poisson arrivals of web objects with truncated Pareto sizes.

    Args:
        rate_bps: Link rate, which sets the request rate.
        rng: Random source.
    """

    def __init__(
        self,
        rate_bps: int,
        rng: np.random.Generator,
        alpha: float = PARETO_ALPHA,
        low: int = WEB_MIN_BYTES,
        high: int = WEB_MAX_BYTES,
    ) -> None:
        self.requests_per_s = rate_bps * WEB_RATE_PER_BPS
        self.rng = rng
        self.alpha = alpha
        self.low = low
        self.high = high

    def sizes(self, n: int) -> np.ndarray:
        """Draws n object sizes by inverting the truncated Pareto CDF."""
        u = self.rng.random(n)
        span = 1 - (self.low / self.high) ** self.alpha
        sizes = self.low * (1 - u * span) ** (-1 / self.alpha)
        return np.minimum(np.ceil(sizes), self.high).astype(np.int64)

    def arrivals(self, start_us: int, end_us: int) -> List[Tuple[int, int]]:
        """Returns (time, size) of every request in [start_us, end_us)."""
        if self.requests_per_s <= 0:
            return []
        out: List[Tuple[int, int]] = []
        t = float(start_us)
        while True:
            t += self.rng.exponential(1e6 / self.requests_per_s)
            if t >= end_us:
                break
            out.append((int(t), 0))
        sizes = self.sizes(len(out))
        return [(time, int(size)) for (time, _), size in zip(out, sizes)]


class Network:
    """A dumbbell scenario ready to run.

    Args:
        config: The scenario.

    Attributes:
        sim: Event queue and clock.
        link: The bottleneck.
        flows: Every flow created so far, by id.
        metrics: Series being collected.
        sent_bytes, delivered_bytes, propagating_bytes: Wire bytes of data
            packets emitted, received, and on the forward path.
    """

    def __init__(self, config: ScenarioConfig) -> None:
        self.config = config.validate()
        self.sim = Simulator()
        self.metrics = MetricsBundle(config.duration_us)
        self.trace = config.trace_packets
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self._aqm_rng = np.random.default_rng(seeds[0])
        self._web_rngs = [np.random.default_rng(s) for s in seeds[1:]]
        self._samples: Optional[List[QueueSample]] = [] if self.trace else None
        self.link = Bottleneck(self, self._make_aqm(config.aqm))
        self.flows: Dict[int, TcpFlow] = {}
        self.receivers: Dict[int, Receiver] = {}
        self.active: Dict[int, TcpFlow] = {}
        self.fwd_us = config.base_rtt_us // 2
        self.rev_us = config.base_rtt_us - self.fwd_us
        self._extra_rev: Dict[Optional[int], int] = {}
        self._last_ack_at: Dict[int, int] = {}
        self.sent_bytes = 0
        self.delivered_bytes = 0
        self.propagating_bytes = 0
        self._last_sample = AqmCounters()
        self._built = False

    def _make_aqm(self, kind: AqmKind) -> AqmModel:
        return make_aqm(
            kind,
            self.config.rate_bps,
            self.config.aqm_params,
            self._aqm_rng,
            self._samples,
        )

    def new_engine(self, cc: str) -> CongestionEngine:
        cfg = self.config
        if cc == PragueEngine.name:
            return PragueEngine(
                cfg.prague_params(), cfg.detection_params(), cfg.probe_params()
            )
        return competitor(cfg.competitor)

    def add_flow(
        self,
        cc: str,
        source: AppSource,
        start_us: int = 0,
        short: bool = False,
        flow_id: Optional[int] = None,
    ) -> TcpFlow:
        """Creates a flow and its receiver and schedules its start."""
        if flow_id is None:
            flow_id = max(self.flows, default=-1) + 1
        flow = TcpFlow(self, flow_id, self.new_engine(cc), source, start_us, short)
        self.flows[flow_id] = flow
        self.active[flow_id] = flow
        self.receivers[flow_id] = Receiver(self, flow_id)
        self.metrics.flows[flow_id] = flow.record
        self.sim.schedule(max(start_us, self.sim.now), EventKind.APP, flow.start)
        return flow

    def build(self) -> "Network":
        """Schedules the flows and mid-run events of the configuration."""
        if self._built:
            return self
        self._built = True
        cfg = self.config
        classes = (
            (PragueEngine.name, cfg.pattern.prague, cfg.prague_start_us),
            (cfg.competitor.value, cfg.pattern.competitor, cfg.competitor_start_us),
        )
        for cc, load, start in classes:
            for _ in range(load.long_flows):
                self.add_flow(cc, BulkSource(), start)
        requests: List[Tuple[int, int, int, str]] = []
        for order, ((cc, load, start), rng) in enumerate(zip(classes, self._web_rngs)):
            if load.web:
                web = WebTraffic(cfg.rate_bps, rng)
                for t, size in web.arrivals(start, cfg.duration_us):
                    requests.append((t, order, size, cc))
        for t, _, size, cc in sorted(requests):
            self.add_flow(cc, FiniteSource(size), t, short=True)
        if cfg.switch is not None:
            self.sim.schedule(
                cfg.switch.at_us, EventKind.APP, self.switch_aqm, cfg.switch.kind
            )
        if cfg.reroute is not None:
            r = cfg.reroute
            if r.mdev_multiple is not None:
                self.sim.schedule(
                    r.at_us,
                    EventKind.APP,
                    self.reroute_by_mdev,
                    r.mdev_multiple,
                    r.flow_id,
                )
            else:
                self.sim.schedule(
                    r.at_us, EventKind.APP, self.reroute, r.delta_us, r.flow_id
                )
        self.sim.schedule(self._sample_period, EventKind.TIMER, self._sample_marks)
        return self

    def transmit(self, pkt: Packet) -> None:
        self.sent_bytes += pkt.size
        self.link.arrive(pkt)

    def forward(self, pkt: Packet) -> None:
        """Puts a serialized packet on the path to its receiver."""
        self.metrics.record_departure(self.sim.now, pkt.flow_id, pkt.size)
        self.propagating_bytes += pkt.size
        self.sim.schedule(
            self.sim.now + self.fwd_us, EventKind.ARRIVE, self._deliver, pkt
        )

    def _deliver(self, pkt: Packet) -> None:
        self.propagating_bytes -= pkt.size
        self.delivered_bytes += pkt.size
        self.receivers[pkt.flow_id].on_data(pkt)

    def reverse_delay(self, flow_id: int) -> int:
        return (
            self.rev_us + self._extra_rev.get(None, 0) + self._extra_rev.get(flow_id, 0)
        )

    def send_ack(self, ack: Ack) -> None:
        now = self.sim.now
        # Keeps the ACKs of a flow in order across a reroute.
        at = max(
            now + self.reverse_delay(ack.flow_id),
            self._last_ack_at.get(ack.flow_id, 0),
        )
        self._last_ack_at[ack.flow_id] = at
        flow = self.flows[ack.flow_id]
        self.sim.schedule(at, EventKind.ARRIVE, flow.on_ack, ack)

    def switch_aqm(self, kind: AqmKind) -> None:
        old = self.link.aqm.kind
        self.link.switch(self._make_aqm(kind))
        log.info(
            "AQM switched from %s to %s at %d us", old.value, kind.value, self.sim.now
        )

    def reroute(self, delta_us: int, flow_id: Optional[int] = None) -> None:
        """Steps the base RTT of one flow's path, or of every path."""
        self._extra_rev[flow_id] = self._extra_rev.get(flow_id, 0) + delta_us
        target = "all flows" if flow_id is None else f"flow {flow_id}"
        log.info("rerouted %s by %+d us at %d us", target, delta_us, self.sim.now)
        self.metrics.summary["reroute_delta_us"] = delta_us

    def reroute_by_mdev(self, multiple: float, flow_id: Optional[int] = None) -> None:
        """Steps the base RTT by a multiple of a Prague flow's RTT mean deviation.

        The deviation is that of flow_id, or of the first Prague flow with an
        RTT estimate when the step applies to every path.
        """
        candidates = [flow_id] if flow_id is not None else sorted(self.flows)
        for fid in candidates:
            flow = self.flows.get(fid)
            prague = flow.prague if flow is not None else None
            if prague is not None and prague.rtt is not None:
                self.reroute(int(round(multiple * prague.rtt.mdev)), flow_id)
                return
        raise SimulationError(
            f"no Prague RTT estimate to scale a reroute by at {self.sim.now} us"
        )

    def on_flow_finished(self, flow: TcpFlow) -> None:
        self.active.pop(flow.flow_id, None)
        flow.close()

    @property
    def _sample_period(self) -> int:
        return MARK_SAMPLE_RTTS * self.config.base_rtt_us

    def _sample_marks(self) -> None:
        now = self.sim.now
        total = self.link.counters
        prev = self._last_sample
        marks = total.marks - prev.marks
        drops = total.drops + total.overflows - prev.drops - prev.overflows
        packets = total.departures - prev.departures + drops
        probability = round((marks + drops) / packets, 6) if packets else 0.0
        self.metrics.mark_probability.append(
            now, LINK_ID, self.link.aqm.kind.value, packets, marks, drops, probability
        )
        self._last_sample = total
        if now + self._sample_period <= self.config.duration_us:
            self.sim.schedule(
                now + self._sample_period, EventKind.TIMER, self._sample_marks
            )

    @property
    def in_flight_bytes(self) -> int:
        tx = self.link.in_tx.size if self.link.in_tx is not None else 0
        return self.link.aqm.bytes + tx + self.propagating_bytes

    @property
    def dropped_bytes(self) -> int:
        return self.link.counters.dropped_bytes

    @property
    def tracer_overhead_bytes(self) -> int:
        """Payload bytes sent twice by tracer triplets."""
        total = 0
        for flow in self.flows.values():
            prague = flow.prague
            if prague is not None and prague.probe is not None:
                total += prague.probe.duplicate_bytes
        return total

    def check_conservation(self) -> None:
        """Raises SimulationError unless every byte sent is accounted for."""
        accounted = self.delivered_bytes + self.dropped_bytes + self.in_flight_bytes
        if self.sent_bytes != accounted:
            raise SimulationError(
                f"byte conservation broken at {self.sim.now} us: sent "
                f"{self.sent_bytes}, accounted {accounted}"
            )

    def run(self) -> MetricsBundle:
        """Runs the scenario to its end and returns the collected metrics."""
        cfg = self.config
        self.build()
        log.info("running %s for %.1f s", cfg.label, cfg.duration_us / 1e6)
        after = self.check_conservation if cfg.check_invariants else None
        events = self.sim.run(cfg.duration_us, after)
        for flow in self.flows.values():
            if not flow.finished:
                flow.close()
        if self._samples is not None:
            for q in self._samples:
                self.metrics.queue_delay.append(
                    q.time_us,
                    q.flow_id,
                    q.ecn.name,
                    q.sojourn_us,
                    q.outcome.value,
                    q.backlog_bytes,
                )
        self.metrics.finalize(cfg.rate_bps, trace_throughput=self.trace)
        counters = self.link.counters
        self.metrics.summary.update(
            scenario=cfg.label,
            events=events,
            sent_bytes=self.sent_bytes,
            delivered_bytes=self.delivered_bytes,
            dropped_bytes=self.dropped_bytes,
            marks=counters.marks,
            drops=counters.drops + counters.overflows,
            final_aqm=self.link.aqm.kind.value,
            tracer_overhead_bytes=self.tracer_overhead_bytes,
        )
        log.info("finished %s after %d events", cfg.label, events)
        return self.metrics


def run(config: ScenarioConfig) -> MetricsBundle:
    """Simulates a scenario from start to end."""
    return Network(config).run()
