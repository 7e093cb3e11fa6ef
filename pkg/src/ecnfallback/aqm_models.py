"""src/ecnfallback/aqm_models.py
Bottleneck queue disciplines.

FIFO only drops at the buffer limit. CoDel and PI2 are single-queue Classic
AQMs that CE-mark any ECT packet (ECT(0) and ECT(1) alike) where they would
otherwise drop. DualPI2 couples a shallow step-marking L4S queue for ECT(1)
with a PI2 classic queue. Its scheduler gives the classic queue at most
c_protection percent of the link while both queues are backlogged.
"""
import logging
import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Deque, Iterable, List, Optional, Tuple

import numpy as np

from ecnfallback.errors import ContractError
from ecnfallback.packet import MTU, Ecn, Packet

log = logging.getLogger(__name__)


class AqmKind(Enum):
    FIFO = "fifo"
    CODEL = "codel"
    PI2 = "pi2"
    DUALPI2 = "dualpi2"

    @property
    def classic(self) -> bool:
        """Whether this is a Classic ECN AQM."""
        return self in (AqmKind.CODEL, AqmKind.PI2)

    @property
    def l4s(self) -> bool:
        return self is AqmKind.DUALPI2


class Outcome(Enum):
    PASS = "pass"
    MARK = "mark"
    DROP = "drop"


@dataclass(frozen=True)
class AqmParams:
    """Parameters of every discipline; each one reads its own.

    Attributes:
        buffer_us: Buffer size as a drain time at the link rate.
        fifo_packets: Packet limit of a FIFO, overriding buffer_us.
        c_protection: Share of the link, in percent, the DualPI2 classic
            queue may take from a backlogged L4S queue.
    """

    buffer_us: int = 250_000
    fifo_packets: Optional[int] = None
    codel_target_us: int = 5_000
    codel_interval_us: int = 100_000
    pi2_target_us: int = 15_000
    pi2_tupdate_us: int = 16_000
    pi2_alpha: float = 0.16
    pi2_beta: float = 3.2
    l4s_step_us: int = 1_000
    coupling: float = 2.0
    tshift_us: int = 50_000
    c_protection: int = 10


@dataclass(slots=True)
class QueueSample:
    """One packet leaving (or being dropped by) the AQM."""

    time_us: int
    flow_id: int
    ecn: Ecn
    sojourn_us: int
    outcome: Outcome
    backlog_bytes: int


@dataclass
class AqmCounters:
    arrivals: int = 0
    departures: int = 0
    marks: int = 0
    drops: int = 0
    overflows: int = 0
    dropped_bytes: int = 0

    def add(self, other: "AqmCounters") -> "AqmCounters":
        return AqmCounters(
            *(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__)
        )


class AqmModel(ABC):
    """A bottleneck queue.

    Args:
        rate_bps: Link rate, which sizes the buffer.
        params: Discipline parameters.
        rng: Random source for probabilistic marking.
        sink: Where to append a QueueSample per packet, if anywhere.
    """

    kind: AqmKind

    def __init__(
        self,
        rate_bps: int,
        params: AqmParams = AqmParams(),
        rng: Optional[np.random.Generator] = None,
        sink: Optional[List[QueueSample]] = None,
    ) -> None:
        if rate_bps <= 0:
            raise ContractError(f"link rate must be positive, got {rate_bps}")
        self.rate_bps = rate_bps
        self.params = params
        self.capacity_bytes = max(rate_bps * params.buffer_us // 8_000_000, 2 * MTU)
        self.counters = AqmCounters()
        self.sink = sink
        self.bytes = 0
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self._uniforms = np.empty(0)
        self._next_uniform = 0

    def enqueue(self, pkt: Packet, now: int) -> bool:
        """Queues a packet; returns False if the buffer is full."""
        self.counters.arrivals += 1
        if self._full(pkt):
            self.counters.overflows += 1
            self.counters.dropped_bytes += pkt.size
            self._record(pkt, now, Outcome.DROP)
            log.debug("buffer overflow, flow %d seq %d", pkt.flow_id, pkt.seq)
            return False
        pkt.enqueued_us = now
        self.bytes += pkt.size
        self._push(pkt)
        return True

    @abstractmethod
    def dequeue(self, now: int) -> Optional[Packet]:
        """Returns the next packet to serialize, after any marking or drops."""

    @abstractmethod
    def __len__(self) -> int:
        pass

    @abstractmethod
    def drain(self) -> List[Packet]:
        """Removes and returns every queued packet, oldest first."""

    def adopt(self, packets: Iterable[Packet]) -> None:
        """Takes over packets from another discipline, keeping their stamps."""
        for pkt in packets:
            self.bytes += pkt.size
            self._push(pkt)

    def _full(self, pkt: Packet) -> bool:
        return self.bytes + pkt.size > self.capacity_bytes

    @abstractmethod
    def _push(self, pkt: Packet) -> None:
        pass

    def _pop(self, queue: Deque[Packet]) -> Packet:
        pkt = queue.popleft()
        self.bytes -= pkt.size
        return pkt

    def _signal(self, pkt: Packet, now: int) -> bool:
        """Marks an ECT packet or drops any other; returns True if marked."""
        if pkt.mark_ce():
            self.counters.marks += 1
            return True
        self.counters.drops += 1
        self.counters.dropped_bytes += pkt.size
        self._record(pkt, now, Outcome.DROP)
        return False

    def _deliver(self, pkt: Packet, now: int) -> Packet:
        self.counters.departures += 1
        marked = pkt.ecn is Ecn.CE and pkt.sent_ecn is not Ecn.CE
        self._record(pkt, now, Outcome.MARK if marked else Outcome.PASS)
        return pkt

    def _record(self, pkt: Packet, now: int, outcome: Outcome) -> None:
        if self.sink is not None:
            self.sink.append(
                QueueSample(
                    now,
                    pkt.flow_id,
                    pkt.sent_ecn,
                    now - pkt.enqueued_us if pkt.enqueued_us >= 0 else 0,
                    outcome,
                    self.bytes,
                )
            )

    def _uniform(self) -> float:
        if self._next_uniform >= len(self._uniforms):
            self._uniforms = self._rng.random(4096)
            self._next_uniform = 0
        u = self._uniforms[self._next_uniform]
        self._next_uniform += 1
        return float(u)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(packets={len(self)}, bytes={self.bytes})"


class Fifo(AqmModel):
    """Tail-drop FIFO."""

    kind = AqmKind.FIFO

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self._queue: Deque[Packet] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    def _full(self, pkt: Packet) -> bool:
        limit = self.params.fifo_packets
        if limit is not None:
            return len(self._queue) >= limit
        return super()._full(pkt)

    def _push(self, pkt: Packet) -> None:
        self._queue.append(pkt)

    def dequeue(self, now: int) -> Optional[Packet]:
        if not self._queue:
            return None
        return self._deliver(self._pop(self._queue), now)

    def drain(self) -> List[Packet]:
        packets = list(self._queue)
        self._queue.clear()
        self.bytes = 0
        return packets


class CoDel(Fifo):
    """CoDel, marking ECT packets where it would drop.

    Attributes:
        dropping: Whether CoDel is in its dropping state.
        count: Signals since entering the dropping state.
    """

    kind = AqmKind.CODEL

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.first_above_time = 0
        self.drop_next = 0
        self.count = 0
        self.lastcount = 0
        self.dropping = False

    def _full(self, pkt: Packet) -> bool:
        return AqmModel._full(self, pkt)

    def _control_law(self, t: int) -> int:
        return t + int(self.params.codel_interval_us / math.sqrt(self.count))

    def _do_dequeue(self, now: int) -> Tuple[Optional[Packet], bool]:
        if not self._queue:
            self.first_above_time = 0
            return None, False
        pkt = self._pop(self._queue)
        sojourn = now - pkt.enqueued_us
        ok_to_drop = False
        if sojourn < self.params.codel_target_us or self.bytes <= MTU:
            self.first_above_time = 0
        elif self.first_above_time == 0:
            self.first_above_time = now + self.params.codel_interval_us
        elif now >= self.first_above_time:
            ok_to_drop = True
        return pkt, ok_to_drop

    def dequeue(self, now: int) -> Optional[Packet]:
        pkt, ok_to_drop = self._do_dequeue(now)
        if pkt is None:
            self.dropping = False
            return None
        if self.dropping:
            if not ok_to_drop:
                self.dropping = False
            while self.dropping and now >= self.drop_next:
                self.count += 1
                if self._signal(pkt, now):
                    self.drop_next = self._control_law(self.drop_next)
                    break
                pkt, ok_to_drop = self._do_dequeue(now)
                if pkt is None:
                    self.dropping = False
                    return None
                if not ok_to_drop:
                    self.dropping = False
                else:
                    self.drop_next = self._control_law(self.drop_next)
        elif ok_to_drop:
            marked = self._signal(pkt, now)
            self.dropping = True
            delta = self.count - self.lastcount
            interval = self.params.codel_interval_us
            if delta > 1 and now - self.drop_next < 16 * interval:
                self.count = delta
            else:
                self.count = 1
            self.lastcount = self.count
            self.drop_next = self._control_law(now)
            if not marked:
                pkt, _ = self._do_dequeue(now)
                if pkt is None:
                    return None
        return self._deliver(pkt, now)


class _PiCore:
    """The PI controller behind PI2 and DualPI2.

    p_prime is updated every tupdate from the queue delay; the classic
    probability is its square.
    """

    def __init__(self, params: AqmParams) -> None:
        self.params = params
        self.p_prime = 0.0
        self.qdelay_old_us = 0
        self.next_update_us = params.pi2_tupdate_us

    def catch_up(self, now: int, qdelay_us: Callable[[], int]) -> None:
        """Runs every update that is due, using the current queue delay."""
        p = self.params
        tupdate_s = p.pi2_tupdate_us / 1e6
        while now >= self.next_update_us:
            qdelay = qdelay_us()
            self.p_prime += (
                p.pi2_alpha * tupdate_s * (qdelay - p.pi2_target_us) / 1e6
                + p.pi2_beta * tupdate_s * (qdelay - self.qdelay_old_us) / 1e6
            )
            self.p_prime = min(max(self.p_prime, 0.0), 1.0)
            self.qdelay_old_us = qdelay
            self.next_update_us += p.pi2_tupdate_us


class Pi2(Fifo):
    """Single-queue PI2 with squared (Classic) marking probability."""

    kind = AqmKind.PI2

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.core = _PiCore(self.params)

    def _full(self, pkt: Packet) -> bool:
        return AqmModel._full(self, pkt)

    @property
    def probability(self) -> float:
        return self.core.p_prime**2

    def _head_delay(self, now: int) -> int:
        return now - self._queue[0].enqueued_us if self._queue else 0

    def dequeue(self, now: int) -> Optional[Packet]:
        self.core.catch_up(now, lambda: self._head_delay(now))
        while self._queue:
            pkt = self._pop(self._queue)
            if self._uniform() < self.probability and not self._signal(pkt, now):
                continue
            return self._deliver(pkt, now)
        return None


class DualPi2(AqmModel):
    """Coupled dual-queue AQM.

    ECT(1) and CE go to the L4S queue, everything else to the classic queue.
    The L4S queue marks at once above the step threshold and otherwise with
    the coupled probability k * p'. The classic queue marks or drops with
    p'^2. The scheduler serves the L4S queue unless the classic head has
    waited tshift longer than the L4S head and the classic queue holds
    credit. Serving L4S while classic waits earns credit in proportion to
    c_protection; serving classic while L4S waits spends it, so a full
    classic buffer cannot starve the L4S queue.
    """

    kind = AqmKind.DUALPI2

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.lq: Deque[Packet] = deque()
        self.cq: Deque[Packet] = deque()
        self.core = _PiCore(self.params)
        if not 0 < self.params.c_protection < 100:
            raise ContractError(
                f"c_protection must be within (0, 100), "
                f"got {self.params.c_protection}"
            )
        self.wc = self.params.c_protection
        self.wl = 100 - self.params.c_protection
        self.credit = 0

    def __len__(self) -> int:
        return len(self.lq) + len(self.cq)

    @staticmethod
    def classify_l4s(pkt: Packet) -> bool:
        return pkt.ecn in (Ecn.ECT1, Ecn.CE)

    def _push(self, pkt: Packet) -> None:
        (self.lq if self.classify_l4s(pkt) else self.cq).append(pkt)

    @property
    def classic_probability(self) -> float:
        return self.core.p_prime**2

    @property
    def coupled_probability(self) -> float:
        return min(self.params.coupling * self.core.p_prime, 1.0)

    def _sojourn(self, queue: Deque[Packet], now: int) -> int:
        return now - queue[0].enqueued_us if queue else 0

    def _serve_l4s(self, now: int) -> bool:
        if not self.lq:
            return False
        if not self.cq or self.credit <= 0:
            return True
        l_wait = self._sojourn(self.lq, now)
        return l_wait + self.params.tshift_us >= self._sojourn(self.cq, now)

    def _charge(self, l4s: bool, size: int) -> None:
        # credit stays within one classic turn, so C gets wc of every wc + wl
        if l4s and self.cq:
            self.credit = min(self.credit + self.wc * size, self.wl * MTU)
        elif not l4s and self.lq:
            self.credit -= self.wl * size

    def dequeue(self, now: int) -> Optional[Packet]:
        self.core.catch_up(
            now, lambda: max(self._sojourn(self.lq, now), self._sojourn(self.cq, now))
        )
        while self.lq or self.cq:
            if self._serve_l4s(now):
                pkt = self._pop(self.lq)
                self._charge(True, pkt.size)
                sojourn = now - pkt.enqueued_us
                if sojourn >= self.params.l4s_step_us:
                    self._signal(pkt, now)
                elif self._uniform() < self.coupled_probability:
                    self._signal(pkt, now)
                return self._deliver(pkt, now)
            pkt = self._pop(self.cq)
            self._charge(False, pkt.size)
            hit = self._uniform() < self.classic_probability
            if hit and not self._signal(pkt, now):
                continue
            return self._deliver(pkt, now)
        return None

    def drain(self) -> List[Packet]:
        packets = sorted(
            list(self.lq) + list(self.cq), key=lambda pkt: pkt.enqueued_us
        )
        self.lq.clear()
        self.cq.clear()
        self.bytes = 0
        self.credit = 0
        return packets


AQM_CLASSES = {
    AqmKind.FIFO: Fifo,
    AqmKind.CODEL: CoDel,
    AqmKind.PI2: Pi2,
    AqmKind.DUALPI2: DualPi2,
}


def make_aqm(
    kind: AqmKind,
    rate_bps: int,
    params: AqmParams = AqmParams(),
    rng: Optional[np.random.Generator] = None,
    sink: Optional[List[QueueSample]] = None,
) -> AqmModel:
    """Builds the discipline of the given kind."""
    return AQM_CLASSES[kind](rate_bps, params, rng, sink)
