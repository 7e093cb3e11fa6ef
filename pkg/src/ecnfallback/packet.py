"""src/ecnfallback/packet.py
Packets and ACKs carried by the simulator.
"""
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Tuple

HEADER_BYTES = 40
MTU = 1500
MSS = MTU - HEADER_BYTES


class Ecn(IntEnum):
    """ECN codepoints, with their wire values."""

    NOT_ECT = 0b00
    ECT1 = 0b01
    ECT0 = 0b10
    CE = 0b11

    @property
    def ect(self) -> bool:
        return self in (Ecn.ECT0, Ecn.ECT1)


class TracerRole(Enum):
    NONE = "none"
    FRONT = "front"
    MIDDLE = "middle"
    REAR = "rear"


@dataclass(slots=True)
class Packet:
    """A data segment.

    Attributes:
        flow_id: Owning flow.
        seq: First payload byte.
        length: Payload bytes.
        ecn: Codepoint; only an AQM sets CE, and only on an ECT packet.
        sent_us: Send time, echoed back by the ACK for RTT samples.
        tracer: Role in a tracer triplet.
        sent_ecn: Codepoint as sent, kept for per-codepoint queue statistics.
        enqueued_us: Set by the AQM on enqueue, -1 before.
        retransmit: Whether this is a retransmission.
    """

    flow_id: int
    seq: int
    length: int
    ecn: Ecn
    sent_us: int
    tracer: TracerRole = TracerRole.NONE
    sent_ecn: Ecn = field(init=False)
    enqueued_us: int = -1
    retransmit: bool = False

    def __post_init__(self) -> None:
        self.sent_ecn = self.ecn

    @property
    def end(self) -> int:
        return self.seq + self.length

    @property
    def size(self) -> int:
        """Bytes on the wire."""
        return self.length + HEADER_BYTES

    def mark_ce(self) -> bool:
        """Sets CE if the packet is ECN-capable; returns whether it did."""
        if self.ecn.ect:
            self.ecn = Ecn.CE
            return True
        return self.ecn is Ecn.CE


@dataclass(slots=True)
class Ack:
    """A pure ACK.

    Attributes:
        flow_id: Owning flow.
        ackno: Next byte expected by the receiver.
        sack_blocks: Up to three (start, end) blocks. The first one reports
            the segment that triggered the ACK: the duplicated range for
            duplicate data (a D-SACK), otherwise the block holding the most
            recent out-of-order segment.
        ce_bytes: Cumulative count of CE-marked payload bytes received.
        echo_us: Send time of the segment that triggered the ACK.
        delay_us: How long the receiver held the ACK back.
        dsack: Whether the first block is a D-SACK.
    """

    flow_id: int
    ackno: int
    sack_blocks: Tuple[Tuple[int, int], ...]
    ce_bytes: int
    echo_us: int
    delay_us: int = 0
    dsack: bool = False

    @property
    def sack_edge(self) -> int:
        """Right edge of the first SACK block, 0 if there is none."""
        return self.sack_blocks[0][1] if self.sack_blocks else 0

    @property
    def size(self) -> int:
        return HEADER_BYTES
