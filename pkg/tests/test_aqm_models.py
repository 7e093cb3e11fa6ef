# tests/test_aqm_models.py
"""Tests the queue disciplines."""
import numpy as np
import pytest

from ecnfallback.aqm_models import (
    AqmCounters,
    AqmKind,
    AqmParams,
    CoDel,
    DualPi2,
    Fifo,
    Outcome,
    Pi2,
    make_aqm,
)
from ecnfallback.errors import ContractError
from ecnfallback.packet import MSS, Ecn, Packet

RATE = 12_000_000


def packet(ecn=Ecn.ECT0, flow_id=0, seq=0):
    return Packet(flow_id, seq, MSS, ecn, 0)


def standing_queue(aqm, ecn, n=200, gap_us=1000):
    """Enqueues n packets at once, then takes one out every gap_us.

    Returns:
        The outcome of every packet as (time, outcome) pairs.
    """
    for i in range(n):
        aqm.enqueue(packet(ecn, seq=i * MSS), 0)
    now = 0
    while len(aqm):
        now += gap_us
        aqm.dequeue(now)
    return [(s.time_us, s.outcome) for s in aqm.sink]


@pytest.mark.parametrize(
    ("kind", "classic", "l4s"),
    (
        pytest.param(AqmKind.FIFO, False, False, id="fifo"),
        pytest.param(AqmKind.CODEL, True, False, id="codel"),
        pytest.param(AqmKind.PI2, True, False, id="pi2"),
        pytest.param(AqmKind.DUALPI2, False, True, id="dualpi2"),
    ),
)
def test_kind_flags(kind, classic, l4s):
    assert kind.classic == classic
    assert kind.l4s == l4s
    assert make_aqm(kind, RATE).kind is kind


def test_rate_must_be_positive():
    with pytest.raises(ContractError):
        Fifo(0)


def test_buffer_sized_by_drain_time():
    assert Fifo(RATE).capacity_bytes == 375_000


def test_fifo_packet_limit():
    fifo = Fifo(RATE, AqmParams(fifo_packets=2))
    assert fifo.enqueue(packet(), 0)
    assert fifo.enqueue(packet(), 0)
    assert not fifo.enqueue(packet(), 0)
    assert fifo.counters.overflows == 1
    assert fifo.counters.dropped_bytes == 1500
    assert fifo.bytes == 3000


def test_codel_marks_after_an_interval_above_target():
    outcomes = standing_queue(CoDel(RATE, sink=[]), Ecn.ECT0)
    first_mark = next(t for t, o in outcomes if o is Outcome.MARK)
    assert first_mark == 105_000
    assert all(o is Outcome.PASS for t, o in outcomes if t < first_mark)
    assert len(outcomes) == 200


def test_codel_treats_both_ect_codepoints_alike():
    ect0 = standing_queue(CoDel(RATE, sink=[]), Ecn.ECT0)
    ect1 = standing_queue(CoDel(RATE, sink=[]), Ecn.ECT1)
    assert ect0 == ect1


def test_pi2_treats_both_ect_codepoints_alike():
    runs = []
    for ecn in (Ecn.ECT0, Ecn.ECT1):
        pi2 = Pi2(RATE, rng=np.random.default_rng(5), sink=[])
        runs.append(standing_queue(pi2, ecn, gap_us=20_000))
    assert runs[0] == runs[1]
    assert any(o is Outcome.MARK for _, o in runs[0])


def test_codel_drops_what_it_cannot_mark():
    codel = CoDel(RATE, sink=[])
    outcomes = standing_queue(codel, Ecn.NOT_ECT)
    assert Outcome.MARK not in {o for _, o in outcomes}
    assert codel.counters.drops > 0
    assert codel.counters.dropped_bytes == 1500 * codel.counters.drops


def test_codel_short_queue_never_marks():
    codel = CoDel(RATE, sink=[])
    for i in range(1_000):
        codel.enqueue(packet(seq=i), i * 5_000)
        codel.dequeue(i * 5_000 + 4_000)
    assert codel.counters.marks == 0


def test_pi2_idle_keeps_probability_zero():
    pi2 = Pi2(RATE)
    assert pi2.dequeue(1_000_000) is None
    assert pi2.probability == 0.0


def test_pi2_standing_queue_raises_probability():
    pi2 = Pi2(RATE)
    for i in range(100):
        pi2.enqueue(packet(seq=i), 0)
    pi2.dequeue(100_000)
    assert pi2.probability > 0.0


@pytest.mark.parametrize(
    ("ecn", "l4s"),
    (
        pytest.param(Ecn.ECT1, True, id="ect1"),
        pytest.param(Ecn.CE, True, id="ce"),
        pytest.param(Ecn.ECT0, False, id="ect0"),
        pytest.param(Ecn.NOT_ECT, False, id="not_ect"),
    ),
)
def test_dualpi2_classifier(ecn, l4s):
    dual = DualPi2(RATE)
    dual.enqueue(packet(ecn), 0)
    assert (len(dual.lq), len(dual.cq)) == ((1, 0) if l4s else (0, 1))


@pytest.mark.parametrize(
    ("sojourn", "marked"),
    (
        pytest.param(500, False, id="below_step"),
        pytest.param(2_000, True, id="above_step"),
    ),
)
def test_dualpi2_step_marks_l4s_queue(sojourn, marked):
    dual = DualPi2(RATE)
    dual.enqueue(packet(Ecn.ECT1), 0)
    pkt = dual.dequeue(sojourn)
    assert pkt is not None
    assert (pkt.ecn is Ecn.CE) == marked


@pytest.mark.parametrize(
    ("l4s_at", "order"),
    (
        pytest.param(5_000, [1, 1, 0], id="l4s_first"),
        pytest.param(59_000, [1, 0, 1], id="classic_waited_too_long"),
    ),
)
def test_dualpi2_time_shifted_scheduler(l4s_at, order):
    dual = DualPi2(RATE)
    dual.enqueue(packet(Ecn.ECT0, flow_id=0), 0)
    for i in range(2):
        dual.enqueue(packet(Ecn.ECT1, flow_id=1, seq=i * MSS), l4s_at)
    out = [dual.dequeue(60_000) for _ in range(3)]
    assert [p.flow_id for p in out if p] == order


def test_dualpi2_full_classic_buffer_cannot_starve_l4s():
    dual = DualPi2(RATE)
    for i in range(200):
        dual.enqueue(packet(Ecn.ECT0, flow_id=0, seq=i * MSS), 0)
    l4s_sojourns = []
    for step in range(1, 401):
        now = step * 1000
        if step % 2 == 0:
            dual.enqueue(packet(Ecn.ECT1, flow_id=1, seq=step * MSS), now)
        pkt = dual.dequeue(now)
        if pkt is not None and pkt.flow_id == 1:
            l4s_sojourns.append(now - pkt.enqueued_us)
    assert len(l4s_sojourns) == 200
    assert max(l4s_sojourns) <= 2_000


def test_dualpi2_classic_share_is_bounded():
    dual = DualPi2(RATE)
    for i in range(100):
        dual.enqueue(packet(Ecn.ECT0, flow_id=0, seq=i * MSS), 0)
        dual.enqueue(packet(Ecn.ECT1, flow_id=1, seq=i * MSS), 60_000)
    served = [dual.dequeue(200_000 + i).flow_id for i in range(100)]
    assert served[:2] == [1, 0]
    assert served.count(0) == 10


@pytest.mark.parametrize("share", (0, 100))
def test_dualpi2_rejects_protection_out_of_range(share):
    with pytest.raises(ContractError):
        DualPi2(RATE, AqmParams(c_protection=share))


def test_switch_keeps_order_and_stamps():
    dual = DualPi2(RATE)
    for i, ecn in enumerate((Ecn.ECT0, Ecn.ECT1, Ecn.ECT0)):
        dual.enqueue(packet(ecn, flow_id=i), i * 10)
    codel = CoDel(RATE)
    codel.adopt(dual.drain())
    assert dual.bytes == 0 and len(dual) == 0
    assert codel.bytes == 4500
    out = [codel.dequeue(30) for _ in range(3)]
    assert [p.flow_id for p in out if p] == [0, 1, 2]
    assert [p.enqueued_us for p in out if p] == [0, 10, 20]


def test_counters_add():
    total = AqmCounters(marks=2, drops=1).add(AqmCounters(marks=3, arrivals=4))
    assert (total.marks, total.drops, total.arrivals) == (5, 1, 4)
