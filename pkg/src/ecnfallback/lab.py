"""src/ecnfallback/lab.py
Scenario matrices, fairness statistics and detection verdicts.

The Lab object sits behind the command line. It owns the output directory
and the parallelism, runs simulations and writes their CSVs.
"""
import dataclasses
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, cast

import numpy as np
from rich.table import Table

from ecnfallback import netsim
from ecnfallback.active_probe import TRACER_NUM, ActiveProbe, ProbeParams
from ecnfallback.aqm_models import AqmKind, make_aqm
from ecnfallback.config import (
    RATES_MBPS,
    RTTS_MS,
    AqmSwitch,
    FeatureFlags,
    Reroute,
    ScenarioConfig,
    TrafficPattern,
)
from ecnfallback.errors import ContractError, EcnFallbackError
from ecnfallback.fallback_detect import SCORE_ONE, ClassicEcnScore
from ecnfallback.metrics import (
    SECOND_US,
    FlowRecord,
    MetricsBundle,
    emit_csv,
    write_table,
)
from ecnfallback.packet import MSS, MTU, Ack, Ecn, Packet

log = logging.getLogger(__name__)

CLASSIC_THRESHOLD = 1.0
# Share of completed short flows ending Classic that counts as a false positive.
SHORT_FLOW_SHARE = 0.25
# Fairness samples taken after the flows settle.
MEASURE_US = 10 * SECOND_US


class Color(Enum):
    GREEN = "green"
    AMBER = "amber"
    RED = "red"


@dataclass(frozen=True)
class Verdict:
    """Detection outcome of one scenario.

    Attributes:
        color: GREEN when detection matched the bottleneck, AMBER for a false
            positive over an L4S AQM, RED for a false negative over a Classic
            ECN AQM.
        basis: What the color was decided on.
    """

    color: Color
    basis: str


def verdict(
    aqm: AqmKind,
    long_scores: Sequence[float],
    short_scores: Sequence[float] = (),
    threshold: float = CLASSIC_THRESHOLD,
) -> Verdict:
    """Grades the final scores of the Prague flows against the AQM in place.

    Over a Classic ECN AQM only long-running flows count. Over an L4S AQM a
    long flow ending Classic, or more than a quarter of the completed short
    flows doing so, is a false positive.
    """
    classic_long = sum(score >= threshold for score in long_scores)
    if aqm.classic:
        missed = len(long_scores) - classic_long
        if missed:
            return Verdict(Color.RED, f"{missed} long flow(s) stayed L4S")
        return Verdict(Color.GREEN, f"{classic_long} long flow(s) detected Classic")
    if aqm.l4s:
        if classic_long:
            return Verdict(Color.AMBER, f"{classic_long} long flow(s) went Classic")
        if short_scores:
            share = sum(s >= threshold for s in short_scores) / len(short_scores)
            if share > SHORT_FLOW_SHARE:
                return Verdict(
                    Color.AMBER, f"{share:.0%} of short flows went Classic"
                )
    return Verdict(Color.GREEN, "no Classic ECN AQM, flows stayed L4S")


def normalized_rate(x: float, capacity: float, n: int) -> float:
    """Rate of a flow relative to its equal share of the link."""
    if n < 1:
        raise ContractError(f"flow count must be at least 1, got {n}")
    if capacity <= 0:
        raise ContractError(f"capacity must be positive, got {capacity}")
    return x * n / capacity


def stabilization_time_us(rate_bps: int, n_flows: int, base_rtt_us: int) -> int:
    """T = 5 + x * R / 100000 s, with x = C/n in b/s and R in s."""
    x = rate_bps / max(n_flows, 1)
    return int((5 + x * (base_rtt_us / 1e6) / 100_000) * SECOND_US)


@dataclass(frozen=True)
class RateStats:
    """Whiskers of the normalized rate of a flow class."""

    p1: float
    mean: float
    p99: float

    @classmethod
    def of(cls, samples: Iterable[float]) -> "RateStats":
        data = np.fromiter(samples, dtype=float)
        if not data.size:
            return cls(float("nan"), float("nan"), float("nan"))
        return cls(
            float(np.percentile(data, 1)),
            float(data.mean()),
            float(np.percentile(data, 99)),
        )


def settle_time_us(config: ScenarioConfig) -> int:
    """When the fairness samples of a scenario start.

    The stabilization time T for its long flows, counted from the later of
    the two class start times.
    """
    pattern = config.pattern
    n = pattern.prague.long_flows + pattern.competitor.long_flows
    offset = max(config.prague_start_us, config.competitor_start_us)
    return offset + stabilization_time_us(config.rate_bps, n, config.base_rtt_us)


def measured(config: ScenarioConfig, window_us: int = MEASURE_US) -> ScenarioConfig:
    """Lengthens a scenario so that window_us of samples follow its settle time."""
    needed = settle_time_us(config) + window_us
    if config.duration_us >= needed:
        return config
    return config.replace(duration_us=needed)


def fairness(bundle: MetricsBundle, config: ScenarioConfig) -> Dict[str, RateStats]:
    """Normalized per-second rates of the long flows of each class.

    Only samples taken after the settle time count. A run too short to have
    any yields no statistics; size it with `measured` first.
    """
    long_flows = {fid: rec for fid, rec in bundle.flows.items() if not rec.short}
    n = len(long_flows)
    if not n:
        return {}
    start = settle_time_us(config)
    if start >= config.duration_us:
        log.warning(
            "%s ends %.1f s before its flows settle, no fairness samples",
            config.label,
            (start - config.duration_us) / 1e6,
        )
        return {}
    first = -(-start // SECOND_US)
    samples: Dict[str, List[float]] = {}
    for fid, rec in sorted(long_flows.items()):
        rates = bundle.per_second(fid)[first:]
        samples.setdefault(rec.cc, []).extend(
            normalized_rate(float(r), config.rate_bps, n) for r in rates
        )
    return {cc: RateStats.of(values) for cc, values in sorted(samples.items())}


def grade(bundle: MetricsBundle, config: ScenarioConfig) -> Verdict:
    prague = [rec for rec in bundle.flows.values() if rec.cc == "prague"]
    long_scores = [r.final_score for r in prague if not r.short]
    short_scores = [
        r.final_score for r in prague if r.short and r.end_us is not None
    ]
    return verdict(
        config.final_aqm,
        [s for s in long_scores if s is not None],
        [s for s in short_scores if s is not None],
    )


def _long_prague(bundle: MetricsBundle) -> List[FlowRecord]:
    flows = sorted(bundle.flows.items())
    return [r for _, r in flows if r.cc == "prague" and not r.short]


def peak_score(bundle: MetricsBundle) -> Optional[float]:
    """Highest score any long-running Prague flow reached during the run."""
    peaks = [r.max_score for r in _long_prague(bundle) if r.max_score is not None]
    return max(peaks) if peaks else None


def first_classic_us(bundle: MetricsBundle) -> Optional[int]:
    """When a long-running Prague flow first reached CLASSIC_ECN, if ever."""
    times = [r.first_classic_us for r in _long_prague(bundle)]
    known = [t for t in times if t is not None]
    return min(known) if known else None


@dataclass
class CellResult:
    """Outcome of one matrix cell; error is set instead when the run failed.

    Attributes:
        verdict: Grade of the final scores.
        rates: Fairness whiskers per congestion controller.
        summary: Run counters plus the verdict and whiskers, as written to
            summary.csv.
        peak_score: Highest score of a long-running Prague flow.
        first_classic_us: When one of them first reached CLASSIC_ECN.
    """

    label: str
    verdict: Optional[Verdict] = None
    rates: Dict[str, RateStats] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)
    error: Optional[str] = None
    peak_score: Optional[float] = None
    first_classic_us: Optional[int] = None

    @property
    def color(self) -> str:
        return self.verdict.color.value if self.verdict else "failed"

    @property
    def went_classic(self) -> bool:
        """Whether a long-running Prague flow crossed CLASSIC_ECN at any time."""
        if self.first_classic_us is not None:
            return True
        return self.peak_score is not None and self.peak_score >= CLASSIC_THRESHOLD


def graded(bundle: MetricsBundle, config: ScenarioConfig) -> CellResult:
    """Grades a finished run and adds the outcome to its summary."""
    result = CellResult(
        config.label,
        grade(bundle, config),
        fairness(bundle, config),
        peak_score=peak_score(bundle),
        first_classic_us=first_classic_us(bundle),
    )
    assert result.verdict is not None
    bundle.summary.update(
        verdict=result.color,
        basis=result.verdict.basis,
        peak_score=result.peak_score,
        first_classic_us=result.first_classic_us,
    )
    for cc, stats in result.rates.items():
        bundle.summary.update(
            {
                f"{cc}_p1": round(stats.p1, 4),
                f"{cc}_mean": round(stats.mean, 4),
                f"{cc}_p99": round(stats.p99, 4),
            }
        )
    result.summary = dict(bundle.summary)
    return result


def seed_for(label: str, base_seed: int) -> int:
    """A per-cell seed that does not depend on execution order."""
    return zlib.crc32(label.encode()) ^ base_seed


def run_cell(config: ScenarioConfig) -> CellResult:
    """Runs one scenario and grades it. Never raises for a failed run."""
    try:
        bundle = netsim.run(config)
    except EcnFallbackError as err:
        log.error("cell %s failed: %s", config.label, err)
        return CellResult(config.label, error=str(err))
    return graded(bundle, config)


@dataclass(frozen=True)
class Grid:
    """A set of scenarios: the product of rates, RTTs, patterns and AQMs.

    duration_us is a minimum: each cell runs long enough to leave measure_us
    of fairness samples after its flows settle. A measure_us of 0 runs every
    cell for duration_us as given.
    """

    rates_mbps: Tuple[float, ...] = (12, 40, 120)
    rtts_ms: Tuple[float, ...] = (10, 20, 50)
    patterns: Tuple[str, ...] = ("1:0", "1:1", "1:9", "1L:9")
    aqms: Tuple[AqmKind, ...] = (AqmKind.CODEL, AqmKind.DUALPI2)
    duration_us: int = 20_000_000
    seed: int = 1
    flags: FeatureFlags = FeatureFlags()
    measure_us: int = MEASURE_US

    @classmethod
    def full(cls, **changes) -> "Grid":
        patterns = tuple(
            f"{p}:{c}"
            for p, c in product(("1", "9", "L", "1L"), ("0", "1", "9", "L", "1L"))
        )
        return cls(RATES_MBPS, RTTS_MS, patterns, **changes)

    def scenarios(
        self, base: ScenarioConfig = ScenarioConfig()
    ) -> List[ScenarioConfig]:
        configs = []
        for aqm, rate, rtt, pattern in product(
            self.aqms, self.rates_mbps, self.rtts_ms, self.patterns
        ):
            config = base.replace(
                rate_bps=int(rate * 1_000_000),
                base_rtt_us=int(rtt * 1000),
                aqm=aqm,
                pattern=TrafficPattern.parse(pattern),
                duration_us=self.duration_us,
                flags=self.flags,
                trace_packets=False,
            )
            if self.measure_us:
                config = measured(config, self.measure_us)
            configs.append(
                config.replace(seed=seed_for(config.label, self.seed)).validate()
            )
        return configs


@dataclass
class MatrixResult:
    cells: List[CellResult]

    @property
    def counts(self) -> Dict[str, int]:
        counts = {c.value: 0 for c in Color}
        counts["failed"] = 0
        for cell in self.cells:
            counts[cell.color] += 1
        return counts


class Lab:
    """Runs scenarios and writes their results.

    Args:
        out_dir: Where CSVs go.
        jobs: Matrix cells run in parallel.
    """

    def __init__(self, out_dir: Path = Path("results"), jobs: int = 1) -> None:
        if jobs < 1:
            raise ContractError(f"jobs must be at least 1, got {jobs}")
        self.out_dir = Path(out_dir)
        self.jobs = jobs

    def run(self, config: ScenarioConfig, write: bool = True) -> CellResult:
        """Runs one scenario; writes its series and summary under out_dir/<label>."""
        bundle = netsim.run(config)
        result = graded(bundle, config)
        assert result.verdict is not None
        log.info("%s: %s (%s)", config.label, result.color, result.verdict.basis)
        if write:
            emit_csv(bundle, self.out_dir / config.label)
        return result

    def run_matrix(
        self, grid: Grid, base: ScenarioConfig = ScenarioConfig(), write: bool = True
    ) -> MatrixResult:
        """Runs every cell of a grid; failed cells are recorded, not raised."""
        configs = grid.scenarios(base)
        log.info("running %d cells with %d job(s)", len(configs), self.jobs)
        if self.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                cells = list(pool.map(run_cell, configs))
        else:
            cells = [run_cell(config) for config in configs]
        for cell in cells:
            log.info("cell %s: %s", cell.label, cell.color)
        result = MatrixResult(sorted(cells, key=lambda c: c.label))
        if write:
            self.write_summary(result.cells, self.out_dir / "matrix.csv")
        return result

    def write_summary(self, cells: Sequence[CellResult], path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = []
        for cell in cells:
            if not cell.rates:
                rows.append([cell.label, cell.color, "", "", "", "", cell.error])
            for cc, stats in cell.rates.items():
                rows.append(
                    [
                        cell.label,
                        cell.color,
                        cc,
                        round(stats.p1, 4),
                        round(stats.mean, 4),
                        round(stats.p99, 4),
                        cell.verdict.basis if cell.verdict else cell.error,
                    ]
                )
        header = ("cell", "verdict", "cc", "p1", "mean", "p99", "basis")
        return write_table(path, header, rows)

    def calibrate(
        self,
        base: ScenarioConfig,
        v0s_us: Sequence[int] = (500, 750, 1000),
        d0s_us: Sequence[int] = (1000, 2000, 3000),
        g_diffs: Sequence[int] = (0, 1),
    ) -> List[Tuple[int, int, int, int, int]]:
        """Sweeps V0, D0 and the mdev gain difference.

        Each combination runs a Classic (CoDel, 1:1) and an L4S (DualPI2,
        1:0) scenario built from `base`.

        Returns:
            Rows of (v0_us, d0_us, g_diff, correct verdicts, scenarios).
        """
        probes = (
            base.replace(aqm=AqmKind.CODEL, pattern=TrafficPattern.parse("1:1")),
            base.replace(aqm=AqmKind.DUALPI2, pattern=TrafficPattern.parse("1:0")),
        )
        rows = []
        for v0, d0, g_diff in product(v0s_us, d0s_us, g_diffs):
            detection = dataclasses.replace(
                base.detection, v0_us=v0, d0_us=d0, g_diff=g_diff
            )
            configs = [
                p.replace(detection=detection, trace_packets=False) for p in probes
            ]
            cells = [run_cell(config) for config in configs]
            correct = sum(c.verdict is not None and c.color == "green" for c in cells)
            log.info("v0=%d d0=%d g_diff=%d: %d/2", v0, d0, g_diff, correct)
            rows.append((v0, d0, g_diff, correct, len(cells)))
        write_table(
            self._ensure_out() / "calibrate.csv",
            ("v0_us", "d0_us", "g_diff", "correct", "scenarios"),
            rows,
        )
        return rows

    def verify(self, quick: bool = False) -> List[Tuple[str, bool, str]]:
        """Runs the scenario-level acceptance checks.

        Args:
            quick: Run one cell of each grid instead of all of them.
        """
        results = []
        for name, check in ACCEPTANCE.items():
            try:
                passed, detail = check(quick)
            except EcnFallbackError as err:
                passed, detail = False, str(err)
            log.info("%s: %s (%s)", name, "pass" if passed else "FAIL", detail)
            results.append((name, passed, detail))
        return results

    def _ensure_out(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir


def verdict_table(cells: Sequence[CellResult]) -> Table:
    table = Table(title="Detection verdicts")
    for column in ("cell", "verdict", "Prague mean", "competitor mean", "basis"):
        table.add_column(column)
    styles = {"green": "green", "amber": "yellow", "red": "red", "failed": "magenta"}
    for cell in cells:
        prague = cell.rates.get("prague")
        others = [s for cc, s in cell.rates.items() if cc != "prague"]
        table.add_row(
            cell.label,
            f"[{styles[cell.color]}]{cell.color.upper()}[/]",
            f"{prague.mean:.2f}" if prague else "-",
            f"{others[0].mean:.2f}" if others else "-",
            cell.verdict.basis if cell.verdict else (cell.error or ""),
        )
    return table


def _flow(bundle: MetricsBundle, cc: str) -> Optional[int]:
    ids = [f for f, r in sorted(bundle.flows.items()) if r.cc == cc and not r.short]
    return ids[0] if ids else None


def _score_at(bundle: MetricsBundle, flow_id: int, time_us: int) -> Optional[float]:
    latest = None
    for t, fid, score, *_ in bundle.score.rows:
        if fid == flow_id and t <= time_us:
            latest = score
    return latest


def _check_coexistence(quick: bool) -> Tuple[bool, str]:  # pragma: no cover
    cells = [(40, 10)] if quick else list(product((12, 40, 120), (10, 20, 50)))
    failures = []
    for rate, rtt in cells:
        config = measured(
            ScenarioConfig(
                rate_bps=rate * 1_000_000, base_rtt_us=rtt * 1000, trace_packets=False
            )
        )
        rates = run_cell(config).rates
        for cc, stats in rates.items():
            if not 0.5 <= stats.mean <= 2.0:
                failures.append(f"{config.label} {cc} {stats.mean:.2f}")
    off = measured(
        ScenarioConfig(
            rate_bps=40_000_000,
            base_rtt_us=10_000,
            flags=FeatureFlags(fallback=False),
            trace_packets=False,
        )
    )
    rates = run_cell(off).rates
    ratio = rates["prague"].mean / max(rates["cubic"].mean, 1e-9)
    if ratio <= 2:
        failures.append(f"fallback off ratio {ratio:.2f}")
    return not failures, "; ".join(failures) or f"fallback off ratio {ratio:.1f}"


def _check_detection_speed(quick: bool) -> Tuple[bool, str]:  # pragma: no cover
    config = ScenarioConfig(rate_bps=12_000_000, base_rtt_us=50_000)
    bundle = netsim.run(config)
    fid = _flow(bundle, "prague")
    assert fid is not None
    rec = bundle.flows[fid]
    wake, classic = rec.first_wake_us, rec.first_classic_us
    ok = (
        wake is not None
        and wake <= 2 * SECOND_US
        and classic is not None
        and classic <= 4 * SECOND_US
        and rec.first_ceiling_us is not None
    )
    return ok, f"wake {wake} us, classic {classic} us, ceiling {rec.first_ceiling_us}"


def _check_no_false_positive(quick: bool) -> Tuple[bool, str]:
    rates = (40,) if quick else (40, 120, 200)
    rtts = (10,) if quick else (5, 10, 20, 50)
    grid = Grid(rates, rtts, ("1:0", "1:1"), (AqmKind.DUALPI2,))
    failed = []
    for cell in map(run_cell, grid.scenarios()):
        if cell.color != "green" or cell.went_classic:
            failed.append(f"{cell.label} peak {cell.peak_score}")
    return not failed, ", ".join(failed) or "all GREEN, no crossing"


def _check_staggered(quick: bool) -> Tuple[bool, str]:  # pragma: no cover
    config = ScenarioConfig(
        rate_bps=40_000_000,
        base_rtt_us=20_000,
        pattern=TrafficPattern.parse("1:9"),
        prague_start_us=10 * SECOND_US,
    )
    bundle = netsim.run(config)
    fid = _flow(bundle, "prague")
    assert fid is not None
    rec = bundle.flows[fid]
    switched = rec.first_classic_us
    delay = None if switched is None else switched - config.prague_start_us
    in_time = delay is not None and delay <= 2 * SECOND_US
    tail = slice(-3, None)
    prague = bundle.per_second(fid)[tail].mean()
    cubic = np.mean(
        [
            bundle.per_second(f)[tail].mean()
            for f, r in bundle.flows.items()
            if r.cc == "cubic"
        ]
    )
    ratio = float(prague / max(cubic, 1e-9))
    return in_time and ratio <= 2, f"classic at {switched} us, ratio {ratio:.2f}"


def _longest_run(flags: Iterable[bool]) -> int:
    longest = current = 0
    for flag in flags:
        current = current + 1 if flag else 0
        longest = max(longest, current)
    return longest


def _check_aqm_switch(quick: bool) -> Tuple[bool, str]:  # pragma: no cover
    details = []
    ok = True
    pairs = ((AqmKind.CODEL, AqmKind.DUALPI2), (AqmKind.DUALPI2, AqmKind.CODEL))
    for first, second in pairs:
        config = ScenarioConfig(
            rate_bps=40_000_000,
            base_rtt_us=10_000,
            aqm=first,
            pattern=TrafficPattern.parse("1L:9"),
            switch=AqmSwitch(10 * SECOND_US, second),
        )
        bundle = netsim.run(config)
        fid = _flow(bundle, "prague")
        assert fid is not None
        before = _score_at(bundle, fid, 8 * SECOND_US)
        after = bundle.flows[fid].final_score
        right_before = before is not None and (before >= 1.0) == first.classic
        right_after = after is not None and (after >= 1.0) == second.classic
        rates = bundle.per_second(fid)
        dip = _longest_run(rates[8:14] < 0.5 * rates[5:10].mean())
        ok &= right_before and right_after and dip <= 2
        details.append(f"{first.value}->{second.value}: {before}/{after}, dip {dip} s")
    return ok, "; ".join(details)


def _check_reroute(quick: bool) -> Tuple[bool, str]:
    """A step of ten mean deviations over DualPI2 must not cross CLASSIC_ECN
    with the filter on, and does cross it with the filter off."""
    cells = {}
    for enabled in (True, False):
        config = ScenarioConfig(
            rate_bps=40_000_000,
            base_rtt_us=10_000,
            aqm=AqmKind.DUALPI2,
            pattern=TrafficPattern.parse("1:0"),
            reroute=Reroute(5 * SECOND_US, mdev_multiple=10.0),
            flags=FeatureFlags(reroute_filter=enabled),
            trace_packets=False,
        )
        cells[enabled] = run_cell(config)
    on, off = cells[True], cells[False]
    ok = on.verdict is not None and not on.went_classic and off.went_classic
    detail = f"peak with filter {on.peak_score}, without {off.peak_score}"
    return ok, detail


@dataclass(frozen=True)
class TracerTrial:
    """Outcome of a scripted run of tracer triplets through one AQM."""

    kind: AqmKind
    triplets: int
    checks: int
    verdicts: int
    final_score: float


class _AckTap:
    """The network as a receiver sees it: a clock and somewhere to put ACKs."""

    def __init__(self) -> None:
        self.sim = netsim.Simulator()
        self.acks: List[Ack] = []

    def send_ack(self, ack: Ack) -> None:
        self.acks.append(ack)


def tracer_trial(
    kind: AqmKind,
    start_score: float = -2.0,
    backlog: int = 20,
    rate_bps: int = 40_000_000,
    params: ProbeParams = ProbeParams(enabled=True),
) -> TracerTrial:
    """Sends tracer triplets one round at a time through a bottleneck.

    Before each triplet, `backlog` ECT(0) packets of another flow are queued
    so that a dual-queue AQM has classic traffic for the rear tracer to
    overtake. The queue is then drained at the link rate into a receiver,
    and its ACKs are fed back to the tracer state machine.

    Args:
        kind: Bottleneck discipline.
        start_score: classic_ecn of the flow at the start.
        backlog: Classic packets queued ahead of every triplet.
        rate_bps: Link rate, which sets the drain time of a packet.
        params: Tracer tunables.
    """
    detector = ClassicEcnScore()
    detector.score_fp = int(start_score * SCORE_ONE)
    probe = ActiveProbe(detector, params)
    aqm = make_aqm(kind, rate_bps)
    tap = _AckTap()
    receiver = netsim.Receiver(cast("netsim.Network", tap), 0)
    tx_us = max(MTU * 8 * 1_000_000 // rate_bps, 1)
    snd_nxt = filler = now = 0
    for _ in range(params.tracer_num):
        probe.per_rtt_arm(snd_nxt)
        triplet = probe.maybe_send_triplet(10 * MSS, MSS, snd_nxt)
        if not triplet:
            break
        for _ in range(backlog):
            aqm.enqueue(Packet(1, filler, MSS, Ecn.ECT0, now), now)
            filler += MSS
        for tracer in triplet:
            aqm.enqueue(
                Packet(0, tracer.seq, tracer.length, tracer.ecn, now, tracer.role),
                now,
            )
        while len(aqm):
            now += tx_us
            tap.sim.now = now
            pkt = aqm.dequeue(now)
            if pkt is not None and pkt.flow_id == 0:
                receiver.on_data(pkt)
        for ack in tap.acks:
            probe.on_ack(ack.ackno, ack.sack_edge)
        tap.acks.clear()
        snd_nxt = triplet[-1].end
    log.debug(
        "%s tracer trial: %d/%d L4S verdicts", kind.value, probe.verdicts, probe.checks
    )
    return TracerTrial(
        kind, probe.triplets_sent, probe.checks, probe.verdicts, detector.score
    )


def _check_active_probe(quick: bool) -> Tuple[bool, str]:
    """Scripted triplets from -2.0 behind a classic backlog: every one is an L4S
    verdict over DualPI2, none is over CoDel. A full run over CoDel with
    tracers on must not find L4S either."""
    dual = tracer_trial(AqmKind.DUALPI2)
    codel = tracer_trial(AqmKind.CODEL)
    ok = (
        dual.verdicts == TRACER_NUM
        and dual.final_score == -8.0
        and codel.checks == TRACER_NUM
        and codel.verdicts == 0
        and codel.final_score == -2.0
    )
    config = ScenarioConfig(
        rate_bps=40_000_000,
        base_rtt_us=20_000,
        aqm=AqmKind.CODEL,
        duration_us=10 * SECOND_US,
        flags=FeatureFlags(active_probe=True),
        trace_packets=False,
    )
    bundle = netsim.run(config)
    in_run = sum(r.verdicts for r in bundle.flows.values())
    ok &= in_run == 0
    return ok, (
        f"dualpi2 {dual.verdicts}/{dual.checks} to {dual.final_score}, "
        f"codel {codel.verdicts}/{codel.checks} to {codel.final_score}, "
        f"codel run {in_run}"
    )


ACCEPTANCE: Dict[str, Callable[[bool], Tuple[bool, str]]] = {
    "coexistence": _check_coexistence,
    "detection-speed": _check_detection_speed,
    "no-false-positive": _check_no_false_positive,
    "staggered-start": _check_staggered,
    "aqm-switch": _check_aqm_switch,
    "reroute": _check_reroute,
    "active-probe": _check_active_probe,
}
