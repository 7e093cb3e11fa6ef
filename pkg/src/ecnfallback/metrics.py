"""src/ecnfallback/metrics.py
Time series collected during a run and their CSV form.

Every series file starts with the columns time_us and flow_id. Rows that
describe the bottleneck rather than a flow carry flow_id -1.
"""
import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ecnfallback.errors import OutputError

log = logging.getLogger(__name__)

LINK_ID = -1
SECOND_US = 1_000_000


@dataclass
class Series:
    """A named table of timestamped rows."""

    name: str
    columns: Tuple[str, ...]
    rows: List[tuple] = field(default_factory=list)

    def append(self, time_us: int, flow_id: int, *values) -> None:
        self.rows.append((time_us, flow_id, *values))

    @property
    def header(self) -> Tuple[str, ...]:
        return ("time_us", "flow_id", *self.columns)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class FlowRecord:
    """Outcome of one flow.

    Attributes:
        flow_id: Flow number.
        cc: Congestion controller name.
        short: Whether this is a finite web flow.
        start_us: Start time.
        end_us: Completion time of a short flow.
        acked_bytes: Payload bytes acknowledged.
        final_score: classic_ecn at the end of the run (Prague only).
        max_score: Highest classic_ecn reached during the run (Prague only).
        first_wake_us: When the score first left its floor.
        first_classic_us: When the score first reached CLASSIC_ECN.
        first_ceiling_us: When the score first reached its ceiling.
        triplets, verdicts: Tracer triplets sent and L4S verdicts.
    """

    flow_id: int
    cc: str
    short: bool
    start_us: int
    end_us: Optional[int] = None
    acked_bytes: int = 0
    final_score: Optional[float] = None
    max_score: Optional[float] = None
    first_wake_us: Optional[int] = None
    first_classic_us: Optional[int] = None
    first_ceiling_us: Optional[int] = None
    triplets: int = 0
    verdicts: int = 0

    @property
    def classic_at_end(self) -> bool:
        return self.final_score is not None and self.final_score >= 1.0


class MetricsBundle:
    """All series of one run.

    Args:
        duration_us: Length of the run; every row lies in [0, duration_us].
    """

    def __init__(self, duration_us: int) -> None:
        self.duration_us = duration_us
        self.score = Series("score", ("score", "v_us", "d_us", "s", "c"))
        self.rtt = Series(
            "rtt",
            ("acc_mrtt_us", "fbk_srtt_us", "srtt_us", "fbk_mdev_us", "rtt_min_us"),
        )
        self.window = Series("window", ("cwnd", "ssthresh"))
        self.probe = Series("probe", ("event", "score"))
        self.throughput = Series("throughput", ("rate_bps",))
        self.class_throughput = Series("class_throughput", ("cc", "rate_bps"))
        self.utilization = Series("utilization", ("utilization",))
        self.queue_delay = Series(
            "queue_delay", ("ecn", "sojourn_us", "outcome", "backlog_bytes")
        )
        self.mark_probability = Series(
            "mark_probability", ("aqm", "packets", "marks", "drops", "probability")
        )
        self.flows: Dict[int, FlowRecord] = {}
        self.departures: Dict[int, List[Tuple[int, int]]] = {}
        self.summary: Dict[str, object] = {}

    @property
    def series(self) -> Tuple[Series, ...]:
        return (
            self.score,
            self.rtt,
            self.window,
            self.probe,
            self.throughput,
            self.class_throughput,
            self.utilization,
            self.queue_delay,
            self.mark_probability,
        )

    def record_departure(self, time_us: int, flow_id: int, size: int) -> None:
        self.departures.setdefault(flow_id, []).append((time_us, size))

    def per_second(self, flow_id: int) -> np.ndarray:
        """Throughput [b/s] of a flow in each whole second of the run."""
        seconds = max(self.duration_us // SECOND_US, 1)
        log_ = self.departures.get(flow_id)
        if not log_:
            return np.zeros(seconds)
        data = np.asarray(log_, dtype=np.int64)
        bins = np.minimum(data[:, 0] // SECOND_US, seconds - 1)
        return np.bincount(bins, weights=data[:, 1] * 8, minlength=seconds)[:seconds]

    def finalize(self, rate_bps: int, trace_throughput: bool = True) -> None:
        """Derives the throughput, class-average and utilization series."""
        if trace_throughput:
            for flow_id in sorted(self.departures):
                self._rolling_throughput(flow_id)
        seconds = max(self.duration_us // SECOND_US, 1)
        total = np.zeros(seconds)
        by_class: Dict[str, List[np.ndarray]] = {}
        for flow_id in sorted(self.departures):
            rates = self.per_second(flow_id)
            total += rates
            record = self.flows.get(flow_id)
            if record is not None and not record.short:
                by_class.setdefault(record.cc, []).append(rates)
        for k in range(seconds):
            end = min((k + 1) * SECOND_US, self.duration_us)
            self.utilization.append(end, LINK_ID, round(float(total[k]) / rate_bps, 6))
            for cc in sorted(by_class):
                mean = float(np.mean([rates[k] for rates in by_class[cc]]))
                self.class_throughput.append(end, LINK_ID, cc, round(mean, 1))

    def _rolling_throughput(self, flow_id: int) -> None:
        data = np.asarray(self.departures[flow_id], dtype=np.int64)
        times, sizes = data[:, 0], data[:, 1]
        cumulative = np.cumsum(sizes)
        first = np.searchsorted(times, times - SECOND_US, side="right")
        before = np.where(first > 0, cumulative[np.maximum(first - 1, 0)], 0)
        rates = (cumulative - before) * 8
        for t, rate in zip(times.tolist(), rates.tolist()):
            self.throughput.append(t, flow_id, rate)


def emit_csv(bundle: MetricsBundle, out_dir: Path) -> List[Path]:
    """Writes one CSV per non-empty series, flows.csv and summary.csv.

    summary.csv holds one key,value row per entry of bundle.summary, which
    the lab extends with the verdict and rate whiskers before writing.

    Returns:
        The files written.
    """
    written: List[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OutputError(out_dir, err.strerror or str(err)) from err
    for series in bundle.series:
        if series.rows:
            path = out_dir / f"{series.name}.csv"
            _write(path, series.header, series.rows)
            written.append(path)
    path = out_dir / "flows.csv"
    names = [f.name for f in fields(FlowRecord)]
    _write(
        path,
        names,
        ([getattr(rec, n) for n in names] for _, rec in sorted(bundle.flows.items())),
    )
    written.append(path)
    path = out_dir / "summary.csv"
    _write(path, ("key", "value"), bundle.summary.items())
    written.append(path)
    log.info("wrote %d files to %s", len(written), out_dir)
    return written


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    _write(path, header, rows)
    return path


def _write(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        with open(path, "w", newline="") as file:
            writer = csv.writer(file)
            writer.writerow(header)
            writer.writerows(_cell(row) for row in rows)
    except OSError as err:
        raise OutputError(path, err.strerror or str(err)) from err


def _cell(row: Sequence) -> List:
    return ["" if value is None else getattr(value, "value", value) for value in row]
