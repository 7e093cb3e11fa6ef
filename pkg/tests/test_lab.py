# tests/test_lab.py
"""Tests verdicts, fairness statistics and the Lab."""
import math

import pytest

from ecnfallback import lab as lab_module
from ecnfallback import netsim
from ecnfallback.aqm_models import AqmKind
from ecnfallback.config import ScenarioConfig
from ecnfallback.errors import ContractError, SimulationError
from ecnfallback.lab import (
    MEASURE_US,
    CellResult,
    Color,
    Grid,
    Lab,
    MatrixResult,
    RateStats,
    Verdict,
    fairness,
    grade,
    graded,
    measured,
    normalized_rate,
    run_cell,
    seed_for,
    settle_time_us,
    stabilization_time_us,
    tracer_trial,
    verdict,
    verdict_table,
)
from ecnfallback.metrics import FlowRecord, MetricsBundle


@pytest.mark.parametrize(
    ("aqm", "long_scores", "short_scores", "color"),
    (
        pytest.param(AqmKind.CODEL, [9.0], [], Color.GREEN, id="codel_detected"),
        pytest.param(AqmKind.PI2, [1.0, 3.0], [], Color.GREEN, id="pi2_detected"),
        pytest.param(AqmKind.CODEL, [9.0, 0.5], [], Color.RED, id="codel_missed"),
        pytest.param(
            AqmKind.CODEL, [9.0], [-8.0] * 4, Color.GREEN, id="short_ignored"
        ),
        pytest.param(AqmKind.DUALPI2, [-8.0], [], Color.GREEN, id="dualpi2_l4s"),
        pytest.param(
            AqmKind.DUALPI2, [2.0], [], Color.AMBER, id="dualpi2_long_classic"
        ),
        pytest.param(
            AqmKind.DUALPI2,
            [-8.0],
            [1.0, 1.0, -8.0, -8.0],
            Color.AMBER,
            id="dualpi2_half_short_classic",
        ),
        pytest.param(
            AqmKind.DUALPI2,
            [-8.0],
            [1.0, -8.0, -8.0, -8.0],
            Color.GREEN,
            id="dualpi2_quarter_short_classic",
        ),
        pytest.param(AqmKind.FIFO, [9.0], [], Color.GREEN, id="fifo"),
    ),
)
def test_verdict(aqm, long_scores, short_scores, color):
    first = verdict(aqm, long_scores, short_scores)
    assert first.color is color
    assert verdict(aqm, long_scores, short_scores) == first


def test_normalized_rate():
    assert normalized_rate(6e6, 12e6, 2) == 1.0
    with pytest.raises(ContractError):
        normalized_rate(1.0, 12e6, 0)
    with pytest.raises(ContractError):
        normalized_rate(1.0, 0, 1)


@pytest.mark.parametrize(
    ("rate_bps", "n", "rtt_us", "expected"),
    (
        pytest.param(12_000_000, 1, 50_000, 11_000_000, id="12M_50ms"),
        pytest.param(40_000_000, 10, 10_000, 5_400_000, id="40M_10ms_10flows"),
    ),
)
def test_stabilization_time(rate_bps, n, rtt_us, expected):
    assert stabilization_time_us(rate_bps, n, rtt_us) == expected


def test_seed_for_depends_on_label_only():
    assert seed_for("codel_12M_20ms_1-1", 1) == seed_for("codel_12M_20ms_1-1", 1)
    assert seed_for("codel_12M_20ms_1-1", 1) != seed_for("codel_12M_20ms_1-9", 1)
    assert seed_for("codel_12M_20ms_1-1", 1) != seed_for("codel_12M_20ms_1-1", 2)


def test_grid_scenarios():
    configs = Grid().scenarios()
    assert len(configs) == 2 * 3 * 3 * 4
    assert len({c.label for c in configs}) == len(configs)
    assert all(not c.trace_packets for c in configs)
    assert all(c.seed == seed_for(c.label, 1) for c in configs)
    assert all(c.duration_us >= settle_time_us(c) + MEASURE_US for c in configs)


def test_grid_without_measure_keeps_duration():
    configs = Grid(measure_us=0).scenarios()
    assert {c.duration_us for c in configs} == {20_000_000}


def test_full_grid_size():
    assert len(Grid.full().scenarios()) == 2 * 5 * 5 * 20


def test_rate_stats():
    stats = RateStats.of(float(x) for x in range(1, 101))
    assert stats.mean == 50.5
    assert stats.p1 == pytest.approx(1.99)
    assert stats.p99 == pytest.approx(99.01)
    assert math.isnan(RateStats.of([]).mean)


def two_flow_bundle(seconds, final_score=None):
    """A Prague and a Cubic long flow, each sending 6 Mb/s every second."""
    bundle = MetricsBundle(seconds * 1_000_000)
    bundle.flows[0] = FlowRecord(0, "prague", False, 0, final_score=final_score)
    bundle.flows[1] = FlowRecord(1, "cubic", False, 0)
    for k in range(seconds):
        for fid in (0, 1):
            bundle.record_departure(k * 1_000_000 + 1, fid, 750_000)
    return bundle


def crossing_bundle(crossed):
    """Twenty seconds ending on the floor, after crossing CLASSIC_ECN if crossed."""
    bundle = two_flow_bundle(20, final_score=-8.0)
    prague = bundle.flows[0]
    prague.max_score = 9.0 if crossed else -8.0
    prague.first_classic_us = 3_000_000 if crossed else None
    return bundle


def test_fairness_of_equal_shares():
    config = ScenarioConfig(duration_us=20_000_000)
    rates = fairness(two_flow_bundle(20), config)
    assert sorted(rates) == ["cubic", "prague"]
    for stats in rates.values():
        assert stats.mean == pytest.approx(1.0)
        assert stats.p1 == pytest.approx(1.0)


def test_fairness_ignores_short_flows():
    bundle = two_flow_bundle(20)
    bundle.flows[2] = FlowRecord(2, "prague", True, 0)
    bundle.record_departure(10_000_000, 2, 1_000_000)
    rates = fairness(bundle, ScenarioConfig())
    assert rates["prague"].mean == pytest.approx(1.0)


def test_fairness_needs_samples_after_settling():
    config = ScenarioConfig(duration_us=4_000_000)
    assert settle_time_us(config) == 8_000_000
    assert fairness(two_flow_bundle(4), config) == {}


@pytest.mark.parametrize(
    ("changes", "duration_us"),
    (
        pytest.param({"duration_us": 4_000_000}, 18_000_000, id="lengthened"),
        pytest.param({"duration_us": 30_000_000}, 30_000_000, id="long_enough"),
        pytest.param(
            {"duration_us": 4_000_000, "prague_start_us": 2_000_000},
            20_000_000,
            id="late_start",
        ),
    ),
)
def test_measured_leaves_a_window_after_settling(changes, duration_us):
    config = measured(ScenarioConfig(**changes))
    assert config.duration_us == duration_us
    assert config.duration_us >= settle_time_us(config) + MEASURE_US


def test_grade_reads_final_scores_only():
    config = ScenarioConfig(aqm=AqmKind.CODEL)
    assert grade(two_flow_bundle(2, 9.0), config).color is Color.GREEN
    assert grade(two_flow_bundle(2, -8.0), config).color is Color.RED
    dual = ScenarioConfig(aqm=AqmKind.DUALPI2)
    assert grade(crossing_bundle(True), dual).color is Color.GREEN


def test_graded_sees_a_crossing_that_recovered():
    config = ScenarioConfig(aqm=AqmKind.DUALPI2)
    cell = graded(crossing_bundle(True), config)
    assert cell.color == "green"
    assert cell.went_classic
    assert cell.peak_score == 9.0
    assert cell.first_classic_us == 3_000_000
    assert not graded(crossing_bundle(False), config).went_classic


def test_graded_adds_verdict_and_whiskers_to_summary():
    cell = graded(crossing_bundle(False), ScenarioConfig(aqm=AqmKind.DUALPI2))
    assert cell.summary["verdict"] == "green"
    assert cell.summary["peak_score"] == -8.0
    assert cell.summary["first_classic_us"] is None
    assert cell.summary["prague_mean"] == pytest.approx(1.0)
    assert cell.summary["cubic_p99"] == pytest.approx(1.0)


def test_went_classic_from_peak_alone():
    assert CellResult("a", peak_score=1.0).went_classic
    assert not CellResult("a", peak_score=0.99).went_classic
    assert not CellResult("a").went_classic


def test_failed_cell_is_recorded(monkeypatch):
    def broken(config):
        raise SimulationError("clock went backwards")

    monkeypatch.setattr(netsim, "run", broken)
    cell = run_cell(ScenarioConfig())
    assert cell.color == "failed"
    assert cell.error == "clock went backwards"


def test_matrix_counts():
    cells = [
        CellResult("a", Verdict(Color.GREEN, "")),
        CellResult("b", Verdict(Color.RED, "")),
        CellResult("c", error="boom"),
    ]
    assert MatrixResult(cells).counts == {
        "green": 1,
        "amber": 0,
        "red": 1,
        "failed": 1,
    }


def test_lab_needs_a_job():
    with pytest.raises(ContractError):
        Lab(jobs=0)


def test_lab_run_writes_series(tmp_path, short_run):
    lab = Lab(tmp_path / "results")
    result = lab.run(short_run)
    assert result.verdict is not None
    out = tmp_path / "results" / short_run.label
    assert (out / "flows.csv").exists()
    assert (out / "score.csv").exists()
    assert result.summary["scenario"] == short_run.label


def test_lab_run_matrix(tmp_path):
    grid = Grid(
        (12,), (20,), ("1:0", "1:1"), (AqmKind.CODEL,), 2_000_000, measure_us=0
    )
    result = Lab(tmp_path).run_matrix(grid)
    assert [c.label for c in result.cells] == [
        "codel_12M_20ms_1-0",
        "codel_12M_20ms_1-1",
    ]
    assert sum(result.counts.values()) == 2
    rows = (tmp_path / "matrix.csv").read_text().splitlines()
    assert rows[0] == "cell,verdict,cc,p1,mean,p99,basis"
    assert len(rows) == 1 + 1 + 2


def test_write_summary_keeps_failed_cells(tmp_path):
    cells = [CellResult("x", error="boom")]
    path = Lab(tmp_path).write_summary(cells, tmp_path / "m.csv")
    assert path.read_text().splitlines()[1] == "x,failed,,,,,boom"


def test_verify_records_failures(monkeypatch):
    def boom(quick):
        raise SimulationError("broken")

    checks = {"fine": lambda quick: (True, "ok"), "boom": boom}
    monkeypatch.setattr(lab_module, "ACCEPTANCE", checks)
    assert Lab().verify(quick=True) == [
        ("fine", True, "ok"),
        ("boom", False, "broken"),
    ]


def test_verdict_table_has_a_row_per_cell():
    cells = [CellResult("a", Verdict(Color.GREEN, "")), CellResult("b", error="x")]
    assert verdict_table(cells).row_count == 2


@pytest.mark.parametrize(
    ("crossed", "passed"),
    (
        pytest.param(False, True, id="stayed_l4s"),
        pytest.param(True, False, id="crossed_and_recovered"),
    ),
)
def test_no_false_positive_check_sees_crossings(monkeypatch, crossed, passed):
    monkeypatch.setattr(netsim, "run", lambda config: crossing_bundle(crossed))
    ok, detail = lab_module._check_no_false_positive(True)
    assert ok is passed
    assert ("peak 9.0" in detail) is crossed


@pytest.mark.parametrize(
    ("crosses", "passed"),
    (
        pytest.param(
            lambda flags: not flags.reroute_filter, True, id="only_unfiltered"
        ),
        pytest.param(lambda flags: True, False, id="filtered_crosses"),
        pytest.param(lambda flags: False, False, id="unfiltered_holds"),
    ),
)
def test_reroute_check_sees_crossings(monkeypatch, crosses, passed):
    def run(config):
        assert config.reroute.mdev_multiple == 10.0
        return crossing_bundle(crosses(config.flags))

    monkeypatch.setattr(netsim, "run", run)
    ok, _ = lab_module._check_reroute(True)
    assert ok is passed


@pytest.mark.parametrize(
    ("kind", "verdicts", "final_score"),
    (
        pytest.param(AqmKind.DUALPI2, 4, -8.0, id="dualpi2"),
        pytest.param(AqmKind.CODEL, 0, -2.0, id="codel"),
    ),
)
def test_tracer_trial_behind_classic_backlog(kind, verdicts, final_score):
    trial = tracer_trial(kind)
    assert trial.triplets == 4
    assert trial.checks == 4
    assert trial.verdicts == verdicts
    assert trial.final_score == final_score


def test_tracer_acceptance_check(monkeypatch):
    monkeypatch.setattr(netsim, "run", lambda config: two_flow_bundle(10))
    ok, detail = lab_module._check_active_probe(True)
    assert ok
    assert detail.startswith("dualpi2 4/4 to -8.0, codel 0/4 to -2.0")


def test_lab_run_writes_summary_csv(tmp_path, monkeypatch):
    monkeypatch.setattr(netsim, "run", lambda config: crossing_bundle(True))
    config = ScenarioConfig(aqm=AqmKind.DUALPI2)
    Lab(tmp_path).run(config)
    rows = (tmp_path / config.label / "summary.csv").read_text().splitlines()
    assert rows[0] == "key,value"
    assert "verdict,green" in rows
    assert "first_classic_us,3000000" in rows


def test_calibrate_writes_a_row_per_combination(tmp_path, monkeypatch):
    seen = []

    def cell(config):
        seen.append(config)
        color = Color.GREEN if config.aqm is AqmKind.CODEL else Color.AMBER
        return CellResult(config.label, Verdict(color, ""))

    monkeypatch.setattr(lab_module, "run_cell", cell)
    rows = Lab(tmp_path).calibrate(ScenarioConfig(), (500,), (1000, 2000), (1,))
    assert rows == [(500, 1000, 1, 1, 2), (500, 2000, 1, 1, 2)]
    assert {c.detection.d0_us for c in seen} == {1000, 2000}
    assert not any(c.trace_packets for c in seen)
    assert (tmp_path / "calibrate.csv").read_text().startswith("v0_us,d0_us")


def test_flow_helpers():
    bundle = two_flow_bundle(2)
    bundle.score.append(100, 0, -7.0, 0, 0, 0.0, 0.0)
    bundle.score.append(300, 0, -6.0, 0, 0, 0.0, 0.0)
    assert lab_module._flow(bundle, "cubic") == 1
    assert lab_module._flow(bundle, "reno") is None
    assert lab_module._score_at(bundle, 0, 200) == -7.0
    assert lab_module._score_at(bundle, 1, 200) is None
    assert lab_module._longest_run([True, True, False, True]) == 2
