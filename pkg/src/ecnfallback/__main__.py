# ecnfallback/__main__.py
"""Handles command-line arguments and dispatches to the lab."""
import dataclasses
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import rich_click as click
from rich.console import Console
from rich.table import Table

from ecnfallback import logs
from ecnfallback.aqm_models import AqmKind
from ecnfallback.cc_engines import Changeover, CompetitorKind
from ecnfallback.config import (
    ScenarioConfig,
    load_scenario,
    scenario_from_mapping,
)
from ecnfallback.errors import EcnFallbackError
from ecnfallback.lab import Grid, Lab, verdict_table

pass_lab = click.make_pass_decorator(Lab)
console = Console()


def scenario_options(func):
    """Flags that mirror ScenarioConfig; unset flags keep the file's values."""
    options = [
        click.option(
            "--scenario",
            "scenario_file",
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            help="TOML scenario file; flags override its values.",
        ),
        click.option("--rate", "rate_mbps", type=float, help="Link rate [Mb/s]."),
        click.option("--rtt", "rtt_ms", type=float, help="Base RTT [ms]."),
        click.option(
            "--aqm", type=click.Choice([k.value for k in AqmKind]), help="Bottleneck."
        ),
        click.option("--pattern", help="Prague:competitor traffic, e.g. 1L:9."),
        click.option(
            "--competitor",
            type=click.Choice([k.value for k in CompetitorKind]),
            help="Classic congestion control of the competitor class.",
        ),
        click.option("--duration", "duration_s", type=float, help="Run length [s]."),
        click.option("--seed", type=int),
        click.option(
            "--fallback/--no-fallback", default=None, help="Act on the Classic score."
        ),
        click.option(
            "--probe/--no-probe",
            "active_probe",
            default=None,
            help="Send tracer triplets.",
        ),
        click.option(
            "--reroute-filter/--no-reroute-filter",
            default=None,
            help="Run the reroute filter on the RTT statistics.",
        ),
        click.option(
            "--changeover", type=click.Choice([c.value for c in Changeover])
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def build_scenario(scenario_file: Optional[Path], **flags: Any) -> ScenarioConfig:
    base = ScenarioConfig()
    if scenario_file is not None:
        base = load_scenario(scenario_file)
    return scenario_from_mapping(flags, base)


@click.group()
@click.option(
    "--out-dir",
    envvar="ECNFALLBACK_OUT_DIR",
    default="results",
    show_default=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Where results are written.",
)
@click.option(
    "--jobs",
    envvar="ECNFALLBACK_JOBS",
    default=1,
    show_default=True,
    type=click.IntRange(min=1),
    help="Matrix cells run in parallel.",
)
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG.")
@click.pass_context
def main(ctx, out_dir: Path, jobs: int, verbose: int) -> None:
    """Simulates Prague flows detecting Classic ECN bottlenecks."""
    logs.configure(verbose)
    ctx.obj = Lab(out_dir, jobs)


def fail(err: Exception) -> None:
    click.echo(f"Error: {err}", err=True)
    sys.exit(1)


@main.command()
@scenario_options
@click.option("--no-write", is_flag=True, help="Skip writing CSVs.")
@pass_lab
def run(lab, scenario_file: Optional[Path], no_write: bool, **flags: Any) -> None:
    """Runs one scenario and prints its verdict."""
    try:
        config = build_scenario(scenario_file, **flags)
        result = lab.run(config, write=not no_write)
    except EcnFallbackError as err:
        fail(err)
        return
    console.print(verdict_table([result]))
    if not no_write:
        click.echo(f"Results written to {lab.out_dir / config.label}")


@main.command()
@scenario_options
@click.option("--full", is_flag=True, help="Every rate, RTT and traffic pattern.")
@click.option("--rates", help="Comma-separated link rates [Mb/s].")
@click.option("--rtts", help="Comma-separated base RTTs [ms].")
@click.option("--patterns", help="Comma-separated traffic patterns.")
@click.option("--aqms", help="Comma-separated AQM kinds.")
@click.option(
    "--measure",
    "measure_s",
    type=click.FloatRange(min=0),
    default=10.0,
    show_default=True,
    help="Fairness samples after the flows settle [s]; 0 keeps --duration as is.",
)
@pass_lab
def matrix(
    lab,
    scenario_file: Optional[Path],
    full: bool,
    rates: Optional[str],
    rtts: Optional[str],
    patterns: Optional[str],
    aqms: Optional[str],
    measure_s: float,
    **flags: Any,
) -> None:
    """Runs a grid of scenarios and prints the verdict of every cell."""
    try:
        base = build_scenario(scenario_file, **flags)
        grid = Grid.full() if full else Grid()
        changes: Dict[str, Tuple] = {}
        if rates:
            changes["rates_mbps"] = tuple(float(r) for r in rates.split(","))
        if rtts:
            changes["rtts_ms"] = tuple(float(r) for r in rtts.split(","))
        if patterns:
            changes["patterns"] = tuple(p.strip() for p in patterns.split(","))
        if aqms:
            changes["aqms"] = tuple(AqmKind(a.strip()) for a in aqms.split(","))
        grid = dataclasses.replace(
            grid,
            duration_us=base.duration_us,
            measure_us=int(measure_s * 1_000_000),
            seed=base.seed,
            flags=base.flags,
            **changes,
        )
        result = lab.run_matrix(grid, base)
    except (EcnFallbackError, ValueError) as err:
        fail(err)
        return
    console.print(verdict_table(result.cells))
    counts = ", ".join(f"{n} {color}" for color, n in result.counts.items())
    click.echo(f"Verdicts: {counts}")


@main.command()
@scenario_options
@pass_lab
def calibrate(lab, scenario_file: Optional[Path], **flags: Any) -> None:
    """Sweeps V0, D0 and the mdev gain over a Classic and an L4S scenario."""
    try:
        base = build_scenario(scenario_file, **flags)
        rows = lab.calibrate(base)
    except EcnFallbackError as err:
        fail(err)
        return
    table = Table(title="Calibration")
    for column in ("V0 [us]", "D0 [us]", "g_diff", "correct"):
        table.add_column(column, justify="right")
    for v0, d0, g_diff, correct, total in rows:
        table.add_row(str(v0), str(d0), str(g_diff), f"{correct}/{total}")
    console.print(table)


@main.command()
@click.option("--quick", is_flag=True, help="One cell of each grid.")
@pass_lab
def verify(lab, quick: bool) -> None:
    """Runs the scenario-level acceptance checks."""
    results = lab.verify(quick)
    table = Table(title="Acceptance")
    table.add_column("check")
    table.add_column("result")
    table.add_column("detail")
    for name, passed, detail in results:
        table.add_row(name, "[green]pass[/]" if passed else "[red]FAIL[/]", detail)
    console.print(table)
    if not all(passed for _, passed, _ in results):
        sys.exit(1)


if __name__ == "__main__":
    main()
