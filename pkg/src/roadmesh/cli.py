"""Command-line entry point: run scenarios and inspect their results."""

import logging
import sys
from pathlib import Path
from typing import List, Optional

import click
import numpy as np

from . import keygraph, zkp
from .crypto import validate_public_key
from .events import EventKind
from .exceptions import (
    GraphError,
    QueryError,
    ScenarioError,
    SimulationError,
    TimeOutOfRange,
    UnknownNode,
)
from .scenario import load_scenario, run_scenario
from .trace import end_time, nodes_in, read_trace, replay_events, verify_trace
from .utils import configure_logging

logger = logging.getLogger(__name__)

EXIT_VIOLATION = 1
EXIT_INVALID = 2


def _int_list(ctx, param, value: Optional[str]) -> Optional[List[int]]:
    if not value:
        return None
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG logging.")
def main(verbose: int) -> None:
    """Deterministic simulator for authenticated vehicle-to-vehicle event sharing."""
    configure_logging(verbose)


@main.command()
@click.argument("scenario", type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True, help="Master seed of the run.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), help="Write the trace here.")
@click.option("--until", type=float, help="End time in seconds (default: the scenario's 'until').")
def run(scenario: str, seed: int, trace_path: Optional[str], until: Optional[float]) -> None:
    """Simulate SCENARIO and write its trace."""
    try:
        sim = run_scenario(load_scenario(scenario), seed, until)
    except ScenarioError as exc:
        click.echo(f"{scenario}: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    except SimulationError as exc:
        click.echo(f"{scenario}: simulation failed: {exc}", err=True)
        sys.exit(EXIT_VIOLATION)

    if trace_path:
        sim.trace.write(trace_path)
    else:
        click.echo(sim.trace.text(), nl=False)

    violations = verify_trace(sim.trace.records, sim.config.max_resends)
    audit = sim.audit()
    for line in violations:
        click.echo(f"violation: {line}", err=True)
    summary = " ".join(f"{k}={v}" for k, v in audit.items())
    click.echo(f"records={len(sim.trace)} violations={len(violations)} {summary}", err=True)
    if violations or not audit["balanced"]:
        sys.exit(EXIT_VIOLATION)


@main.command("zkp-demo")
@click.option("--key", type=int, required=True, help="15-bit public key of the common acquaintance.")
@click.option("--flips", callback=_int_list, help="Upper-triangle positions (1-15) to set, e.g. 4,5,8.")
@click.option("--perm", callback=_int_list, help="Row order of the isomorphic graph, e.g. 6,5,3,4,2,1.")
@click.option("--rounds", default=0, show_default=True, help="Also run this many seeded proof rounds.")
@click.option("--seed", default=0, show_default=True, help="Seed for --rounds.")
def zkp_demo(key: int, flips: Optional[List[int]], perm: Optional[List[int]], rounds: int, seed: int) -> None:
    """Show one commitment step by step: graph, augmentation, permutation."""
    if not validate_public_key(key):
        raise click.BadParameter(f"{key} is not a valid key (one Hamiltonian 6-cycle)", param_hint="--key")
    try:
        p = keygraph.Permutation6.of(perm) if perm else keygraph.Permutation6.identity()
        start = keygraph.key_to_graph(key)
        augmented = keygraph.augment_positions(start, flips or [])
    except GraphError as exc:
        raise click.BadParameter(str(exc))

    transformed_key = keygraph.graph_to_key(augmented)
    click.echo(f"Starting Graph (key {key} = {keygraph.key_bits(key)})")
    click.echo(keygraph.format_matrix(start))
    click.echo("")
    click.echo(f"Transformed key: {keygraph.key_bits(transformed_key)} ({transformed_key})")
    click.echo("Transformed Graph")
    click.echo(keygraph.format_matrix(augmented))
    click.echo("")
    click.echo(f"Isomorphic Graph (rows {','.join(str(v) for v in p.order)})")
    click.echo(keygraph.format_matrix(keygraph.permute_rows(augmented, p)))

    if rounds > 0:
        rng = np.random.default_rng(seed)
        verifier = zkp.Verifier(rng)
        accepted = zkp.run_rounds(zkp.HonestProver(key, rng), verifier, key, rounds)
        click.echo("")
        for line in verifier.transcript:
            click.echo(line)
        click.echo(f"accepted={str(accepted).lower()}")


@main.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.option("--node", "node_id", required=True, help="Node whose tables to list.")
@click.option("--at", type=float, help="Simulated time in seconds (default: end of run).")
@click.option("--parking", is_flag=True, help="Only live free-parking spots, nearest first.")
@click.option("--seed", default=0, show_default=True, help="Seed when SOURCE is a scenario.")
def events(source: str, node_id: str, at: Optional[float], parking: bool, seed: int) -> None:
    """List a node's event tables from a scenario (.scn) or a trace."""
    try:
        if Path(source).suffix == ".scn":
            rows, parked = _scenario_rows(source, node_id, at, parking, seed)
        else:
            rows, parked = _trace_rows(source, node_id, at, parking)
    except ScenarioError as exc:
        click.echo(f"{source}: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    except QueryError as exc:
        raise click.UsageError(str(exc))

    for table, line in rows:
        click.echo(line if parking else f"{table} {line}")
    if not rows:
        click.echo("no events")
    if parked is not None and not parking:
        click.echo(f"parked x={parked[0]} y={parked[1]}")


def _scenario_rows(source: str, node_id: str, at: Optional[float], parking: bool, seed: int):
    scenario = load_scenario(source)
    if node_id not in scenario.nodes:
        raise UnknownNode(f"no node {node_id!r} in {source}")
    end = at if at is not None else scenario.until
    if end is None or end < 0:
        raise TimeOutOfRange("--at is required and must be non-negative when the scenario has no 'until'")
    sim = run_scenario(scenario, seed, end)
    node = sim.nodes[node_id]
    spot = node.find_parked()
    parked = (f"{spot[0]:.1f}", f"{spot[1]:.1f}") if spot else None
    if parking:
        origin = node.position(end) or (0.0, 0.0)
        return [("confirmed", e.describe()) for e in node.agg.table.query_parking(end, origin)], parked
    return node.table_rows(), parked


def _trace_rows(source: str, node_id: str, at: Optional[float], parking: bool):
    try:
        records = read_trace(source)
    except ValueError as exc:
        raise QueryError(f"{source} is not a trace: {exc}")
    if node_id not in nodes_in(records):
        raise UnknownNode(f"no node {node_id!r} in {source}")
    last = end_time(records)
    at = last if at is None else at
    if not 0 <= at <= last:
        raise TimeOutOfRange(f"--at {at} is outside the trace (0..{last:.3f})")
    rows, parked = replay_events(records, node_id, at)
    if parking:
        rows = [r for r in rows if r[0] == "confirmed" and _live_parking(r[1], at)]
    return rows, parked


def _live_parking(line: str, at: float) -> bool:
    fields = dict(token.split("=", 1) for token in line.split())
    return fields.get("kind") == EventKind.FREE_PARKING.value and float(fields["exp"]) > at


@main.command("verify-trace")
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@click.option("--max-resends", default=3, show_default=True)
def verify_trace_cmd(trace: str, max_resends: int) -> None:
    """Re-check a trace offline: causality, single session, signature counts."""
    try:
        records = read_trace(trace)
    except ValueError as exc:
        click.echo(f"{trace}: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    violations = verify_trace(records, max_resends)
    if not violations:
        click.echo("ok")
        return
    for line in violations:
        click.echo(line)
    sys.exit(EXIT_VIOLATION)


if __name__ == "__main__":
    main()
