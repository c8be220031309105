"""Scenario files: parsing, validation and simulator construction.

A scenario is line-oriented text. ``#`` starts a comment. Sections::

    [config]            key = value overrides of SimConfig
    [channel]           loss / latency / duplicate / jitter
    [identity <name>]   an off-road identity: seed, real_id, key_uid
    [node <id>]         seed, real_id, key_uid, acquaintances, battery, forge
    [track <id>]        one waypoint per line: t x y [road_class]
    [schedule]          <verb> <node> <t> <value>

Schedule verbs are ``ignition`` (on/off), ``gps`` (available/lost),
``battery`` (percent) and ``publicity`` (free text); ``until <t>`` sets the
default end of the run.
"""

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ChannelConfig, SimConfig
from .crypto import Identity, SeededProvider, SessionKeys, generate_identity
from .exceptions import ConfigError, ScenarioError, SimulationError
from .netsim import MobilityTrack, Simulator, Waypoint
from .node import NodeRuntime, NodeSpec

logger = logging.getLogger(__name__)

VERBS = ("ignition", "gps", "battery", "publicity")
_NODE_KEYS = ("seed", "real_id", "key_uid", "acquaintances", "battery", "forge")
_IDENTITY_KEYS = ("seed", "real_id", "key_uid")


@dataclass
class IdentityDecl:
    name: str
    line: int
    values: Dict[str, str] = field(default_factory=dict)


@dataclass
class NodeDecl(IdentityDecl):
    acquaintances: List[str] = field(default_factory=list)
    battery: float = 100.0
    forge: bool = False


@dataclass(frozen=True)
class Directive:
    verb: str
    node: str
    at: float
    value: str
    line: int


@dataclass
class Scenario:
    config: SimConfig
    channel: ChannelConfig
    identities: Dict[str, Identity]
    nodes: Dict[str, NodeDecl]
    tracks: Dict[str, MobilityTrack]
    schedule: List[Directive]
    until: Optional[float] = None
    source: str = "<string>"


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}")
    return parse_scenario(text, source=str(path))


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    """Parse and validate a scenario; every problem cites its line."""
    sections: List[Tuple[str, str, int, List[Tuple[int, str]]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError(f"unterminated section header {line!r}", lineno)
            kind, _, name = line[1:-1].strip().partition(" ")
            sections.append((kind, name.strip(), lineno, []))
            continue
        if not sections:
            raise ScenarioError("content before the first section", lineno)
        sections[-1][3].append((lineno, line))

    config_lines: List[Tuple[int, str]] = []
    channel_lines: List[Tuple[int, str]] = []
    decls: Dict[str, IdentityDecl] = {}
    track_lines: Dict[str, Tuple[int, List[Tuple[int, str]]]] = {}
    schedule_lines: List[Tuple[int, str]] = []

    for kind, name, lineno, body in sections:
        if kind == "config" and not name:
            config_lines += body
        elif kind == "channel" and not name:
            channel_lines += body
        elif kind == "schedule" and not name:
            schedule_lines += body
        elif kind in ("identity", "node") and name:
            if name in decls:
                raise ScenarioError(f"{name!r} is declared twice", lineno)
            decls[name] = _parse_decl(kind, name, lineno, body)
        elif kind == "track" and name:
            if name in track_lines:
                raise ScenarioError(f"track {name!r} is declared twice", lineno)
            track_lines[name] = (lineno, body)
        else:
            raise ScenarioError(f"unknown section [{kind} {name}]".replace(" ]", "]"), lineno)

    config = _wrap_config(lambda: SimConfig.from_mapping(_pairs(config_lines)), config_lines)
    channel = _wrap_config(lambda: ChannelConfig.from_mapping(_pairs(channel_lines)), channel_lines)
    nodes = {name: d for name, d in decls.items() if isinstance(d, NodeDecl)}
    if not nodes:
        raise ScenarioError("a scenario needs at least one [node] section")

    identities = _build_identities(decls)
    for node in nodes.values():
        for other in node.acquaintances:
            if other not in identities:
                raise ScenarioError(f"node {node.name}: unknown acquaintance {other!r}", node.line)

    tracks = {}
    for name, (lineno, body) in track_lines.items():
        if name not in nodes:
            raise ScenarioError(f"track for undeclared node {name!r}", lineno)
        tracks[name] = _parse_track(name, lineno, body)
    for name, node in nodes.items():
        if name not in tracks:
            raise ScenarioError(f"node {name} has no [track {name}] waypoints", node.line)

    schedule, until = _parse_schedule(schedule_lines, nodes)
    return Scenario(config, channel, identities, nodes, tracks, schedule, until, source)


def _pairs(lines: List[Tuple[int, str]]) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for lineno, line in lines:
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ScenarioError(f"expected 'key = value', got {line!r}", lineno)
        if key.strip() in pairs:
            raise ScenarioError(f"duplicate key {key.strip()!r}", lineno)
        pairs[key.strip()] = value.strip()
    return pairs


def _wrap_config(build, lines: List[Tuple[int, str]]):
    try:
        return build()
    except ConfigError as exc:
        message = str(exc)
        lineno = next((n for n, line in lines if line.split("=", 1)[0].strip() in message), None)
        if lineno is None and lines:
            lineno = lines[0][0]
        raise ScenarioError(message, lineno) from exc


def _parse_decl(kind: str, name: str, lineno: int, body: List[Tuple[int, str]]) -> IdentityDecl:
    values = _pairs(body)
    allowed = _NODE_KEYS if kind == "node" else _IDENTITY_KEYS
    for key in values:
        if key not in allowed:
            line = next(n for n, text in body if text.split("=", 1)[0].strip() == key)
            raise ScenarioError(f"unknown {kind} key {key!r}", line)
    if kind == "identity":
        return IdentityDecl(name, lineno, values)

    decl = NodeDecl(name, lineno, values)
    names = values.get("acquaintances", "")
    decl.acquaintances = [n.strip() for n in names.split(",") if n.strip()]
    try:
        decl.battery = float(values.get("battery", "100"))
    except ValueError:
        raise ScenarioError(f"node {name}: battery must be a number", lineno)
    if not 0.0 <= decl.battery <= 100.0:
        raise ScenarioError(f"node {name}: battery must be within [0, 100]", lineno)
    forge = values.get("forge", "false").lower()
    if forge not in ("true", "false"):
        raise ScenarioError(f"node {name}: forge must be true or false", lineno)
    decl.forge = forge == "true"
    return decl


def _int_value(decl: IdentityDecl, key: str) -> Optional[int]:
    if key not in decl.values:
        return None
    try:
        value = int(decl.values[key])
    except ValueError:
        raise ScenarioError(f"{decl.name}: {key} must be an integer", decl.line)
    if not 0 <= value < 1 << 32:
        raise ScenarioError(f"{decl.name}: {key} must fit in 32 bits", decl.line)
    return value


def _build_identities(decls: Dict[str, IdentityDecl]) -> Dict[str, Identity]:
    identities: Dict[str, Identity] = {}
    owners: Dict[int, str] = {}
    for name, decl in decls.items():
        seed = _int_value(decl, "seed")
        if seed is None:
            seed = zlib.crc32(name.encode("utf-8"))
        identity = generate_identity(
            np.random.default_rng(seed), _int_value(decl, "real_id"), _int_value(decl, "key_uid")
        )
        if identity.real_id in owners:
            raise ScenarioError(
                f"{name} and {owners[identity.real_id]} share real_id {identity.real_id}", decl.line
            )
        owners[identity.real_id] = name
        identities[name] = identity
    return identities


def _parse_track(name: str, lineno: int, body: List[Tuple[int, str]]) -> MobilityTrack:
    waypoints = []
    for n, line in body:
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ScenarioError(f"waypoint needs 't x y [road_class]', got {line!r}", n)
        try:
            t, x, y = (float(p) for p in parts[:3])
        except ValueError:
            raise ScenarioError(f"waypoint values must be numbers: {line!r}", n)
        waypoints.append(Waypoint(t, x, y, parts[3] if len(parts) == 4 else "urban"))
    try:
        return MobilityTrack(waypoints)
    except SimulationError as exc:
        raise ScenarioError(f"track {name}: {exc}", lineno) from exc


def _parse_schedule(lines: List[Tuple[int, str]], nodes: Dict[str, NodeDecl]):
    schedule: List[Directive] = []
    until = None
    for lineno, line in lines:
        parts = line.split(None, 3)
        if parts[0] == "until":
            if len(parts) != 2:
                raise ScenarioError("expected 'until <t>'", lineno)
            until = _time(parts[1], lineno)
            continue
        if parts[0] not in VERBS:
            raise ScenarioError(f"unknown directive {parts[0]!r}", lineno)
        if len(parts) != 4:
            raise ScenarioError(f"expected '{parts[0]} <node> <t> <value>'", lineno)
        verb, node, at, value = parts
        if node not in nodes:
            raise ScenarioError(f"{verb} for undeclared node {node!r}", lineno)
        at_s = _time(at, lineno)
        if verb == "ignition" and value not in ("on", "off"):
            raise ScenarioError("ignition takes on or off", lineno)
        if verb == "gps" and value not in ("available", "lost"):
            raise ScenarioError("gps takes available or lost", lineno)
        if verb == "battery":
            try:
                float(value)
            except ValueError:
                raise ScenarioError("battery takes a percentage", lineno)
        schedule.append(Directive(verb, node, at_s, value, lineno))
    schedule.sort(key=lambda d: (d.at, d.line))
    return schedule, until


def _time(text: str, lineno: int) -> float:
    try:
        t = float(text)
    except ValueError:
        raise ScenarioError(f"bad time {text!r}", lineno)
    if t < 0:
        raise ScenarioError(f"time must be non-negative, got {text}", lineno)
    return t


def session_keys(config: SimConfig, seed: int) -> SessionKeys:
    """K1 from ``[config] k1`` when given, else derived from the run seed."""
    if config.k1:
        return SessionKeys(bytes.fromhex(config.k1))
    return SessionKeys.derive(seed)


def build_simulator(scenario: Scenario, seed: int = 0) -> Simulator:
    """Instantiate nodes and schedule every directive; nothing runs yet."""
    sim = Simulator(scenario.config, scenario.channel, seed)
    keys = session_keys(scenario.config, seed)
    for name, decl in scenario.nodes.items():
        spec = NodeSpec(
            name,
            scenario.identities[name],
            [scenario.identities[a].public for a in decl.acquaintances],
            battery=decl.battery,
            forge=decl.forge,
            track=scenario.tracks[name],
        )
        sim.add_node(
            NodeRuntime(
                spec,
                scenario.config,
                keys,
                SeededProvider(seed, stream=name),
                sim.rng(f"node:{name}"),
                sim.rng(f"zkp:{name}"),
            )
        )

    for d in scenario.schedule:
        try:
            if d.verb == "ignition":
                sim.ignition(d.node, d.value == "on", d.at)
            elif d.verb == "gps":
                sim.gps(d.node, d.value == "available", d.at)
            elif d.verb == "battery":
                sim.battery(d.node, float(d.value), d.at)
            else:
                sim.publicity(d.node, d.value, d.at)
        except SimulationError as exc:
            raise ScenarioError(str(exc), d.line) from exc
    logger.info(f"{scenario.source}: {len(scenario.nodes)} node(s), {len(scenario.schedule)} directive(s)")
    return sim


def run_scenario(scenario: Scenario, seed: int = 0, until: Optional[float] = None) -> Simulator:
    end = until if until is not None else scenario.until
    if end is None:
        raise ScenarioError("no end time: pass --until or add 'until <t>' to [schedule]")
    sim = build_simulator(scenario, seed)
    sim.run_until(end)
    return sim
