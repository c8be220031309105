"""Line-oriented simulation trace and its offline verifier.

One record per line::

    t=<s.mmm> kind=<kind> node=<id> key=value ...

Values never contain spaces or ``=``.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

logger = logging.getLogger(__name__)

KINDS = ("send", "recv", "drop", "dup", "timer", "ign", "gps", "state", "event")
TERMINAL_STATES = ("Done", "Aborted")


def format_time(t_ms: int) -> str:
    return f"{t_ms // 1000}.{t_ms % 1000:03d}"


def parse_time(text: str) -> int:
    seconds, _, millis = text.partition(".")
    if not seconds.isdigit() or len(millis) != 3 or not millis.isdigit():
        raise ValueError(f"bad trace time {text!r}")
    return int(seconds) * 1000 + int(millis)


@dataclass(frozen=True)
class TraceRecord:
    t_ms: int
    kind: str
    node: str
    fields: Tuple[Tuple[str, str], ...] = ()

    @property
    def t(self) -> float:
        return self.t_ms / 1000

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def render(self) -> str:
        parts = [f"t={format_time(self.t_ms)}", f"kind={self.kind}", f"node={self.node}"]
        parts += [f"{k}={v}" for k, v in self.fields]
        return " ".join(parts)

    @classmethod
    def parse(cls, line: str) -> "TraceRecord":
        pairs = []
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep or not key:
                raise ValueError(f"malformed trace token {token!r}")
            pairs.append((key, value))
        if len(pairs) < 3 or [k for k, _ in pairs[:3]] != ["t", "kind", "node"]:
            raise ValueError("a trace record starts with t=, kind= and node=")
        return cls(parse_time(pairs[0][1]), pairs[1][1], pairs[2][1], tuple(pairs[3:]))


class TraceWriter:
    """Collects records in emission order."""

    def __init__(self):
        self.records: List[TraceRecord] = []

    def emit(self, t_ms: int, kind: str, node: str, **fields) -> TraceRecord:
        if kind not in KINDS:
            raise ValueError(f"unknown trace kind {kind!r}")
        record = TraceRecord(t_ms, kind, node, tuple((k, _value(v)) for k, v in fields.items()))
        self.records.append(record)
        return record

    def __len__(self) -> int:
        return len(self.records)

    def lines(self) -> List[str]:
        return [r.render() for r in self.records]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path) -> None:
        Path(path).write_text(self.text(), encoding="ascii")


def _value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    text = str(v)
    if not text or any(ch.isspace() or ch == "=" for ch in text):
        raise ValueError(f"trace value must be a non-empty token: {text!r}")
    return text


def read_trace(path) -> List[TraceRecord]:
    return parse_lines(Path(path).read_text(encoding="ascii").splitlines())


def parse_lines(lines: Iterable[str]) -> List[TraceRecord]:
    return [TraceRecord.parse(line) for line in lines if line.strip()]


def verify_trace(records: List[TraceRecord], max_resends: int = 3) -> List[str]:
    """Re-check run invariants offline; returns violations, empty when clean.

    Checks: time never decreases; every recv/drop/dup of a datagram follows
    its send; a node has at most one unfinished session at a time; confirmed
    events carry at least ``need`` signatures; resend counts stay within the limit.
    """
    violations: List[str] = []
    sent: Dict[str, int] = {}
    active: Dict[str, Dict[str, str]] = {}
    last_t = 0

    for lineno, rec in enumerate(records, start=1):
        where = f"line {lineno}"
        if rec.t_ms < last_t:
            violations.append(f"{where}: time goes backward ({format_time(rec.t_ms)})")
        last_t = max(last_t, rec.t_ms)

        if rec.kind == "send" and rec.get("dg"):
            sent[rec.get("dg")] = rec.t_ms
        elif rec.kind in ("recv", "drop", "dup") and rec.get("dg"):
            dg = rec.get("dg")
            if dg not in sent:
                violations.append(f"{where}: datagram {dg} handled at {rec.node} before it was sent")
            elif sent[dg] > rec.t_ms:
                violations.append(f"{where}: datagram {dg} delivered before its send time")
        elif rec.kind == "state" and rec.get("sess"):
            sessions = active.setdefault(rec.node, {})
            sess, state = rec.get("sess"), rec.get("state")
            if state in TERMINAL_STATES:
                sessions.pop(sess, None)
            else:
                sessions[sess] = state
                if len(sessions) > 1:
                    violations.append(
                        f"{where}: node {rec.node} has {len(sessions)} active sessions "
                        f"({', '.join(sorted(sessions))})"
                    )
        elif rec.kind == "state" and rec.get("state") == "off":
            active.pop(rec.node, None)
        elif rec.kind == "event" and rec.get("op") == "confirm":
            need = int(rec.get("need", "1"))
            if int(rec.get("sigs", "0")) < need:
                violations.append(f"{where}: confirmed event with {rec.get('sigs')} of {need} signatures")
        elif rec.kind == "timer" and rec.get("action") == "resend":
            if int(rec.get("count", "0")) > max_resends:
                violations.append(f"{where}: resend count {rec.get('count')} exceeds {max_resends}")

    for line in violations:
        logger.warning(f"trace violation: {line}")
    return violations


def replay_events(records: List[TraceRecord], node: str, at: float):
    """Rebuild a node's event tables at time ``at`` from its event records.

    Returns ``(rows, parked)`` where rows are ``(table, line)`` pairs.
    """
    at_ms = int(round(at * 1000))
    tables: Dict[Tuple[str, str, str, str, str, str], Tuple[str, str]] = {}
    parked = None
    for rec in records:
        if rec.t_ms > at_ms:
            break
        if rec.node != node or rec.kind != "event":
            continue
        op = rec.get("op")
        if op == "park":
            parked = (rec.get("x"), rec.get("y"))
            continue
        key = (rec.get("table"),) + tuple(rec.get(k) for k in ("ev", "x", "y", "det", "exp"))
        if op in ("insert", "confirm"):
            if op == "confirm":
                for other in [k for k in tables if k[0] == "possible" and k[1:] == key[1:]]:
                    del tables[other]
            line = (
                f"kind={rec.get('ev')} x={rec.get('x')} y={rec.get('y')} det={rec.get('det')} "
                f"exp={rec.get('exp')} sigs={rec.get('sigs')} sub={rec.get('sub')}"
            )
            tables[key] = (rec.get("table"), line)
        elif op in ("remove", "expire", "reject"):
            tables.pop(key, None)
    rows = sorted(tables.values())
    return rows, parked


def nodes_in(records: Iterable[TraceRecord]) -> List[str]:
    return sorted({r.node for r in records})


def end_time(records: List[TraceRecord]) -> float:
    return records[-1].t if records else 0.0
