"""Traffic events: detection, the event table, expiry and queries.

Times are simulated seconds, quantized to whole milliseconds so that an
event decoded from the wire compares equal to the one that was encoded.
Positions are planar meters.
"""

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import FrozenSet, Iterator, List, Optional, Sequence, Tuple

from .config import SimConfig
from .exceptions import EventError, NoGpsFix
from .wire import FrameCode, Outbound, info_frame

logger = logging.getLogger(__name__)

Position = Tuple[float, float]
Signature = Tuple[int, bytes]

_PLACED = struct.Struct(">ddQQ")
_RECORD = struct.Struct(">BddQQ")


class EventKind(str, Enum):
    JAM = "jam"
    FREE_PARKING = "parking"
    PUBLICITY = "publicity"


_KIND_CODES = {EventKind.JAM: 1, EventKind.FREE_PARKING: 2, EventKind.PUBLICITY: 3}


def to_ms(t: float) -> int:
    return int(round(t * 1000))


def quantize(t: float) -> float:
    return to_ms(t) / 1000


def distance(a: Position, b: Position) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


@dataclass(frozen=True)
class TrafficEvent:
    kind: EventKind
    position: Position
    detected_at: float
    expires_at: float
    origin_pseu: str
    signatures: FrozenSet[Signature] = frozenset()
    subtype: Optional[str] = None
    content: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        object.__setattr__(self, "detected_at", quantize(self.detected_at))
        object.__setattr__(self, "expires_at", quantize(self.expires_at))
        object.__setattr__(self, "signatures", frozenset(self.signatures))
        if self.expires_at <= self.detected_at:
            raise EventError("an event must expire after it is detected")

    @property
    def key(self) -> Tuple[EventKind, float, float, int, int]:
        """Identity of the exact record, shared by every node that holds it."""
        return (
            self.kind,
            self.position[0],
            self.position[1],
            to_ms(self.detected_at),
            to_ms(self.expires_at),
        )

    def record_bytes(self) -> bytes:
        """Canonical bytes that jam signatures cover."""
        return _RECORD.pack(
            _KIND_CODES[self.kind],
            self.position[0],
            self.position[1],
            to_ms(self.detected_at),
            to_ms(self.expires_at),
        )

    def signers(self) -> FrozenSet[int]:
        return frozenset(real_id for real_id, _ in self.signatures)

    def is_live(self, now: float) -> bool:
        return now < self.expires_at

    def overlaps(self, other: "TrafficEvent") -> bool:
        return self.detected_at < other.expires_at and other.detected_at < self.expires_at

    def same_as(self, other: "TrafficEvent", radius: float) -> bool:
        """Duplicate test: same kind, within ``radius`` meters, overlapping validity."""
        return (
            self.kind is other.kind
            and distance(self.position, other.position) <= radius
            and self.overlaps(other)
        )

    def describe(self) -> str:
        """One row of the event-table dump."""
        return (
            f"kind={self.kind.value} x={self.position[0]:.1f} y={self.position[1]:.1f} "
            f"det={self.detected_at:.3f} exp={self.expires_at:.3f} "
            f"sigs={len(self.signatures)} sub={self.subtype or '-'}"
        )


class InsertOutcome(str, Enum):
    ADDED = "added"
    REPLACED = "replaced"
    DUPLICATE = "duplicate"


@dataclass(frozen=True)
class EventTable:
    """Immutable table of live events; every update returns a new table."""

    events: Tuple[TrafficEvent, ...] = ()
    dedup_radius: float = 5.0

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TrafficEvent]:
        return iter(self.events)

    def find_duplicate(self, event: TrafficEvent) -> Optional[TrafficEvent]:
        for existing in self.events:
            if existing.same_as(event, self.dedup_radius):
                return existing
        return None

    def insert(self, event: TrafficEvent) -> Tuple["EventTable", InsertOutcome]:
        """Insert with deduplication; of two duplicates the newer record is kept."""
        existing = self.find_duplicate(event)
        if existing is None:
            return replace(self, events=self.events + (event,)), InsertOutcome.ADDED
        if existing.key == event.key:
            if existing.signatures >= event.signatures:
                return self, InsertOutcome.DUPLICATE
            event = replace(existing, signatures=existing.signatures | event.signatures)
        elif event.detected_at <= existing.detected_at:
            return self, InsertOutcome.DUPLICATE
        kept = tuple(event if e is existing else e for e in self.events)
        return replace(self, events=kept), InsertOutcome.REPLACED

    def remove(self, key) -> "EventTable":
        return replace(self, events=tuple(e for e in self.events if e.key != key))

    def expire(self, now: float) -> Tuple["EventTable", List[TrafficEvent]]:
        """Drop every event with ``expires_at <= now``."""
        expired = [e for e in self.events if not e.is_live(now)]
        if not expired:
            return self, []
        for event in expired:
            logger.debug(f"expired {event.kind.value} event at {event.position}")
        live = tuple(e for e in self.events if e.is_live(now))
        return replace(self, events=live), expired

    def live(self, now: float) -> List[TrafficEvent]:
        return [e for e in self.events if e.is_live(now)]

    def next_expiry(self) -> Optional[float]:
        return min((e.expires_at for e in self.events), default=None)

    def query_parking(self, now: float, origin: Position = (0.0, 0.0)) -> List[TrafficEvent]:
        """Live free-parking events, nearest first."""
        spots = [e for e in self.live(now) if e.kind is EventKind.FREE_PARKING]
        return sorted(spots, key=lambda e: (distance(origin, e.position), e.detected_at))


@dataclass(frozen=True)
class ParkedLocation:
    position: Position
    stored_at: float


class ParkedStore:
    """Holds where this vehicle was last parked."""

    def __init__(self):
        self.location: Optional[ParkedLocation] = None

    def find_parked(self) -> Optional[Position]:
        return self.location.position if self.location else None


@dataclass(frozen=True)
class SpeedSample:
    speed: float
    road_class: str
    heading: float
    at: float

    def __post_init__(self):
        if self.speed < 0:
            raise EventError(f"speed must be non-negative, got {self.speed}")


class JamVerdict(str, Enum):
    JAM = "jam"
    CLEAR = "clear"
    INSUFFICIENT_SAMPLES = "insufficient"


def assess_jam(samples: Sequence[SpeedSample], cfg: SimConfig) -> JamVerdict:
    """Judge the trailing ``jam_window`` seconds of time-ordered samples.

    The window counts as covered when the samples span at least
    ``jam_window`` seconds; heading is carried but not used.
    """
    if not samples:
        return JamVerdict.INSUFFICIENT_SAMPLES
    end = samples[-1].at
    if end - samples[0].at < cfg.jam_window:
        return JamVerdict.INSUFFICIENT_SAMPLES
    window = [s for s in samples if s.at >= end - cfg.jam_window]
    slow = all(s.speed < cfg.jam_fraction * cfg.expected_speed(s.road_class) for s in window)
    return JamVerdict.JAM if slow else JamVerdict.CLEAR


def detect_jam(samples: Sequence[SpeedSample], cfg: SimConfig) -> bool:
    return assess_jam(samples, cfg) is JamVerdict.JAM


@dataclass
class IgnitionOutcome:
    table: EventTable
    event: Optional[TrafficEvent] = None
    outgoing: List[Outbound] = field(default_factory=list)


def on_ignition_on(
    gps_available: bool,
    position: Optional[Position],
    now: float,
    cfg: SimConfig,
    table: EventTable,
    pseu: str,
    has_peers: bool,
) -> IgnitionOutcome:
    """Leaving a spot frees it: record it and tell the authenticated peers."""
    if not gps_available or position is None:
        logger.debug("ignition on without GPS fix; no parking event")
        return IgnitionOutcome(table)
    event = TrafficEvent(
        EventKind.FREE_PARKING, position, now, now + cfg.parking_validity, pseu
    )
    table, _ = table.insert(event)
    outgoing = []
    if has_peers:
        outgoing.append(Outbound(info_frame(FrameCode.P2, pseu, encode_placed(event))))
    return IgnitionOutcome(table, event, outgoing)


def on_ignition_off(position: Optional[Position], now: float, store: ParkedStore) -> ParkedLocation:
    if position is None:
        logger.warning("vehicle turned off without a GPS fix; keeping previous parked location")
        raise NoGpsFix("no GPS fix at ignition off")
    store.location = ParkedLocation((float(position[0]), float(position[1])), now)
    return store.location


def make_publicity(
    position: Position, now: float, text: str, pseu: str, cfg: SimConfig
) -> TrafficEvent:
    return TrafficEvent(
        EventKind.PUBLICITY,
        position,
        now,
        now + cfg.publicity_validity,
        pseu,
        content=text.encode("utf-8"),
    )


# P1 / P2 payloads

def encode_placed(event: TrafficEvent) -> bytes:
    head = _PLACED.pack(
        event.position[0], event.position[1], to_ms(event.detected_at), to_ms(event.expires_at)
    )
    return head + event.content


def decode_placed(code: FrameCode, info: bytes, origin_pseu: str) -> TrafficEvent:
    if code not in (FrameCode.P1, FrameCode.P2):
        raise EventError(f"{code.value} does not carry a placed event")
    if len(info) < _PLACED.size:
        raise EventError(f"{code.value} payload too short")
    x, y, det_ms, exp_ms = _PLACED.unpack(info[: _PLACED.size])
    content = info[_PLACED.size :]
    if code is FrameCode.P2 and content:
        raise EventError("P2 payload carries trailing bytes")
    if not (math.isfinite(x) and math.isfinite(y)):
        raise EventError("event position is not finite")
    kind = EventKind.PUBLICITY if code is FrameCode.P1 else EventKind.FREE_PARKING
    return TrafficEvent(kind, (x, y), det_ms / 1000, exp_ms / 1000, origin_pseu, content=content)


def placed_code(event: TrafficEvent) -> FrameCode:
    return FrameCode.P1 if event.kind is EventKind.PUBLICITY else FrameCode.P2
