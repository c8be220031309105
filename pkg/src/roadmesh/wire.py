"""Bit-exact codec for the comma-separated, '*'-terminated frame grammar.

Grammar::

    frame  := header "," pseu rest "*"
    beacon := "," date "," hex
    change := "," date ",00," pseu "," hex
    info   := "," hex

All binary payloads travel as lowercase hex so ',' and '*' never occur inside
a field. Serialization is canonical: ``serialize(parse(b)) == b`` for every
accepted ``b``.
"""

import re
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Optional, Union

from .exceptions import (
    BadHex,
    BadTimestamp,
    FieldCountMismatch,
    InvalidField,
    MissingTerminator,
    NonAscii,
    UnknownHeader,
)

TERMINATOR = "*"
SEPARATOR = ","
CHANGE_MARKER = "00"
DATE_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

_PSEU_RE = re.compile(r"^[0-9a-f]{8}$")
_HEX_RE = re.compile(r"^(?:[0-9a-f]{2})+$")
_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$")


class FrameCode(str, Enum):
    """The 18 message headers."""

    BEACON = "01"
    D1 = "D1"
    D2 = "D2"
    D3 = "D3"
    D4 = "D4"
    D5 = "D5"
    Z2 = "Z2"
    Z3 = "Z3"
    Z4 = "Z4"
    E1 = "E1"
    E2 = "E2"
    E3 = "E3"
    E4 = "E4"
    E5 = "E5"
    E6 = "E6"
    T1 = "T1"
    P1 = "P1"
    P2 = "P2"

    @property
    def is_auth(self) -> bool:
        return self.value[0] in "DZE"


@dataclass(frozen=True)
class BeaconBody:
    date: datetime
    cta: bytes


@dataclass(frozen=True)
class ChangePseuBody:
    """Pseudonym change notice; the literal ``00`` marker is implied."""

    date: datetime
    new_pseu: str
    cta2: bytes


@dataclass(frozen=True)
class InfoBody:
    info: bytes


Body = Union[BeaconBody, ChangePseuBody, InfoBody]


@dataclass(frozen=True)
class Frame:
    code: FrameCode
    pseu: str
    body: Body

    @property
    def info(self) -> bytes:
        """Payload of an info frame (D/Z/E/T1/P1/P2)."""
        if not isinstance(self.body, InfoBody):
            raise InvalidField(f"{self.code.value} frame has no INFO field")
        return self.body.info


@dataclass(frozen=True)
class Outbound:
    """A frame ready to leave a node; ``to`` is None for broadcast."""

    frame: Frame
    to: Optional[str] = None


def info_frame(code: FrameCode, pseu: str, info: bytes) -> Frame:
    return Frame(code, pseu, InfoBody(info))


def format_date(date: datetime) -> str:
    if date.tzinfo is None or date.utcoffset() != timezone.utc.utcoffset(date):
        raise InvalidField(f"timestamp must be UTC: {date!r}")
    if date.microsecond:
        raise InvalidField(f"timestamp must have whole seconds: {date!r}")
    return date.strftime(DATE_FORMAT)


def serialize(frame: Frame) -> bytes:
    """Encode a frame to its canonical ASCII form."""
    code = frame.code
    if not isinstance(code, FrameCode):
        raise InvalidField(f"unknown frame code: {code!r}")
    _check_pseu(frame.pseu, "PSEU")
    fields = [code.value, frame.pseu]
    body = frame.body

    if code is FrameCode.BEACON:
        if isinstance(body, BeaconBody):
            fields += [format_date(body.date), _hex(body.cta, "CTA")]
        elif isinstance(body, ChangePseuBody):
            _check_pseu(body.new_pseu, "NEWPSEU")
            fields += [
                format_date(body.date),
                CHANGE_MARKER,
                body.new_pseu,
                _hex(body.cta2, "CTA2"),
            ]
        else:
            raise InvalidField("header 01 requires a beacon or change body")
    else:
        if not isinstance(body, InfoBody):
            raise InvalidField(f"header {code.value} requires an INFO body")
        fields.append(_hex(body.info, "INFO"))

    return (SEPARATOR.join(fields) + TERMINATOR).encode("ascii")


def parse(data: bytes) -> Frame:
    """Decode one datagram; every non-conforming input raises a WireError."""
    if not isinstance(data, (bytes, bytearray)):
        raise NonAscii("datagram must be bytes")
    if any(byte < 0x20 or byte > 0x7E for byte in data):
        raise NonAscii("datagram contains non-printable or non-ASCII bytes")
    text = bytes(data).decode("ascii")
    if not text.endswith(TERMINATOR):
        raise MissingTerminator("frame does not end with '*'")

    fields = text[:-1].split(SEPARATOR)
    header = fields[0]
    try:
        code = FrameCode(header)
    except ValueError:
        raise UnknownHeader(f"unknown header {header!r}")
    if len(fields) < 2:
        raise FieldCountMismatch(f"{header} frame lacks PSEU")
    pseu = fields[1]
    _check_pseu(pseu, "PSEU")

    if code is FrameCode.BEACON:
        if len(fields) == 4:
            body: Body = BeaconBody(_parse_date(fields[2]), _unhex(fields[3]))
        elif len(fields) == 6:
            if fields[3] != CHANGE_MARKER:
                raise InvalidField(f"change marker must be '00', got {fields[3]!r}")
            _check_pseu(fields[4], "NEWPSEU")
            body = ChangePseuBody(_parse_date(fields[2]), fields[4], _unhex(fields[5]))
        else:
            raise FieldCountMismatch(f"header 01 takes 4 or 6 fields, got {len(fields)}")
    else:
        if len(fields) != 3:
            raise FieldCountMismatch(f"header {header} takes 3 fields, got {len(fields)}")
        body = InfoBody(_unhex(fields[2]))

    return Frame(code, pseu, body)


def _check_pseu(value: str, name: str) -> None:
    if not isinstance(value, str) or not _PSEU_RE.match(value):
        raise InvalidField(f"{name} must be 8 lowercase hex chars, got {value!r}")


def _hex(value: bytes, name: str) -> str:
    if not isinstance(value, (bytes, bytearray)) or not value:
        raise InvalidField(f"{name} must be non-empty bytes")
    return bytes(value).hex()


def _unhex(text: str) -> bytes:
    if not _HEX_RE.match(text):
        raise BadHex(f"not canonical hex: {text!r}")
    return bytes.fromhex(text)


def _parse_date(text: str) -> datetime:
    if not _DATE_RE.match(text):
        raise BadTimestamp(f"bad timestamp {text!r}")
    try:
        date = datetime.strptime(text, DATE_FORMAT).replace(tzinfo=timezone.utc)
    except ValueError:
        raise BadTimestamp(f"bad timestamp {text!r}")
    if date.strftime(DATE_FORMAT) != text:
        raise BadTimestamp(f"non-canonical timestamp {text!r}")
    return date
