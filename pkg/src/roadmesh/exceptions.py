"""Error hierarchy shared by every roadmesh module."""

from typing import Optional


class RoadmeshError(Exception):
    """Base class for all roadmesh errors."""


# wire codec

class WireError(RoadmeshError, ValueError):
    """A frame could not be serialized or parsed."""


class InvalidField(WireError):
    pass


class MissingTerminator(WireError):
    pass


class UnknownHeader(WireError):
    pass


class FieldCountMismatch(WireError):
    pass


class BadHex(WireError):
    pass


class BadTimestamp(WireError):
    pass


class NonAscii(WireError):
    pass


# identity material and graphs

class CryptoError(RoadmeshError):
    pass


class DecryptFailure(CryptoError):
    """Ciphertext did not authenticate under the given key."""


class InvalidKey(CryptoError, ValueError):
    """A 15-bit public key does not encode a single Hamiltonian 6-cycle."""


class GraphError(RoadmeshError, ValueError):
    pass


class NotSymmetric(GraphError):
    pass


class InvalidPermutation(GraphError):
    pass


class ZkpError(RoadmeshError):
    pass


class VariantMismatch(ZkpError):
    """The response variant does not answer the challenge bit."""


# protocol

class AuthError(RoadmeshError):
    pass


class HashMismatch(AuthError):
    pass


class NoCommonAcquaintance(AuthError):
    pass


class ZkpCheckFailed(AuthError):
    pass


class EventError(RoadmeshError):
    pass


class NoGpsFix(EventError):
    pass


class AggregationError(RoadmeshError):
    pass


class SenderNotAuthenticated(AggregationError):
    pass


class SignatureReverifyFailed(AggregationError):
    pass


# simulation and inputs

class SimulationError(RoadmeshError):
    pass


class SchedulingInPast(SimulationError):
    pass


class NonAlternatingEdge(SimulationError):
    pass


class ConfigError(RoadmeshError, ValueError):
    pass


class ScenarioError(RoadmeshError):
    """Scenario validation failure, optionally tied to a source line."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class QueryError(RoadmeshError):
    pass


class UnknownNode(QueryError):
    pass


class TimeOutOfRange(QueryError):
    pass
